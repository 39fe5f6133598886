use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clipmean::bench::{
    emit_results_csv, parse_epsilon_grid, run_benchmark, write_results_csv, BenchConfig, ProfileSource,
    SampleDistribution, Schedule,
};
use clipmean::data::{load_dataset, sample_projected_gaussian, sample_uniform, write_dataset};
use clipmean::mechanisms::{run_mechanism, AkmvConfig, SpecUsed, DEFAULT_QUANTILE_GRID_STEPS};
use clipmean::verify::{run_verification, VerifyConfig};
use clipmean::{
    optimal_clipspec, worst_case_error, ClipSpec, ContributionProfile, Error, Interval, MechanismKind, PrivacyBudget,
    Result,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "clipmean", version, about = "User-level DP sample means with worst-case-optimal clipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a contribution profile or a synthetic dataset
    #[command(subcommand)]
    Gen(GenCommand),
    /// Emit the worst-case-optimal clipping plan for a profile
    Optimize(OptimizeArgs),
    /// Worst-case error report for a given clip spec
    WorstCase(WorstCaseArgs),
    /// One private release of a dataset's sample mean, with audit record
    Estimate(EstimateArgs),
    /// Monte Carlo comparison of the mechanisms
    Bench(BenchArgs),
    /// Check every closed form against its brute-force oracle
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
struct ProfileArgs {
    /// geometric:M, extreme:L:MSTAR, counts:M1,M2,… or file:PATH
    #[arg(long)]
    profile: ProfileSource,
    /// Upper bound on each sample's ℓ1 norm
    #[arg(long = "U", default_value_t = 1.0)]
    upper: f64,
    /// Sample dimension
    #[arg(long, default_value_t = 1)]
    d: usize,
}

impl ProfileArgs {
    fn resolve(&self) -> Result<ContributionProfile> {
        self.profile.resolve(self.upper, self.d)
    }
}

#[derive(Subcommand, Debug)]
enum GenCommand {
    /// Write a profile as JSON
    Profile {
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a scalar dataset as CSV
    Dataset {
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long, default_value = "uniform")]
        distribution: SampleDistribution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WorstCaseArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, allow_hyphen_values = true)]
    eps: f64,
    /// Clip spec JSON ({"per_user": …} or {"per_sample": …})
    #[arg(long, conflicts_with = "interval", required_unless_present = "interval")]
    spec: Option<PathBuf>,
    /// One interval `a,b` applied to every sample
    #[arg(long)]
    interval: Option<String>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Dataset CSV (`user_id,dim_0,…`)
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "U")]
    upper: f64,
    #[arg(long, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long, default_value = "opt-wc")]
    mechanism: MechanismKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_QUANTILE_GRID_STEPS)]
    grid_steps: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Config JSON; replaces the sweep flags below
    #[arg(long, conflicts_with_all = ["profile", "distribution", "eps", "trials", "seed", "mechanisms"])]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<ProfileSource>,
    #[arg(long = "U", default_value_t = 65.0)]
    upper: f64,
    /// uniform or projected-gaussian [default: uniform]
    #[arg(long)]
    distribution: Option<SampleDistribution>,
    /// `0.2,0.5,1,2` or `start:stop:step`
    #[arg(long, allow_hyphen_values = true)]
    eps: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of laplace, opt-wc, akmv
    #[arg(long, value_delimiter = ',')]
    mechanisms: Option<Vec<MechanismKind>>,
    #[arg(long, default_value_t = DEFAULT_QUANTILE_GRID_STEPS)]
    grid_steps: usize,
    /// Results CSV path (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run trials on one thread
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.into(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|source| Error::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn parse_interval(s: &str) -> Result<Interval> {
    let bad = || Error::InvalidArgument(format!("bad interval {s:?}; expected a,b"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok(Interval::new(
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn gen(cmd: GenCommand) -> Result<()> {
    match cmd {
        GenCommand::Profile { profile, out } => {
            let p = profile.resolve()?;
            write_output(out.as_deref(), &pretty(&p))
        }
        GenCommand::Dataset {
            profile,
            distribution,
            seed,
            out,
        } => {
            let p = profile.resolve()?;
            let ds = match distribution {
                SampleDistribution::Uniform => sample_uniform(&p, seed)?,
                SampleDistribution::ProjectedGaussian => sample_projected_gaussian(&p, seed)?,
            };
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).expect("in-memory write");
            write_output(out.as_deref(), &String::from_utf8(buf).expect("utf-8 csv"))
        }
    }
}

fn optimize(args: OptimizeArgs) -> Result<()> {
    let profile = args.profile.resolve()?;
    let plan = optimal_clipspec(&profile, args.eps)?;
    write_output(args.out.as_deref(), &pretty(&plan.to_file()))
}

fn worst_case(args: WorstCaseArgs) -> Result<()> {
    let profile = args.profile.resolve()?;
    let spec = match (&args.spec, &args.interval) {
        (Some(path), _) => ClipSpec::load_json(path, &profile)?,
        (None, Some(iv)) => {
            let iv = parse_interval(iv)?;
            ClipSpec::uniform(&profile, iv.a, iv.b)
        }
        (None, None) => unreachable!("clap requires --spec or --interval"),
    };
    let report = worst_case_error(&spec, &profile, args.eps)?;
    write_output(None, &pretty(&report))
}

fn spec_json(spec: &SpecUsed) -> Value {
    match spec {
        SpecUsed::Clip(s) => serde_json::to_value(s.to_file()).expect("serializable spec"),
        SpecUsed::Threshold(t) => json!({ "threshold": t }),
    }
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let ds = load_dataset(&args.data, args.upper)?;
    let budget = PrivacyBudget::new(args.eps)?;
    let akmv = AkmvConfig {
        grid_steps: args.grid_steps,
        range_hi: None,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let out = run_mechanism(args.mechanism, &ds, budget, akmv, &mut rng)?.with_seed(args.seed);
    let doc = json!({
        "estimate": out.estimate,
        "pre_noise": out.pre_noise,
        "noise": out.noise.values,
        "spec_used": spec_json(&out.spec_used),
        "audit": out.audit,
    });
    write_output(None, &pretty(&doc))
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => BenchConfig::load_json(path)?,
        None => {
            let profile = args
                .profile
                .clone()
                .ok_or_else(|| Error::InvalidArgument("bench needs --profile or --config".into()))?;
            let mut c = BenchConfig::new(
                profile,
                args.distribution.unwrap_or(SampleDistribution::Uniform),
                args.upper,
            );
            if let Some(eps) = &args.eps {
                c.epsilons = parse_epsilon_grid(eps)?;
            }
            if let Some(t) = args.trials {
                c.trials = t;
            }
            if let Some(s) = args.seed {
                c.seed = s;
            }
            if let Some(m) = &args.mechanisms {
                c.mechanisms = m.clone();
            }
            c.quantile_grid_steps = args.grid_steps;
            c
        }
    };
    if args.out.is_some() {
        config.output = args.out.clone();
    }
    let schedule = if args.serial { Schedule::Serial } else { Schedule::Parallel };
    let result = run_benchmark(&config, schedule)?;

    match &config.output {
        Some(path) => emit_results_csv(&result.rows, path)?,
        None => {
            let mut buf = Vec::new();
            write_results_csv(&result.rows, &mut buf).expect("in-memory write");
            write_output(None, &String::from_utf8(buf).expect("utf-8 csv"))?;
        }
    }
    let ts: Vec<String> = result
        .t_epsilons
        .iter()
        .map(|(e, t)| format!("ε={e}: T_ε={t}"))
        .collect();
    eprintln!(
        "note: {}; T_ε is a step function of ε, so error curves can jump where it changes",
        ts.join(", ")
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let report = run_verification(&VerifyConfig {
        instances: args.instances,
        seed: args.seed,
        ..VerifyConfig::default()
    })?;
    write_output(None, &pretty(&report))?;
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(cmd) => gen(cmd)?,
        Command::Optimize(args) => optimize(args)?,
        Command::WorstCase(args) => worst_case(args)?,
        Command::Estimate(args) => estimate(args)?,
        Command::Bench(args) => bench(args)?,
        Command::Verify(args) => return verify(args),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "error": "verification failed", "kind": "verify" }));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
