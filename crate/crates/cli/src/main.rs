use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drivesim::harness::{
    diagnose, evaluate, generate_with, gradcheck, simulate, train_with, zero_policy_gap, Checkpoint,
    GeneratorOptions, IterationLog, ScenarioKind, TrainConfig, Trainer,
};
use drivesim::policy::Policy;
use drivesim::world::Dataset;

#[derive(Parser)]
#[command(name = "drivesim", version, about = "Differentiable driving simulator and trainer")]
struct Cli {
    /// Root seed for every random stream in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Training configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log level filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenarios.
    Gen(GenArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Metrics of a checkpoint over a dataset.
    Eval(EvalArgs),
    /// Dump rollouts for plotting.
    Simulate(SimulateArgs),
    /// Finite-difference checks of every analytic derivative.
    Gradcheck(GradcheckArgs),
    /// Cross-step gradient norm report.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file written by `gen`.
    #[arg(long, conflicts_with = "kind")]
    data: Option<PathBuf>,
    /// Generate scenarios of this kind on the fly instead.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    pedestrians: Option<usize>,
    /// Seed of generated scenarios; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Dataset> {
        match (&self.data, &self.kind) {
            (Some(path), _) => Dataset::load(path).with_context(|| format!("reading {}", path.display())),
            (None, Some(kind)) => {
                let opts = GeneratorOptions {
                    vehicles: self.vehicles,
                    pedestrians: self.pedestrians,
                    ..GeneratorOptions::default()
                };
                Ok(generate_with(kind.parse()?, self.count, self.data_seed.unwrap_or(seed), &opts)?)
            }
            (None, None) => bail!("either --data or --kind is required"),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    pedestrians: Option<usize>,
    #[arg(long, default_value_t = 40)]
    horizon: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Objective weights as `cl,ol,rl`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    omega: Option<Vec<f64>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Held-out dataset for periodic validation.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for checkpoints and logs.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Policy checkpoint; a freshly initialized policy when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// JSON dump path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Box pairs in the geometry check.
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    /// Parameter coordinates probed in the rollout check.
    #[arg(long, default_value_t = 40)]
    coords: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    #[arg(long, default_value_t = 20)]
    rollouts: usize,
    /// Growth-curve CSV path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn config(cli: &Cli, o: Option<&Overrides>) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    if let Some(o) = o {
        if let Some(v) = o.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = o.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = o.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = &o.omega {
            cfg.omega = [v[0], v[1], v[2]];
        }
        if let Some(v) = o.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = o.workers {
            cfg.workers = v;
        }
        if let Some(v) = o.rollouts {
            cfg.eval_rollouts = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_policy(path: &Path) -> Result<Policy> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ckpt.to_policy()?)
}

fn policy_or_fresh(path: Option<&Path>, cfg: &TrainConfig) -> Result<Policy> {
    match path {
        Some(p) => load_policy(p),
        None => Ok(Trainer::new(cfg.clone())?.policy),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen(a) => {
            let kind: ScenarioKind = a.kind.parse()?;
            let opts = GeneratorOptions {
                vehicles: a.vehicles,
                pedestrians: a.pedestrians,
                horizon: a.horizon,
                ..GeneratorOptions::default()
            };
            let ds = generate_with(kind, a.count, cli.seed, &opts)?;
            ds.save(&a.out)?;
            log::info!("wrote {} {kind} scenarios to {}", ds.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = config(&cli, Some(&a.overrides))?;
            let data = a.data.load(cli.seed)?;
            let val = a.validation.as_ref().map(Dataset::load).transpose()?;
            fs::create_dir_all(&a.out)?;
            let log_path = a.out.join("train_log.csv");
            let mut log = fs::File::create(&log_path)?;
            writeln!(log, "{}", IterationLog::csv_header())?;
            let mut write_err = None;
            let outcome = train_with(&cfg, &data, val.as_ref(), |entry| {
                if let Err(e) = writeln!(log, "{}", entry.csv_row()) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing training log");
            }
            outcome.last.save(a.out.join("last.ckpt"))?;
            outcome.best.save(a.out.join("best.ckpt"))?;
            fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
            for v in &outcome.validations {
                fs::write(a.out.join(format!("validation_{:06}.csv", v.iteration)), v.report.to_csv())?;
            }
            println!("last checkpoint sha256 {}", outcome.last.hash()?);
        }
        Command::Eval(a) => {
            let cfg = config(&cli, Some(&a.overrides))?;
            let policy = load_policy(&a.checkpoint)?;
            let data = a.data.load(cli.seed)?;
            let report = evaluate(&policy, &data, &cfg.rollout_options(), cfg.eval_rollouts, cli.seed)?;
            emit(a.out.as_deref(), &report.to_csv())?;
        }
        Command::Simulate(a) => {
            let cfg = config(&cli, Some(&a.overrides))?;
            let policy = policy_or_fresh(a.checkpoint.as_deref(), &cfg)?;
            let data = a.data.load(cli.seed)?;
            let dump = simulate(&policy, &data, &cfg.rollout_options(), cfg.eval_rollouts, cli.seed)?;
            emit(a.out.as_deref(), &(dump.to_json()? + "\n"))?;
        }
        Command::Gradcheck(a) => {
            let mut results = gradcheck::check_ops(cli.seed)?;
            results.extend(gradcheck::check_kinematics(cli.seed)?);
            results.push(gradcheck::check_geometry(cli.seed, a.pairs)?);
            results.extend(gradcheck::check_rollout(cli.seed, a.coords)?);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
        Command::Diagnose(a) => {
            let mut cfg = config(&cli, None)?;
            cfg.horizon = a.horizon;
            let policy = policy_or_fresh(a.checkpoint.as_deref(), &cfg)?;
            let data = a.data.load(cli.seed)?;
            let opts = cfg.rollout_options();
            let d = diagnose(&policy, &data, &opts, a.rollouts, cli.seed)?;
            let gap = zero_policy_gap(&policy, &data, &opts, a.rollouts.min(5), cli.seed)?;
            eprintln!(
                "rollouts {} horizon {}: worst norm/bound {:.6}, bound {}, growth {}, zero-policy gap {gap:.3e}",
                d.rollouts,
                d.horizon,
                d.worst_bound_ratio,
                if d.bound_holds() { "holds" } else { "VIOLATED" },
                if d.monotone() { "monotone" } else { "not monotone" },
            );
            emit(a.out.as_deref(), &d.to_csv())?;
            return Ok(d.bound_holds());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
