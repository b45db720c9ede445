//! Experiment harness: configuration, presets, and the `nitsche` commands.

pub mod config;
pub mod output;
pub mod presets;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks;
use crate::metrics::ErrorReport;
use crate::network::NetworkConfig;
use crate::optimizer::{train_with, Checkpoint, CurveRow, OptimizerError, TrainingObserver};
use crate::problems::{registry_get, verify_problem, Problem, ProblemDefinition};
use crate::sampling::BatchSampler;

use config::RunConfig;
use output::{CurveWriter, FinalRow};

#[derive(Debug, Parser)]
#[command(name = "nitsche", version, about = "Deep Nitsche method for elliptic boundary-value problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write curve.csv, final.csv and checkpoints.
    Train(TrainArgs),
    /// Run the self-checks and print one PASS/FAIL line per invariant.
    Check(CheckArgs),
    /// Print a beta-vs-error table from run directories.
    Table {
        /// Directories containing final.csv.
        dirs: Vec<PathBuf>,
    },
    /// Print Halton sample points of a problem's geometry as CSV.
    Sample(SampleArgs),
    /// Print the parameter count of a network.
    ParamCount(ParamCountArgs),
    /// List the experiment presets, or print one as a config file.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file in `key = value` form.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Name of a preset (see `nitsche presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Flip the sign of every conormal derivative in the identity oracle.
    WrongConormalSign,
    /// Add one to mixed2d's source term before verification.
    WrongSource,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Also gradient-check the problem and beta of this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inject a known fault to confirm the checks catch it.
    #[arg(long, value_enum)]
    pub inject: Option<Fault>,
    /// Points per problem for verification.
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub n_interior: usize,
    #[arg(long, default_value_t = 4)]
    pub n_boundary: usize,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[arg(long, conflicts_with_all = ["dim", "width", "blocks"])]
    pub preset: Option<String>,
    #[arg(long, required_unless_present = "preset")]
    pub dim: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    pub width: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    pub blocks: Option<usize>,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Check(args) => cmd_check(args),
        Command::Table { dirs } => cmd_table(&dirs),
        Command::Sample(args) => cmd_sample(args),
        Command::ParamCount(args) => cmd_param_count(args),
        Command::Presets { show } => cmd_presets(show),
    }
}

fn lookup_preset(name: &str) -> Result<RunConfig> {
    presets::preset(name).with_context(|| format!("unknown preset {name:?}; see `nitsche presets`"))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => lookup_preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    let dir = match args.output {
        Some(dir) => dir,
        None => config.output_path(),
    };
    let summary = train_to_dir(&config, &dir, !args.quiet)?;
    println!(
        "{} beta={} e_L2={} e_H1={} ({:.1}s) -> {}",
        summary.problem,
        config.beta,
        output::sci(summary.errors.e_l2),
        output::sci(summary.errors.e_h1),
        summary.seconds,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Outcome of [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub problem: String,
    pub errors: ErrorReport,
    pub initial_errors: ErrorReport,
    pub seconds: f64,
    pub rows: Vec<CurveRow>,
    pub epoch_losses: Vec<f64>,
}

struct DirObserver<'a> {
    dir: &'a Path,
    curve: CurveWriter,
    progress: bool,
    started: Instant,
}

impl TrainingObserver for DirObserver<'_> {
    fn on_row(&mut self, row: &CurveRow) -> Result<(), OptimizerError> {
        self.curve
            .write(row)
            .map_err(|e| OptimizerError::Io(std::io::Error::other(e.to_string())))?;
        if self.progress {
            eprintln!(
                "epoch {:>6}  loss {:>12.5e}  e_L2 {}  e_H1 {}  [{:.0}s]",
                row.epoch,
                row.loss.total,
                output::sci(row.errors.e_l2),
                output::sci(row.errors.e_h1),
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, c: &Checkpoint) -> Result<(), OptimizerError> {
        c.save(&self.dir.join(format!("checkpoint_{:06}.bin", c.epoch)))
    }
}

/// Trains `config` and writes `config.txt`, `curve.csv`, `final.csv` and
/// checkpoints into `dir`.
pub fn train_to_dir(config: &RunConfig, dir: &Path, progress: bool) -> Result<TrainSummary> {
    let run = config.resolve()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    output::write_text(&dir.join(output::CONFIG_FILE), &config.to_text())?;
    let mut observer = DirObserver {
        dir,
        curve: CurveWriter::create(&dir.join(output::CURVE_FILE))?,
        progress,
        started: Instant::now(),
    };
    let outcome = train_with(&run.problem, &run.setup, &mut observer)
        .with_context(|| format!("training {}", run.problem))?;
    let first = outcome.record.first().expect("epoch 0 is always recorded");
    let last = outcome.record.last().expect("final epoch is always recorded");
    output::write_final(
        &dir.join(output::FINAL_FILE),
        &FinalRow::new(&config.problem, config.beta, config.p, &last.errors),
    )?;
    Ok(TrainSummary {
        problem: run.problem.to_string(),
        errors: last.errors,
        initial_errors: first.errors,
        seconds: observer.started.elapsed().as_secs_f64(),
        rows: outcome.record.rows.clone(),
        epoch_losses: outcome.record.epoch_losses,
    })
}

/// Gradient-check tolerance (relative, ∞-norm).
pub const GRADIENT_TOL: f64 = 1e-6;
/// Nitsche identity tolerance.
pub const IDENTITY_TOL: f64 = 1e-8;

fn report(ok: bool, name: &str, detail: &str) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    let mut all = true;

    let bad = checks::param_count_mismatches();
    all &= report(bad.is_empty(), "param-count", &format!("{} mismatches", bad.len()));

    let bad = checks::halton_mismatches();
    all &= report(
        bad.is_empty(),
        "halton-exactness",
        &format!("{} of {} hand values differ", bad.len(), checks::HALTON_TABLE.len()),
    );

    let mut reports = checks::verify_all(args.points);
    if args.inject == Some(Fault::WrongSource) {
        let mixed = registry_get("mixed2d", None)?;
        reports[0] = verify_problem(&checks::ShiftedSource(mixed, 1.0), args.points);
    }
    for r in &reports {
        all &= report(
            r.passed(),
            &format!("verify {}", r.problem),
            &format!("max residual {:.2e}", r.max_residual()),
        );
    }

    let sign = if args.inject == Some(Fault::WrongConormalSign) {
        -1.0
    } else {
        1.0
    };
    let defect = checks::identity_check(10, 0, sign)?;
    all &= report(
        defect <= IDENTITY_TOL,
        "nitsche-identity",
        &format!("max defect {defect:.2e} (tol {IDENTITY_TOL:.0e})"),
    );

    let mut grads = checks::gradient_check_suite()?;
    if let Some(path) = &args.config {
        let config = RunConfig::load(path)?;
        let problem: ProblemDefinition = config.resolve()?.problem;
        let net = NetworkConfig::new(problem.geometry().dim(), 4, 2)?;
        let mut c = checks::gradient_check(&problem, net, config.seed, 8, 2, config.beta)?;
        c.problem = format!("{problem} (config)");
        grads.push(c);
    }
    for g in &grads {
        all &= report(
            g.passed(GRADIENT_TOL),
            &format!("gradient {}", g.problem),
            &format!(
                "params {:.2e}, spatial {:.2e}",
                g.parameter_error, g.spatial_error
            ),
        );
    }

    println!("{}", if all { "all checks passed" } else { "some checks FAILED" });
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_table(dirs: &[PathBuf]) -> Result<ExitCode> {
    let mut rows = Vec::new();
    let mut missing = false;
    for dir in dirs {
        match output::read_final(&dir.join(output::FINAL_FILE)) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                eprintln!("{}: {e:#}", dir.display());
                missing = true;
            }
        }
    }
    print!("{}", output::format_table(&rows));
    Ok(if missing { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn cmd_sample(args: SampleArgs) -> Result<ExitCode> {
    let problem = registry_get(&args.problem, args.p)?;
    let d = problem.geometry().dim();
    let mut sampler = BatchSampler::new(problem.geometry());
    let stdout = std::io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    let mut header = vec!["batch".to_string(), "patch".to_string(), "condition".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for b in 0..args.batches {
        let batch = sampler.next_batch(args.n_interior, args.n_boundary);
        for x in batch.interior.chunks(d) {
            let mut rec = vec![b.to_string(), "interior".into(), String::new()];
            rec.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        for s in &batch.boundary {
            for x in s.points.chunks(d) {
                let mut rec = vec![b.to_string(), s.patch_id.to_string(), format!("{:?}", s.condition)];
                rec.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_param_count(args: ParamCountArgs) -> Result<ExitCode> {
    let net = match &args.preset {
        Some(name) => {
            let config = lookup_preset(name)?;
            config.resolve()?.setup.network
        }
        None => NetworkConfig::new(
            args.dim.expect("required by clap"),
            args.width.expect("required by clap"),
            args.blocks.expect("required by clap"),
        )?,
    };
    println!("{}", net.param_count());
    Ok(ExitCode::SUCCESS)
}

fn cmd_presets(show: Option<String>) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    match show {
        Some(name) => write!(out, "{}", lookup_preset(&name)?.to_text())?,
        None => {
            for name in presets::preset_names() {
                writeln!(out, "{name}")?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
