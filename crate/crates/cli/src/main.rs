use std::io::ErrorKind as IoKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Parser, Subcommand, ValueEnum};
use grain::data::{format_examples, gen_synthetic, load_examples};
use grain::model::{load_checkpoint, save_checkpoint, write_atomic};
use grain::pipeline::{evaluate, load_dataset, run_grain, train_teacher, Mode, RunConfig};
use grain::report::StructureReport;
use grain::GrainError;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "grain",
    version,
    about = "Structured pruning of a small transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic ordered-pair task as train and dev files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Data seed; defaults to `data_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the unpruned teacher and save its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill and prune a student from a teacher checkpoint.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint; the trace and report are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// Final model density.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the structure of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<GrainError> for Failure {
    fn from(e: GrainError) -> Self {
        let code = match &e {
            GrainError::Config(_) => EXIT_CONFIG,
            GrainError::Io(io) if io.kind() == IoKind::NotFound => EXIT_MISSING,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(flag: &str, path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_MISSING,
            msg: format!("{flag}: no such file {}", path.display()),
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            require_file("--config", p)?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// The run seed: the flag, else `GRAIN_SEED`, else the config value.
fn resolve_seed(cfg: &mut RunConfig, flag: Option<u64>) -> CmdResult {
    if let Some(seed) = flag {
        cfg.seed = seed;
    } else if let Ok(text) = std::env::var("GRAIN_SEED") {
        cfg.seed = text.trim().parse().map_err(|_| Failure {
            code: EXIT_CONFIG,
            msg: format!("GRAIN_SEED must be an unsigned integer, got {text:?}"),
        })?;
    }
    Ok(())
}

fn gen_data(config: Option<&Path>, train: &Path, dev: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config)?;
    let m = &cfg.model;
    let data = gen_synthetic(
        m.vocab,
        m.max_len,
        cfg.train_size,
        cfg.dev_size,
        seed.unwrap_or(cfg.data_seed),
    )?;
    write_atomic(train, format_examples(&data.train).as_bytes())?;
    write_atomic(dev, format_examples(&data.dev).as_bytes())?;
    println!("train={} dev={}", data.train.len(), data.dev.len());
    Ok(())
}

fn teacher(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = load_config(config)?;
    resolve_seed(&mut cfg, seed)?;
    let data = load_dataset(&cfg)?;
    let outcome = train_teacher(&cfg, &data)?;
    save_checkpoint(out, &outcome.model)?;
    println!("accuracy={:.6}", outcome.dev.accuracy);
    Ok(())
}

struct PruneArgs<'a> {
    config: &'a Path,
    teacher: &'a Path,
    out: &'a Path,
    alpha: Option<f64>,
    density: Option<f64>,
    mode: Option<Mode>,
    seed: Option<u64>,
}

fn prune(args: PruneArgs<'_>) -> CmdResult {
    let mut cfg = load_config(Some(args.config))?;
    require_file("--teacher", args.teacher)?;
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(density) = args.density {
        cfg.final_density = density;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    resolve_seed(&mut cfg, args.seed)?;
    cfg.validate()?;

    let teacher = load_checkpoint::<f32>(args.teacher)?;
    let data = load_dataset(&cfg)?;
    let outcome = run_grain(&cfg, &teacher, &data)?;
    let report = StructureReport::of(&outcome.student);
    save_checkpoint(args.out, &outcome.student)?;
    write_atomic(
        &args.out.with_extension("trace.csv"),
        outcome.trace.to_csv()?.as_bytes(),
    )?;
    write_atomic(
        &args.out.with_extension("report.txt"),
        report.to_text().as_bytes(),
    )?;
    println!(
        "accuracy={:.6} density={:.6} heads={}",
        outcome.dev.accuracy,
        report.density,
        report.total_heads()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> CmdResult {
    require_file("--checkpoint", checkpoint)?;
    require_file("--data", data)?;
    let model = load_checkpoint::<f32>(checkpoint)?;
    let examples = load_examples(data, model.config.vocab, model.config.classes)?;
    let metrics = evaluate(&model, &examples)?;
    println!("accuracy={:.6}", metrics.accuracy);
    Ok(())
}

fn report(checkpoint: &Path, format: Format) -> CmdResult {
    require_file("--checkpoint", checkpoint)?;
    let model = load_checkpoint::<f32>(checkpoint)?;
    let report = StructureReport::of(&model);
    match format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()?),
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            config,
            train,
            dev,
            seed,
        } => gen_data(config.as_deref(), &train, &dev, seed),
        Command::TrainTeacher { config, out, seed } => teacher(config.as_deref(), &out, seed),
        Command::Prune {
            config,
            teacher,
            out,
            alpha,
            density,
            mode,
            seed,
        } => prune(PruneArgs {
            config: &config,
            teacher: &teacher,
            out: &out,
            alpha,
            density,
            mode,
            seed,
        }),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Report { checkpoint, format } => report(&checkpoint, format),
    }
}

/// Maps a clap error to an exit code and a single diagnostic line.
fn usage_failure(e: &clap::Error) -> Failure {
    if e.kind() == ErrorKind::MissingRequiredArgument {
        let flags = match e.get(ContextKind::InvalidArg) {
            Some(ContextValue::Strings(v)) => v
                .iter()
                .filter_map(|s| s.split_whitespace().next())
                .collect::<Vec<_>>()
                .join(", "),
            _ => String::from("(unknown)"),
        };
        return Failure {
            code: EXIT_MISSING,
            msg: format!("missing required flag {flags}"),
        };
    }
    let rendered = e.render().to_string();
    let line = rendered.lines().next().unwrap_or("invalid arguments");
    Failure {
        code: EXIT_USAGE,
        msg: line.trim_start_matches("error: ").to_string(),
    }
}

fn main() -> ExitCode {
    let result = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                let _ = e.print();
                return ExitCode::from(EXIT_USAGE);
            }
            _ => Err(usage_failure(&e)),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("grain: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
