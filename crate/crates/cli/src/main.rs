//! `proxtune`: run pretrain, fine-tune and sweep experiments from TOML configs
//! and render reports from metrics files.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or malformed
//! input, 3 divergence, 4 I/O failure, 5 archive does not match the model spec.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use proxtune::harness::{self, FinetuneStatus};
use proxtune::metrics::{emit_metrics, read_metrics};
use proxtune::{Error, ExperimentConfig, ModelParameters};

/// Environment variable that overrides the output root of every command.
const OUT_ENV: &str = "PROXTUNE_OUT";

#[derive(Parser)]
#[command(name = "proxtune", version, about = "Proximity-constrained fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the run, model-init and teacher seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory; takes precedence over $PROXTUNE_OUT and `run.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model and save `pretrained.pxt`.
    Pretrain(Common),
    /// Fine-tune a pretrained archive and write metrics.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Archive written by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Run the freeze ablation or scheduler grid declared in `[sweep]`.
    Sweep {
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
        /// Archive to start from; pretrains from the config when omitted.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a metrics file and write one `.dat` file per module.
    Report {
        metrics: PathBuf,
        /// Directory for the `.dat` files (defaults to the metrics file's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Freeze,
    Scheduler,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } => 4,
        Error::ArchiveMismatch(_) => 5,
        Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(common) => cmd_pretrain(&common),
        Command::Finetune { common, pretrained } => cmd_finetune(&common, &pretrained),
        Command::Sweep {
            kind,
            common,
            pretrained,
            jobs,
        } => cmd_sweep(kind, &common, pretrained.as_deref(), jobs),
        Command::Report { metrics, out_dir } => cmd_report(&metrics, out_dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("proxtune: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// A parsed config together with the directory its outputs go to.
struct Loaded {
    config: ExperimentConfig,
    out_dir: PathBuf,
}

fn load(common: &Common) -> Result<Loaded, Error> {
    let path = &common.config;
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = common.seed_override {
        config = config.with_seed(seed);
    }
    config.validate()?;

    let base = path.parent().unwrap_or(Path::new("."));
    let out_dir = match (&common.out_dir, std::env::var_os(OUT_ENV)) {
        (Some(dir), _) => dir.clone(),
        (None, Some(root)) => PathBuf::from(root),
        (None, None) => base.join(config.run.out_dir.as_deref().unwrap_or(".")),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    Ok(Loaded { config, out_dir })
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Echo the resolved config, every default filled in, next to an output.
fn write_manifest(dir: &Path, name: &str, command: &str, config: &ExperimentConfig) -> Result<(), Error> {
    let body = toml::to_string(config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    write(
        &dir.join(format!("{name}.manifest.toml")),
        format!("# proxtune {command}\n{body}"),
    )
}

fn cmd_pretrain(common: &Common) -> Result<(), Error> {
    let Loaded { config, out_dir } = load(common)?;
    let params = harness::run_pretrain(&config)?;
    params.save(&out_dir.join("pretrained.pxt"))?;
    write_manifest(&out_dir, "pretrained", "pretrain", &config)?;
    println!("pretrain loss {}", harness::pretrain_loss(&config, &params)?);
    Ok(())
}

fn cmd_finetune(common: &Common, pretrained: &Path) -> Result<(), Error> {
    let Loaded { config, out_dir } = load(common)?;
    let params = ModelParameters::load(pretrained)?;
    let run = harness::run_finetune(params, &config)?;
    emit_metrics(&run.metrics, &out_dir.join("metrics.csv"))?;
    write_manifest(&out_dir, "finetune", "finetune", &config)?;
    if let FinetuneStatus::Diverged { step, loss } = run.status {
        return Err(Error::Divergence { step, loss });
    }
    run.model.save(&out_dir.join("finetuned.pxt"))?;
    let last = run.final_record();
    println!(
        "step {} train {} retention {} shift {}",
        last.step, last.train_loss, last.retention_loss, last.shift_loss
    );
    Ok(())
}

fn cmd_sweep(kind: SweepKind, common: &Common, pretrained: Option<&Path>, jobs: usize) -> Result<(), Error> {
    let Loaded { config, out_dir } = load(common)?;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let (name, masks, grid) = match kind {
        SweepKind::Freeze => {
            let masks = config
                .sweep
                .freeze
                .iter()
                .map(|v| Ok((v.label.clone(), config.resolve_modules(&v.modules)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            if masks.is_empty() {
                return Err(Error::Config("sweep.freeze declares no variants".into()));
            }
            ("sweep_freeze", masks, vec![])
        }
        SweepKind::Scheduler => {
            let grid = config.sweep.scheduler_grid();
            if grid.is_empty() {
                return Err(Error::Config(
                    "scheduler grid is empty (sweep.schedules × sweep.lambda_max_values)".into(),
                ));
            }
            ("sweep_scheduler", vec![], grid)
        }
    };
    let params = match pretrained {
        Some(path) => ModelParameters::load(path)?,
        None => harness::run_pretrain(&config)?,
    };
    let table = match kind {
        SweepKind::Freeze => harness::run_freeze_ablation(&config, &params, &masks, jobs)?,
        SweepKind::Scheduler => harness::run_scheduler_sweep(&config, &params, &grid, jobs)?,
    };
    table.write_csv(&out_dir.join(format!("{name}.csv")))?;
    write_manifest(&out_dir, name, &format!("sweep {}", &name[6..]), &config)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_report(metrics: &Path, out_dir: Option<&Path>) -> Result<(), Error> {
    let table = read_metrics(metrics)?;
    if table.records.is_empty() {
        return Err(Error::Parse {
            what: "metrics file",
            line: 2,
            reason: "no records".into(),
        });
    }
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => metrics.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    for (i, name) in table.module_names.iter().enumerate() {
        write(&dir.join(format!("{stem}.{name}.dat")), report::module_series(&table, i))?;
    }
    print!("{}", report::render(&table));
    Ok(())
}
