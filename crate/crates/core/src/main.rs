use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vitlite::io::config::{load_config, AnalyzeKind, CommandKind, ExperimentConfig};
use vitlite::io::run::{run, RunOptions};
use vitlite::Error;

#[derive(Parser)]
#[command(name = "vitlite", version, about = "Desk-scale masked-autoencoder lab for lightweight ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch count of the command's schedule.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// MAE pre-training.
    Pretrain(Common),
    /// MAE pre-training with attention or hidden-state distillation.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Supervised fine-tuning, from scratch or from `--init`.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Linear probe on a frozen encoder.
    Linprobe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Keep the first `--keep` blocks of `--init`, re-initialize the rest.
    Surgery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Layer analyses between checkpoints `--a` and `--b`.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<AnalyzeKind>,
    },
}

fn setup_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("VITLITE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("VITLITE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))
}

fn execute(cli: Cli) -> Result<(), Error> {
    setup_threads()?;
    let mut opts = RunOptions::default();
    let (kind, common) = match cli.command {
        Command::Pretrain(c) => (CommandKind::Pretrain, c),
        Command::Distill { common, teacher } => {
            opts.teacher = teacher;
            (CommandKind::Distill, common)
        }
        Command::Finetune { common, init } => {
            opts.init = init;
            (CommandKind::Finetune, common)
        }
        Command::Linprobe { common, init } => {
            opts.init = init;
            (CommandKind::Linprobe, common)
        }
        Command::Surgery { common, init, keep } => {
            opts.init = init;
            opts.keep = keep;
            (CommandKind::Surgery, common)
        }
        Command::Analyze { common, a, b, kind } => {
            opts.a = a;
            opts.b = b;
            opts.kind = kind;
            (CommandKind::Analyze, common)
        }
    };
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = cfg.command {
        if c != kind {
            log::warn!("config is written for {c:?}, running {kind:?}");
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = common.out {
        cfg.out_dir = o;
    }
    if let Some(e) = common.epochs {
        cfg.override_epochs(kind, e);
    }
    let outcome = run(kind, &cfg, &opts)?;
    if let Some(p) = &outcome.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    if let Some(p) = &outcome.metrics {
        println!("metrics: {}", p.display());
    }
    for p in &outcome.outputs {
        println!("output: {}", p.display());
    }
    println!("summary: {}", outcome.summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
