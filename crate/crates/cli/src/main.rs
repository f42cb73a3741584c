mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqssl::Error;

use crate::commands::{Command, Run};
use crate::config::{env_overrides, int, load, parse_value};

#[derive(Parser)]
#[command(name = "seqssl", version, about = "Self-supervised MRI sequence classification")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config file (or a run-metadata JSON to replay).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; replaces the per-stage seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Epochs for the stage this command runs.
    #[arg(long, global = true)]
    epochs: Option<u64>,
    /// Parallel sweep cells.
    #[arg(long, global = true)]
    jobs: Option<u64>,
    /// Checkpoint to read (defaults depend on the command)
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Prepared dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// JSON Lines logs on stderr.
    #[arg(long, global = true)]
    log_json: bool,
    /// Arbitrary override, e.g. `--set finetune.label_fraction=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom cohort as volume containers.
    Phantom,
    /// Extract, resample and split slices into a dataset directory.
    Ingest {
        /// Directory of volume containers.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Central fraction of each volume axis to keep
        #[arg(long)]
        fraction: Option<f64>,
        /// Comma-separated planes, e.g. `sag,cor,ax`.
        #[arg(long)]
        planes: Option<String>,
        /// Output slice side length in pixels
        #[arg(long)]
        size: Option<u64>,
    },
    /// Self-supervised pre-training on the train split without labels.
    Pretrain,
    /// Supervised fine-tuning on a label fraction; reports test accuracy.
    Finetune {
        /// Fraction of labelled training studies to use
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Pre-train per column and fine-tune per label fraction.
    Sweep,
    /// Evaluate a fine-tuned checkpoint on the test split.
    Eval,
    /// Project embeddings to 2D and plot them.
    Embed {
        /// `pca` or `tsne`.
        #[arg(long)]
        method: Option<String>,
        /// `train`, `val` or `test`.
        #[arg(long)]
        split: Option<String>,
    },
}

fn flag_overrides(cli: &Cli) -> Result<(Command, Vec<(String, toml::Value)>), Error> {
    let c = &cli.common;
    let mut out: Vec<(String, toml::Value)> = Vec::new();
    let path = |p: &PathBuf| toml::Value::String(p.display().to_string());
    let cmd = match &cli.command {
        Cmd::Phantom => Command::Phantom,
        Cmd::Ingest { input, fraction, planes, size } => {
            if let Some(p) = input {
                out.push(("data.volumes".into(), path(p)));
            }
            if let Some(f) = fraction {
                out.push(("data.fraction".into(), toml::Value::Float(*f)));
            }
            if let Some(p) = planes {
                out.push(("data.planes".into(), toml::Value::String(p.clone())));
            }
            if let Some(s) = size {
                out.push(("data.size".into(), int(*s as i64)));
            }
            Command::Ingest
        }
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Finetune { fraction } => {
            if let Some(f) = fraction {
                out.push(("finetune.label_fraction".into(), toml::Value::Float(*f)));
            }
            Command::Finetune
        }
        Cmd::Sweep => Command::Sweep,
        Cmd::Eval => Command::Eval,
        Cmd::Embed { method, split } => {
            if let Some(m) = method {
                out.push(("embed.method".into(), toml::Value::String(m.clone())));
            }
            if let Some(s) = split {
                out.push(("embed.split".into(), toml::Value::String(s.clone())));
            }
            Command::Embed
        }
    };
    if let Some(o) = &c.out {
        out.push(("out".into(), path(o)));
    }
    if let Some(s) = c.seed {
        out.push(("seed".into(), int(s as i64)));
    }
    if let Some(e) = c.epochs {
        let key = match cmd {
            Command::Finetune => "finetune.epochs",
            _ => "pretrain.epochs",
        };
        out.push((key.into(), int(e as i64)));
        if cmd == Command::Sweep {
            out.push(("finetune.epochs".into(), int(e as i64)));
        }
    }
    if let Some(j) = c.jobs {
        out.push(("sweep.jobs".into(), int(j as i64)));
    }
    if let Some(p) = &c.checkpoint {
        out.push(("checkpoint".into(), path(p)));
    }
    if let Some(p) = &c.dataset {
        out.push(("data.dataset".into(), path(p)));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::validation("--set", format!("{kv:?} is not KEY=VALUE")))?;
        out.push((k.trim().to_string(), parse_value(v.trim())));
    }
    Ok((cmd, out))
}

fn init_logging(json: bool) {
    let builder = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_max_level(tracing::Level::INFO);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (cmd, flags) = flag_overrides(cli)?;
    let env = env_overrides(std::env::vars());
    let config = load(cli.common.config.as_deref(), &env, &flags)?;
    let mut run = Run::new(config);
    run.force = cli.common.force;
    let meta = run.execute(cmd)?;
    println!("{}", serde_json::to_string_pretty(&meta["outputs"])?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.common.log_json);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
