use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use seqssl::data::{generate_phantom_dataset, load_volume_dir, prepare_records, split_by_patient, write_volume, LabeledDataset, SlicePrep};
use seqssl::model::{Checkpoint, FRAMEWORK_VERSION};
use seqssl::report::{evaluate, extract_embeddings, project_2d, render_plot, write_table, TableFormat};
use seqssl::trainer::{finetune, pretrain, write_loss_log, InitMode, REFERENCE_TARGET};
use seqssl::{Error, Result};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, write_dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Phantom,
    Ingest,
    Pretrain,
    Finetune,
    Sweep,
    Eval,
    Embed,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Ingest => "ingest",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Sweep => "sweep",
            Command::Eval => "eval",
            Command::Embed => "embed",
        }
    }
}

pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Self {
        let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
        Run { config, out, force: false }
    }

    fn dataset_dir(&self) -> PathBuf {
        self.config.data.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    fn volumes_dir(&self) -> PathBuf {
        self.config.data.volumes.clone().unwrap_or_else(|| self.out.join("volumes"))
    }

    fn checkpoint_or(&self, default: &str) -> PathBuf {
        self.config.checkpoint.clone().unwrap_or_else(|| self.out.join(default))
    }

    /// Outputs are write-once unless `--force` is given.
    fn fresh(&self, path: &Path) -> Result<PathBuf> {
        if path.exists() && !self.force {
            return Err(Error::validation("out", format!("{} already exists; pass --force to overwrite", path.display())));
        }
        Ok(path.to_path_buf())
    }

    fn write_json(&self, path: &Path, value: &serde_json::Value) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks everything that can be checked without touching data, so
    /// config mistakes surface as validation errors before any work.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        let c = &self.config;
        match cmd {
            Command::Phantom => c.phantom.validate(),
            Command::Ingest => {
                c.data.planes()?;
                if !(c.data.fraction > 0.0 && c.data.fraction <= 1.0) {
                    return Err(Error::validation("data.fraction", format!("{} not in (0, 1]", c.data.fraction)));
                }
                if c.data.size == 0 {
                    return Err(Error::validation("data.size", "must be positive"));
                }
                Ok(())
            }
            Command::Pretrain => {
                c.model.spec()?;
                c.pretrain.validate()
            }
            Command::Finetune => {
                c.model.spec()?;
                c.finetune.validate()
            }
            Command::Sweep => {
                c.model.spec()?;
                c.sweep_config().validate()
            }
            Command::Eval | Command::Embed => Ok(()),
        }
    }

    pub fn execute(&self, cmd: Command) -> Result<serde_json::Value> {
        self.validate(cmd)?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let clock = Instant::now();
        let outputs = match cmd {
            Command::Phantom => self.phantom()?,
            Command::Ingest => self.ingest()?,
            Command::Pretrain => self.pretrain()?,
            Command::Finetune => self.finetune()?,
            Command::Sweep => self.sweep()?,
            Command::Eval => self.eval()?,
            Command::Embed => self.embed()?,
        };
        let meta = json!({
            "command": cmd.name(),
            "config": self.config,
            "seed": self.config.seed,
            "framework_version": FRAMEWORK_VERSION,
            "cli_version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": started as u64,
            "wall_time_s": clock.elapsed().as_secs_f64(),
            "outputs": outputs,
        });
        let meta_path = self.out.join("runs").join(format!("{}-{started}.json", cmd.name()));
        self.write_json(&meta_path, &meta)?;
        Ok(meta)
    }

    fn phantom(&self) -> Result<serde_json::Value> {
        let dir = self.fresh(&self.volumes_dir())?;
        let volumes = generate_phantom_dataset(&self.config.phantom)?;
        for v in &volumes {
            write_volume(&dir, v)?;
        }
        tracing::info!(volumes = volumes.len(), dir = %dir.display(), "phantom written");
        Ok(json!({ "volumes": dir, "n_volumes": volumes.len() }))
    }

    fn ingest(&self) -> Result<serde_json::Value> {
        let src = self.volumes_dir();
        if !src.is_dir() {
            return Err(Error::validation("data.volumes", format!("{} is not a directory", src.display())));
        }
        let dir = self.fresh(&self.dataset_dir())?;
        let volumes = load_volume_dir(&src)?;
        let prep = SlicePrep { fraction: self.config.data.fraction, planes: self.config.data.planes()?, size: self.config.data.size };
        let records = prepare_records(&volumes, &prep)?;
        let manifest = split_by_patient(&records, self.config.data.ratios, self.config.split_seed())?;
        let data = LabeledDataset::new(records, manifest)?;
        write_dataset(&dir, &data)?;
        tracing::info!(slices = data.records.len(), dir = %dir.display(), "dataset written");
        Ok(json!({ "dataset": dir, "n_slices": data.records.len() }))
    }

    fn pretrain(&self) -> Result<serde_json::Value> {
        let ckpt_path = self.fresh(&self.out.join("pretrain.safetensors"))?;
        let data = load_dataset(&self.dataset_dir())?;
        let spec = self.config.model.spec()?;
        let out = pretrain(&self.config.pretrain, &spec, &data.unlabeled_train())?;
        out.checkpoint.save(&ckpt_path)?;
        let log_path = self.out.join("pretrain_loss.csv");
        write_loss_log(&out.log, &log_path)?;
        Ok(json!({ "checkpoint": ckpt_path, "loss_log": log_path }))
    }

    fn finetune(&self) -> Result<serde_json::Value> {
        let ckpt_path = self.fresh(&self.out.join("finetune.safetensors"))?;
        let data = load_dataset(&self.dataset_dir())?;
        let spec = self.config.model.spec()?;
        let source = match self.config.finetune.init {
            InitMode::FromCheckpoint => Some(Checkpoint::load(&self.checkpoint_or("pretrain.safetensors"))?),
            InitMode::FromScratch => None,
        };
        let out = finetune(source.as_ref(), &self.config.finetune, &spec, &data)?;
        out.checkpoint.save(&ckpt_path)?;
        let log_path = self.out.join("finetune_loss.csv");
        write_loss_log(&out.log, &log_path)?;
        let eval_path = self.out.join("finetune_eval.json");
        self.write_json(&eval_path, &serde_json::to_value(&out.test)?)?;
        tracing::info!(accuracy = out.test.accuracy, best_epoch = out.best_epoch, "fine-tuned");
        Ok(json!({
            "checkpoint": ckpt_path,
            "loss_log": log_path,
            "eval": eval_path,
            "test_accuracy": out.test.accuracy,
            "best_epoch": out.best_epoch,
            "reference_target": REFERENCE_TARGET,
        }))
    }

    /// Not write-once: reruns resume from the persisted cell states.
    fn sweep(&self) -> Result<serde_json::Value> {
        let data = load_dataset(&self.dataset_dir())?;
        let spec = self.config.model.spec()?;
        let dir = self.out.join("sweep");
        let grid = seqssl::trainer::run_sweep(&self.config.sweep_config(), &spec, &data, &dir)?;
        let csv = dir.join("table.csv");
        let md = dir.join("table.md");
        write_table(&grid, TableFormat::Csv, &csv)?;
        write_table(&grid, TableFormat::Markdown, &md)?;
        Ok(json!({ "grid": dir.join("grid.json"), "table_csv": csv, "table_md": md }))
    }

    fn eval(&self) -> Result<serde_json::Value> {
        let eval_path = self.fresh(&self.out.join("eval.json"))?;
        let ckpt_path = self.checkpoint_or("finetune.safetensors");
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let data = load_dataset(&self.dataset_dir())?;
        let result = evaluate(&ckpt, &data)?;
        self.write_json(&eval_path, &serde_json::to_value(&result)?)?;
        tracing::info!(accuracy = result.accuracy, n = result.n_samples, "evaluated");
        Ok(json!({ "eval": eval_path, "checkpoint": ckpt_path, "accuracy": result.accuracy }))
    }

    fn embed(&self) -> Result<serde_json::Value> {
        let method = self.config.embed.method;
        let method_name = serde_json::to_value(method)?.as_str().unwrap_or("embed").to_string();
        let stem = self.out.join(format!("embed_{method_name}_{}", self.config.embed.split));
        let coords_path = self.fresh(&stem.with_extension("csv"))?;
        let ckpt_path = self.checkpoint_or("pretrain.safetensors");
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let data = load_dataset(&self.dataset_dir())?;
        let records = data.split(self.config.embed.split);
        if records.is_empty() {
            return Err(Error::validation("embed.split", format!("split {} is empty", self.config.embed.split)));
        }
        let set = project_2d(&extract_embeddings(&ckpt, &records)?, method, self.config.finetune.seed)?;
        let title = format!("{} embeddings ({} split)", method_name.to_uppercase(), self.config.embed.split);
        let (png, svg) = render_plot(&set, &stem, &title)?;
        let mut csv = String::from("x,y,label\n");
        if let Some(c) = &set.coords2d {
            for (row, label) in c.rows().into_iter().zip(&set.labels) {
                csv.push_str(&format!("{},{},{}\n", row[0], row[1], label));
            }
        }
        std::fs::write(&coords_path, csv).map_err(|e| Error::io(&coords_path, e))?;
        Ok(json!({ "png": png, "svg": svg, "coords": coords_path }))
    }
}
