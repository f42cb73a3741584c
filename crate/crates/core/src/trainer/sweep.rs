use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::finetune::{finetune, FinetuneConfig, InitMode};
use super::pretrain::{pretrain, PretrainConfig};
use super::write_loss_log;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelSpec};
use crate::report::{fraction_label, CellResult, CellStatus, RunGrid, FRACTIONS};

/// Batch sizes of the full-scale grid.
pub const FULL_BATCH_AXIS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
/// Scaled-down batch axis for CPU runs.
pub const DESK_BATCH_AXIS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepColumn {
    pub batch_size: usize,
    /// Present for resolution grids, whose codes read `batch_resolution`.
    pub resolution: Option<usize>,
}

impl SweepColumn {
    pub fn code(&self) -> String {
        match self.resolution {
            Some(r) => format!("{}_{}", self.batch_size, r),
            None => self.batch_size.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Empty for a batch-size grid; otherwise every batch size is paired
    /// with every resolution.
    pub resolutions: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Cells run on this many threads.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: FRACTIONS.to_vec(),
            batch_sizes: DESK_BATCH_AXIS.to_vec(),
            resolutions: Vec::new(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            jobs: 1,
        }
    }
}

impl SweepConfig {
    pub fn columns(&self) -> Vec<SweepColumn> {
        if self.resolutions.is_empty() {
            self.batch_sizes.iter().map(|&b| SweepColumn { batch_size: b, resolution: None }).collect()
        } else {
            self.batch_sizes
                .iter()
                .flat_map(|&b| self.resolutions.iter().map(move |&r| SweepColumn { batch_size: b, resolution: Some(r) }))
                .collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::validation("sweep.jobs", "must be at least 1"));
        }
        if self.fractions.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::validation("sweep", "fractions and batch_sizes must be non-empty"));
        }
        for &f in &self.fractions {
            self.finetune_for(f, self.columns()[0]).validate()?;
        }
        for col in self.columns() {
            self.pretrain_for(col).validate()?;
        }
        Ok(())
    }

    fn pretrain_for(&self, col: SweepColumn) -> PretrainConfig {
        PretrainConfig {
            batch_size: col.batch_size,
            resolution: col.resolution.unwrap_or(self.pretrain.resolution),
            ..self.pretrain.clone()
        }
    }

    fn finetune_for(&self, fraction: f64, col: SweepColumn) -> FinetuneConfig {
        FinetuneConfig {
            label_fraction: fraction,
            resolution: Some(col.resolution.unwrap_or(self.pretrain.resolution)),
            ..self.finetune.clone()
        }
    }
}

fn file_safe(s: &str) -> String {
    s.replace('%', "pct").replace('.', "p")
}

fn read_state(path: &Path) -> Option<CellResult> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_state(path: &Path, cell: &CellResult) -> Result<()> {
    let text = serde_json::to_string_pretty(cell)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn failed(cell_id: String, seed: u64, error: String) -> CellResult {
    CellResult { cell_id, status: CellStatus::Failed, accuracy: None, checkpoint: None, seed, error: Some(error) }
}

/// Runs `work` for indices `0..n` on `jobs` threads; results keep index order.
fn parallel<T: Send>(n: usize, jobs: usize, work: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = work(i);
                slots.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("no poisoned workers").into_iter().map(|s| s.expect("every index ran")).collect()
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("cell panicked".to_string()),
    }
}

/// Pre-trains once per column and fine-tunes once per (fraction, column).
/// State lives under `dir/cells` as one JSON record per cell; completed
/// cells are skipped on rerun, and a failing cell is recorded as failed
/// without stopping the grid. The grid is also written to `dir/grid.json`.
pub fn run_sweep(config: &SweepConfig, spec: &ModelSpec, data: &LabeledDataset, dir: &Path) -> Result<RunGrid> {
    config.validate()?;
    let cells_dir = dir.join("cells");
    let ckpt_dir = dir.join("checkpoints");
    for d in [&cells_dir, &ckpt_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let columns = config.columns();
    let needs_pretrain = config.finetune.init == InitMode::FromCheckpoint;

    let pretrained: Vec<std::result::Result<Option<Checkpoint>, String>> = parallel(columns.len(), config.jobs, |c| {
        if !needs_pretrain {
            return Ok(None);
        }
        let col = columns[c];
        let cfg = config.pretrain_for(col);
        let id = format!("pretrain_{}", col.code());
        let state_path = cells_dir.join(format!("{id}.json"));
        let ckpt_path = ckpt_dir.join(format!("{id}.safetensors"));
        if let Some(CellResult { status: CellStatus::Done, .. }) = read_state(&state_path) {
            if let Ok(ckpt) = Checkpoint::load(&ckpt_path) {
                return Ok(Some(ckpt));
            }
        }
        let result = guarded(|| {
            let out = pretrain(&cfg, spec, &data.unlabeled_train())?;
            out.checkpoint.save(&ckpt_path)?;
            write_loss_log(&out.log, &ckpt_dir.join(format!("{id}_loss.csv")))?;
            Ok(out.checkpoint)
        });
        let state = match &result {
            Ok(_) => CellResult {
                cell_id: id,
                status: CellStatus::Done,
                accuracy: None,
                checkpoint: Some(ckpt_path.display().to_string()),
                seed: cfg.seed,
                error: None,
            },
            Err(e) => failed(id, cfg.seed, e.clone()),
        };
        write_state(&state_path, &state).map_err(|e| e.to_string())?;
        result.map(Some)
    });

    let n_cols = columns.len();
    let cells: Vec<CellResult> = parallel(config.fractions.len() * n_cols, config.jobs, |i| {
        let (r, c) = (i / n_cols, i % n_cols);
        let col = columns[c];
        let fraction = config.fractions[r];
        let cfg = config.finetune_for(fraction, col);
        let id = format!("{}@{}", col.code(), fraction_label(fraction));
        let stem = format!("cell_{}", file_safe(&format!("{}_{}", col.code(), fraction_label(fraction))));
        let state_path = cells_dir.join(format!("{stem}.json"));
        if let Some(done @ CellResult { status: CellStatus::Done, .. }) = read_state(&state_path) {
            return done;
        }
        let cell = match &pretrained[c] {
            Err(e) => failed(id, cfg.seed, format!("pre-training failed: {e}")),
            Ok(ckpt) => {
                let ckpt_path = ckpt_dir.join(format!("{stem}.safetensors"));
                let run = guarded(|| {
                    let out = finetune(ckpt.as_ref(), &cfg, spec, data)?;
                    out.checkpoint.save(&ckpt_path)?;
                    write_loss_log(&out.log, &ckpt_dir.join(format!("{stem}_loss.csv")))?;
                    Ok(out.test.accuracy)
                });
                match run {
                    Ok(acc) => CellResult {
                        cell_id: id,
                        status: CellStatus::Done,
                        accuracy: Some(acc),
                        checkpoint: Some(ckpt_path.display().to_string()),
                        seed: cfg.seed,
                        error: None,
                    },
                    Err(e) => failed(id, cfg.seed, e),
                }
            }
        };
        if let Err(e) = write_state(&state_path, &cell) {
            tracing::warn!(cell = %cell.cell_id, error = %e, "could not persist cell state");
        }
        cell
    });

    let mut grid = RunGrid::new(config.fractions.clone(), columns.iter().map(SweepColumn::code).collect());
    for (i, cell) in cells.into_iter().enumerate() {
        grid.cells[i / n_cols][i % n_cols] = Some(cell);
    }
    let grid_path = dir.join("grid.json");
    std::fs::write(&grid_path, serde_json::to_string_pretty(&grid)? + "\n").map_err(|e| Error::io(&grid_path, e))?;
    Ok(grid)
}

