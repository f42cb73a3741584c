use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label fractions forming the table rows.
pub const FRACTIONS: [f64; 5] = [0.005, 0.01, 0.05, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Done,
    Failed,
}

/// One fine-tuning run in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_id: String,
    pub status: CellStatus,
    pub accuracy: Option<f64>,
    pub checkpoint: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Label fractions down the rows, batch sizes or `batch_resolution`
/// codes across the columns. `cells[r][c]` is `None` until the cell runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGrid {
    pub fractions: Vec<f64>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<CellResult>>>,
}

impl RunGrid {
    pub fn new(fractions: Vec<f64>, columns: Vec<String>) -> Self {
        let cells = vec![vec![None; columns.len()]; fractions.len()];
        RunGrid { fractions, columns, cells }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.fractions.len() || self.cells.iter().any(|r| r.len() != self.columns.len()) {
            return Err(Error::validation("grid", "cell matrix does not match its axes"));
        }
        for cell in self.cells.iter().flatten().flatten() {
            if let Some(a) = cell.accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::validation("grid", format!("{}: accuracy {a} outside [0, 1]", cell.cell_id)));
                }
            }
        }
        Ok(())
    }

    pub fn accuracy(&self, row: usize, col: usize) -> Option<f64> {
        self.cells.get(row)?.get(col)?.as_ref()?.accuracy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::validation("format", format!("unknown table format {other:?}"))),
        }
    }
}

/// `0.005 -> "0.5%"`, `1.0 -> "100%"`.
pub fn fraction_label(fraction: f64) -> String {
    let pct = format!("{:.4}", fraction * 100.0);
    let pct = pct.trim_end_matches('0').trim_end_matches('.');
    format!("{pct}%")
}

fn cell_text(cell: &Option<CellResult>) -> String {
    match cell {
        Some(CellResult { accuracy: Some(a), status: CellStatus::Done, .. }) => format!("{a:.3}"),
        Some(CellResult { status: CellStatus::Failed, .. }) => "failed".to_string(),
        _ => String::new(),
    }
}

/// Renders the grid as text. Output depends only on the grid.
pub fn emit_table(grid: &RunGrid, format: TableFormat) -> String {
    let rows = grid.fractions.iter().zip(&grid.cells).map(|(&f, row)| {
        std::iter::once(fraction_label(f)).chain(row.iter().map(cell_text)).collect::<Vec<_>>()
    });
    let header: Vec<String> = std::iter::once("fraction".to_string()).chain(grid.columns.iter().cloned()).collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            writeln!(out, "{}", header.join(",")).unwrap();
            for r in rows {
                writeln!(out, "{}", r.join(",")).unwrap();
            }
        }
        TableFormat::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(header.len())).unwrap();
            for r in rows {
                writeln!(out, "| {} |", r.join(" | ")).unwrap();
            }
        }
    }
    out
}

pub fn write_table(grid: &RunGrid, format: TableFormat, path: &Path) -> Result<()> {
    std::fs::write(path, emit_table(grid, format)).map_err(|e| Error::io(path, e))
}
