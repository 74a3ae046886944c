//! Accuracy bookkeeping, the forgetting measure, order robustness, the
//! prompt ablation grid and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::prompt::PositionMode;
use crate::trainer::{run_deld_seq, EncodedTask, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The four training orders over the default generators.
pub const TRAINING_ORDERS: [[&str; 4]; 4] = [
    ["human", "vicuna", "llama", "chatgpt"],
    ["vicuna", "human", "chatgpt", "llama"],
    ["llama", "chatgpt", "human", "vicuna"],
    ["chatgpt", "llama", "vicuna", "human"],
];

/// Percentage of matching entries.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("accuracy", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty list"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// `a[i][k]`: accuracy (%) on dataset `i` after training stage `k`
/// (both zero-based here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    size: usize,
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(size: usize) -> Self {
        AccuracyMatrix {
            size,
            rows: vec![vec![None; size]; size],
        }
    }

    /// Builds a complete matrix from dense rows (entries below the diagonal
    /// are kept as given).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != rows.len() {
                return Err(Error::dim("accuracy matrix", &[rows.len(), r.len()], &[rows.len(), rows.len()]));
            }
            for (k, &v) in r.iter().enumerate() {
                m.set(i, k, v)?;
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn set(&mut self, i: usize, k: usize, value: f64) -> Result<()> {
        if i >= self.size || k >= self.size {
            return Err(Error::contract(format!(
                "cell ({i}, {k}) outside a {0}×{0} matrix",
                self.size
            )));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::contract(format!("accuracy {value} outside [0, 100]")));
        }
        self.rows[i][k] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        self.rows.get(i)?.get(k).copied().flatten()
    }

    /// Every cell with `k >= i` is filled.
    pub fn is_complete(&self) -> bool {
        (0..self.size).all(|i| (i..self.size).all(|k| self.rows[i][k].is_some()))
    }

    /// Accuracies after the last stage.
    pub fn final_accuracies(&self) -> Result<Vec<f64>> {
        let last = self
            .size
            .checked_sub(1)
            .ok_or_else(|| Error::contract("empty accuracy matrix"))?;
        (0..self.size)
            .map(|i| {
                self.get(i, last)
                    .ok_or_else(|| Error::contract(format!("missing final accuracy for dataset {i}")))
            })
            .collect()
    }

    pub fn average_final(&self) -> Result<f64> {
        Ok(mean(&self.final_accuracies()?))
    }

    /// Cell-wise mean of several complete matrices of equal size.
    pub fn mean_of(matrices: &[AccuracyMatrix]) -> Result<AccuracyMatrix> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::contract("no matrices to average"))?;
        let n = first.size;
        let mut out = AccuracyMatrix::new(n);
        for i in 0..n {
            for k in 0..n {
                let vals: Option<Vec<f64>> = matrices.iter().map(|m| m.get(i, k)).collect();
                if let Some(v) = vals {
                    out.set(i, k, mean(&v))?;
                }
            }
        }
        Ok(out)
    }

    pub fn to_table(&self, names: &[String]) -> String {
        let mut cols = vec![vec!["".to_string()]];
        cols[0].extend(names.iter().cloned());
        for k in 0..self.size {
            let mut col = vec![format!("after {}", names.get(k).map_or("?", String::as_str))];
            for i in 0..self.size {
                col.push(self.get(i, k).map_or("-".into(), |v| format!("{v:.2}")));
            }
            cols.push(col);
        }
        render_columns(&cols)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `max_{k=i..|D|-1} a[i][k] - a[i][|D|]` for each dataset except the last.
pub fn forgetting_per_dataset(matrix: &AccuracyMatrix) -> Result<Vec<f64>> {
    let n = matrix.size();
    if n < 2 {
        return Err(Error::contract("forgetting needs at least two datasets"));
    }
    if !matrix.is_complete() {
        return Err(Error::contract("forgetting needs a complete accuracy matrix"));
    }
    let cell = |i, k| matrix.get(i, k).expect("complete");
    Ok((0..n - 1)
        .map(|i| {
            let best = (i..n - 1).map(|k| cell(i, k)).fold(f64::NEG_INFINITY, f64::max);
            best - cell(i, n - 1)
        })
        .collect())
}

/// Mean forgetting over all but the last dataset. Negative values mean the
/// final model improved on earlier datasets.
pub fn forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    Ok(mean(&forgetting_per_dataset(matrix)?))
}

/// `dataset,forgetting` rows for plotting.
pub fn forgetting_csv(matrix: &AccuracyMatrix, names: &[String]) -> Result<String> {
    let per = forgetting_per_dataset(matrix)?;
    let mut s = String::from("dataset,forgetting\n");
    for (i, f) in per.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let _ = writeln!(s, "{name},{f:.6}");
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderResult {
    pub name: String,
    pub order: Vec<String>,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub orders: Vec<OrderResult>,
    pub spread: f64,
}

/// Per-order averages (kept in input order) and their max−min spread.
pub fn order_robustness(results: Vec<OrderResult>) -> Result<OrderReport> {
    if results.len() < 2 {
        return Err(Error::contract("order robustness needs at least two orders"));
    }
    let max = results.iter().map(|r| r.average).fold(f64::NEG_INFINITY, f64::max);
    let min = results.iter().map(|r| r.average).fold(f64::INFINITY, f64::min);
    Ok(OrderReport {
        orders: results,
        spread: max - min,
    })
}

impl OrderReport {
    pub fn to_table(&self, regime: &str) -> String {
        let mut cols = vec![vec!["order".to_string()], vec![regime.to_string()]];
        for r in &self.orders {
            cols[0].push(format!("{} ({})", r.name, r.order.join("->")));
            cols[1].push(format!("{:.2}", r.average));
        }
        cols[0].push("spread".into());
        cols[1].push(format!("{:.2}", self.spread));
        render_columns(&cols)
    }
}

/// Average final accuracy per (prompt length, position) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub lengths: Vec<usize>,
    pub positions: Vec<PositionMode>,
    /// `cells[length][position]`.
    pub cells: Vec<Vec<f64>>,
}

impl AblationGrid {
    pub fn is_valid(&self) -> bool {
        self.cells.len() == self.lengths.len()
            && self.cells.iter().all(|row| {
                row.len() == self.positions.len()
                    && row.iter().all(|v| (0.0..=100.0).contains(v))
            })
    }

    /// Lengths down the side, positions across the top.
    pub fn to_table(&self) -> String {
        let mut cols = vec![vec!["prompt length".to_string()]];
        cols[0].extend(self.lengths.iter().map(usize::to_string));
        for (p, pos) in self.positions.iter().enumerate() {
            let mut col = vec![pos.to_string()];
            col.extend(self.cells.iter().map(|row| format!("{:.2}", row[p])));
            cols.push(col);
        }
        render_columns(&cols)
    }
}

/// Runs the sequential prompt regime once per grid cell.
pub fn ablate_prompts(
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    lengths: &[usize],
    positions: &[PositionMode],
    cfg: &TrainConfig,
) -> Result<AblationGrid> {
    if lengths.is_empty() || positions.is_empty() {
        return Err(Error::config("ablation grid needs at least one length and one position"));
    }
    let mut cells = Vec::with_capacity(lengths.len());
    for &m in lengths {
        let mut row = Vec::with_capacity(positions.len());
        for &pos in positions {
            let cell_cfg = TrainConfig {
                prompt_len: m,
                position_mode: pos,
                ..cfg.clone()
            };
            let out = run_deld_seq(encoder, tasks, &cell_cfg)?;
            row.push(out.matrix.average_final()?);
            log::info!("ablation cell m={m} {pos} done");
        }
        cells.push(row);
    }
    Ok(AblationGrid {
        lengths: lengths.to_vec(),
        positions: positions.to_vec(),
        cells,
    })
}

/// One regime's results in a comparison-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub regime: String,
    pub with_deld: bool,
    pub generators: Vec<String>,
    pub per_dataset: Vec<f64>,
    pub average: f64,
    pub forgetting: Option<f64>,
    pub matrix: Option<AccuracyMatrix>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn new(
        regime: &str,
        with_deld: bool,
        generators: Vec<String>,
        per_dataset: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if per_dataset.is_empty() || per_dataset.len() != generators.len() {
            return Err(Error::contract(
                "report needs one accuracy per generator",
            ));
        }
        Ok(ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            regime: regime.to_string(),
            with_deld,
            average: mean(&per_dataset),
            generators,
            per_dataset,
            forgetting: None,
            matrix: None,
            seed,
            config: serde_json::Value::Null,
            wall_clock_secs: 0.0,
        })
    }

    /// Attaches a sequential run's matrix and its forgetting value.
    pub fn with_matrix(mut self, matrix: AccuracyMatrix) -> Result<Self> {
        self.forgetting = if matrix.size() >= 2 {
            Some(forgetting(&matrix)?)
        } else {
            None
        };
        self.matrix = Some(matrix);
        Ok(self)
    }

    pub fn label(&self) -> String {
        if self.with_deld {
            format!("{} w/ DELD", self.regime)
        } else {
            self.regime.clone()
        }
    }
}

/// Aligned table with one row per report.
pub fn reports_table(reports: &[ExperimentReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut cols = vec![vec!["regime".to_string()]];
    cols[0].extend(reports.iter().map(ExperimentReport::label));
    for (g, name) in first.generators.iter().enumerate() {
        let mut col = vec![name.clone()];
        col.extend(reports.iter().map(|r| {
            r.per_dataset.get(g).map_or("-".into(), |v| format!("{v:.2}"))
        }));
        cols.push(col);
    }
    let mut avg = vec!["avg".to_string()];
    avg.extend(reports.iter().map(|r| format!("{:.2}", r.average)));
    cols.push(avg);
    let mut fgt = vec!["fgt".to_string()];
    fgt.extend(
        reports
            .iter()
            .map(|r| r.forgetting.map_or("-".into(), |v| format!("{v:.2}"))),
    );
    cols.push(fgt);
    render_columns(&cols)
}

/// First column left-aligned, the rest right-aligned.
fn render_columns(cols: &[Vec<String>]) -> String {
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let rows = cols.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = String::new();
    for r in 0..rows {
        let mut line = String::new();
        for (c, col) in cols.iter().enumerate() {
            let cell = col.get(r).map_or("", String::as_str);
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if r == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
