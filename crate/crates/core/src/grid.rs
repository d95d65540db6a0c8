//! Placement x drop-rate grid of independent training runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::placement::placement_for_model;
use crate::train::{mix_seed, train, write_metrics_csv, TrainConfig};

pub const BASELINE_MODEL: u8 = 1;

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub models: Vec<u8>,
    pub rates: Vec<f64>,
    /// Worker threads; 1 runs cells one after another.
    pub parallel: usize,
    /// Directory receiving one metrics CSV per cell.
    pub metrics_dir: Option<PathBuf>,
}

/// Outcome of one cell: best validation accuracy or the failure message.
pub type CellResult = std::result::Result<f64, String>;

#[derive(Clone, Debug)]
pub struct GridTable {
    pub models: Vec<u8>,
    pub rates: Vec<f64>,
    /// `cells[row][col]` for `models[row]` and `rates[col]`.
    pub cells: Vec<Vec<CellResult>>,
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id");
        for r in &self.rates {
            let _ = write!(out, ",dr_{r}");
        }
        out.push('\n');
        for (id, row) in self.models.iter().zip(&self.cells) {
            let _ = write!(out, "{id}");
            for cell in row {
                match cell {
                    Ok(acc) => {
                        let _ = write!(out, ",{acc}");
                    }
                    Err(_) => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn failures(&self) -> Vec<(u8, f64, &str)> {
        let mut out = Vec::new();
        for (&id, row) in self.models.iter().zip(&self.cells) {
            for (&rate, cell) in self.rates.iter().zip(row) {
                if let Err(msg) = cell {
                    out.push((id, rate, msg.as_str()));
                }
            }
        }
        out
    }
}

/// Seed of one cell, a function of the cell's identity only.
pub fn cell_seed(base: u64, model_id: u8, rate: f64) -> u64 {
    mix_seed(&[base, u64::from(model_id), rate.to_bits()])
}

fn cell_name(model_id: u8, rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("model{model_id}_dr{r}.csv"),
        None => format!("model{model_id}_baseline.csv"),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    model_id: u8,
    rate: Option<f64>,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    vocab_size: usize,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    metrics_dir: Option<&Path>,
) -> Result<f64> {
    let seed = cell_seed(base_train.seed, model_id, rate.unwrap_or(0.0));
    let config = ModelConfig {
        placement: placement_for_model(model_id)?,
        drop_rate: rate.unwrap_or(0.0),
        seed,
        ..base_model.clone()
    };
    let tc = TrainConfig {
        seed,
        ..base_train.clone()
    };
    let mut model = Model::new(config, vocab_size)?;
    let report = train(&mut model, train_set, val_set, &tc)?;
    if let Some(dir) = metrics_dir {
        write_metrics_csv(&dir.join(cell_name(model_id, rate)), &report.metrics)?;
    }
    Ok(report.best_val_acc)
}

/// Trains every (model, rate) cell independently. The baseline model has no
/// dropout and is trained once, its result repeated across the rate columns.
/// A failing cell is recorded and does not stop the others.
pub fn grid_search(
    spec: &GridSpec,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    vocab_size: usize,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
) -> Result<GridTable> {
    if spec.models.is_empty() || spec.rates.is_empty() {
        return Err(Error::Config(
            "grid needs at least one model and one rate".into(),
        ));
    }
    for &id in &spec.models {
        placement_for_model(id)?;
    }
    if let Some(dir) = &spec.metrics_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut jobs: Vec<(u8, Option<f64>)> = Vec::new();
    for &id in &spec.models {
        if id == BASELINE_MODEL {
            jobs.push((id, None));
        } else {
            jobs.extend(spec.rates.iter().map(|&r| (id, Some(r))));
        }
    }
    let run = |&(id, rate): &(u8, Option<f64>)| -> CellResult {
        run_cell(
            id,
            rate,
            base_model,
            base_train,
            vocab_size,
            train_set,
            val_set,
            spec.metrics_dir.as_deref(),
        )
        .map_err(|e| e.to_string())
    };
    let results: Vec<CellResult> = if spec.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut cells = Vec::with_capacity(spec.models.len());
    let mut it = results.into_iter();
    for &id in &spec.models {
        if id == BASELINE_MODEL {
            let r = it.next().expect("one result per job");
            cells.push(vec![r; spec.rates.len()]);
        } else {
            cells.push(it.by_ref().take(spec.rates.len()).collect());
        }
    }
    Ok(GridTable {
        models: spec.models.clone(),
        rates: spec.rates.clone(),
        cells,
    })
}
