//! Grid search over learning rate x batch size x seed.

use serde::{Deserialize, Serialize};

use super::{run_id, train_model, Dataset, ExperimentRecord, TrainConfig, TrainError};
use crate::nnet::ModelConfig;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub seeds_per_cell: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Ok { max_val_dice: f64 },
    Diverged { step: u64, loss: f64 },
    Failed { message: String },
}

/// One training run of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub run_id: String,
    pub config: TrainConfig,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    /// Configuration of the winning run, `None` when every run failed.
    pub best: Option<TrainConfig>,
    pub cells: Vec<CellOutcome>,
    /// All records, grouped by run in grid order.
    pub records: Vec<ExperimentRecord>,
}

/// Trains every (learning rate, batch size, seed) combination, running
/// independent cells in parallel. Seeds are `base.seed + k` for
/// `k < seeds_per_cell`. The winner has the highest validation Dice seen at
/// any step; ties go to the lower learning rate, then the smaller batch,
/// then the earlier seed. Failed runs are reported and skipped.
pub fn grid_search(
    config: &ModelConfig,
    grid: &GridSpec,
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<GridOutcome, TrainError> {
    if grid.learning_rates.is_empty() || grid.batch_sizes.is_empty() || grid.seeds_per_cell == 0 {
        return Err(TrainError::Config("grid needs at least one learning rate, batch size and seed".into()));
    }
    let mut runs = Vec::new();
    for &lr in &grid.learning_rates {
        for &bs in &grid.batch_sizes {
            for k in 0..grid.seeds_per_cell {
                runs.push(TrainConfig {
                    learning_rate: lr,
                    batch_size: bs,
                    seed: base.seed.wrapping_add(k as u64),
                    ..base.clone()
                });
            }
        }
    }
    let results = par::map_slice(&runs, |tcfg| train_model(config, tcfg, train, Some(val)));

    let mut cells = Vec::with_capacity(runs.len());
    let mut records = Vec::new();
    for (tcfg, res) in runs.iter().zip(results) {
        let status = match res {
            Ok(out) => {
                let best = out.best_val_dice().unwrap_or(0.0);
                records.extend(out.records);
                CellStatus::Ok { max_val_dice: best }
            }
            Err(TrainError::Diverged {
                step,
                loss,
                records: partial,
                ..
            }) => {
                records.extend(partial);
                CellStatus::Diverged { step, loss }
            }
            Err(e) => CellStatus::Failed { message: e.to_string() },
        };
        cells.push(CellOutcome {
            run_id: run_id(config, tcfg),
            config: tcfg.clone(),
            status,
        });
    }

    let mut best: Option<(&CellOutcome, f64)> = None;
    for c in &cells {
        if let CellStatus::Ok { max_val_dice } = c.status {
            let better = match best {
                None => true,
                Some((b, d)) => {
                    max_val_dice > d
                        || (max_val_dice == d
                            && (c.config.learning_rate, c.config.batch_size) < (b.config.learning_rate, b.config.batch_size))
                }
            };
            if better {
                best = Some((c, max_val_dice));
            }
        }
    }
    Ok(GridOutcome {
        best: best.map(|(c, _)| c.config.clone()),
        cells,
        records,
    })
}
