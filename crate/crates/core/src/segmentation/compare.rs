//! Trains every (mode, seed) cell on shared data and tabulates test mIoU.

use std::fmt::Write as _;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, SynthSample};
use super::metrics::{evaluate, Metrics};
use super::model::{ModelConfig, ToyModel};
use super::train::{train, TrainConfig};
use crate::aggregate::AlphaTrajectory;
use crate::conv::FilterKind;
use crate::error::{param_err, Result};
use crate::tensor::Rng;

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 64,
            test_samples: 32,
            height: 64,
            width: 64,
            classes: 4,
        }
    }
}

/// Train and test sets for one seed. Both depend only on the seed and the
/// data settings, so every mode sees the same images.
pub fn seed_datasets(
    data: &DataConfig,
    noise_level: f64,
    seed: u64,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let root = Rng::new(seed);
    let extent = (data.height, data.width);
    let train = generate_dataset(
        data.train_samples,
        extent,
        data.classes,
        noise_level,
        &mut root.fork(STREAM_TRAIN_DATA),
    )?;
    let test = generate_dataset(
        data.test_samples,
        extent,
        data.classes,
        noise_level,
        &mut root.fork(STREAM_TEST_DATA),
    )?;
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub metrics: Metrics,
    pub sec_per_step: f64,
    pub losses: Vec<f64>,
    pub alphas: Vec<AlphaTrajectory>,
    pub param_count: usize,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub mode: FilterKind,
    pub seed: u64,
    /// Error text for failed cells.
    pub outcome: std::result::Result<CellRun, String>,
    pub interrupted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: FilterKind,
    pub runs: usize,
    pub failed: usize,
    pub miou_mean: f64,
    /// Sample standard deviation; 0 with fewer than two runs.
    pub miou_std: f64,
    pub sec_per_step_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub classes: usize,
    pub cells: Vec<Cell>,
    pub interrupted: bool,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Comparison {
    pub fn failed_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.outcome.is_err())
    }

    pub fn header(&self, timing: bool) -> String {
        let mut h = String::from("mode,seed,miou");
        for c in 0..self.classes {
            let _ = write!(h, ",iou_class_{c}");
        }
        if timing {
            h.push_str(",sec_per_step");
        }
        h
    }

    /// Per-cell table. With `timing` false the wall-clock column is dropped,
    /// leaving content that is reproducible byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = self.header(timing);
        out.push('\n');
        for cell in &self.cells {
            let _ = write!(out, "{},{}", cell.mode, cell.seed);
            match &cell.outcome {
                Ok(run) => {
                    let _ = write!(out, ",{}", run.metrics.miou);
                    for iou in &run.metrics.per_class_iou {
                        match iou {
                            Some(v) => {
                                let _ = write!(out, ",{v}");
                            }
                            None => out.push(','),
                        }
                    }
                    if timing {
                        let _ = write!(out, ",{}", run.sec_per_step);
                    }
                }
                Err(_) => {
                    out.push_str(",failed");
                    for _ in 0..self.classes {
                        out.push(',');
                    }
                    if timing {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// One summary per mode, in first-appearance order.
    pub fn summaries(&self) -> Vec<ModeSummary> {
        let mut modes: Vec<FilterKind> = Vec::new();
        for c in &self.cells {
            if !modes.contains(&c.mode) {
                modes.push(c.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let cells: Vec<&Cell> = self.cells.iter().filter(|c| c.mode == mode).collect();
                let ok: Vec<&CellRun> = cells
                    .iter()
                    .filter_map(|c| c.outcome.as_ref().ok())
                    .collect();
                let mious: Vec<f64> = ok.iter().map(|r| r.metrics.miou).collect();
                let times: Vec<f64> = ok.iter().map(|r| r.sec_per_step).collect();
                let (miou_mean, miou_std) = mean_std(&mious);
                ModeSummary {
                    mode,
                    runs: ok.len(),
                    failed: cells.len() - ok.len(),
                    miou_mean,
                    miou_std,
                    sec_per_step_mean: mean_std(&times).0,
                }
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<11} {:>4} {:>6} {:>9} {:>9} {:>12}\n",
            "mode", "runs", "failed", "miou", "std", "sec/step"
        );
        for s in self.summaries() {
            let _ = writeln!(
                out,
                "{:<11} {:>4} {:>6} {:>9.4} {:>9.4} {:>12.5}",
                s.mode.name(),
                s.runs,
                s.failed,
                s.miou_mean,
                s.miou_std,
                s.sec_per_step_mean
            );
        }
        out
    }

    /// Element-wise mean of the alpha trajectory of `block` over all
    /// successful aggregated cells.
    pub fn mean_alpha_trajectory(&self, block: usize) -> Result<Option<AlphaTrajectory>> {
        let trajs: Vec<AlphaTrajectory> = self
            .cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok())
            .filter_map(|r| r.alphas.get(block).cloned())
            .collect();
        if trajs.is_empty() {
            return Ok(None);
        }
        AlphaTrajectory::mean(&trajs).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub modes: Vec<FilterKind>,
    pub seeds: Vec<u64>,
    pub noise_level: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            modes: vec![
                FilterKind::None,
                FilterKind::Average,
                FilterKind::Gaussian,
                FilterKind::Learned,
            ],
            seeds: vec![1, 2, 3, 4, 5],
            noise_level: 0.5,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.len() < 2 {
            return Err(param_err!("compare needs at least 2 modes"));
        }
        if self.seeds.len() < 3 {
            return Err(param_err!("compare needs at least 3 seeds"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(param_err!("noise_level must be finite and non-negative"));
        }
        if self.model.classes != self.data.classes {
            return Err(param_err!(
                "model predicts {} classes but data has {}",
                self.model.classes,
                self.data.classes
            ));
        }
        for &mode in &self.modes {
            self.model.clone().with_smoothing(mode).validate()?;
        }
        self.train.validate()
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    mode: FilterKind,
    seed: u64,
    train_set: &[SynthSample],
    test_set: &[SynthSample],
    cancel: Option<&AtomicBool>,
) -> Result<(CellRun, bool)> {
    let model = ToyModel::new(cfg.model.clone().with_smoothing(mode), &Rng::new(seed))?;
    let param_count = model.param_count();
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = train(model, train_set, &train_cfg, cancel)?;
    let metrics = evaluate(&out.model, test_set)?;
    Ok((
        CellRun {
            metrics,
            sec_per_step: out.sec_per_step,
            losses: out.losses,
            alphas: out.alphas,
            param_count,
        },
        out.interrupted,
    ))
}

/// Runs all cells seed by seed. A failing cell is recorded and the run
/// continues; a cancelled run stops after the current cell.
pub fn compare_modes(cfg: &ExperimentConfig, cancel: Option<&AtomicBool>) -> Result<Comparison> {
    cfg.validate()?;
    let mut cells = Vec::with_capacity(cfg.modes.len() * cfg.seeds.len());
    let mut interrupted = false;
    'seeds: for &seed in &cfg.seeds {
        let (train_set, test_set) = seed_datasets(&cfg.data, cfg.noise_level, seed)?;
        for &mode in &cfg.modes {
            if cancel.is_some_and(|c| c.load(std::sync::atomic::Ordering::Relaxed)) {
                interrupted = true;
                break 'seeds;
            }
            let result = run_cell(cfg, mode, seed, &train_set, &test_set, cancel);
            let (outcome, cell_interrupted) = match result {
                Ok((run, stopped)) => (Ok(run), stopped),
                Err(e) => (Err(e.to_string()), false),
            };
            cells.push(Cell {
                mode,
                seed,
                outcome,
                interrupted: cell_interrupted,
            });
            if cell_interrupted {
                interrupted = true;
                break 'seeds;
            }
        }
    }
    // Rows grouped by mode, seeds in configured order.
    let mut ordered = Vec::with_capacity(cells.len());
    for &mode in &cfg.modes {
        ordered.extend(cells.iter().filter(|c| c.mode == mode).cloned());
    }
    Ok(Comparison {
        classes: cfg.data.classes,
        cells: ordered,
        interrupted,
    })
}
