//! Per-step training time of each smoothing variant relative to no smoothing.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::FilterKind;
use crate::error::{param_err, Error, Result};
use crate::segmentation::compare::{seed_datasets, DataConfig};
use crate::segmentation::model::{ModelConfig, ToyModel};
use crate::segmentation::train::{TrainConfig, Trainer};
use crate::tensor::Rng;

pub const BENCH_CSV_HEADER: &str =
    "variant,median_ms,iqr_ms,overhead_pct,param_count,flops_per_step";
pub const MIN_MEASURED_STEPS: usize = 30;

/// A smoothing mode plus the execution path for fixed filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub smoothing: FilterKind,
    pub separable: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        smoothing: FilterKind::None,
        separable: false,
    };

    pub fn new(smoothing: FilterKind, separable: bool) -> Result<Self> {
        if separable && !smoothing.is_separable() {
            return Err(param_err!("{smoothing} filters have no separable path"));
        }
        Ok(Variant {
            smoothing,
            separable,
        })
    }

    pub fn is_baseline(&self) -> bool {
        self.smoothing == FilterKind::None
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            separable: self.separable,
            ..base.clone().with_smoothing(self.smoothing)
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.separable {
            write!(f, "{}-separable", self.smoothing.name())
        } else {
            f.write_str(self.smoothing.name())
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, separable) = match s.strip_suffix("-separable") {
            Some(base) => (base, true),
            None => (s, false),
        };
        let kind = match name {
            "none" => FilterKind::None,
            "average" => FilterKind::Average,
            "gaussian" => FilterKind::Gaussian,
            "learned" => FilterKind::Learned,
            "aggregated" => FilterKind::Aggregated,
            other => return Err(param_err!("unknown variant '{other}'")),
        };
        Variant::new(kind, separable)
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Forward-pass multiply-adds for one image of `extent` under `variant`.
pub fn flop_estimate(variant: Variant, model: &ModelConfig, extent: (usize, usize)) -> u64 {
    let hw = (extent.0 * extent.1) as u64;
    let (c, k) = (model.channels as u64, model.kernel_size as u64);
    let mut total = k * k * model.in_channels as u64 * c * hw;
    for &r in &model.dilations {
        total += k * k * c * c * hw;
        let s = r as u64;
        total += match variant.smoothing {
            FilterKind::None => 0,
            _ if variant.separable => 2 * s * c * hw,
            _ => s * s * c * hw,
        };
    }
    total + c * model.classes as u64 * hw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub warmup: usize,
    /// Measured steps per variant per repetition.
    pub steps: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: ["none", "average", "gaussian", "learned"]
                .iter()
                .map(|v| v.parse().expect("built-in variant"))
                .collect(),
            reps: 3,
            warmup: 5,
            steps: 100,
            noise_level: 0.5,
            seed: 1,
            data: DataConfig {
                train_samples: 16,
                test_samples: 1,
                ..DataConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(param_err!("no bench variants given"));
        }
        if !self.variants.iter().any(Variant::is_baseline) {
            return Err(param_err!(
                "bench variants must include the 'none' baseline"
            ));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(param_err!("variant '{v}' listed twice"));
            }
        }
        if self.reps == 0 {
            return Err(param_err!("reps must be at least 1"));
        }
        if self.steps < MIN_MEASURED_STEPS {
            return Err(param_err!(
                "at least {MIN_MEASURED_STEPS} measured steps are required"
            ));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub variant: Variant,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub steps: usize,
    pub warmup: usize,
    pub overhead_pct: f64,
    pub param_count: usize,
    pub flops_per_step: u64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    /// Sorted by median time, fastest first.
    pub results: Vec<BenchResult>,
    /// Per-repetition median in milliseconds, indexed `[rep][variant]` in
    /// configured variant order.
    pub rep_medians: Vec<Vec<f64>>,
    pub variants: Vec<Variant>,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

impl BenchReport {
    pub fn result(&self, variant: Variant) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.variant == variant)
    }

    /// Variant names ordered by median time within each repetition.
    pub fn rep_orderings(&self) -> Vec<Vec<Variant>> {
        self.rep_medians
            .iter()
            .map(|m| {
                let mut idx: Vec<usize> = (0..m.len()).collect();
                idx.sort_by(|&a, &b| m[a].total_cmp(&m[b]));
                idx.into_iter().map(|i| self.variants[i]).collect()
            })
            .collect()
    }

    /// Whether `slower` had a strictly larger median than `faster` in every
    /// repetition.
    pub fn slower_in_every_rep(&self, slower: Variant, faster: Variant) -> Option<bool> {
        let s = self.variants.iter().position(|&v| v == slower)?;
        let f = self.variants.iter().position(|&v| v == faster)?;
        Some(self.rep_medians.iter().all(|m| m[s] > m[f]))
    }

    /// Variant pairs whose relative order changed between repetitions.
    pub fn unstable_pairs(&self) -> Vec<(Variant, Variant)> {
        let n = self.variants.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let first = self.rep_medians[0][a] < self.rep_medians[0][b];
                if self.rep_medians.iter().any(|m| (m[a] < m[b]) != first) {
                    out.push((self.variants[a], self.variants[b]));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.2},{},{}",
                r.variant, r.median_ms, r.iqr_ms, r.overhead_pct, r.param_count, r.flops_per_step
            );
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>10} {:>9} {:>10} {:>8} {:>14}\n",
            "variant", "median_ms", "iqr_ms", "overhead%", "params", "flops/step"
        );
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<20} {:>10.3} {:>9.3} {:>10.2} {:>8} {:>14}",
                r.variant.to_string(),
                r.median_ms,
                r.iqr_ms,
                r.overhead_pct,
                r.param_count,
                r.flops_per_step
            );
        }
        for (i, order) in self.rep_orderings().iter().enumerate() {
            let names: Vec<String> = order.iter().map(Variant::to_string).collect();
            let _ = writeln!(out, "rep {i}: {}", names.join(" < "));
        }
        let unstable = self.unstable_pairs();
        if unstable.is_empty() {
            out.push_str("ordering stable across repetitions\n");
        } else {
            let pairs: Vec<String> = unstable.iter().map(|(a, b)| format!("{a}/{b}")).collect();
            let _ = writeln!(
                out,
                "order changed between repetitions for: {}",
                pairs.join(", ")
            );
        }
        out
    }
}

/// Times whole training steps. Within a repetition the variants take turns
/// step by step, so slow drifts in machine speed hit all of them alike.
pub fn bench_variants(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let (data, _) = seed_datasets(&cfg.data, cfg.noise_level, cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let models: Vec<ToyModel> = cfg
        .variants
        .iter()
        .map(|v| ToyModel::new(v.model_config(&cfg.model), &Rng::new(cfg.seed)))
        .collect::<Result<_>>()?;

    let nv = cfg.variants.len();
    let mut all_times: Vec<Vec<f64>> = vec![Vec::new(); nv];
    let mut rep_medians = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let mut trainers: Vec<Trainer> = models
            .iter()
            .map(|m| Trainer::new(m.clone(), &data, &train_cfg))
            .collect::<Result<_>>()?;
        let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.steps); nv];
        for step in 0..cfg.warmup + cfg.steps {
            for (t, trainer) in trainers.iter_mut().enumerate() {
                let start = Instant::now();
                trainer.step()?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if step >= cfg.warmup {
                    times[t].push(ms);
                }
            }
        }
        rep_medians.push(
            times
                .iter()
                .map(|t| quantile(&sorted(t.clone()), 0.5))
                .collect(),
        );
        for (all, t) in all_times.iter_mut().zip(times) {
            all.extend(t);
        }
    }

    let base_idx = cfg
        .variants
        .iter()
        .position(Variant::is_baseline)
        .expect("validated");
    let medians: Vec<f64> = all_times
        .iter()
        .map(|t| quantile(&sorted(t.clone()), 0.5))
        .collect();
    let extent = (cfg.train.crop_size, cfg.train.crop_size);
    let mut results: Vec<BenchResult> = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let s = sorted(all_times[i].clone());
            BenchResult {
                variant,
                median_ms: medians[i],
                iqr_ms: quantile(&s, 0.75) - quantile(&s, 0.25),
                steps: cfg.steps,
                warmup: cfg.warmup,
                overhead_pct: if i == base_idx {
                    0.0
                } else {
                    (medians[i] / medians[base_idx] - 1.0) * 100.0
                },
                param_count: models[i].param_count(),
                flops_per_step: flop_estimate(variant, &cfg.model, extent)
                    * cfg.train.batch_size as u64,
            }
        })
        .collect();
    results.sort_by(|a, b| a.median_ms.total_cmp(&b.median_ms));
    Ok(BenchReport {
        results,
        rep_medians,
        variants: cfg.variants.clone(),
    })
}
