//! Strict TOML run configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothconv::bench::{BenchConfig, Variant};
use smoothconv::segmentation::compare::{DataConfig, ExperimentConfig};
use smoothconv::segmentation::model::ModelConfig;
use smoothconv::segmentation::train::TrainConfig;
use smoothconv::FilterKind;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            samples: 100,
            height: 64,
            width: 64,
            classes: 4,
            noise_level: 0.5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub modes: Vec<FilterKind>,
    pub seeds: Vec<u64>,
    pub noise_level: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        ExperimentSection {
            modes: e.modes,
            seeds: e.seeds,
            noise_level: e.noise_level,
        }
    }
}

/// A stack of identical layers; smoothing size equals the dilation rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSection {
    pub layers: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    #[serde(default = "default_smoothing")]
    pub smoothing: FilterKind,
}

fn default_smoothing() -> FilterKind {
    FilterKind::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub stacks: Vec<StackSection>,
    /// Write ASCII dependency art for the centre pixel of each stack.
    pub art: bool,
    /// Square extent traced; 0 picks twice the stack span plus one.
    pub extent: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let stack = |r, smoothing| StackSection {
            layers: 2,
            kernel_size: 3,
            dilation: r,
            smoothing,
        };
        AnalysisSection {
            stacks: vec![
                stack(2, FilterKind::None),
                stack(2, FilterKind::Average),
                stack(3, FilterKind::None),
                stack(3, FilterKind::Average),
                stack(3, FilterKind::Gaussian),
            ],
            art: true,
            extent: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub tolerance: f64,
    /// Double the convolution weight gradient; a negative control.
    pub inject_fault: bool,
    pub seed: u64,
    pub extent: usize,
    pub modes: Vec<FilterKind>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            tolerance: 1e-4,
            inject_fault: false,
            seed: 1,
            extent: 12,
            modes: vec![
                FilterKind::None,
                FilterKind::Average,
                FilterKind::Gaussian,
                FilterKind::Learned,
                FilterKind::Aggregated,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub warmup: usize,
    pub steps: usize,
    pub seed: u64,
    pub train_samples: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            variants: b.variants,
            reps: b.reps,
            warmup: b.warmup,
            steps: b.steps,
            seed: b.seed,
            train_samples: b.data.train_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisSection,
    pub gradcheck: GradcheckSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            experiment: ExperimentSection::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            analysis: AnalysisSection::default(),
            gradcheck: GradcheckSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `key=value` overrides, and rejects unknown keys.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| {
                CliError::Config(format!("invalid config: {}", e.message()))
            })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        RunConfig::parse(&text, overrides)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            modes: self.experiment.modes.clone(),
            seeds: self.experiment.seeds.clone(),
            noise_level: self.experiment.noise_level,
            data: self.data.clone(),
            model: self.model.clone(),
            train: self.training.clone(),
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            variants: self.bench.variants.clone(),
            reps: self.bench.reps,
            warmup: self.bench.warmup,
            steps: self.bench.steps,
            noise_level: self.experiment.noise_level,
            seed: self.bench.seed,
            data: DataConfig {
                train_samples: self.bench.train_samples,
                test_samples: 1,
                ..self.data.clone()
            },
            model: self.model.clone(),
            train: self.training.clone(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Parse as a TOML value; bare words fall back to strings.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{item}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key '{key}' is malformed"
        )));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override '{key}': '{part}' is not a section"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
