//! Small dilated network: 3x3 stem, smoothed dilated blocks, 1x1 classifier.

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatedFilter;
use crate::autodiff::{Differentiable, GradTape, Var};
use crate::conv::{build_smoothing_filter, ConvSpec, FilterKind, SmoothingFilter};
use crate::error::{param_err, Result};
use crate::tensor::{Rng, Tensor};

const STREAM_STEM: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_BLOCK: u64 = 100;
const STREAM_FILTER: u64 = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub classes: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub smoothing: FilterKind,
    pub sigma: f64,
    /// Run fixed average/Gaussian filters as two 1-D passes.
    pub separable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            channels: 8,
            classes: 4,
            kernel_size: 3,
            dilations: vec![3, 3, 5],
            smoothing: FilterKind::None,
            sigma: 1.0,
            separable: false,
        }
    }
}

impl ModelConfig {
    pub fn with_smoothing(mut self, smoothing: FilterKind) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 {
            return Err(param_err!("channel counts must be positive"));
        }
        if self.classes < 2 {
            return Err(param_err!("need at least 2 classes"));
        }
        if self.dilations.is_empty() {
            return Err(param_err!("need at least one dilated block"));
        }
        ConvSpec::new(self.kernel_size, 1)?;
        for &r in &self.dilations {
            ConvSpec::new(self.kernel_size, r)?;
            if self.smoothing != FilterKind::None && r % 2 == 0 {
                return Err(param_err!(
                    "smoothed blocks need odd dilation rates, got {r}"
                ));
            }
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(param_err!("sigma must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum BlockSmoothing {
    None,
    Fixed(SmoothingFilter),
    Learned(Tensor),
    Aggregated(AggregatedFilter),
}

impl BlockSmoothing {
    fn trainable_count(&self) -> usize {
        match self {
            BlockSmoothing::None | BlockSmoothing::Fixed(_) => 0,
            BlockSmoothing::Learned(v) => v.len(),
            BlockSmoothing::Aggregated(a) => a.logits().len() + a.learned_weights().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: ConvSpec,
    pub smoothing: BlockSmoothing,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    stem_weight: Tensor,
    stem_bias: Tensor,
    blocks: Vec<Block>,
    head_weight: Tensor,
    head_bias: Tensor,
}

fn he_uniform(shape: [usize; 4], rng: &mut Rng) -> Result<Tensor> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::random_uniform(shape, -bound, bound, rng)
}

/// Trainable parameters recorded on a tape, in [`ToyModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct RecordedParams(pub Vec<Var>);

impl ToyModel {
    /// Builds the network. Convolution weights depend only on the seed of
    /// `rng`, so models that differ only in smoothing share them.
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel_size);
        let stem_weight = he_uniform([c, config.in_channels, k, k], &mut rng.fork(STREAM_STEM))?;
        let head_weight = he_uniform([config.classes, c, 1, 1], &mut rng.fork(STREAM_HEAD))?;
        let mut blocks = Vec::with_capacity(config.dilations.len());
        for (i, &r) in config.dilations.iter().enumerate() {
            let spec = ConvSpec::new(k, r)?;
            let weight = he_uniform([c, c, k, k], &mut rng.fork(STREAM_BLOCK + i as u64))?;
            let mut filter_rng = rng.fork(STREAM_FILTER + i as u64);
            let smoothing = match config.smoothing {
                FilterKind::None => BlockSmoothing::None,
                kind @ (FilterKind::Average | FilterKind::Gaussian) => BlockSmoothing::Fixed(
                    build_smoothing_filter(kind, r, Some(config.sigma), None)?,
                ),
                FilterKind::Learned => BlockSmoothing::Learned(
                    build_smoothing_filter(FilterKind::Learned, r, None, Some(&mut filter_rng))?
                        .weights()
                        .clone(),
                ),
                FilterKind::Aggregated => BlockSmoothing::Aggregated(AggregatedFilter::new(
                    r,
                    config.sigma,
                    &mut filter_rng,
                )?),
            };
            blocks.push(Block {
                spec,
                smoothing,
                weight,
                bias: Tensor::zeros([1, c, 1, 1]),
            });
        }
        Ok(ToyModel {
            stem_bias: Tensor::zeros([1, c, 1, 1]),
            head_bias: Tensor::zeros([1, config.classes, 1, 1]),
            config,
            stem_weight,
            blocks,
            head_weight,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn aggregated_filters(&self) -> Vec<&AggregatedFilter> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.smoothing {
                BlockSmoothing::Aggregated(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem_weight, &self.stem_bias];
        for b in &self.blocks {
            match &b.smoothing {
                BlockSmoothing::Learned(v) => out.push(v),
                BlockSmoothing::Aggregated(a) => {
                    out.push(a.logits());
                    out.push(a.learned_weights());
                }
                _ => {}
            }
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem_weight, &mut self.stem_bias];
        for b in &mut self.blocks {
            match &mut b.smoothing {
                BlockSmoothing::Learned(v) => out.push(v),
                BlockSmoothing::Aggregated(a) => {
                    let (logits, learned) = a.trainable_mut();
                    out.push(logits);
                    out.push(learned);
                }
                _ => {}
            }
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Names matching [`parameters`](Self::parameters).
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = vec!["stem.weight".to_string(), "stem.bias".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            match &b.smoothing {
                BlockSmoothing::Learned(_) => out.push(format!("block{i}.filter")),
                BlockSmoothing::Aggregated(_) => {
                    out.push(format!("block{i}.logits"));
                    out.push(format!("block{i}.learned"));
                }
                _ => {}
            }
            out.push(format!("block{i}.weight"));
            out.push(format!("block{i}.bias"));
        }
        out.push("head.weight".to_string());
        out.push("head.bias".to_string());
        out
    }

    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Trainable scalars added by smoothing filters.
    pub fn smoothing_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.smoothing.trainable_count())
            .sum()
    }

    /// Records the forward pass on `tape` with fresh parameter leaves;
    /// returns class scores and the leaves in [`parameters`](Self::parameters) order.
    pub fn record(&self, tape: &mut GradTape, input: Var) -> Result<(Var, RecordedParams)> {
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let out = self.record_with(tape, input, &params)?;
        Ok((out, RecordedParams(params)))
    }

    /// Records the forward pass using caller-supplied parameter vars, in
    /// [`parameters`](Self::parameters) order.
    pub fn record_with(&self, tape: &mut GradTape, input: Var, params: &[Var]) -> Result<Var> {
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(param_err!(
                "expected {expected} parameter vars, got {}",
                params.len()
            ));
        }
        let in_c = tape.value(input).channels();
        if in_c != self.config.in_channels {
            return Err(param_err!(
                "model expects {} input channels, got {in_c}",
                self.config.in_channels
            ));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter count checked");

        let stem_spec = ConvSpec::new(self.config.kernel_size, 1)?;
        let (sw, sb) = (take(), take());
        let mut h = tape.conv2d(input, sw, &stem_spec)?;
        h = tape.add_bias(h, sb)?;
        h = tape.relu(h);

        for b in &self.blocks {
            h = match &b.smoothing {
                BlockSmoothing::None => h,
                BlockSmoothing::Fixed(f) => {
                    if self.config.separable {
                        tape.smooth_separable(h, f)?
                    } else {
                        let v = tape.constant(f.weights().clone());
                        tape.smooth(h, v)?
                    }
                }
                BlockSmoothing::Learned(_) => {
                    let v = take();
                    tape.smooth(h, v)?
                }
                BlockSmoothing::Aggregated(a) => {
                    let (logits, learned) = (take(), take());
                    let v = a.record_with(tape, logits, learned)?;
                    tape.smooth(h, v)?
                }
            };
            let (w, bias) = (take(), take());
            h = tape.conv2d(h, w, &b.spec)?;
            h = tape.add_bias(h, bias)?;
            h = tape.relu(h);
        }

        let (hw, hb) = (take(), take());
        let out = tape.conv2d(h, hw, &ConvSpec::new(1, 1)?)?;
        tape.add_bias(out, hb)
    }
}

/// Per-pixel class scores (N, classes, H, W) for a batch.
pub fn forward(model: &ToyModel, batch: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let x = tape.constant(batch.clone());
    let (out, _) = model.record(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Mean cross-entropy of a model on a fixed batch, with the batch input
/// included as a differentiable quantity named `input`.
pub struct ModelLoss {
    pub model: ToyModel,
    pub input: Tensor,
    pub labels: Vec<usize>,
    /// Installs the doubled convolution weight gradient on every tape.
    pub corrupt: bool,
}

impl Differentiable for ModelLoss {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .parameter_names()
            .into_iter()
            .zip(self.model.parameters())
            .map(|(n, t)| (n, t.clone()))
            .collect();
        out.push(("input".to_string(), self.input.clone()));
        out
    }

    fn loss(&self, tape: &mut GradTape, params: &[Var]) -> Result<Var> {
        let (input, weights) = params
            .split_last()
            .ok_or_else(|| param_err!("no parameters"))?;
        let out = self.model.record_with(tape, *input, weights)?;
        tape.softmax_cross_entropy(out, &self.labels)
    }

    fn prepare_tape(&self, tape: &mut GradTape) {
        if self.corrupt {
            tape.corrupt_conv_weight_grad();
        }
    }
}
