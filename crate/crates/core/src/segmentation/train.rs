//! Momentum SGD on random crops with per-pixel cross-entropy.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::SynthSample;
use super::model::ToyModel;
use crate::aggregate::AlphaTrajectory;
use crate::autodiff::GradTape;
use crate::error::{param_err, Error, Result};
use crate::tensor::{Rng, Tensor};

const STREAM_BATCHES: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub crop_size: usize,
    /// Steps between recorded alpha samples.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            crop_size: 64,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err!("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param_err!("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.crop_size == 0 || self.log_interval == 0 {
            return Err(param_err!(
                "batch_size, crop_size and log_interval must be positive"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean training loss per completed step.
    pub losses: Vec<f64>,
    /// One trajectory per aggregated block; empty for other modes.
    pub alphas: Vec<AlphaTrajectory>,
    pub steps_completed: usize,
    pub sec_per_step: f64,
    pub interrupted: bool,
}

/// Stacks `(sample, top, left)` crops into an input batch and flat labels.
pub fn crop_batch(
    data: &[SynthSample],
    picks: &[(usize, usize, usize)],
    crop: usize,
) -> (Tensor, Vec<usize>) {
    let mut images = Vec::with_capacity(picks.len() * crop * crop);
    let mut labels = Vec::with_capacity(picks.len() * crop * crop);
    for &(idx, top, left) in picks {
        let s = &data[idx];
        let w = s.width();
        let plane = s.image.plane(0, 0);
        for i in top..top + crop {
            images.extend_from_slice(&plane[i * w + left..i * w + left + crop]);
            labels.extend_from_slice(&s.labels[i * w + left..i * w + left + crop]);
        }
    }
    let x = Tensor::from_vec([picks.len(), 1, crop, crop], images).expect("crop sizes agree");
    (x, labels)
}

fn sample_picks(
    data: &[SynthSample],
    batch: usize,
    crop: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize, usize)> {
    (0..batch)
        .map(|_| {
            let idx = rng.below(0, data.len());
            let s = &data[idx];
            let top = rng.below(0, s.height() - crop + 1);
            let left = rng.below(0, s.width() - crop + 1);
            (idx, top, left)
        })
        .collect()
}

/// Single-step driver shared by [`train`] and the benchmark harness.
pub struct Trainer<'a> {
    model: ToyModel,
    data: &'a [SynthSample],
    cfg: TrainConfig,
    rng: Rng,
    velocity: Vec<Tensor>,
    steps_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ToyModel, data: &'a [SynthSample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(param_err!("training set is empty"));
        }
        if data
            .iter()
            .any(|s| s.height() < cfg.crop_size || s.width() < cfg.crop_size)
        {
            return Err(param_err!(
                "crop_size {} exceeds an image extent",
                cfg.crop_size
            ));
        }
        let velocity = model
            .parameters()
            .into_iter()
            .map(Tensor::zeros_like)
            .collect();
        Ok(Trainer {
            model,
            data,
            cfg: cfg.clone(),
            rng: Rng::new(cfg.seed).fork(STREAM_BATCHES),
            velocity,
            steps_done: 0,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// One forward, backward and momentum update; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.steps_done;
        let picks = sample_picks(
            self.data,
            self.cfg.batch_size,
            self.cfg.crop_size,
            &mut self.rng,
        );
        let (x, labels) = crop_batch(self.data, &picks, self.cfg.crop_size);

        let mut tape = GradTape::new();
        let input = tape.constant(x);
        let (scores, params) = self.model.record(&mut tape, input)?;
        let loss_var = tape.softmax_cross_entropy(scores, &labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = tape.backward(loss_var)?;

        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        let params_mut = self.model.parameters_mut();
        for ((p, v), var) in params_mut
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&params.0)
        {
            let g = grads.take(*var).expect("parameter gradient");
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: f64::NAN,
                });
            }
            v.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(v, &g)| *v = mu * *v + g);
            p.axpy(-lr, v)?;
        }
        self.steps_done += 1;
        Ok(loss)
    }
}

fn record_alphas(model: &ToyModel, alphas: &mut [AlphaTrajectory], step: usize) -> Result<()> {
    for (traj, agg) in alphas.iter_mut().zip(model.aggregated_filters()) {
        traj.record(agg, step)?;
    }
    Ok(())
}

/// Trains `model` and returns it with the loss curve.
/// Setting `cancel` stops before the next step with `interrupted` set.
pub fn train(
    model: ToyModel,
    data: &[SynthSample],
    cfg: &TrainConfig,
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, cfg)?;
    let mut alphas: Vec<AlphaTrajectory> = trainer
        .model()
        .aggregated_filters()
        .iter()
        .map(|_| AlphaTrajectory::new())
        .collect();
    record_alphas(trainer.model(), &mut alphas, 0)?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut interrupted = false;
    let start = Instant::now();
    for step in 0..cfg.steps {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            interrupted = true;
            break;
        }
        losses.push(trainer.step()?);
        if (step + 1) % cfg.log_interval == 0 {
            record_alphas(trainer.model(), &mut alphas, step + 1)?;
        }
    }
    let steps_completed = losses.len();
    let sec_per_step = if steps_completed == 0 {
        0.0
    } else {
        start.elapsed().as_secs_f64() / steps_completed as f64
    };
    Ok(TrainOutcome {
        model: trainer.into_model(),
        losses,
        alphas,
        steps_completed,
        sec_per_step,
        interrupted,
    })
}
