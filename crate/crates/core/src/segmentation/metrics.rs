//! Intersection-over-union accumulated over a whole evaluation set.

use serde::Serialize;

use super::data::SynthSample;
use super::model::{forward, ToyModel};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// `None` when a class appears in neither prediction nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Running confusion counts.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    actual: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            actual: vec![0; classes],
        }
    }

    pub fn add(&mut self, predicted: &[usize], actual: &[usize]) -> Result<()> {
        if predicted.len() != actual.len() {
            return Err(param_err!("prediction and label lengths differ"));
        }
        let c = self.intersection.len();
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= c || a >= c {
                return Err(param_err!("class id out of range"));
            }
            self.predicted[p] += 1;
            self.actual[a] += 1;
            if p == a {
                self.intersection[p] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        let per_class_iou: Vec<Option<f64>> = (0..self.intersection.len())
            .map(|c| {
                let union = self.predicted[c] + self.actual[c] - self.intersection[c];
                (union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Metrics {
            per_class_iou,
            miou,
        }
    }
}

/// Per-pixel argmax over channel scores, flattened in (n, h, w) order.
pub fn argmax_classes(scores: &Tensor) -> Vec<usize> {
    let [n, c, h, w] = scores.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..c {
                let v = scores.plane(b, k)[p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Evaluates on full images.
pub fn evaluate(model: &ToyModel, data: &[SynthSample]) -> Result<Metrics> {
    let mut acc = IouAccumulator::new(model.config().classes);
    for chunk in data.chunks(EVAL_CHUNK) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        if chunk.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(param_err!("evaluation images must share one extent"));
        }
        let mut images = Vec::with_capacity(chunk.len() * h * w);
        let mut labels = Vec::with_capacity(chunk.len() * h * w);
        for s in chunk {
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.labels);
        }
        let x = Tensor::from_vec([chunk.len(), 1, h, w], images)?;
        let scores = forward(model, &x)?;
        acc.add(&argmax_classes(&scores), &labels)?;
    }
    Ok(acc.finish())
}
