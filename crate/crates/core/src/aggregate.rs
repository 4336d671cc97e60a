//! Convex combination of smoothing filters with trainable coefficients.
//!
//! The realized kernel is
//! `alpha_ave * v_ave + alpha_gauss * v_gauss + alpha_learned * v_learned + alpha_none * delta`
//! with `alpha = softmax(logits)`, so the coefficients stay on the simplex
//! under unconstrained gradient updates of the logits.

use std::io::Write;

use crate::autodiff::{softmax, GradTape, Var};
use crate::conv::{build_smoothing_filter, FilterKind, SmoothingFilter};
use crate::error::{param_err, Result};
use crate::tensor::{Rng, Tensor};

/// Member order used for logits, alphas and CSV columns.
pub const MEMBERS: [FilterKind; 4] = [
    FilterKind::Average,
    FilterKind::Gaussian,
    FilterKind::Learned,
    FilterKind::None,
];

pub const TRAJECTORY_HEADER: &str = "step,alpha_ave,alpha_gauss,alpha_learned,alpha_none";

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFilter {
    logits: Tensor,
    average: SmoothingFilter,
    gaussian: SmoothingFilter,
    learned: Tensor,
    delta: SmoothingFilter,
}

impl AggregatedFilter {
    /// Builds all members for dilation `r` and starts from uniform alphas.
    pub fn new(dilation: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        let average = build_smoothing_filter(FilterKind::Average, dilation, None, None)?;
        let gaussian = build_smoothing_filter(FilterKind::Gaussian, dilation, Some(sigma), None)?;
        let learned = build_smoothing_filter(FilterKind::Learned, dilation, None, Some(rng))?;
        let delta = build_smoothing_filter(FilterKind::None, dilation, None, None)?;
        Ok(AggregatedFilter {
            logits: Tensor::zeros([1, 1, 1, 4]),
            average,
            gaussian,
            learned: learned.weights().clone(),
            delta,
        })
    }

    pub fn size(&self) -> usize {
        self.delta.size()
    }

    pub fn sigma(&self) -> Option<f64> {
        self.gaussian.sigma()
    }

    /// Current coefficients in [`MEMBERS`] order.
    pub fn alphas(&self) -> [f64; 4] {
        let a = softmax(self.logits.data());
        [a[0], a[1], a[2], a[3]]
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn learned_weights(&self) -> &Tensor {
        &self.learned
    }

    /// Mutable logits and learned member together.
    pub fn trainable_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.logits, &mut self.learned)
    }

    pub fn learned_weights_mut(&mut self) -> &mut Tensor {
        &mut self.learned
    }

    /// Member kernels in [`MEMBERS`] order.
    pub fn member_kernels(&self) -> [&Tensor; 4] {
        [
            self.average.weights(),
            self.gaussian.weights(),
            &self.learned,
            self.delta.weights(),
        ]
    }

    /// The α-weighted kernel as a standalone filter.
    pub fn realize(&self) -> SmoothingFilter {
        let alphas = self.alphas();
        let mut kernel = Tensor::zeros(self.learned.shape());
        for (m, a) in self.member_kernels().into_iter().zip(alphas) {
            kernel.axpy(a, m).expect("members share a shape");
        }
        SmoothingFilter::from_weights(FilterKind::Aggregated, kernel, true)
            .expect("members have odd square shape")
    }

    /// Records the realization on `tape` with trainable logits and learned
    /// member. Returns `(kernel, logits, learned)`.
    pub fn record(&self, tape: &mut GradTape) -> Result<(Var, Var, Var)> {
        let logits = tape.param(self.logits.clone());
        let learned = tape.param(self.learned.clone());
        let kernel = self.record_with(tape, logits, learned)?;
        Ok((kernel, logits, learned))
    }

    /// Mixes the fixed members with caller-supplied logits and learned leaves.
    pub fn record_with(&self, tape: &mut GradTape, logits: Var, learned: Var) -> Result<Var> {
        let average = tape.constant(self.average.weights().clone());
        let gaussian = tape.constant(self.gaussian.weights().clone());
        let delta = tape.constant(self.delta.weights().clone());
        tape.convex_mix(logits, &[average, gaussian, learned, delta])
    }
}

/// Coefficient samples over training, one per logging step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlphaTrajectory {
    samples: Vec<(usize, [f64; 4])>,
}

impl AlphaTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self) -> &[(usize, [f64; 4])] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends the current alphas of `agg` at `step`; steps must increase.
    pub fn record(&mut self, agg: &AggregatedFilter, step: usize) -> Result<()> {
        self.push(step, agg.alphas())
    }

    fn push(&mut self, step: usize, alphas: [f64; 4]) -> Result<()> {
        if let Some(&(last, _)) = self.samples.last() {
            if step <= last {
                return Err(param_err!(
                    "trajectory steps must increase: {step} after {last}"
                ));
            }
        }
        self.samples.push((step, alphas));
        Ok(())
    }

    /// Elementwise mean of several trajectories sampled at the same steps.
    pub fn mean(trajectories: &[AlphaTrajectory]) -> Result<AlphaTrajectory> {
        let Some(first) = trajectories.first() else {
            return Ok(AlphaTrajectory::new());
        };
        let mut out = AlphaTrajectory::new();
        for (i, &(step, _)) in first.samples.iter().enumerate() {
            let mut acc = [0.0; 4];
            for t in trajectories {
                let (s, a) = t
                    .samples
                    .get(i)
                    .ok_or_else(|| param_err!("trajectories have different lengths"))?;
                if *s != step {
                    return Err(param_err!("trajectories sampled at different steps"));
                }
                for k in 0..4 {
                    acc[k] += a[k];
                }
            }
            if trajectories.iter().any(|t| t.len() != first.len()) {
                return Err(param_err!("trajectories have different lengths"));
            }
            let n = trajectories.len() as f64;
            out.push(step, acc.map(|v| v / n))?;
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        for (step, a) in &self.samples {
            writeln!(out, "{step},{},{},{},{}", a[0], a[1], a[2], a[3])?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Appends the current alphas of `agg` at `step` to `traj`.
pub fn record_alphas(
    agg: &AggregatedFilter,
    step: usize,
    traj: &mut AlphaTrajectory,
) -> Result<()> {
    traj.record(agg, step)
}
