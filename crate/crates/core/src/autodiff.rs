//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`GradTape`] as they are evaluated. A call
//! to [`GradTape::backward`] replays the recorded backward rules in reverse
//! order and returns the gradient of a scalar loss with respect to every
//! leaf that was created with `requires_grad`. Gradients of a value that
//! feeds several consumers are summed.

use crate::conv::{self, ConvSpec, SmoothingFilter};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        dilation: usize,
    },
    Depthwise {
        x: Var,
        v: Var,
    },
    Separable {
        x: Var,
        profile: Vec<f64>,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sum {
        a: Var,
    },
    ConvexMix {
        logits: Var,
        members: Vec<Var>,
        alphas: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Single owner during recording and backward.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    corrupt_conv_weight_grad: bool,
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative control for gradient checks: the convolution weight
    /// gradient rule returns twice its true value from now on.
    pub fn corrupt_conv_weight_grad(&mut self) {
        self.corrupt_conv_weight_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Dilated convolution; `w` has shape (out, in, K, K).
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let weights = conv::ConvWeights::new(wv.clone())?;
        let value = conv::dilated_conv2d(xv, &weights, spec)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                x,
                w,
                dilation: spec.dilation(),
            },
        ))
    }

    /// Per-channel smoothing with the (1, 1, s, s) kernel held in `v`.
    pub fn smooth(&mut self, x: Var, v: Var) -> Result<Var> {
        let vs = self.value(v).shape();
        if vs[0] != 1 || vs[1] != 1 || vs[2] != vs[3] || vs[2].is_multiple_of(2) {
            return Err(param_err!(
                "smoothing kernel must be (1, 1, s, s) with odd s, got {vs:?}"
            ));
        }
        let value = conv::depthwise_forward(self.value(x), self.value(v));
        let rg = self.needs(x) || self.needs(v);
        Ok(self.push(value, rg, Op::Depthwise { x, v }))
    }

    /// Per-channel smoothing with a fixed separable filter via two 1-D passes.
    pub fn smooth_separable(&mut self, x: Var, filter: &SmoothingFilter) -> Result<Var> {
        let value = conv::smooth_separable(self.value(x), filter)?;
        let profile = filter.profile().map(<[f64]>::to_vec).unwrap_or_default();
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::Separable { x, profile }))
    }

    /// Adds a per-channel bias of shape (1, C, 1, 1).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape() != [1, xv.channels(), 1, 1] {
            return Err(param_err!(
                "bias shape {:?} does not match {} channels",
                bv.shape(),
                xv.channels()
            ));
        }
        let mut value = xv.clone();
        for n in 0..xv.batch() {
            for c in 0..xv.channels() {
                let b = bv.data()[c];
                value.plane_mut(n, c).iter_mut().for_each(|v| *v += b);
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, rg, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// Sign pattern (`input > 0`) of every rectifier on the tape, in
    /// recording order. Two evaluations with equal patterns lie in the same
    /// linear piece of the rectifiers.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.needs(a);
        self.push(value, rg, Op::Scale { a, factor })
    }

    /// Sum of all elements, as a (1, 1, 1, 1) scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(value, rg, Op::Sum { a })
    }

    /// `sum_i softmax(logits)_i * members[i]`.
    pub fn convex_mix(&mut self, logits: Var, members: &[Var]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != members.len() || members.is_empty() {
            return Err(param_err!(
                "{} logits for {} mixture members",
                lv.len(),
                members.len()
            ));
        }
        let alphas = softmax(lv.data());
        let shape = self.value(members[0]).shape();
        let mut value = Tensor::zeros(shape);
        for (&m, &a) in members.iter().zip(&alphas) {
            value.axpy(a, self.value(m))?;
        }
        let rg = self.needs(logits) || members.iter().any(|&m| self.needs(m));
        Ok(self.push(
            value,
            rg,
            Op::ConvexMix {
                logits,
                members: members.to_vec(),
                alphas,
            },
        ))
    }

    /// Mean per-pixel softmax cross-entropy of (N, C, H, W) scores against
    /// `labels` laid out as (N, H, W).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, c, h, w] = lv.shape();
        if labels.len() != n * h * w {
            return Err(param_err!(
                "{} labels for {} pixels",
                labels.len(),
                n * h * w
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(param_err!("label {bad} out of range for {c} classes"));
        }
        let hw = h * w;
        let mut probs = Tensor::zeros(lv.shape());
        let mut total = 0.0;
        let mut scores = vec![0.0; c];
        for b in 0..n {
            for p in 0..hw {
                for (k, s) in scores.iter_mut().enumerate() {
                    *s = lv.data()[(b * c + k) * hw + p];
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let label = labels[b * hw + p];
                for (k, s) in scores.iter().enumerate() {
                    probs.data_mut()[(b * c + k) * hw + p] = s / denom;
                }
                total += denom.ln() - (lv.data()[(b * c + label) * hw + p] - max);
            }
        }
        let pixels = (n * hw).max(1) as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / pixels),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1, 1, 1] {
            return Err(param_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    Some(
                        grads[i]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros_like(&node.value)),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) -> Result<()> {
        if !self.needs(target) {
            return Ok(());
        }
        match &mut grads[target.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, dilation } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    self.accumulate(grads, *x, conv::conv_backward_input(g, wv, *dilation))?;
                }
                if self.needs(*w) {
                    let mut gw = conv::conv_backward_weight(g, xv, *dilation, wv.shape()[2]);
                    if self.corrupt_conv_weight_grad {
                        gw = gw.scale(2.0);
                    }
                    self.accumulate(grads, *w, gw)?;
                }
            }
            Op::Depthwise { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                if self.needs(*x) {
                    self.accumulate(grads, *x, conv::depthwise_backward_input(g, vv))?;
                }
                if self.needs(*v) {
                    let gv = conv::depthwise_backward_filter(g, xv, vv.shape()[2]);
                    self.accumulate(grads, *v, gv)?;
                }
            }
            Op::Separable { x, profile } => {
                let gx = if profile.is_empty() {
                    g.clone()
                } else {
                    conv::separable_adjoint(g, profile, profile)
                };
                self.accumulate(grads, *x, gx)?;
            }
            Op::AddBias { x, bias } => {
                if self.needs(*bias) {
                    let [n, c, _, _] = g.shape();
                    let mut gb = Tensor::zeros([1, c, 1, 1]);
                    for ch in 0..c {
                        gb.data_mut()[ch] =
                            (0..n).map(|b| g.plane(b, ch).iter().sum::<f64>()).sum();
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Relu { x } => {
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale { a, factor } => self.accumulate(grads, *a, g.scale(*factor))?,
            Op::Sum { a } => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv))?;
            }
            Op::ConvexMix {
                logits,
                members,
                alphas,
            } => {
                if self.needs(*logits) {
                    let inner: Vec<f64> = members
                        .iter()
                        .map(|&m| g.dot(self.value(m)))
                        .collect::<Result<_>>()?;
                    let mean: f64 = inner.iter().zip(alphas).map(|(d, a)| d * a).sum();
                    let gl: Vec<f64> = inner
                        .iter()
                        .zip(alphas)
                        .map(|(d, a)| a * (d - mean))
                        .collect();
                    let shape = self.value(*logits).shape();
                    self.accumulate(grads, *logits, Tensor::from_vec(shape, gl)?)?;
                }
                for (&m, &a) in members.iter().zip(alphas) {
                    if self.needs(m) {
                        self.accumulate(grads, m, g.scale(a))?;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let [n, c, h, w] = probs.shape();
                let hw = h * w;
                let scale = g.data()[0] / ((n * hw).max(1) as f64);
                let mut gl = probs.clone();
                for b in 0..n {
                    for p in 0..hw {
                        gl.data_mut()[(b * c + labels[b * hw + p]) * hw + p] -= 1.0;
                    }
                }
                gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Gradients returned by [`GradTape::backward`], one per trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` if `v` is not a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;
/// Multiple of `eps * |loss| / h` taken as the difference-quotient noise.
pub const FD_NOISE_FACTOR: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric value of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the probe moved a rectifier across zero.
    pub kinks: usize,
    /// Coordinates skipped because the difference quotient is too small to
    /// resolve at the requested tolerance above rounding noise.
    pub unresolved: usize,
    pub passed: bool,
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub params: Vec<ParamError>,
    pub passed: bool,
}

impl GradReport {
    pub fn failing(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// A scalar-valued function of named tensors, recorded on a tape.
pub trait Differentiable {
    /// Named parameters (and any inputs to be checked) at which to evaluate.
    fn parameters(&self) -> Vec<(String, Tensor)>;

    /// Records the loss given leaves for each entry of [`parameters`](Self::parameters).
    fn loss(&self, tape: &mut GradTape, params: &[Var]) -> Result<Var>;

    /// Hook for negative controls; called on the tape used for the analytic pass.
    fn prepare_tape(&self, _tape: &mut GradTape) {}
}

/// Blanket model built from a parameter list and a loss closure.
pub struct FnModel<F> {
    params: Vec<(String, Tensor)>,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    pub fn new(params: Vec<(String, Tensor)>, f: F) -> Self {
        FnModel { params, f }
    }
}

impl<F> Differentiable for FnModel<F>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.params.clone()
    }

    fn loss(&self, tape: &mut GradTape, params: &[Var]) -> Result<Var> {
        (self.f)(tape, params)
    }
}

fn evaluate(model: &dyn Differentiable, values: &[Tensor]) -> Result<(f64, Vec<bool>)> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
    let loss = model.loss(&mut tape, &vars)?;
    Ok((tape.value(loss).data()[0], tape.relu_pattern()))
}

/// Compares analytic gradients against central finite differences for every
/// parameter of `model`. Failures are reported, not returned as errors.
/// Coordinates whose probes change the rectifier sign pattern straddle a
/// kink, where no derivative exists; coordinates whose numeric derivative
/// times the tolerance falls below the rounding noise cannot be judged.
/// Both are skipped and counted; the decision never looks at the analytic
/// value. A parameter with no judged coordinate fails.
pub fn check_gradients(model: &dyn Differentiable, tolerance: f64) -> Result<GradReport> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(param_err!("tolerance must be positive"));
    }
    let named = model.parameters();
    let values: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = GradTape::new();
    model.prepare_tape(&mut tape);
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let loss = model.loss(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let (base_loss, base_pattern) = evaluate(model, &values)?;
    // Rounding noise of a central difference quotient at this loss level.
    let resolution = FD_NOISE_FACTOR * f64::EPSILON * base_loss.abs().max(1.0) / FD_STEP;
    let mut params = Vec::with_capacity(named.len());
    for (idx, (name, value)) in named.iter().enumerate() {
        let analytic = grads.get(vars[idx]).expect("leaf gradient");
        let mut probe = values.clone();
        let mut max_rel_error = 0.0f64;
        let mut worst = None;
        let (mut checked, mut kinks, mut unresolved) = (0, 0, 0);
        for i in 0..value.len() {
            let orig = value.data()[i];
            let mut eval_at = |offset: f64| -> Result<(f64, bool)> {
                probe[idx].data_mut()[i] = orig + offset;
                let (loss, pattern) = evaluate(model, &probe)?;
                probe[idx].data_mut()[i] = orig;
                Ok((loss, pattern == base_pattern))
            };
            let (plus, same_p) = eval_at(FD_STEP)?;
            let (minus, same_m) = eval_at(-FD_STEP)?;
            if !(same_p && same_m) {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if numeric.abs() * tolerance < resolution {
                unresolved += 1;
                continue;
            }
            checked += 1;
            let a = analytic.data()[i];
            let mut e = relative_error(a, numeric);
            if e.is_nan() {
                e = f64::INFINITY;
            }
            if worst.is_none() || e > max_rel_error {
                max_rel_error = e;
                worst = Some((i, a, numeric));
            }
        }
        params.push(ParamError {
            name: name.clone(),
            max_rel_error,
            worst,
            checked,
            kinks,
            unresolved,
            passed: checked > 0 && max_rel_error <= tolerance,
        });
    }
    let passed = params.iter().all(|p| p.passed);
    Ok(GradReport {
        tolerance,
        params,
        passed,
    })
}
