//! Dilated and smoothed dilated 2-D convolutions.
//!
//! All convolutions here are true convolutions with zero "same" padding and
//! unit stride:
//!
//! ```text
//! y[co, i, j] = sum_ci sum_a sum_b x[ci, i - r(a - c), j - r(b - c)] w[co, ci, a, b]
//! ```
//!
//! with `c = (K - 1) / 2` the kernel centre. A smoothing filter `v` of odd
//! size `s` is applied to every channel independently before the dilated
//! convolution, so each dilated tap reads a filtered neighbourhood instead
//! of a single pixel.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

/// Padding policy. Only zero "same" padding is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    ZeroSame,
}

/// Kernel size, dilation rate and padding of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    kernel_size: usize,
    dilation: usize,
    padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, dilation: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(param_err!(
                "kernel size must be odd and positive, got {kernel_size}"
            ));
        }
        if dilation == 0 {
            return Err(param_err!("dilation rate must be positive"));
        }
        Ok(ConvSpec {
            kernel_size,
            dilation,
            padding: Padding::ZeroSame,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// Receptive span per axis, `(K - 1) * r + 1`.
    pub fn span(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }
}

/// Convolution kernel of shape (out, in, K, K).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights(Tensor);

impl ConvWeights {
    pub fn new(kernel: Tensor) -> Result<Self> {
        let [o, i, kh, kw] = kernel.shape();
        if o == 0 || i == 0 {
            return Err(param_err!("conv weights need positive channel counts"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(param_err!(
                "conv kernel must be square and odd, got {kh}x{kw}"
            ));
        }
        Ok(ConvWeights(kernel))
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize) -> Result<Self> {
        Self::new(Tensor::zeros([
            out_channels,
            in_channels,
            kernel_size,
            kernel_size,
        ]))
    }

    /// Kernel with a single unit weight at `(co, ci, a, b)`.
    pub fn one_hot(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        at: [usize; 4],
    ) -> Result<Self> {
        let mut w = Self::zeros(out_channels, in_channels, kernel_size)?;
        w.0.set(at[0], at[1], at[2], at[3], 1.0);
        Ok(w)
    }

    pub fn out_channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn get(&self, co: usize, ci: usize, a: usize, b: usize) -> f64 {
        self.0.get(co, ci, a, b)
    }
}

/// Kind of smoothing filter placed in front of a dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    None,
    Average,
    Gaussian,
    Learned,
    Aggregated,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::Average => "average",
            FilterKind::Gaussian => "gaussian",
            FilterKind::Learned => "learned",
            FilterKind::Aggregated => "aggregated",
        }
    }

    /// Whether the realized kernel is an outer product of 1-D profiles.
    pub fn is_separable(self) -> bool {
        matches!(
            self,
            FilterKind::None | FilterKind::Average | FilterKind::Gaussian
        )
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A realized square smoothing filter of odd size `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingFilter {
    kind: FilterKind,
    sigma: Option<f64>,
    /// Shape (1, 1, s, s).
    weights: Tensor,
    /// 1-D profile `p` with `weights[a][b] = p[a] * p[b]`, for separable kinds.
    profile: Option<Vec<f64>>,
    trainable: bool,
}

impl SmoothingFilter {
    /// Wraps an arbitrary s×s kernel. Used for learned and aggregated filters.
    pub fn from_weights(kind: FilterKind, weights: Tensor, trainable: bool) -> Result<Self> {
        let [n, c, h, w] = weights.shape();
        if n != 1 || c != 1 || h != w || h % 2 == 0 {
            return Err(param_err!(
                "smoothing weights must have shape (1, 1, s, s) with odd s, got {:?}",
                weights.shape()
            ));
        }
        Ok(SmoothingFilter {
            kind,
            sigma: None,
            weights,
            profile: None,
            trainable,
        })
    }

    /// The discrete delta of size `s`.
    pub fn delta(size: usize) -> Result<Self> {
        check_odd_size(size)?;
        let mut profile = vec![0.0; size];
        profile[size / 2] = 1.0;
        let mut weights = Tensor::zeros([1, 1, size, size]);
        weights.set(0, 0, size / 2, size / 2, 1.0);
        Ok(SmoothingFilter {
            kind: FilterKind::None,
            sigma: None,
            weights,
            profile: Some(profile),
            trainable: false,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights.get(0, 0, a, b)
    }

    pub fn profile(&self) -> Option<&[f64]> {
        self.profile.as_deref()
    }
}

fn check_odd_size(size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(param_err!(
            "smoothing filter size must be odd and positive, got {size}"
        ));
    }
    Ok(())
}

/// 1-D Gaussian profile whose outer product is the 2-D density
/// `exp(-(x^2 + y^2) / (2 sigma^2)) / (2 pi sigma^2)`.
fn gaussian_profile(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    (-half..=half)
        .map(|x| {
            let x = x as f64;
            (-(x * x) / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma)
        })
        .collect()
}

/// Builds the smoothing filter of the given kind for dilation rate `r`.
///
/// The filter size equals `r`, which must be odd. Average weights are
/// `1/r^2` over the full r×r support; Gaussian weights are the raw density
/// values without renormalization; Learned weights are drawn uniformly from
/// `[-1/r, 1/r)`.
pub fn build_smoothing_filter(
    kind: FilterKind,
    dilation: usize,
    sigma: Option<f64>,
    rng: Option<&mut Rng>,
) -> Result<SmoothingFilter> {
    if dilation == 0 || dilation.is_multiple_of(2) {
        return Err(param_err!(
            "smoothing filters need an odd dilation rate, got {dilation}"
        ));
    }
    let s = dilation;
    let half = (s / 2) as isize;
    match kind {
        FilterKind::None => SmoothingFilter::delta(s),
        FilterKind::Average => {
            let value = 1.0 / (s * s) as f64;
            Ok(SmoothingFilter {
                kind,
                sigma: None,
                weights: Tensor::full([1, 1, s, s], value),
                profile: Some(vec![1.0 / s as f64; s]),
                trainable: false,
            })
        }
        FilterKind::Gaussian => {
            let sigma = match sigma {
                Some(v) if v > 0.0 && v.is_finite() => v,
                Some(v) => return Err(param_err!("gaussian sigma must be positive, got {v}")),
                None => return Err(param_err!("gaussian filter requires sigma")),
            };
            let norm = 1.0 / (2.0 * PI * sigma * sigma);
            let mut data = Vec::with_capacity(s * s);
            for y in -half..=half {
                for x in -half..=half {
                    let r2 = (x * x + y * y) as f64;
                    data.push(norm * (-r2 / (2.0 * sigma * sigma)).exp());
                }
            }
            Ok(SmoothingFilter {
                kind,
                sigma: Some(sigma),
                weights: Tensor::from_vec([1, 1, s, s], data)?,
                profile: Some(gaussian_profile(s, sigma)),
                trainable: false,
            })
        }
        FilterKind::Learned => {
            let rng = rng.ok_or_else(|| param_err!("learned filter requires an rng"))?;
            let bound = 1.0 / s as f64;
            let weights = Tensor::random_uniform([1, 1, s, s], -bound, bound, rng)?;
            SmoothingFilter::from_weights(FilterKind::Learned, weights, true)
        }
        FilterKind::Aggregated => Err(param_err!(
            "aggregated filters are realized from an AggregatedFilter"
        )),
    }
}

// ---------------------------------------------------------------------------
// Plane-level primitives. Offsets follow the convolution convention: the
// input read for output (i, j) is (i - dy, j - dx).

#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = d.max(0) as usize;
    let hi = (len as isize + d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `out[i, j] += weight * inp[i - dy, j - dx]` over in-bounds positions.
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    weight: f64,
    dy: isize,
    dx: isize,
) {
    let (r0, r1) = valid_range(h, dy);
    let (c0, c1) = valid_range(w, dx);
    if c0 >= c1 {
        return;
    }
    for i in r0..r1 {
        let src = ((i as isize - dy) as usize) * w;
        let o = &mut out[i * w + c0..i * w + c1];
        let s0 = (src as isize + c0 as isize - dx) as usize;
        let x = &inp[s0..s0 + (c1 - c0)];
        for (o, &x) in o.iter_mut().zip(x) {
            *o += weight * x;
        }
    }
}

/// `out[i, j] += sum_t w_t * inp[i - dy, j - dx_t]` for one row offset and
/// several column taps. Taps are added per pixel in the given order, so the
/// result is bit-identical to one [`accumulate_shifted`] call per tap.
fn accumulate_taps(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    taps: &[(f64, isize)],
) {
    let (r0, r1) = valid_range(h, dy);
    let wi = w as isize;
    let lo = taps.iter().map(|t| t.1.max(0)).max().unwrap_or(0).min(wi) as usize;
    let hi = (wi + taps.iter().map(|t| t.1.min(0)).min().unwrap_or(0)).max(lo as isize) as usize;
    for i in r0..r1 {
        let o = &mut out[i * w..(i + 1) * w];
        let src = (i as isize - dy) as usize * w;
        let x = &inp[src..src + w];
        for j in (0..lo).chain(hi..w) {
            let mut v = o[j];
            for &(wt, dx) in taps {
                let s = j as isize - dx;
                if (0..wi).contains(&s) {
                    v += wt * x[s as usize];
                }
            }
            o[j] = v;
        }
        if lo >= hi {
            continue;
        }
        let span = |dx: isize| &x[(lo as isize - dx) as usize..(hi as isize - dx) as usize];
        let o = &mut o[lo..hi];
        match *taps {
            [(w0, d0), (w1, d1), (w2, d2)] => {
                for (((o, &a), &b), &c) in o.iter_mut().zip(span(d0)).zip(span(d1)).zip(span(d2)) {
                    let mut v = *o;
                    v += w0 * a;
                    v += w1 * b;
                    v += w2 * c;
                    *o = v;
                }
            }
            _ => {
                for &(wt, dx) in taps {
                    for (o, &a) in o.iter_mut().zip(span(dx)) {
                        *o += wt * a;
                    }
                }
            }
        }
    }
}

/// `sum_{i,j} g[i, j] * inp[i - dy, j - dx]` over in-bounds positions.
#[inline]
fn shifted_dot(g: &[f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (r0, r1) = valid_range(h, dy);
    let (c0, c1) = valid_range(w, dx);
    if c0 >= c1 {
        return 0.0;
    }
    let mut acc = [0.0f64; 8];
    let mut tail = 0.0;
    for i in r0..r1 {
        let src = ((i as isize - dy) as usize) * w;
        let a = &g[i * w + c0..i * w + c1];
        let s0 = (src as isize + c0 as isize - dx) as usize;
        let b = &inp[s0..s0 + (c1 - c0)];
        let mut ac = a.chunks_exact(8);
        let mut bc = b.chunks_exact(8);
        for (x, y) in (&mut ac).zip(&mut bc) {
            for k in 0..8 {
                acc[k] += x[k] * y[k];
            }
        }
        for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
            tail += x * y;
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn tap_offset(index: usize, center: usize, dilation: usize) -> isize {
    (index as isize - center as isize) * dilation as isize
}

/// Dilated convolution of `x` (N, I, H, W) with `kernel` (O, I, K, K).
///
/// Each output pixel accumulates in (input channel, row tap, column tap)
/// order, so the result is independent of how the work is split.
pub(crate) fn conv_forward(x: &Tensor, kernel: &Tensor, dilation: usize) -> Tensor {
    let [n, ci_n, h, w] = x.shape();
    let [co_n, _, k, _] = kernel.shape();
    let c = k / 2;
    let mut out = Tensor::zeros([n, co_n, h, w]);
    let mut taps = Vec::with_capacity(k);
    for b in 0..n {
        for co in 0..co_n {
            let o = out.plane_mut(b, co);
            for ci in 0..ci_n {
                let xp = x.plane(b, ci);
                for ky in 0..k {
                    let dy = tap_offset(ky, c, dilation);
                    taps.clear();
                    taps.extend(
                        (0..k).map(|kx| (kernel.get(co, ci, ky, kx), tap_offset(kx, c, dilation))),
                    );
                    accumulate_taps(o, xp, h, w, dy, &taps);
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to the input.
pub(crate) fn conv_backward_input(grad: &Tensor, kernel: &Tensor, dilation: usize) -> Tensor {
    let [n, co_n, h, w] = grad.shape();
    let [_, ci_n, k, _] = kernel.shape();
    let c = k / 2;
    let mut out = Tensor::zeros([n, ci_n, h, w]);
    let mut taps = Vec::with_capacity(k);
    for b in 0..n {
        for ci in 0..ci_n {
            let o = out.plane_mut(b, ci);
            for co in 0..co_n {
                let gp = grad.plane(b, co);
                for ky in 0..k {
                    let dy = tap_offset(ky, c, dilation);
                    taps.clear();
                    taps.extend(
                        (0..k).map(|kx| (kernel.get(co, ci, ky, kx), -tap_offset(kx, c, dilation))),
                    );
                    accumulate_taps(o, gp, h, w, -dy, &taps);
                }
            }
        }
    }
    out
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub(crate) fn conv_backward_weight(
    grad: &Tensor,
    x: &Tensor,
    dilation: usize,
    kernel_size: usize,
) -> Tensor {
    let [n, co_n, h, w] = grad.shape();
    let ci_n = x.channels();
    let c = kernel_size / 2;
    let mut out = Tensor::zeros([co_n, ci_n, kernel_size, kernel_size]);
    for co in 0..co_n {
        for ci in 0..ci_n {
            for ky in 0..kernel_size {
                let dy = tap_offset(ky, c, dilation);
                for kx in 0..kernel_size {
                    let dx = tap_offset(kx, c, dilation);
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += shifted_dot(grad.plane(b, co), x.plane(b, ci), h, w, dy, dx);
                    }
                    out.set(co, ci, ky, kx, acc);
                }
            }
        }
    }
    out
}

/// Applies the (1, 1, s, s) kernel `v` to every channel of `x` independently.
pub(crate) fn depthwise_forward(x: &Tensor, v: &Tensor) -> Tensor {
    let [n, ch, h, w] = x.shape();
    let s = v.shape()[2];
    let c = s / 2;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ci in 0..ch {
            let o = out.plane_mut(b, ci);
            let xp = x.plane(b, ci);
            for ky in 0..s {
                for kx in 0..s {
                    let dy = tap_offset(ky, c, 1);
                    accumulate_shifted(o, xp, h, w, v.get(0, 0, ky, kx), dy, tap_offset(kx, c, 1));
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward_input(grad: &Tensor, v: &Tensor) -> Tensor {
    let [n, ch, h, w] = grad.shape();
    let s = v.shape()[2];
    let c = s / 2;
    let mut out = Tensor::zeros(grad.shape());
    for b in 0..n {
        for ci in 0..ch {
            let o = out.plane_mut(b, ci);
            let gp = grad.plane(b, ci);
            for ky in 0..s {
                for kx in 0..s {
                    let dy = tap_offset(ky, c, 1);
                    let dx = tap_offset(kx, c, 1);
                    accumulate_shifted(o, gp, h, w, v.get(0, 0, ky, kx), -dy, -dx);
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward_filter(grad: &Tensor, x: &Tensor, size: usize) -> Tensor {
    let [n, ch, h, w] = grad.shape();
    let c = size / 2;
    let mut out = Tensor::zeros([1, 1, size, size]);
    for ky in 0..size {
        let dy = tap_offset(ky, c, 1);
        for kx in 0..size {
            let dx = tap_offset(kx, c, 1);
            let mut acc = 0.0;
            for b in 0..n {
                for ci in 0..ch {
                    acc += shifted_dot(grad.plane(b, ci), x.plane(b, ci), h, w, dy, dx);
                }
            }
            out.set(0, 0, ky, kx, acc);
        }
    }
    out
}

/// Horizontal pass with `row` then vertical pass with `col`, per channel.
pub(crate) fn separable_forward(x: &Tensor, col: &[f64], row: &[f64]) -> Tensor {
    let [n, ch, h, w] = x.shape();
    let mut tmp = vec![0.0; h * w];
    let mut out = Tensor::zeros(x.shape());
    let cr = row.len() / 2;
    let cc = col.len() / 2;
    for b in 0..n {
        for ci in 0..ch {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let xp = x.plane(b, ci);
            for (kx, &p) in row.iter().enumerate() {
                accumulate_shifted(&mut tmp, xp, h, w, p, 0, tap_offset(kx, cr, 1));
            }
            let o = out.plane_mut(b, ci);
            for (ky, &p) in col.iter().enumerate() {
                accumulate_shifted(o, &tmp, h, w, p, tap_offset(ky, cc, 1), 0);
            }
        }
    }
    out
}

/// Adjoint of [`separable_forward`].
pub(crate) fn separable_adjoint(grad: &Tensor, col: &[f64], row: &[f64]) -> Tensor {
    let flip = |p: &[f64]| p.iter().rev().copied().collect::<Vec<_>>();
    // Vertical then horizontal is the transpose order; with zero-same
    // padding the two 1-D passes commute, so the flipped profiles suffice.
    separable_forward(grad, &flip(col), &flip(row))
}

// ---------------------------------------------------------------------------
// Public operations.

fn check_conv_args(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<()> {
    if x.channels() != w.in_channels() {
        return Err(param_err!(
            "input has {} channels but kernel expects {}",
            x.channels(),
            w.in_channels()
        ));
    }
    if w.kernel_size() != spec.kernel_size() {
        return Err(param_err!(
            "kernel is {}x{} but spec says K={}",
            w.kernel_size(),
            w.kernel_size(),
            spec.kernel_size()
        ));
    }
    Ok(())
}

/// Dilated convolution with zero-same padding. For `r = 1` this is the
/// standard dense convolution.
pub fn dilated_conv2d(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    check_conv_args(x, w, spec)?;
    Ok(conv_forward(x, w.tensor(), spec.dilation()))
}

/// Depthwise application of `v` to each channel; channels never mix.
pub fn smooth_channelwise(x: &Tensor, v: &SmoothingFilter) -> Tensor {
    if v.kind() == FilterKind::None {
        return x.clone();
    }
    depthwise_forward(x, v.weights())
}

/// Two 1-D passes instead of one s×s pass; only for separable kinds.
pub fn smooth_separable(x: &Tensor, v: &SmoothingFilter) -> Result<Tensor> {
    if v.kind() == FilterKind::None {
        return Ok(x.clone());
    }
    match v.profile() {
        Some(p) if v.kind().is_separable() => Ok(separable_forward(x, p, p)),
        _ => Err(Error::UnsupportedKind(v.kind().name())),
    }
}

fn check_filter_size(v: &SmoothingFilter, spec: &ConvSpec) -> Result<()> {
    if v.size() != spec.dilation() {
        return Err(param_err!(
            "smoothing filter size {} must equal the dilation rate {}",
            v.size(),
            spec.dilation()
        ));
    }
    Ok(())
}

/// Smoothing followed by dilated convolution.
pub fn smoothed_dilated_conv2d(
    x: &Tensor,
    v: &SmoothingFilter,
    w: &ConvWeights,
    spec: &ConvSpec,
) -> Result<Tensor> {
    check_filter_size(v, spec)?;
    check_conv_args(x, w, spec)?;
    Ok(conv_forward(
        &smooth_channelwise(x, v),
        w.tensor(),
        spec.dilation(),
    ))
}

/// Composes `v` and the dilated kernel `w` into one dense kernel of extent
/// `(K - 1) * r + s`; coefficient `w[k] * v[n]` lands at `r * k + n`.
///
/// A unit-dilation convolution with the result reproduces
/// [`smoothed_dilated_conv2d`] on every pixel whose dilated taps all fall
/// inside the image. Near the border the two-stage form truncates the
/// smoothed intermediate, which a single dense kernel cannot express; see
/// [`fused_smoothed_dilated_conv2d`] for the exact fused path.
pub fn fuse_effective_kernel(
    v: &SmoothingFilter,
    w: &ConvWeights,
    spec: &ConvSpec,
) -> Result<ConvWeights> {
    check_filter_size(v, spec)?;
    if w.kernel_size() != spec.kernel_size() {
        return Err(param_err!("kernel size does not match spec"));
    }
    let (k, r, s) = (spec.kernel_size(), spec.dilation(), v.size());
    let extent = (k - 1) * r + s;
    let mut fused = Tensor::zeros([w.out_channels(), w.in_channels(), extent, extent]);
    for co in 0..w.out_channels() {
        for ci in 0..w.in_channels() {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.get(co, ci, ky, kx);
                    for ny in 0..s {
                        for nx in 0..s {
                            let (y, x) = (r * ky + ny, r * kx + nx);
                            let cur = fused.get(co, ci, y, x);
                            fused.set(co, ci, y, x, cur + wv * v.weight(ny, nx));
                        }
                    }
                }
            }
        }
    }
    ConvWeights::new(fused)
}

/// Smoothed dilated convolution computed through the fused dense kernel.
///
/// Pixels whose dilated taps are all in bounds use one dense convolution
/// with [`fuse_effective_kernel`]; the border band is evaluated tap by tap
/// so the result matches [`smoothed_dilated_conv2d`] everywhere.
pub fn fused_smoothed_dilated_conv2d(
    x: &Tensor,
    v: &SmoothingFilter,
    w: &ConvWeights,
    spec: &ConvSpec,
) -> Result<Tensor> {
    check_filter_size(v, spec)?;
    check_conv_args(x, w, spec)?;
    let fused = fuse_effective_kernel(v, w, spec)?;
    let mut out = conv_forward(x, fused.tensor(), 1);

    let [n, ci_n, h, wd] = x.shape();
    let (k, r, s) = (spec.kernel_size(), spec.dilation(), v.size());
    let reach = (k / 2) * r;
    let interior = |i: usize, len: usize| i >= reach && i + reach < len;
    let (kc, sc) = (k / 2, s / 2);
    let read = |b: usize, ci: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.get(b, ci, i as usize, j as usize)
        }
    };
    for b in 0..n {
        for co in 0..w.out_channels() {
            for i in 0..h {
                for j in 0..wd {
                    if interior(i, h) && interior(j, wd) {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            let ti = i as isize - tap_offset(ky, kc, r);
                            if ti < 0 || ti >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let tj = j as isize - tap_offset(kx, kc, r);
                                if tj < 0 || tj >= wd as isize {
                                    continue;
                                }
                                let mut sm = 0.0;
                                for ny in 0..s {
                                    for nx in 0..s {
                                        sm += read(
                                            b,
                                            ci,
                                            ti - tap_offset(ny, sc, 1),
                                            tj - tap_offset(nx, sc, 1),
                                        ) * v.weight(ny, nx);
                                    }
                                }
                                acc += sm * w.get(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(b, co, i, j, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Multiply-adds of one forward dilated convolution.
pub fn conv_macs(spec: &ConvSpec, in_channels: usize, out_channels: usize, shape: Shape) -> u64 {
    let k = spec.kernel_size() as u64;
    k * k * (in_channels * out_channels * shape[0] * shape[2] * shape[3]) as u64
}
