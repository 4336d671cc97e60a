//! Structural dependency tracing through stacks of (smoothed) dilated
//! convolutions.
//!
//! For every output pixel we compute the set of input pixels it depends on
//! through the nonzero pattern of the layers, ignoring the numeric weight
//! values. Stacked dilated convolutions with equal rates make horizontally
//! or vertically adjacent output pixels depend on disjoint input lattices;
//! [`gridding_score`] measures how often that happens.

use std::fmt::Write as _;

use fixedbitset::FixedBitSet;

use crate::conv::{ConvSpec, FilterKind};
use crate::error::{param_err, Result};

/// One convolution layer of a stack, optionally preceded by smoothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackLayer {
    pub spec: ConvSpec,
    pub smoothing: FilterKind,
    /// Support of the smoothing filter per axis; ignored for `FilterKind::None`.
    pub smoothing_size: usize,
}

impl StackLayer {
    pub fn new(spec: ConvSpec, smoothing: FilterKind, smoothing_size: usize) -> Result<Self> {
        if smoothing != FilterKind::None && smoothing_size == 0 {
            return Err(param_err!("smoothing size must be positive"));
        }
        Ok(StackLayer {
            spec,
            smoothing,
            smoothing_size,
        })
    }

    /// A plain dilated layer.
    pub fn plain(spec: ConvSpec) -> Self {
        StackLayer {
            spec,
            smoothing: FilterKind::None,
            smoothing_size: 1,
        }
    }

    /// Effective smoothing support (1 when unsmoothed).
    pub fn window(&self) -> usize {
        if self.smoothing == FilterKind::None {
            1
        } else {
            self.smoothing_size
        }
    }

    /// Input offsets (relative to the output position) read by the smoothing
    /// window along one axis. With the centre tap at index `s / 2`, even
    /// sizes read one further to the positive side.
    pub fn window_offsets(&self) -> Vec<isize> {
        let s = self.window() as isize;
        let lo = -((s - 1) / 2);
        (lo..lo + s).collect()
    }

    /// Input offsets read by the dilated taps along one axis.
    pub fn tap_offsets(&self) -> Vec<isize> {
        let c = (self.spec.kernel_size() / 2) as isize;
        let r = self.spec.dilation() as isize;
        (-c..=c).map(|k| k * r).collect()
    }

    /// Receptive span of this layer per axis, `(K - 1) * r + s`.
    pub fn span(&self) -> usize {
        self.spec.span() + self.window() - 1
    }

    fn reach(&self) -> (isize, isize) {
        let w = self.window_offsets();
        let t = self.tap_offsets();
        (w[0] + t[0], w[w.len() - 1] + t[t.len() - 1])
    }
}

/// Ordered list of layers, applied first to last.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerStack {
    layers: Vec<StackLayer>,
}

impl LayerStack {
    pub fn new(layers: Vec<StackLayer>) -> Self {
        LayerStack { layers }
    }

    /// `count` identical layers; smoothing size follows the dilation rate.
    pub fn uniform(
        count: usize,
        kernel_size: usize,
        dilation: usize,
        smoothing: FilterKind,
    ) -> Result<Self> {
        let spec = ConvSpec::new(kernel_size, dilation)?;
        let layer = StackLayer::new(spec, smoothing, dilation)?;
        Ok(LayerStack::new(vec![layer; count]))
    }

    pub fn layers(&self) -> &[StackLayer] {
        &self.layers
    }

    pub fn push(&mut self, layer: StackLayer) {
        self.layers.push(layer);
    }

    /// Smallest and largest input offset reachable from an output pixel.
    pub fn reach(&self) -> (isize, isize) {
        self.layers.iter().fold((0, 0), |(lo, hi), l| {
            let (a, b) = l.reach();
            (lo + a, hi + b)
        })
    }

    /// Total receptive span per axis.
    pub fn span(&self) -> usize {
        let (lo, hi) = self.reach();
        (hi - lo + 1) as usize
    }
}

/// Input dependency set of every output pixel for a fixed extent.
#[derive(Clone, Debug)]
pub struct DependencyMap {
    height: usize,
    width: usize,
    reach: (isize, isize),
    sets: Vec<FixedBitSet>,
}

impl DependencyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Bitset over flattened input coordinates `h * width + w`.
    pub fn set(&self, h: usize, w: usize) -> &FixedBitSet {
        &self.sets[h * self.width + w]
    }

    /// Dependency coordinates of output `(h, w)` in row-major order.
    pub fn dependencies(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.set(h, w)
            .ones()
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }

    /// True when the pixel's whole receptive field lies inside the input.
    pub fn is_interior(&self, h: usize, w: usize) -> bool {
        let inside = |p: usize, len: usize| {
            let p = p as isize;
            p + self.reach.0 >= 0 && p + self.reach.1 < len as isize
        };
        h < self.height && w < self.width && inside(h, self.height) && inside(w, self.width)
    }

    pub fn interior_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |h| (0..self.width).map(move |w| (h, w)))
            .filter(|&(h, w)| self.is_interior(h, w))
    }
}

fn propagate(
    prev: &[FixedBitSet],
    height: usize,
    width: usize,
    offsets: &[isize],
) -> Vec<FixedBitSet> {
    let mut next = Vec::with_capacity(prev.len());
    for h in 0..height as isize {
        for w in 0..width as isize {
            let mut set = FixedBitSet::with_capacity(height * width);
            for &dy in offsets {
                let y = h + dy;
                if y < 0 || y >= height as isize {
                    continue;
                }
                for &dx in offsets {
                    let x = w + dx;
                    if x < 0 || x >= width as isize {
                        continue;
                    }
                    set.union_with(&prev[y as usize * width + x as usize]);
                }
            }
            next.push(set);
        }
    }
    next
}

/// Traces structural dependencies of every output pixel through `stack`
/// on an input of `extent = (height, width)` with zero-same padding.
pub fn trace_dependencies(stack: &LayerStack, extent: (usize, usize)) -> Result<DependencyMap> {
    let (height, width) = extent;
    let span = stack.span();
    if height < span || width < span {
        return Err(param_err!(
            "extent {height}x{width} has no interior pixel; minimum required extent is {span}x{span}"
        ));
    }
    let mut sets: Vec<FixedBitSet> = (0..height * width)
        .map(|i| {
            let mut s = FixedBitSet::with_capacity(height * width);
            s.insert(i);
            s
        })
        .collect();
    for layer in stack.layers() {
        if layer.window() > 1 {
            sets = propagate(&sets, height, width, &layer.window_offsets());
        }
        sets = propagate(&sets, height, width, &layer.tap_offsets());
    }
    Ok(DependencyMap {
        height,
        width,
        reach: stack.reach(),
        sets,
    })
}

/// Fraction of 4-adjacent interior output pairs with disjoint dependency
/// sets: 1.0 is fully gridded, 0.0 means every neighbour pair shares input.
/// Returns 0.0 when the map has no adjacent interior pair.
pub fn gridding_score(map: &DependencyMap) -> f64 {
    let mut pairs = 0usize;
    let mut disjoint = 0usize;
    for (h, w) in map.interior_pixels() {
        for (nh, nw) in [(h, w + 1), (h + 1, w)] {
            if map.is_interior(nh, nw) {
                pairs += 1;
                if map.set(h, w).is_disjoint(map.set(nh, nw)) {
                    disjoint += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        disjoint as f64 / pairs as f64
    }
}

/// Renders the dependencies of output `center` as rows of `#` (dependency)
/// and `.` (no dependency), one row per input row.
pub fn export_dependency_art(map: &DependencyMap, center: (usize, usize)) -> Result<String> {
    let (ch, cw) = center;
    if !map.is_interior(ch, cw) {
        return Err(param_err!("pixel ({ch}, {cw}) is not an interior pixel"));
    }
    let set = map.set(ch, cw);
    let mut out = String::with_capacity(map.height * (map.width + 1));
    for h in 0..map.height {
        for w in 0..map.width {
            out.push(if set.contains(h * map.width + w) {
                '#'
            } else {
                '.'
            });
        }
        out.push('\n');
    }
    Ok(out)
}

/// Compact label such as `k3r2|k3r3+gaussian3`.
pub fn describe_stack(stack: &LayerStack) -> String {
    let mut s = String::new();
    for (i, l) in stack.layers().iter().enumerate() {
        if i > 0 {
            s.push('|');
        }
        let _ = write!(
            s,
            "k{}r{}{}",
            l.spec.kernel_size(),
            l.spec.dilation(),
            if l.window() > 1 {
                format!("+{}{}", l.smoothing.name(), l.window())
            } else {
                String::new()
            }
        );
    }
    s
}
