//! Synthetic multi-scale segmentation scenes.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::tensor::{Rng, Tensor};

/// Placement attempts per scene before giving up on it.
const SCENE_ATTEMPTS: usize = 64;
/// Scene redraws per sample before generation fails.
const SAMPLE_ATTEMPTS: usize = 32;
const SCALES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
}

/// One object placed in a scene: an axis-aligned rectangle or a disc
/// inscribed in its bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub class: usize,
    pub kind: ShapeKind,
    pub scale: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PlacedShape {
    fn contains(&self, h: usize, w: usize) -> bool {
        if h < self.top
            || w < self.left
            || h >= self.top + self.height
            || w >= self.left + self.width
        {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disc => {
                let cy = self.top as f64 + (self.height as f64 - 1.0) / 2.0;
                let cx = self.left as f64 + (self.width as f64 - 1.0) / 2.0;
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (h as f64 - cy) / ry;
                let dx = (w as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Bounding boxes, grown by one pixel of margin, intersect.
    fn overlaps(&self, other: &PlacedShape) -> bool {
        let sep_v = self.top + self.height < other.top || other.top + other.height < self.top;
        let sep_h = self.left + self.width < other.left || other.left + other.width < self.left;
        !(sep_v || sep_h)
    }
}

/// A noisy single-channel image with exact per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// Shape (1, 1, H, W).
    pub image: Tensor,
    /// Row-major H×W class ids; 0 is background.
    pub labels: Vec<usize>,
    pub noise_level: f64,
    pub shapes: Vec<PlacedShape>,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Base intensity of `class` among `classes`: evenly spaced in [0, 1],
/// background at 0.
pub fn class_intensity(class: usize, classes: usize) -> f64 {
    class as f64 / (classes - 1) as f64
}

fn try_scene(extent: (usize, usize), classes: usize, rng: &mut Rng) -> Option<Vec<PlacedShape>> {
    let (h, w) = extent;
    let base = (h.min(w) / 16).max(2);
    let count = rng.below(1, 5);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.below(1, classes);
        let kind = if rng.below(0, 2) == 0 {
            ShapeKind::Rect
        } else {
            ShapeKind::Disc
        };
        let scale = SCALES[rng.below(0, SCALES.len())];
        let size = base * scale;
        let (sh, sw) = match kind {
            ShapeKind::Disc => (size, size),
            ShapeKind::Rect => {
                let aspect = rng.below(0, 3);
                match aspect {
                    0 => (size, size),
                    1 => (size, (size / 2).max(2)),
                    _ => ((size / 2).max(2), size),
                }
            }
        };
        if sh > h || sw > w {
            return None;
        }
        let mut placed = None;
        for _ in 0..SCENE_ATTEMPTS {
            let candidate = PlacedShape {
                class,
                kind,
                scale,
                top: rng.below(0, h - sh + 1),
                left: rng.below(0, w - sw + 1),
                height: sh,
                width: sw,
            };
            if shapes.iter().all(|s| !s.overlaps(&candidate)) {
                placed = Some(candidate);
                break;
            }
        }
        shapes.push(placed?);
    }
    Some(shapes)
}

fn render(
    shapes: Vec<PlacedShape>,
    extent: (usize, usize),
    classes: usize,
    noise_level: f64,
    rng: &mut Rng,
) -> SynthSample {
    let (h, w) = extent;
    let mut labels = vec![0usize; h * w];
    for s in &shapes {
        for y in s.top..s.top + s.height {
            for x in s.left..s.left + s.width {
                if s.contains(y, x) {
                    labels[y * w + x] = s.class;
                }
            }
        }
    }
    let mut image = Tensor::zeros([1, 1, h, w]);
    for (v, &l) in image.data_mut().iter_mut().zip(&labels) {
        *v = class_intensity(l, classes);
        if noise_level > 0.0 {
            *v += noise_level * rng.standard_normal();
        }
    }
    SynthSample {
        image,
        labels,
        noise_level,
        shapes,
    }
}

/// Generates `n` scenes of `extent = (H, W)` with 1-4 non-overlapping
/// shapes each, shape sizes drawn from 1x, 2x and 4x a base size, and
/// additive Gaussian noise of standard deviation `noise_level`.
pub fn generate_dataset(
    n: usize,
    extent: (usize, usize),
    classes: usize,
    noise_level: f64,
    rng: &mut Rng,
) -> Result<Vec<SynthSample>> {
    if classes < 2 {
        return Err(param_err!("need at least 2 classes, got {classes}"));
    }
    if extent.0 < 32 || extent.1 < 32 {
        return Err(param_err!(
            "extent must be at least 32x32, got {}x{}",
            extent.0,
            extent.1
        ));
    }
    if !noise_level.is_finite() || noise_level < 0.0 {
        return Err(param_err!("noise level must be finite and nonnegative"));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let shapes = (0..SAMPLE_ATTEMPTS)
            .find_map(|_| try_scene(extent, classes, rng))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "could not pack shapes into sample {i} after {SAMPLE_ATTEMPTS} attempts"
                ))
            })?;
        samples.push(render(shapes, extent, classes, noise_level, rng));
    }
    Ok(samples)
}

/// Pixel counts per class over a dataset.
pub fn class_histogram(data: &[SynthSample], classes: usize) -> Vec<usize> {
    let mut hist = vec![0usize; classes];
    for s in data {
        for &l in &s.labels {
            if l < classes {
                hist[l] += 1;
            }
        }
    }
    hist
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    index: usize,
    height: usize,
    width: usize,
    noise_level: f64,
    shapes: Vec<PlacedShape>,
}

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const META_FILE: &str = "samples.jsonl";

/// Writes `images.bin` (N, 1, H, W), `labels.bin` (N, 1, H, W) with class ids
/// as doubles, and a `samples.jsonl` line per sample.
pub fn save_dataset(data: &[SynthSample], dir: &Path) -> Result<()> {
    let (h, w) = data
        .first()
        .map(|s| (s.height(), s.width()))
        .ok_or_else(|| param_err!("cannot save an empty dataset"))?;
    if data.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(param_err!("all samples must share one extent"));
    }
    let n = data.len();
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in data {
        images.extend_from_slice(s.image.data());
        labels.extend(s.labels.iter().map(|&l| l as f64));
    }
    let images = Tensor::from_vec([n, 1, h, w], images)?;
    let labels = Tensor::from_vec([n, 1, h, w], labels)?;
    images.write_blob(std::io::BufWriter::new(std::fs::File::create(
        dir.join(IMAGES_FILE),
    )?))?;
    labels.write_blob(std::io::BufWriter::new(std::fs::File::create(
        dir.join(LABELS_FILE),
    )?))?;
    let mut meta = std::io::BufWriter::new(std::fs::File::create(dir.join(META_FILE))?);
    for (index, s) in data.iter().enumerate() {
        let line = SampleMeta {
            index,
            height: h,
            width: w,
            noise_level: s.noise_level,
            shapes: s.shapes.clone(),
        };
        serde_json::to_writer(&mut meta, &line).map_err(|e| Error::Format(e.to_string()))?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let images = Tensor::read_blob(std::io::BufReader::new(std::fs::File::open(
        dir.join(IMAGES_FILE),
    )?))?;
    let labels = Tensor::read_blob(std::io::BufReader::new(std::fs::File::open(
        dir.join(LABELS_FILE),
    )?))?;
    if images.shape() != labels.shape() || images.channels() != 1 {
        return Err(Error::Format("image and label blobs disagree".into()));
    }
    let meta_file = std::io::BufReader::new(std::fs::File::open(dir.join(META_FILE))?);
    let metas: Vec<SampleMeta> = meta_file
        .lines()
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let [n, _, h, w] = images.shape();
    if metas.len() != n {
        return Err(Error::Format(format!(
            "{} metadata lines for {n} samples",
            metas.len()
        )));
    }
    metas
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let image = Tensor::from_vec([1, 1, h, w], images.plane(i, 0).to_vec())?;
            let labels = labels
                .plane(i, 0)
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Format(format!("invalid label value {v}")))
                    }
                })
                .collect::<Result<_>>()?;
            Ok(SynthSample {
                image,
                labels,
                noise_level: m.noise_level,
                shapes: m.shapes,
            })
        })
        .collect()
}
