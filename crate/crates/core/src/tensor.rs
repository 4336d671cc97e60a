//! Dense NCHW tensors of `f64` and the seeded random generator used across
//! the crate.

use std::io::{Read, Write};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{param_err, Error, Result};

/// Extents in (batch, channels, height, width) order.
pub type Shape = [usize; 4];

const BLOB_MAGIC: &[u8; 8] = b"SDTENSR1";

/// Dense row-major (N, C, H, W) array of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(param_err!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform values in `[lo, hi)`.
    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(param_err!(
                "random_uniform needs finite lo < hi, got [{lo}, {hi})"
            ));
        }
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor { shape, data })
    }

    pub fn random_normal(shape: Shape, std: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| std * rng.standard_normal()).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// The contiguous H×W plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_>) -> Result<Tensor> {
        match (op, rhs) {
            (ElementwiseOp::Scale, Operand::Scalar(s)) => Ok(self.map(|v| v * s)),
            (ElementwiseOp::Scale, Operand::Tensor(_)) => {
                Err(param_err!("scale takes a scalar operand"))
            }
            (op, Operand::Scalar(s)) => Ok(self.map(|v| op.apply(v, s))),
            (op, Operand::Tensor(b)) => {
                self.check_same_shape(b)?;
                Ok(self.zip_with(b, |x, y| op.apply(x, y)))
            }
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(param_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Writes the `SDTENSR1` blob: magic, four little-endian u64 extents,
    /// then little-endian doubles.
    pub fn write_blob<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BLOB_MAGIC)?;
        for &e in &self.shape {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut input: R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Format("bad tensor blob magic".into()));
        }
        let mut shape = [0usize; 4];
        for e in shape.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *e = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("extent overflows usize".into()))?;
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("blob shape overflows".into()))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != len * 8 {
            return Err(Error::Format(format!(
                "blob payload is {} bytes, expected {}",
                bytes.len(),
                len * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
}

impl ElementwiseOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul | ElementwiseOp::Scale => a * b,
        }
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

/// Deterministic, splittable generator (ChaCha8 keyed by the seed, one
/// independent stream per fork).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator for `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        let v = lo + (hi - lo) * u;
        if v < hi {
            v
        } else {
            lo.max(hi - (hi - lo) * f64::EPSILON)
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn zeros_shapes() {
        let t = Tensor::zeros([1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0; 4]);
        assert!(Tensor::zeros([0, 3, 4, 4]).is_empty());
        assert_eq!(Tensor::zeros([2, 3, 5, 5]).len(), 150);
    }

    #[test]
    fn uniform_is_deterministic_and_in_range() {
        let a = Tensor::random_uniform([2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(42)).unwrap();
        let b = Tensor::random_uniform([2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(42)).unwrap();
        let c = Tensor::random_uniform([2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn uniform_rejects_empty_range() {
        let mut rng = Rng::new(0);
        assert!(Tensor::random_uniform([1, 1, 1, 1], 1.0, 1.0, &mut rng).is_err());
        assert!(Tensor::random_uniform([1, 1, 1, 1], 2.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut a = Rng::new(7);
        let f1 = a.fork(3);
        a.next_u64();
        let f2 = a.fork(3);
        let mut f1 = f1;
        let mut f2 = f2;
        assert_eq!(f1.next_u64(), f2.next_u64());
        assert_ne!(
            Rng::new(7).fork(3).next_u64(),
            Rng::new(7).fork(4).next_u64()
        );
    }

    #[test]
    fn elementwise_identities_and_products() {
        let x = Tensor::random_uniform([1, 2, 3, 3], -1.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(x.add(&Tensor::zeros_like(&x)).unwrap(), x);
        assert_eq!(
            x.elementwise(ElementwiseOp::Scale, Operand::Scalar(1.0))
                .unwrap(),
            x
        );

        let a = Tensor::from_vec([1, 1, 1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 3], vec![2.0, 3.0, -4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, -6.0, -1.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-0.5, -5.0, 4.25]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros([1, 1, 2, 2]);
        let b = Tensor::zeros([1, 1, 2, 3]);
        assert!(matches!(a.add(&b), Err(Error::Parameter(_))));
    }

    #[test]
    fn flat_index_matches_nested_enumeration() {
        for n in 1..=2 {
            for c in 1..=3 {
                for h in 1..=4 {
                    for w in 1..=5 {
                        let t = Tensor::zeros([n, c, h, w]);
                        let mut expected = 0;
                        for i in 0..n {
                            for j in 0..c {
                                for k in 0..h {
                                    for l in 0..w {
                                        assert_eq!(t.index(i, j, k, l), expected);
                                        assert_eq!(
                                            t.index(i, j, k, l),
                                            i * (c * h * w) + j * (h * w) + k * w + l
                                        );
                                        expected += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn blob_layout() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SDTENSR1");
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[32..40], &2u64.to_le_bytes());
        assert_eq!(&buf[40..48], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 32 + 16);
        assert_eq!(Tensor::read_blob(&buf[..]).unwrap(), t);
        assert!(Tensor::read_blob(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_blob(&bad[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn set_then_get_round_trips(
            shape in (1usize..3, 1usize..4, 1usize..5, 1usize..6),
            frac in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
            value in -1e6f64..1e6,
        ) {
            let shape = [shape.0, shape.1, shape.2, shape.3];
            let pick = |f: f64, e: usize| ((f * e as f64) as usize).min(e - 1);
            let (n, c, h, w) = (pick(frac.0, shape[0]), pick(frac.1, shape[1]),
                                pick(frac.2, shape[2]), pick(frac.3, shape[3]));
            let mut t = Tensor::zeros(shape);
            t.set(n, c, h, w, value);
            prop_assert_eq!(t.get(n, c, h, w), value);
            prop_assert_eq!(t.sum(), value);
        }

        #[test]
        fn blob_round_trip(seed in any::<u64>(), dims in (0usize..3, 1usize..3, 1usize..4, 1usize..4)) {
            let t = Tensor::random_normal([dims.0, dims.1, dims.2, dims.3], 1.0, &mut Rng::new(seed));
            let mut buf = Vec::new();
            t.write_blob(&mut buf).unwrap();
            prop_assert_eq!(Tensor::read_blob(&buf[..]).unwrap(), t);
        }
    }
}
