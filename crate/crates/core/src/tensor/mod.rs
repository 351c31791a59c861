//! Dense rank-4 tensors in `N x C x H x W` layout and the pure kernels that
//! operate on them. Everything here is double precision.

mod conv;
mod ops;

pub use conv::{conv2d, conv2d_backward, conv_output_size, ConvGrads};
pub use ops::*;

use crate::error::{Error, Result};
use crate::rng::Lcg64;

/// `[N, C, H, W]`.
pub type Shape = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::dim("tensor", "data", len, data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Panics on zero-sized dimensions; for internal construction where
    /// the shape is known to be valid.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&d| d > 0));
        Self { shape, data }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized shape {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Per-channel vector stored as `1 x C x 1 x 1`.
    pub fn channel_vector(values: Vec<f64>) -> Result<Self> {
        Self::new([1, values.len(), 1, 1], values)
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut Lcg64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, rng.normal_vec(len, std))
    }

    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Lcg64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, (0..len).map(|_| rng.uniform(lo, hi)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// The `H x W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the raw bits; cheap fingerprint for comparing activations.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Samples `[lo, hi)` along the batch axis.
    pub fn batch_slice(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo >= hi || hi > self.n() {
            return Err(Error::index(
                "batch_slice",
                format!("[{lo}, {hi}) of batch {}", self.n()),
            ));
        }
        let per = self.len() / self.n();
        Ok(Tensor::from_parts(
            [hi - lo, self.c(), self.h(), self.w()],
            self.data[lo * per..hi * per].to_vec(),
        ))
    }

    /// Stacks equal-shaped tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::index("stack_batch", "no tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            if t.c() != c {
                return Err(Error::dim("stack_batch", "C", c, t.c()));
            }
            if t.h() != h {
                return Err(Error::dim("stack_batch", "H", h, t.h()));
            }
            if t.w() != w {
                return Err(Error::dim("stack_batch", "W", w, t.w()));
            }
            data.extend_from_slice(&t.data);
            n += t.n();
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }
}

fn check_shape(shape: Shape) -> Result<()> {
    for (axis, &d) in ["N", "C", "H", "W"].iter().zip(&shape) {
        if d == 0 {
            return Err(Error::dim("tensor", axis, 1, 0));
        }
    }
    Ok(())
}

pub(crate) fn expect_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    for (i, axis) in ["N", "C", "H", "W"].into_iter().enumerate() {
        if a.shape[i] != b.shape[i] {
            return Err(Error::dim(op, axis, a.shape[i], b.shape[i]));
        }
    }
    Ok(())
}

/// Integer class map, `N x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::dim("label_map", "data", n * h * w, data.len()));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn stack(parts: &[&LabelMap]) -> Result<LabelMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::index("label_stack", "no maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.h != first.h || p.w != first.w {
                return Err(Error::dim("label_stack", "H", first.h, p.h));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(LabelMap {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(matches!(
            Tensor::new([1, 2, 2, 2], vec![0.0; 7]),
            Err(Error::Dim { axis: "data", .. })
        ));
        assert!(matches!(
            Tensor::new([1, 0, 2, 2], vec![]),
            Err(Error::Dim { axis: "C", .. })
        ));
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::new([2, 3, 4, 5], (0..120).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
    }

    #[test]
    fn batch_slice_and_stack_round_trip() {
        let mut rng = Lcg64::new(1);
        let t = Tensor::randn([4, 2, 3, 3], 1.0, &mut rng);
        let a = t.batch_slice(0, 1).unwrap();
        let b = t.batch_slice(1, 4).unwrap();
        assert_eq!(Tensor::stack_batch(&[&a, &b]).unwrap(), t);
    }
}
