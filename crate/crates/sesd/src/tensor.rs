//! Minimal dense tensor: row-major `f64` storage with an optional
//! single-precision mode that rounds every stored value through `f32`.
//!
//! The tensor deliberately supports only what the network and samplers need.
//! All math runs in double precision; `Dtype::Single` constrains the values a
//! tensor can hold so that training state is exactly representable in the
//! 32-bit checkpoint encoding.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    Single,
    Double,
}

impl Dtype {
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::Single => x as f32 as f64,
            Dtype::Double => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: Dtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let mut t = Tensor { shape, data, dtype };
        t.round_in_place();
        Ok(t)
    }

    pub fn zeros(shape: &[usize], dtype: Dtype) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], dtype }
    }

    pub fn full(shape: &[usize], value: f64, dtype: Dtype) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![dtype.round(value); n], dtype }
    }

    pub fn scalar(value: f64, dtype: Dtype) -> Self {
        Tensor { shape: vec![1], data: vec![dtype.round(value)], dtype }
    }

    pub fn from_rows(rows: &[Vec<f64>], dtype: Dtype) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data, dtype).unwrap()
    }

    /// Standard normal fill, deterministic for a given rng state.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R, dtype: Dtype) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut t = Tensor { shape: shape.to_vec(), data, dtype };
        t.round_in_place();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = *self.shape.last().expect("row_mut() on rank-0 tensor");
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self.round_in_place();
        self
    }

    fn round_in_place(&mut self) {
        if self.dtype == Dtype::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| self.dtype.round(f(x))).collect();
        Tensor { shape: self.shape.clone(), data, dtype: self.dtype }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| self.dtype.round(f(a, b)))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data, dtype: self.dtype })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// a*self + b*other, the workhorse of the samplers.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// c += alpha * a  (in place, same length)
pub fn axpy(alpha: f64, a: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), c.len());
    for (ci, &ai) in c.iter_mut().zip(a) {
        *ci += alpha * ai;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// c[m,n] += a[m,k] * b[k,n], row-major slices. Inner loop runs over
/// contiguous rows of `b` and `c` so it vectorizes.
pub fn matmul_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[kk * n..(kk + 1) * n], crow);
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (b given row-major as [n,k]).
pub fn matmul_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]  (a given row-major as [m,k]).
pub fn matmul_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut c[kk * n..(kk + 1) * n]);
            }
        }
    }
}
