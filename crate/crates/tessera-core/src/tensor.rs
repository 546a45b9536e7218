//! Dense row-major tensors with a deliberately small op surface.
//!
//! Everything is single-threaded and accumulates in a fixed sequential
//! order, so results are bit-reproducible for a given seed and binary.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix `[rows, cols]`; higher-rank
    /// tensors flatten all leading axes into rows.
    pub fn rows(&self) -> usize {
        assert!(self.rank() >= 1);
        self.data.len() / self.cols()
    }

    /// Trailing axis length.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    /// Sum of all elements, accumulated left to right.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        assert!(!self.data.is_empty());
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Sum over rows: `[n, c] -> [c]`, rows added in index order.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for r in 0..self.rows() {
            let row = self.row(r);
            for j in 0..c {
                out[j] += row[j];
            }
        }
        Tensor::from_vec(&[c], out)
    }

    pub fn mean_rows(&self) -> Self {
        let n = T::from_f64(self.rows() as f64);
        let mut s = self.sum_rows();
        s.scale_assign(T::one() / n);
        s
    }

    /// Matrix product `[n, k] x [k, m] -> [n, m]`. Leading axes of `self`
    /// flatten into rows. Accumulation over `k` is sequential.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if rhs.rank() != 2 || self.cols() != rhs.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.rows(), rhs.shape[0], rhs.shape[1]);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for j in 0..m {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        let mut shape: Vec<usize> = self.shape[..self.rank() - 1].to_vec();
        shape.push(m);
        Ok(Tensor { shape, data: out })
    }

    /// `self x rhs^T`: `[n, k] x [m, k] -> [n, m]`.
    pub fn matmul_transb(&self, rhs: &Self) -> Result<Self> {
        if rhs.rank() != 2 || self.cols() != rhs.shape[1] {
            return Err(Error::shape(
                "matmul_transb",
                format!("{:?} x {:?}^T", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.rows(), self.cols(), rhs.shape[0]);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a_row = self.row(i);
            for j in 0..m {
                let b_row = rhs.row(j);
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                out[i * m + j] = acc;
            }
        }
        let mut shape: Vec<usize> = self.shape[..self.rank() - 1].to_vec();
        shape.push(m);
        Ok(Tensor { shape, data: out })
    }

    /// `self^T x rhs`: `[k, n] x [k, m] -> [n, m]` (both operands viewed as
    /// matrices; leading axes flatten into `k`).
    pub fn matmul_transa(&self, rhs: &Self) -> Result<Self> {
        if self.rows() != rhs.rows() {
            return Err(Error::shape(
                "matmul_transa",
                format!("{:?}^T x {:?}", self.shape, rhs.shape),
            ));
        }
        let (k, n, m) = (self.rows(), self.cols(), rhs.cols());
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = rhs.row(p);
            for i in 0..n {
                let a = a_row[i];
                let o_row = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2);
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Squared L2 norm accumulated in f64 regardless of `T`.
    pub fn sq_norm_f64(&self) -> f64 {
        let mut acc = 0.0f64;
        for &v in &self.data {
            let x = v.to_f64_lossy();
            acc += x * x;
        }
        acc
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64_lossy())).collect(),
        }
    }
}
