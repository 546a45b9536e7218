//! Small dense f64 routines: Gaussian elimination with partial pivoting and
//! a Jacobi eigensolver for symmetric matrices. Systems here are tiny
//! (hundreds of rows at most), so simplicity and a usable condition report
//! beat asymptotics.

use crate::error::{Error, Result};

/// Column-count-aware dense matrix stored row-major.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows);
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.at(k, j);
                }
            }
        }
        out
    }

    /// `self^T * rhs`.
    pub fn matmul_transa(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.rows, rhs.rows);
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.at(k, j);
                }
            }
        }
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_transb(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols);
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * rhs.at(j, k);
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }
}

/// Solve `A X = B` in place via Gaussian elimination with partial pivoting.
/// `B` may carry multiple right-hand sides as columns. Returns `X` and errors
/// out on an effectively singular system, reporting a crude condition
/// estimate (max/min pivot magnitude).
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    assert_eq!(a.rows, a.cols, "solve expects a square system");
    assert_eq!(a.rows, b.rows, "rhs row count must match the system");
    let n = a.rows;
    let m = b.cols;
    let mut lhs = a.data.clone();
    let mut rhs = b.data.clone();

    let mut max_piv = 0.0f64;
    let mut min_piv = f64::INFINITY;
    for col in 0..n {
        // Partial pivot.
        let mut best = col;
        let mut best_abs = lhs[col * n + col].abs();
        for r in col + 1..n {
            let v = lhs[r * n + col].abs();
            if v > best_abs {
                best = r;
                best_abs = v;
            }
        }
        if best != col {
            for j in 0..n {
                lhs.swap(col * n + j, best * n + j);
            }
            for j in 0..m {
                rhs.swap(col * m + j, best * m + j);
            }
        }
        let piv = lhs[col * n + col];
        max_piv = max_piv.max(piv.abs());
        min_piv = min_piv.min(piv.abs());
        if piv.abs() < 1e-12 * max_piv.max(1.0) {
            return Err(Error::numerical(
                "solve",
                format!(
                    "singular system at column {col}: pivot {piv:.3e}, condition estimate {:.3e}",
                    if min_piv > 0.0 { max_piv / min_piv } else { f64::INFINITY }
                ),
            ));
        }
        for r in col + 1..n {
            let f = lhs[r * n + col] / piv;
            if f == 0.0 {
                continue;
            }
            lhs[r * n + col] = 0.0;
            for j in col + 1..n {
                lhs[r * n + j] -= f * lhs[col * n + j];
            }
            for j in 0..m {
                rhs[r * m + j] -= f * rhs[col * m + j];
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let piv = lhs[col * n + col];
        for j in 0..m {
            let mut acc = rhs[col * m + j];
            for k in col + 1..n {
                acc -= lhs[col * n + k] * rhs[k * m + j];
            }
            rhs[col * m + j] = acc / piv;
        }
    }
    Ok(Mat {
        rows: n,
        cols: m,
        data: rhs,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvectors as
/// rows of the returned matrix.
pub fn symmetric_eigen(a: &Mat, max_sweeps: usize) -> Result<(Vec<f64>, Mat)> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.data.clone();
    let mut v = Mat::eye(n);

    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v.data[p * n + k];
                    let vkq = v.data[q * n + k];
                    v.data[p * n + k] = c * vkp - s * vkq;
                    v.data[q * n + k] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (row, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(row, k, v.data[i * n + k]);
        }
    }
    Ok((sorted_vals, vectors))
}
