//! Axial 2D rotary position embedding over integer patch-grid coordinates.
//!
//! Channel pairs inside each head are split in half: the first half rotates
//! by the token's grid row, the second by its grid column, with frequencies
//! `base^(-2i / (head_dim/2))`. CLS and register rows are exempt.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct RopeTable {
    rows: usize,
    cols: usize,
    head_dim: usize,
    base: f64,
    /// Per position, per channel pair: rotation angle. `[rows*cols, head_dim/2]`.
    angles: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// Build the table for a `rows x cols` patch grid.
    pub fn build(rows: usize, cols: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim {head_dim} must be a positive multiple of 4 (pairs split across two axes)"
            )));
        }
        if base <= 1.0 {
            return Err(Error::Config(format!("rope base {base} must be > 1")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Config("rope grid must be non-empty".to_string()));
        }
        let pairs = head_dim / 2;
        let axis_pairs = head_dim / 4;
        let half = pairs as f64; // exponent denominator: head_dim/2
        let mut angles = Vec::with_capacity(rows * cols * pairs);
        for r in 0..rows {
            for c in 0..cols {
                for i in 0..axis_pairs {
                    let freq = base.powf(-2.0 * i as f64 / half);
                    angles.push(r as f64 * freq);
                }
                for i in 0..axis_pairs {
                    let freq = base.powf(-2.0 * i as f64 / half);
                    angles.push(c as f64 * freq);
                }
            }
        }
        let cos = angles.iter().map(|a| a.cos()).collect();
        let sin = angles.iter().map(|a| a.sin()).collect();
        Ok(RopeTable {
            rows,
            cols,
            head_dim,
            base,
            angles,
            cos,
            sin,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angle for grid position (r, c) and channel pair `pair` (< head_dim/2).
    pub fn angle(&self, r: usize, c: usize, pair: usize) -> f64 {
        let pairs = self.head_dim / 2;
        self.angles[(r * self.cols + c) * pairs + pair]
    }

    fn rotate<T: Scalar>(
        &self,
        x: &mut Tensor<T>,
        heads: usize,
        skip: usize,
        invert: bool,
    ) -> Result<()> {
        let dim = x.cols();
        if dim % heads != 0 || dim / heads != self.head_dim {
            return Err(Error::shape(
                "rope",
                format!(
                    "tensor dim {dim} / heads {heads} does not match table head_dim {}",
                    self.head_dim
                ),
            ));
        }
        let tokens = x.rows();
        if tokens < skip || tokens - skip != self.rows * self.cols {
            return Err(Error::shape(
                "rope",
                format!(
                    "{} patch rows vs {}x{} grid",
                    tokens.saturating_sub(skip),
                    self.rows,
                    self.cols
                ),
            ));
        }
        let pairs = self.head_dim / 2;
        for t in skip..tokens {
            let pos = t - skip;
            let row = x.row_mut(t);
            for h in 0..heads {
                let off = h * self.head_dim;
                for i in 0..pairs {
                    let c = T::from_f64(self.cos[pos * pairs + i]);
                    let s = {
                        let s = self.sin[pos * pairs + i];
                        T::from_f64(if invert { -s } else { s })
                    };
                    let a = row[off + 2 * i];
                    let b = row[off + 2 * i + 1];
                    row[off + 2 * i] = a * c - b * s;
                    row[off + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        Ok(())
    }

    /// Rotate q or k rows in place. Rows `0..skip` (CLS + registers) are left
    /// untouched; row `skip + t` is patch `t` in row-major grid order.
    pub fn apply<T: Scalar>(&self, x: &mut Tensor<T>, heads: usize, skip: usize) -> Result<()> {
        self.rotate(x, heads, skip, false)
    }

    /// Inverse rotation; the rotation is orthonormal, so this is also the
    /// backward pass for gradients flowing through `apply`.
    pub fn unapply<T: Scalar>(&self, x: &mut Tensor<T>, heads: usize, skip: usize) -> Result<()> {
        self.rotate(x, heads, skip, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn head_dim_must_be_multiple_of_four() {
        assert!(RopeTable::build(2, 2, 6, DEFAULT_ROPE_BASE).is_err());
        assert!(RopeTable::build(2, 2, 0, DEFAULT_ROPE_BASE).is_err());
        assert!(RopeTable::build(2, 2, 8, DEFAULT_ROPE_BASE).is_ok());
    }

    #[test]
    fn angles_match_scalar_frequency_oracle() {
        // Independent recomputation: pair i of the row axis rotates by
        // r * base^(-2i/(d/2)); the column axis mirrors it with c.
        let (rows, cols, d, base) = (3, 4, 8, DEFAULT_ROPE_BASE);
        let table = RopeTable::build(rows, cols, d, base).unwrap();
        let axis_pairs = d / 4;
        for r in 0..rows {
            for c in 0..cols {
                for i in 0..axis_pairs {
                    let freq = base.powf(-2.0 * i as f64 / (d as f64 / 2.0));
                    let want_row = r as f64 * freq;
                    let want_col = c as f64 * freq;
                    assert!((table.angle(r, c, i) - want_row).abs() < 1e-12);
                    assert!((table.angle(r, c, axis_pairs + i) - want_col).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rebuild_at_larger_grid_keeps_shared_positions() {
        let small = RopeTable::build(2, 3, 12, DEFAULT_ROPE_BASE).unwrap();
        let large = RopeTable::build(5, 7, 12, DEFAULT_ROPE_BASE).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                for p in 0..6 {
                    assert_eq!(small.angle(r, c, p), large.angle(r, c, p));
                }
            }
        }
    }

    #[test]
    fn skipped_rows_stay_bit_identical() {
        let table = RopeTable::build(2, 2, 8, DEFAULT_ROPE_BASE).unwrap();
        let skip = 3; // CLS + 2 registers
        let mut x = Tensor::<f32>::from_fn(&[skip + 4, 8], |i| (i as f32 * 0.13).sin());
        let before = x.clone();
        table.apply(&mut x, 1, skip).unwrap();
        for r in 0..skip {
            assert_eq!(x.row(r), before.row(r), "row {r} was touched");
        }
        // And at least one patch row actually rotated.
        assert_ne!(x.row(skip + 1), before.row(skip + 1));
    }

    #[test]
    fn apply_then_unapply_roundtrips() {
        let table = RopeTable::build(3, 3, 8, DEFAULT_ROPE_BASE).unwrap();
        let mut x = Tensor::<f64>::from_fn(&[9, 16], |i| (i as f64 * 0.7).cos());
        let orig = x.clone();
        table.apply(&mut x, 2, 0).unwrap();
        table.unapply(&mut x, 2, 0).unwrap();
        for (a, b) in x.data().iter().zip(orig.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_shift_invariance_exhaustive_on_small_grids() {
        // <q(p1), k(p2)> must depend only on p1 - p2: exhaust all position
        // pairs and all in-bounds shifts on grids up to 4x4.
        let d = 8;
        let q = Tensor::<f64>::from_fn(&[1, d], |i| (i as f64 * 0.9 + 0.3).sin());
        let k = Tensor::<f64>::from_fn(&[1, d], |i| (i as f64 * 0.4 - 0.2).cos());
        for (rows, cols) in [(2usize, 2usize), (3, 4), (4, 4)] {
            let table = RopeTable::build(rows, cols, d, DEFAULT_ROPE_BASE).unwrap();
            let rotated = |r: usize, c: usize, t: &Tensor<f64>| {
                let mut grid = Tensor::<f64>::zeros(&[rows * cols, d]);
                for p in 0..rows * cols {
                    grid.row_mut(p).copy_from_slice(t.row(0));
                }
                table.apply(&mut grid, 1, 0).unwrap();
                grid.row(r * cols + c).to_vec()
            };
            for r1 in 0..rows {
                for c1 in 0..cols {
                    for r2 in 0..rows {
                        for c2 in 0..cols {
                            let base_dot: f64 = rotated(r1, c1, &q)
                                .iter()
                                .zip(rotated(r2, c2, &k))
                                .map(|(a, b)| a * b)
                                .sum();
                            for dr in 0..rows {
                                for dc in 0..cols {
                                    if r1 + dr >= rows || r2 + dr >= rows {
                                        continue;
                                    }
                                    if c1 + dc >= cols || c2 + dc >= cols {
                                        continue;
                                    }
                                    let shifted: f64 = rotated(r1 + dr, c1 + dc, &q)
                                        .iter()
                                        .zip(rotated(r2 + dr, c2 + dc, &k))
                                        .map(|(a, b)| a * b)
                                        .sum();
                                    assert!(
                                        (base_dot - shifted).abs() < 1e-6,
                                        "({r1},{c1})x({r2},{c2}) shift ({dr},{dc}): {base_dot} vs {shifted}"
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_row_norms(seed in 0u64..1000) {
            let table = RopeTable::build(3, 3, 8, DEFAULT_ROPE_BASE).unwrap();
            let mut x = Tensor::<f32>::from_fn(&[9, 16], |i| {
                let v = crate::rng::derive_seed(seed, "rope-prop", i as u64);
                ((v % 1000) as f32 / 500.0) - 1.0
            });
            let before: Vec<f32> = (0..9).map(|r| {
                x.row(r).iter().map(|v| v * v).sum::<f32>().sqrt()
            }).collect();
            table.apply(&mut x, 2, 0).unwrap();
            for r in 0..9 {
                let after = x.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
                prop_assert!((after - before[r]).abs() <= 1e-6 * before[r].max(1.0));
            }
        }
    }
}
