//! Flexible patch-size tokenization. Patch-embedding weights live at one
//! native resolution (the largest configured size) and are resized to the
//! step's patch size through the pseudo-inverse of an explicit bilinear
//! resize matrix, so token inner products are preserved where the algebra
//! allows it. A plain bilinear fallback exists for comparison runs.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{solve, Mat};
use crate::nn::Parameter;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How stored weights are mapped to the active patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// ŵ = (B⁺)ᵀ w — preserves ⟨ŵ, Bx⟩ = ⟨w, x⟩ in the full-column-rank case.
    PseudoInverse,
    /// ŵ = B w — naive interpolation of the weight map, kept as a baseline.
    PlainBilinear,
}

/// 1D bilinear interpolation matrix `[target, native]` (half-pixel centers).
fn resize_matrix_1d(native: usize, target: usize) -> Mat {
    let mut m = Mat::zeros(target, native);
    for t in 0..target {
        let src = (t as f64 + 0.5) * native as f64 / target as f64 - 0.5;
        let src = src.clamp(0.0, (native - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(native - 1);
        let frac = src - i0 as f64;
        m.set(t, i0, m.at(t, i0) + (1.0 - frac));
        if i1 != i0 {
            m.set(t, i1, frac);
        }
    }
    m
}

/// Explicit per-channel bilinear resize matrix `B: [target², native²]`
/// mapping a flattened native patch to a flattened target patch.
pub fn build_resize_matrix(native: usize, target: usize) -> Mat {
    let b1 = resize_matrix_1d(native, target);
    let mut b = Mat::zeros(target * target, native * native);
    for ty in 0..target {
        for tx in 0..target {
            let row = ty * target + tx;
            for sy in 0..native {
                let wy = b1.at(ty, sy);
                if wy == 0.0 {
                    continue;
                }
                for sx in 0..native {
                    let wx = b1.at(tx, sx);
                    if wx == 0.0 {
                        continue;
                    }
                    b.set(row, sy * native + sx, wy * wx);
                }
            }
        }
    }
    b
}

/// The matrix applied to stored weights for a given mode:
/// pseudo-inverse route returns `P = (Bᵀ)⁺`, plain route returns `B`.
pub fn resize_weight_matrix(native: usize, target: usize, mode: ResizeMode) -> Result<Mat> {
    let b = build_resize_matrix(native, target);
    match mode {
        ResizeMode::PlainBilinear => Ok(b),
        ResizeMode::PseudoInverse => {
            if target >= native {
                // B tall (or square), full column rank: (Bᵀ)⁺ = B (BᵀB)⁻¹.
                let btb = b.matmul_transa(&b);
                let inv = solve(&btb, &Mat::eye(btb.rows)).map_err(|e| {
                    Error::numerical("pi_resize", format!("normal equations (BᵀB): {e}"))
                })?;
                Ok(b.matmul(&inv))
            } else {
                // B wide, full row rank: (Bᵀ)⁺ = (BBᵀ)⁻¹ B.
                let bbt = b.matmul_transb(&b);
                solve(&bbt, &b).map_err(|e| {
                    Error::numerical("pi_resize", format!("normal equations (BBᵀ): {e}"))
                })
            }
        }
    }
}

/// Apply a `[target², native²]` spatial matrix to weights stored as
/// `[native² * channels, dim]` with the (spatial, channel) row index fused
/// spatial-major. Accumulates in f64.
fn apply_spatial<T: Scalar>(
    m: &Mat,
    w: &Tensor<T>,
    channels: usize,
) -> Tensor<T> {
    let native_sq = m.cols;
    let target_sq = m.rows;
    let dim = w.cols();
    assert_eq!(w.rows(), native_sq * channels, "weight rows vs native²·C");
    let mut out = Tensor::<T>::zeros(&[target_sq * channels, dim]);
    for t in 0..target_sq {
        let mrow = m.row(t);
        for c in 0..channels {
            let orow = out.row_mut(t * channels + c);
            for (s, &coef) in mrow.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                let wrow = w.row(s * channels + c);
                for d in 0..dim {
                    let acc = orow[d].to_f64_lossy() + coef * wrow[d].to_f64_lossy();
                    orow[d] = T::from_f64(acc);
                }
            }
        }
    }
    out
}

/// Resize stored patch-embedding weights from their native size to `target`.
/// `weights` is `[native² * channels, dim]`. Returns the input bit-identical
/// when `target == native`.
pub fn pi_resize<T: Scalar>(
    weights: &Tensor<T>,
    native: usize,
    channels: usize,
    target: usize,
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    if native == 0 || target == 0 {
        return Err(Error::argument("pi_resize", "sizes must be positive"));
    }
    if weights.rows() != native * native * channels {
        return Err(Error::shape(
            "pi_resize",
            format!(
                "weight rows {} vs native²·C = {}",
                weights.rows(),
                native * native * channels
            ),
        ));
    }
    if target == native {
        return Ok(weights.clone());
    }
    let m = resize_weight_matrix(native, target, mode)?;
    Ok(apply_spatial(&m, weights, channels))
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Cut a `[h, w, c]` tile into non-overlapping `p x p` patches, flattened
/// row-major with the channel innermost: output `[grid_h*grid_w, p²*c]`.
pub fn extract_patches<T: Scalar>(tile: &Tensor<T>, p: usize) -> Result<(Tensor<T>, (usize, usize))> {
    if tile.rank() != 3 {
        return Err(Error::shape(
            "extract_patches",
            format!("expected [h, w, c], got {:?}", tile.shape()),
        ));
    }
    let (h, w, c) = (tile.shape()[0], tile.shape()[1], tile.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::argument(
            "extract_patches",
            format!("patch size {p} must divide tile {h}x{w}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Tensor::zeros(&[gh * gw, p * p * c]);
    let data = tile.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    let src = ((gy * p + py) * w + (gx * p + px)) * c;
                    let dst = (py * p + px) * c;
                    row[dst..dst + c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    Ok((out, (gh, gw)))
}

// ---------------------------------------------------------------------------
// Patch embedding with resize plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub target: usize,
    /// Spatial weight map `[target², native²]`; `None` marks the identity.
    pub matrix: Option<Mat>,
}

#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    /// `[native² * channels, dim]`, spatial-major fused row index.
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub native: usize,
    pub channels: usize,
    pub mode: ResizeMode,
    plans: BTreeMap<usize, ResizePlan>,
}

/// Per-step resized weights plus their gradient accumulator. One kernel is
/// prepared per (tower, step) and shared across all views of that step.
#[derive(Debug, Clone)]
pub struct EmbedKernel<T> {
    pub patch_size: usize,
    pub w_hat: Tensor<T>,
    pub d_w_hat: Tensor<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn init(
        native: usize,
        channels: usize,
        dim: usize,
        sizes: &[usize],
        mode: ResizeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("patch size list is empty".to_string()));
        }
        let weight = Parameter::new(rng::trunc_normal(
            &[native * native * channels, dim],
            crate::nn::INIT_STD,
            rng,
        ));
        let bias = Parameter::new(Tensor::zeros(&[dim]));
        let mut plans = BTreeMap::new();
        for &s in sizes {
            let matrix = if s == native {
                None
            } else {
                Some(resize_weight_matrix(native, s, mode)?)
            };
            plans.insert(s, ResizePlan { target: s, matrix });
        }
        Ok(PatchEmbed {
            weight,
            bias,
            native,
            channels,
            mode,
            plans,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// Resize weights for this step's patch size.
    pub fn kernel(&self, patch_size: usize) -> Result<EmbedKernel<T>> {
        let plan = self.plans.get(&patch_size).ok_or_else(|| {
            Error::argument(
                "patch_embed",
                format!("patch size {patch_size} not in configured schedule"),
            )
        })?;
        let w_hat = match &plan.matrix {
            None => self.weight.value.clone(),
            Some(m) => apply_spatial(m, &self.weight.value, self.channels),
        };
        let d_w_hat = Tensor::zeros(w_hat.shape());
        Ok(EmbedKernel {
            patch_size,
            w_hat,
            d_w_hat,
        })
    }

    /// Tokenize a `[h, w, c]` tile: returns tokens `[n, dim]`, the flattened
    /// patch matrix (cached for backward) and the patch grid.
    pub fn forward(
        &self,
        kernel: &EmbedKernel<T>,
        tile: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, (usize, usize))> {
        if tile.shape()[2] != self.channels {
            return Err(Error::shape(
                "patch_embed",
                format!("tile channels {} vs {}", tile.shape()[2], self.channels),
            ));
        }
        let (x, grid) = extract_patches(tile, kernel.patch_size)?;
        let mut tokens = x.matmul(&kernel.w_hat)?;
        let b = self.bias.value.data();
        for r in 0..tokens.rows() {
            let row = tokens.row_mut(r);
            for (j, &bv) in b.iter().enumerate() {
                row[j] += bv;
            }
        }
        Ok((tokens, x, grid))
    }

    /// Accumulate gradients for one view into the kernel and bias. Pixel
    /// gradients are not produced — tiles are inputs, never parameters.
    pub fn backward(
        &mut self,
        kernel: &mut EmbedKernel<T>,
        x_cache: &Tensor<T>,
        d_tokens: &Tensor<T>,
    ) -> Result<()> {
        let dw = x_cache.matmul_transa(d_tokens)?;
        kernel.d_w_hat.add_assign(&dw);
        self.bias.grad.add_assign(&d_tokens.sum_rows());
        Ok(())
    }

    /// Push a kernel's accumulated gradient back through the (linear) resize
    /// onto the native weights: dW += Pᵀ dŴ.
    pub fn finalize_kernel(&mut self, kernel: EmbedKernel<T>) -> Result<()> {
        let plan = self
            .plans
            .get(&kernel.patch_size)
            .expect("kernel was produced from this embed");
        match &plan.matrix {
            None => self.weight.grad.add_assign(&kernel.d_w_hat),
            Some(m) => {
                let dim = kernel.d_w_hat.cols();
                let native_sq = m.cols;
                let grad = self.weight.grad.data_mut();
                for t in 0..m.rows {
                    let mrow = m.row(t);
                    for c in 0..self.channels {
                        let drow = kernel.d_w_hat.row(t * self.channels + c);
                        for (s, &coef) in mrow.iter().enumerate() {
                            if coef == 0.0 {
                                continue;
                            }
                            debug_assert!(s < native_sq);
                            let base = (s * self.channels + c) * dim;
                            for d in 0..dim {
                                let acc = grad[base + d].to_f64_lossy()
                                    + coef * drow[d].to_f64_lossy();
                                grad[base + d] = T::from_f64(acc);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut crate::nn::ParamsMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut crate::nn::ParamsRef<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}

// ---------------------------------------------------------------------------
// Patch-size schedule
// ---------------------------------------------------------------------------

/// Candidate patch sizes for flexible tokenization; one size is drawn
/// uniformly per step (whole batch shares it).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PatchSizeSchedule {
    pub sizes: Vec<usize>,
}

impl PatchSizeSchedule {
    pub fn new(mut sizes: Vec<usize>) -> Result<Self> {
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.is_empty() {
            return Err(Error::Config("patch size schedule is empty".to_string()));
        }
        if sizes[0] == 0 {
            return Err(Error::Config("patch size 0 is invalid".to_string()));
        }
        Ok(PatchSizeSchedule { sizes })
    }

    pub fn native(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Deterministic uniform draw for (seed, step).
    pub fn sample(&self, seed: u64, step: u64) -> usize {
        if self.sizes.len() == 1 {
            return self.sizes[0];
        }
        let mut r = rng::stream(seed, "patch-size", step);
        self.sizes[r.gen_range(0..self.sizes.len())]
    }
}
