//! Hand-rolled forward/backward passes for the fixed op set the encoder is
//! built from: linear, layernorm, GELU, softmax and multi-head attention.
//! There is no autodiff graph — the model zoo is fixed, every op carries its
//! own backward, and composites chain them explicitly in reverse order.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initialization std for every learned weight.
pub const INIT_STD: f64 = 0.02;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named mutable views over a model's parameters, in a fixed traversal order.
pub type ParamsMut<'a, T> = Vec<(String, &'a mut Parameter<T>)>;
pub type ParamsRef<'a, T> = Vec<(String, &'a Parameter<T>)>;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x W + b`, weight stored `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Parameter::new(rng::trunc_normal(&[d_in, d_out], INIT_STD, rng)),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(
                "linear",
                format!("input cols {} vs weight rows {}", x.cols(), self.d_in()),
            ));
        }
        let mut y = x.matmul(&self.weight.value)?;
        let b = self.bias.value.data();
        let c = y.cols();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for j in 0..c {
                row[j] += b[j];
            }
        }
        Ok(y)
    }

    /// Accumulates dW and db, returns dx.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dw = x.matmul_transa(dy)?;
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&dy.sum_rows());
        dy.matmul_transb(&self.weight.value)
    }

    pub fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// Per-row 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(Tensor::full(&[dim], T::one())),
            beta: Parameter::new(Tensor::zeros(&[dim])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LnCache<T>)> {
        let dim = self.gamma.value.len();
        if x.cols() != dim {
            return Err(Error::shape(
                "layernorm",
                format!("input cols {} vs dim {dim}", x.cols()),
            ));
        }
        let n = x.rows();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n);
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut y = Tensor::zeros(x.shape());
        let eps = T::from_f64(self.eps);
        let dim_t = T::from_f64(dim as f64);
        for r in 0..n {
            let row = x.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dim_t;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= dim_t;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            let xh = xhat.row_mut(r);
            for (j, &v) in row.iter().enumerate() {
                xh[j] = (v - mean) * istd;
            }
            let yr = y.row_mut(r);
            for j in 0..dim {
                yr[j] = xh[j] * g[j] + b[j];
            }
        }
        Ok((y, LnCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LnCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dim = self.gamma.value.len();
        let n = dy.rows();
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dgamma = self.gamma.grad.data_mut();
        let dbeta = self.beta.grad.data_mut();
        let dim_t = T::from_f64(dim as f64);
        for r in 0..n {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let istd = cache.inv_std[r];
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for j in 0..dim {
                let dxh = dyr[j] * g[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[j];
                dgamma[j] += dyr[j] * xh[j];
                dbeta[j] += dyr[j];
            }
            mean_dxhat /= dim_t;
            mean_dxhat_xhat /= dim_t;
            let dxr = dx.row_mut(r);
            for j in 0..dim {
                let dxh = dyr[j] * g[j];
                dxr[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        Ok(dx)
    }

    pub fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |xi, di| gelu_grad_scalar(xi) * di)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise `softmax(x / temp)`, max-shifted for stability.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, temp: f64) -> Result<Tensor<T>> {
    if temp <= 0.0 {
        return Err(Error::argument("softmax", format!("temperature {temp} <= 0")));
    }
    let inv_t = T::from_f64(1.0 / temp);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let o = out.row_mut(r);
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - m) * inv_t).exp();
            o[j] = e;
            z += e;
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Row-wise `log softmax(x / temp)`.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>, temp: f64) -> Result<Tensor<T>> {
    if temp <= 0.0 {
        return Err(Error::argument("log_softmax", format!("temperature {temp} <= 0")));
    }
    let inv_t = T::from_f64(1.0 / temp);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut z = T::zero();
        for &v in row {
            z += ((v - m) * inv_t).exp();
        }
        let log_z = z.ln();
        let o = out.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            o[j] = (v - m) * inv_t - log_z;
        }
    }
    Ok(out)
}

/// Backward through `p = softmax(x / temp)` given `dL/dp`.
pub fn softmax_rows_backward<T: Scalar>(probs: &Tensor<T>, dy: &Tensor<T>, temp: f64) -> Tensor<T> {
    let inv_t = T::from_f64(1.0 / temp);
    let mut dx = Tensor::zeros(probs.shape());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let d = dy.row(r);
        let mut dot = T::zero();
        for j in 0..p.len() {
            dot += d[j] * p[j];
        }
        let o = dx.row_mut(r);
        for j in 0..p.len() {
            o[j] = inv_t * p[j] * (d[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    /// Per-head attention probabilities, each `[n, n]`.
    pub probs: Vec<Tensor<T>>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, dh: usize) -> Tensor<T> {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, dh]);
    for r in 0..n {
        let src = &x.row(r)[head * dh..(head + 1) * dh];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

fn head_add<T: Scalar>(dst: &mut Tensor<T>, head: usize, dh: usize, src: &Tensor<T>) {
    for r in 0..dst.rows() {
        let s = src.row(r);
        let d = &mut dst.row_mut(r)[head * dh..(head + 1) * dh];
        for j in 0..dh {
            d[j] += s[j];
        }
    }
}

/// Scaled dot-product attention over `heads` column groups of q/k/v
/// (`[n, dim]` each, dim divisible by heads). Returns the concatenated
/// context `[n, dim]`.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let dim = q.cols();
    if k.cols() != dim || v.cols() != dim {
        return Err(Error::shape("attention", "q/k/v dims differ".to_string()));
    }
    if dim % heads != 0 {
        return Err(Error::argument(
            "attention",
            format!("dim {dim} not divisible by heads {heads}"),
        ));
    }
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = q.rows();
    let mut ctx = Tensor::zeros(&[n, dim]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        let vh = head_slice(v, h, dh);
        let mut scores = qh.matmul_transb(&kh)?;
        scores.scale_assign(scale);
        let p = softmax_rows(&scores, 1.0)?;
        let ctx_h = p.matmul(&vh)?;
        head_add(&mut ctx, h, dh, &ctx_h);
        probs.push(p);
    }
    Ok((
        ctx,
        AttnCache {
            probs,
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
        },
    ))
}

/// Backward of `attention_forward`; returns (dq, dk, dv).
pub fn attention_backward<T: Scalar>(
    cache: &AttnCache<T>,
    d_ctx: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let heads = cache.probs.len();
    let dim = cache.q.cols();
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = cache.q.rows();
    let mut dq = Tensor::zeros(&[n, dim]);
    let mut dk = Tensor::zeros(&[n, dim]);
    let mut dv = Tensor::zeros(&[n, dim]);
    for h in 0..heads {
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let dc = head_slice(d_ctx, h, dh);
        let p = &cache.probs[h];
        let dp = dc.matmul_transb(&vh)?;
        let dvh = p.matmul_transa(&dc)?;
        let mut ds = softmax_rows_backward(p, &dp, 1.0);
        ds.scale_assign(scale);
        let dqh = ds.matmul(&kh)?;
        let dkh = ds.matmul_transa(&qh)?;
        head_add(&mut dq, h, dh, &dqh);
        head_add(&mut dk, h, dh, &dkh);
        head_add(&mut dv, h, dh, &dvh);
    }
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Pre-norm transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub ln1: LnCache<T>,
    pub a_in: Tensor<T>,
    pub attn: AttnCache<T>,
    pub ctx: Tensor<T>,
    pub ln2: LnCache<T>,
    pub m_in: Tensor<T>,
    pub z1: Tensor<T>,
    pub a1: Tensor<T>,
    /// Rows at the top of the sequence (CLS + registers) that bypass RoPE.
    pub rope_skip: usize,
}

impl<T: Scalar> Block<T> {
    pub fn init(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            wq: Linear::init(dim, dim, rng),
            wk: Linear::init(dim, dim, rng),
            wv: Linear::init(dim, dim, rng),
            wo: Linear::init(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, dim * mlp_ratio, rng),
            fc2: Linear::init(dim * mlp_ratio, dim, rng),
            heads,
        }
    }

    /// Forward pass over one token sequence `[n, dim]`. When `rope` is set,
    /// q and k rows from `rope_skip` on are rotated by their grid position.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        rope: Option<&RopeTable>,
        rope_skip: usize,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (a_in, ln1) = self.ln1.forward(x)?;
        let mut q = self.wq.forward(&a_in)?;
        let mut k = self.wk.forward(&a_in)?;
        let v = self.wv.forward(&a_in)?;
        if let Some(table) = rope {
            table.apply(&mut q, self.heads, rope_skip)?;
            table.apply(&mut k, self.heads, rope_skip)?;
        }
        let (ctx, attn) = attention_forward(&q, &k, &v, self.heads)?;
        let attn_out = self.wo.forward(&ctx)?;
        let h = x.add(&attn_out);
        let (m_in, ln2) = self.ln2.forward(&h)?;
        let z1 = self.fc1.forward(&m_in)?;
        let a1 = gelu(&z1);
        let mlp_out = self.fc2.forward(&a1)?;
        let y = h.add(&mlp_out);
        Ok((
            y,
            BlockCache {
                ln1,
                a_in,
                attn,
                ctx,
                ln2,
                m_in,
                z1,
                a1,
                rope_skip,
            },
        ))
    }

    /// Backward pass; accumulates parameter grads, returns dx.
    /// `x` must be the block input that produced `cache`.
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        rope: Option<&RopeTable>,
    ) -> Result<Tensor<T>> {
        // y = h + fc2(gelu(fc1(ln2(h))))
        let da1 = self.fc2.backward(&cache.a1, dy)?;
        let dz1 = gelu_backward(&cache.z1, &da1);
        let dm_in = self.fc1.backward(&cache.m_in, &dz1)?;
        let mut dh = self.ln2.backward(&cache.ln2, &dm_in)?;
        dh.add_assign(dy);

        // h = x + wo(attention(q, k, v))
        let d_ctx = self.wo.backward(&cache.ctx, &dh)?;
        let (mut dq, mut dk, dv) = attention_backward(&cache.attn, &d_ctx)?;
        if let Some(table) = rope {
            table.unapply(&mut dq, self.heads, cache.rope_skip)?;
            table.unapply(&mut dk, self.heads, cache.rope_skip)?;
        }
        let mut da_in = self.wq.backward(&cache.a_in, &dq)?;
        da_in.add_assign(&self.wk.backward(&cache.a_in, &dk)?);
        da_in.add_assign(&self.wv.backward(&cache.a_in, &dv)?);
        let mut dx = self.ln1.backward(&cache.ln1, &da_in)?;
        dx.add_assign(&dh);
        Ok(dx)
    }

    pub fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.ln1.collect_params_mut(&format!("{prefix}.ln1"), out);
        self.wq.collect_params_mut(&format!("{prefix}.wq"), out);
        self.wk.collect_params_mut(&format!("{prefix}.wk"), out);
        self.wv.collect_params_mut(&format!("{prefix}.wv"), out);
        self.wo.collect_params_mut(&format!("{prefix}.wo"), out);
        self.ln2.collect_params_mut(&format!("{prefix}.ln2"), out);
        self.fc1.collect_params_mut(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params_mut(&format!("{prefix}.fc2"), out);
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// (tensor index, flat element index, numeric, analytic) for the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Guard for the relative-error denominator. Secant noise on a well-behaved
/// f64 objective sits around 1e-11; entries whose true gradient is smaller
/// than the guard are effectively compared absolutely at guard scale, so the
/// noise cannot masquerade as a large relative error.
const GRAD_CHECK_GUARD: f64 = 1e-3;

/// Central finite differences against analytic gradients, in f64.
///
/// `values` are perturbed in place entry by entry (and restored); `loss`
/// re-evaluates the scalar objective from the current values. Tensors larger
/// than `max_entries_per_tensor` are subsampled deterministically from
/// `seed` so composite checks stay inside a time budget.
pub fn grad_check(
    values: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    eps: f64,
    max_entries_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(values.len(), analytic.len());
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for t in 0..values.len() {
        assert_eq!(values[t].shape(), analytic[t].shape(), "tensor {t} shape");
        let n = values[t].len();
        let indices: Vec<usize> = if n <= max_entries_per_tensor {
            (0..n).collect()
        } else {
            use rand::Rng;
            let mut r = rng::stream(seed, "gradcheck", t as u64);
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < max_entries_per_tensor {
                picked.insert(r.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        for idx in indices {
            let orig = values[t].data()[idx];
            values[t].data_mut()[idx] = orig + eps;
            let up = loss(values);
            values[t].data_mut()[idx] = orig - eps;
            let down = loss(values);
            values[t].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ana = analytic[t].data()[idx];
            let rel = (numeric - ana).abs() / (numeric.abs() + ana.abs()).max(GRAD_CHECK_GUARD);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((t, idx, numeric, ana));
            }
        }
    }
    report
}
