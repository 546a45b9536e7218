//! Embedding probes: frozen-encoder feature extraction, a multinomial
//! logistic probe with balanced-accuracy / macro-F1 reporting, a PCA + ridge
//! regression probe for continuous targets, and a small gated-attention MIL
//! head for slide-level labels.
//!
//! Everything here treats the encoder as frozen: probes never push gradients
//! into the embeddings. Probe arithmetic runs in f64 regardless of the
//! encoder's scalar type.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

/// How a tile becomes one embedding vector. Register tokens are never
/// included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// The CLS token alone: `dim` features.
    Cls,
    /// CLS concatenated with the mean patch token: `2 * dim` features.
    ClsPlusMeanPatch,
}

impl EmbedMode {
    pub fn label(self) -> &'static str {
        match self {
            EmbedMode::Cls => "cls",
            EmbedMode::ClsPlusMeanPatch => "cls_plus_mean_patch",
        }
    }

    pub fn embed_dim(self, encoder_dim: usize) -> usize {
        match self {
            EmbedMode::Cls => encoder_dim,
            EmbedMode::ClsPlusMeanPatch => 2 * encoder_dim,
        }
    }
}

/// Run every tile through the frozen encoder at one patch size and stack the
/// embeddings into `[n_tiles, embed_dim]`.
pub fn extract_embeddings<T: Scalar>(
    encoder: &Encoder<T>,
    patch_size: usize,
    tiles: &[Tensor<T>],
    mode: EmbedMode,
) -> Result<Tensor<f32>> {
    if tiles.is_empty() {
        return Err(Error::argument("extract_embeddings", "no tiles given"));
    }
    let kernel = encoder.kernel(patch_size)?;
    let dim = encoder.config.dim;
    let out_dim = mode.embed_dim(dim);
    let mut out = Tensor::<f32>::zeros(&[tiles.len(), out_dim]);
    for (i, tile) in tiles.iter().enumerate() {
        let (tokens, acts) = encoder.forward(&kernel, tile, None)?;
        let seq = encoder.split_tokens(&tokens, acts.grid, patch_size);
        let row = out.row_mut(i);
        for (j, &v) in seq.cls.data().iter().enumerate() {
            row[j] = v.to_f64_lossy() as f32;
        }
        if mode == EmbedMode::ClsPlusMeanPatch {
            let n = seq.patches.rows() as f64;
            for j in 0..dim {
                let mut acc = 0.0f64;
                for p in 0..seq.patches.rows() {
                    acc += seq.patches.row(p)[j].to_f64_lossy();
                }
                row[dim + j] = (acc / n) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

fn check_label_pair(op: &'static str, pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::argument(
            op,
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::argument(op, "no samples"));
    }
    Ok(())
}

/// Mean per-class recall. Classes that never occur in `truth` are excluded
/// from the mean entirely.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_label_pair("balanced_accuracy", pred, truth)?;
    let n_classes = truth.iter().chain(pred).max().unwrap() + 1;
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if totals[c] > 0 {
            acc += hits[c] as f64 / totals[c] as f64;
            present += 1;
        }
    }
    Ok(acc / present as f64)
}

/// Mean per-class F1. As with balanced accuracy, classes absent from `truth`
/// do not enter the mean, even if they appear among the predictions.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_label_pair("macro_f1", pred, truth)?;
    let n_classes = truth.iter().chain(pred).max().unwrap() + 1;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut in_truth = vec![false; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        in_truth[t] = true;
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if !in_truth[c] {
            continue;
        }
        let prec_den = tp[c] + fp[c];
        let rec_den = tp[c] + fn_[c];
        let precision = if prec_den == 0 { 0.0 } else { tp[c] as f64 / prec_den as f64 };
        let recall = if rec_den == 0 { 0.0 } else { tp[c] as f64 / rec_den as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        acc += f1;
        present += 1;
    }
    Ok(acc / present as f64)
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LinearProbeConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Stop once the full-batch gradient norm drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            max_iters: 500,
            lr: 0.5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearProbeReport {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub train_loss: f64,
    pub iters_run: usize,
    pub final_grad_norm: f64,
    pub predictions: Vec<usize>,
}

fn to_mat(x: &Tensor<f32>) -> Mat {
    Mat {
        rows: x.rows(),
        cols: x.cols(),
        data: x.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Per-feature standardization statistics from the training split.
fn standardize_stats(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows, x.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = x.at(i, j) - mean[j];
            var[j] += c * c;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n as f64).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, scale)
}

fn apply_standardize(x: &mut Mat, mean: &[f64], scale: &[f64]) {
    for i in 0..x.rows {
        for j in 0..x.cols {
            let v = (x.at(i, j) - mean[j]) / scale[j];
            x.set(i, j, v);
        }
    }
}

/// Multinomial logistic regression on frozen embeddings, trained by
/// full-batch gradient descent until the gradient norm reaches `tol` or the
/// iteration budget runs out. Features are standardized internally with
/// training-split statistics.
pub fn linear_probe(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    cfg: &LinearProbeConfig,
) -> Result<LinearProbeReport> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::argument("linear_probe", "embedding/label count mismatch"));
    }
    if train_x.rows() == 0 || test_x.rows() == 0 {
        return Err(Error::argument("linear_probe", "empty split"));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::argument("linear_probe", "train/test feature width mismatch"));
    }
    let mut seen = std::collections::BTreeSet::new();
    seen.extend(train_y.iter().copied());
    if seen.len() < 2 {
        return Err(Error::argument(
            "linear_probe",
            format!("need at least 2 training classes, got {}", seen.len()),
        ));
    }
    let n_classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    let (n, d) = (train_x.rows(), train_x.cols());

    let mut xs = to_mat(train_x);
    let (mean, scale) = standardize_stats(&xs);
    apply_standardize(&mut xs, &mean, &scale);
    let mut xt = to_mat(test_x);
    apply_standardize(&mut xt, &mean, &scale);

    let mut r = rng::stream(cfg.seed, "linear-probe-init", 0);
    let w0: Tensor<f64> = rng::trunc_normal(&[d, n_classes], 0.01, &mut r);
    let mut w = Mat {
        rows: d,
        cols: n_classes,
        data: w0.data().to_vec(),
    };
    let mut b = vec![0.0f64; n_classes];

    let mut train_loss = 0.0;
    let mut grad_norm = f64::INFINITY;
    let mut iters_run = 0;
    for _ in 0..cfg.max_iters {
        // Forward: probabilities and loss.
        let mut gw = Mat::zeros(d, n_classes);
        let mut gb = vec![0.0f64; n_classes];
        train_loss = 0.0;
        for i in 0..n {
            let xi = xs.row(i);
            let mut logits = b.clone();
            for (j, &xv) in xi.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for c in 0..n_classes {
                    logits[c] += xv * w.at(j, c);
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - mx).exp();
                z += *l;
            }
            train_loss -= (logits[train_y[i]] / z).ln();
            for c in 0..n_classes {
                let delta = logits[c] / z - if c == train_y[i] { 1.0 } else { 0.0 };
                gb[c] += delta;
                for (j, &xv) in xi.iter().enumerate() {
                    gw.data[j * n_classes + c] += xv * delta;
                }
            }
        }
        train_loss /= n as f64;
        let inv_n = 1.0 / n as f64;
        let mut sq = 0.0;
        for g in &mut gw.data {
            *g *= inv_n;
            sq += *g * *g;
        }
        for g in &mut gb {
            *g *= inv_n;
            sq += *g * *g;
        }
        grad_norm = sq.sqrt();
        iters_run += 1;
        if grad_norm < cfg.tol {
            break;
        }
        for (wv, gv) in w.data.iter_mut().zip(&gw.data) {
            *wv -= cfg.lr * gv;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * gv;
        }
    }

    let mut predictions = Vec::with_capacity(xt.rows);
    for i in 0..xt.rows {
        let xi = xt.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..n_classes {
            let mut l = b[c];
            for (j, &xv) in xi.iter().enumerate() {
                l += xv * w.at(j, c);
            }
            if l > best.1 {
                best = (c, l);
            }
        }
        predictions.push(best.0);
    }

    Ok(LinearProbeReport {
        balanced_accuracy: balanced_accuracy(&predictions, test_y)?,
        macro_f1: macro_f1(&predictions, test_y)?,
        train_loss,
        iters_run,
        final_grad_norm: grad_norm,
        predictions,
    })
}

// ---------------------------------------------------------------------------
// PCA + ridge probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RidgePcaConfig {
    /// Number of principal components kept (clamped to the feature width).
    pub pca_dims: usize,
    pub lambda: f64,
}

impl Default for RidgePcaConfig {
    fn default() -> Self {
        RidgePcaConfig {
            pca_dims: 64,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RidgePcaReport {
    pub mean_pearson: f64,
    pub per_target: Vec<f64>,
    /// Targets whose prediction or truth had zero variance; those score 0.
    pub zero_variance_targets: Vec<usize>,
    pub dims_used: usize,
}

/// PCA on the training embeddings followed by per-target ridge regression in
/// the component space. Reports mean Pearson correlation on the test split.
pub fn ridge_pca_probe(
    train_x: &Tensor<f32>,
    train_y: &Tensor<f32>,
    test_x: &Tensor<f32>,
    test_y: &Tensor<f32>,
    cfg: &RidgePcaConfig,
) -> Result<RidgePcaReport> {
    if train_x.rows() != train_y.rows() || test_x.rows() != test_y.rows() {
        return Err(Error::argument("ridge_pca_probe", "embedding/target count mismatch"));
    }
    if train_x.rows() < 2 || test_x.rows() < 2 {
        return Err(Error::argument("ridge_pca_probe", "need at least 2 samples per split"));
    }
    if train_y.cols() != test_y.cols() || train_y.cols() == 0 {
        return Err(Error::argument("ridge_pca_probe", "target widths differ or are zero"));
    }
    if cfg.pca_dims == 0 {
        return Err(Error::argument("ridge_pca_probe", "pca_dims must be positive"));
    }
    let (n, d) = (train_x.rows(), train_x.cols());
    let k = cfg.pca_dims.min(d);
    let t = train_y.cols();

    // Center by the training mean only.
    let mut xc = to_mat(train_x);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(xc.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            let v = xc.at(i, j) - mean[j];
            xc.set(i, j, v);
        }
    }
    let mut xtc = to_mat(test_x);
    for i in 0..xtc.rows {
        for j in 0..d {
            let v = xtc.at(i, j) - mean[j];
            xtc.set(i, j, v);
        }
    }

    let mut cov = xc.matmul_transa(&xc);
    let inv = 1.0 / (n - 1) as f64;
    for v in &mut cov.data {
        *v *= inv;
    }
    let (_, vecs) = linalg::symmetric_eigen(&cov, 64)?;
    let mut proj = Mat::zeros(k, d);
    for r in 0..k {
        proj.data[r * d..(r + 1) * d].copy_from_slice(vecs.row(r));
    }

    let z = xc.matmul_transb(&proj);
    let zt = xtc.matmul_transb(&proj);

    let mut a = z.matmul_transa(&z);
    for i in 0..k {
        a.data[i * k + i] += cfg.lambda;
    }
    let ym = to_mat(train_y);
    let rhs = z.matmul_transa(&ym);
    let beta = linalg::solve(&a, &rhs).map_err(|_| {
        Error::numerical(
            "ridge_pca_probe",
            format!(
                "normal equations are singular at lambda {}; retry with lambda > 0",
                cfg.lambda
            ),
        )
    })?;
    let preds = zt.matmul(&beta);

    let truth = to_mat(test_y);
    let mut per_target = Vec::with_capacity(t);
    let mut zero_variance_targets = Vec::new();
    for j in 0..t {
        let p: Vec<f64> = (0..preds.rows).map(|i| preds.at(i, j)).collect();
        let y: Vec<f64> = (0..truth.rows).map(|i| truth.at(i, j)).collect();
        match pearson(&p, &y) {
            Some(r) => per_target.push(r),
            None => {
                per_target.push(0.0);
                zero_variance_targets.push(j);
            }
        }
    }
    let mean_pearson = per_target.iter().sum::<f64>() / t as f64;
    Ok(RidgePcaReport {
        mean_pearson,
        per_target,
        zero_variance_targets,
        dims_used: k,
    })
}

// ---------------------------------------------------------------------------
// Gated-attention MIL head
// ---------------------------------------------------------------------------

/// Gated attention pooling over a bag of tile embeddings, plus a linear
/// classifier on the pooled vector. The embeddings themselves stay frozen:
/// backward produces gradients for the head only.
#[derive(Debug, Clone)]
pub struct Abmil<T> {
    /// `[dim, attn_dim]` tanh branch.
    pub v: Tensor<T>,
    /// `[dim, attn_dim]` sigmoid gate branch.
    pub u: Tensor<T>,
    /// `[attn_dim]` attention score vector.
    pub w: Tensor<T>,
    /// `[dim, classes]`.
    pub classifier_w: Tensor<T>,
    /// `[classes]`.
    pub classifier_b: Tensor<T>,
}

#[derive(Debug)]
pub struct AbmilCache<T> {
    t: Tensor<T>,
    g: Tensor<T>,
    alpha: Vec<f64>,
    z: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AbmilGrads<T> {
    pub v: Tensor<T>,
    pub u: Tensor<T>,
    pub w: Tensor<T>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
}

impl<T: Scalar> Abmil<T> {
    pub fn init(dim: usize, attn_dim: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "abmil-init", 0);
        Abmil {
            v: rng::trunc_normal(&[dim, attn_dim], 0.02, &mut r),
            u: rng::trunc_normal(&[dim, attn_dim], 0.02, &mut r),
            w: rng::trunc_normal(&[attn_dim], 0.02, &mut r),
            classifier_w: rng::trunc_normal(&[dim, classes], 0.02, &mut r),
            classifier_b: Tensor::zeros(&[classes]),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn attn_dim(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classifier_b.len()
    }

    fn check_bag(&self, h: &Tensor<T>) -> Result<()> {
        if h.shape().len() != 2 || h.rows() == 0 {
            return Err(Error::argument("abmil", "bag must be a non-empty [tiles, dim] matrix"));
        }
        if h.cols() != self.dim() {
            return Err(Error::shape(
                "abmil",
                format!("bag width {} vs head dim {}", h.cols(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Forward over one bag `[n, dim]`. Returns class probabilities, the
    /// per-tile attention weights (they sum to 1), and the cache backward
    /// needs.
    pub fn forward(&self, h: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, AbmilCache<T>)> {
        self.check_bag(h)?;
        let (n, d, a, c) = (h.rows(), self.dim(), self.attn_dim(), self.classes());
        let mut t = Tensor::<T>::zeros(&[n, a]);
        let mut g = Tensor::<T>::zeros(&[n, a]);
        let mut scores = vec![0.0f64; n];
        for i in 0..n {
            let hi = h.row(i);
            for k in 0..a {
                let mut tv = 0.0;
                let mut gv = 0.0;
                for j in 0..d {
                    let x = hi[j].to_f64_lossy();
                    tv += x * self.v.data()[j * a + k].to_f64_lossy();
                    gv += x * self.u.data()[j * a + k].to_f64_lossy();
                }
                let tt = tv.tanh();
                let gg = 1.0 / (1.0 + (-gv).exp());
                t.row_mut(i)[k] = T::from_f64(tt);
                g.row_mut(i)[k] = T::from_f64(gg);
                scores[i] += self.w.data()[k].to_f64_lossy() * tt * gg;
            }
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
        let zsum: f64 = alpha.iter().sum();
        for v in &mut alpha {
            *v /= zsum;
        }
        let mut z = vec![0.0f64; d];
        for i in 0..n {
            let hi = h.row(i);
            for j in 0..d {
                z[j] += alpha[i] * hi[j].to_f64_lossy();
            }
        }
        let mut logits = vec![0.0f64; c];
        for k in 0..c {
            let mut l = self.classifier_b.data()[k].to_f64_lossy();
            for j in 0..d {
                l += z[j] * self.classifier_w.data()[j * c + k].to_f64_lossy();
            }
            logits[k] = l;
        }
        let lmx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - lmx).exp()).collect();
        let psum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= psum;
        }
        Ok((
            probs.clone(),
            alpha.clone(),
            AbmilCache {
                t,
                g,
                alpha,
                z,
                probs,
            },
        ))
    }

    /// Cross-entropy loss and head gradients for one bag with label `y`.
    /// The bag embeddings receive no gradient.
    pub fn loss_and_grads(&self, h: &Tensor<T>, y: usize) -> Result<(f64, AbmilGrads<T>)> {
        let (_, _, cache) = self.forward(h)?;
        let (n, d, a, c) = (h.rows(), self.dim(), self.attn_dim(), self.classes());
        if y >= c {
            return Err(Error::argument("abmil", format!("label {y} out of {c} classes")));
        }
        let loss = -cache.probs[y].max(1e-300).ln();

        let mut dlogits = cache.probs.clone();
        dlogits[y] -= 1.0;
        let mut d_cw = vec![0.0f64; d * c];
        for j in 0..d {
            for k in 0..c {
                d_cw[j * c + k] = cache.z[j] * dlogits[k];
            }
        }
        let mut dz = vec![0.0f64; d];
        for j in 0..d {
            for k in 0..c {
                dz[j] += self.classifier_w.data()[j * c + k].to_f64_lossy() * dlogits[k];
            }
        }
        // Attention backward: dz -> d alpha -> d scores (softmax) -> branches.
        let mut d_alpha = vec![0.0f64; n];
        for i in 0..n {
            let hi = h.row(i);
            for j in 0..d {
                d_alpha[i] += hi[j].to_f64_lossy() * dz[j];
            }
        }
        let dot: f64 = cache.alpha.iter().zip(&d_alpha).map(|(&al, &da)| al * da).sum();
        let ds: Vec<f64> = cache
            .alpha
            .iter()
            .zip(&d_alpha)
            .map(|(&al, &da)| al * (da - dot))
            .collect();
        let mut d_w = vec![0.0f64; a];
        let mut d_v = vec![0.0f64; d * a];
        let mut d_u = vec![0.0f64; d * a];
        for i in 0..n {
            let hi = h.row(i);
            for k in 0..a {
                let tt = cache.t.row(i)[k].to_f64_lossy();
                let gg = cache.g.row(i)[k].to_f64_lossy();
                d_w[k] += tt * gg * ds[i];
                let de = ds[i] * self.w.data()[k].to_f64_lossy();
                let dt = de * gg * (1.0 - tt * tt);
                let dg = de * tt * gg * (1.0 - gg);
                for j in 0..d {
                    let x = hi[j].to_f64_lossy();
                    d_v[j * a + k] += x * dt;
                    d_u[j * a + k] += x * dg;
                }
            }
        }
        Ok((
            loss,
            AbmilGrads {
                v: Tensor::from_vec(&[d, a], d_v.iter().map(|&x| T::from_f64(x)).collect()),
                u: Tensor::from_vec(&[d, a], d_u.iter().map(|&x| T::from_f64(x)).collect()),
                w: Tensor::from_vec(&[a], d_w.iter().map(|&x| T::from_f64(x)).collect()),
                classifier_w: Tensor::from_vec(&[d, c], d_cw.iter().map(|&x| T::from_f64(x)).collect()),
                classifier_b: Tensor::from_vec(&[c], dlogits.iter().map(|&x| T::from_f64(x)).collect()),
            },
        ))
    }

    pub fn predict(&self, h: &Tensor<T>) -> Result<usize> {
        let (probs, _, _) = self.forward(h)?;
        Ok(probs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0)
    }

    fn params_and_grads<'a>(&'a mut self, g: &'a AbmilGrads<T>) -> [(&'a mut Tensor<T>, &'a Tensor<T>); 5] {
        [
            (&mut self.v, &g.v),
            (&mut self.u, &g.u),
            (&mut self.w, &g.w),
            (&mut self.classifier_w, &g.classifier_w),
            (&mut self.classifier_b, &g.classifier_b),
        ]
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AbmilTrainConfig {
    pub attn_dim: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AbmilTrainConfig {
    fn default() -> Self {
        AbmilTrainConfig {
            attn_dim: 32,
            iters: 200,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent of the MIL head over labelled bags.
/// Returns the trained head and the final mean training loss.
pub fn train_abmil(
    bags: &[(Tensor<f32>, usize)],
    n_classes: usize,
    cfg: &AbmilTrainConfig,
) -> Result<(Abmil<f32>, f64)> {
    if bags.is_empty() {
        return Err(Error::argument("train_abmil", "no bags"));
    }
    if n_classes < 2 {
        return Err(Error::argument("train_abmil", "need at least 2 classes"));
    }
    let dim = bags[0].0.cols();
    let mut head = Abmil::<f32>::init(dim, cfg.attn_dim, n_classes, cfg.seed);
    let inv = 1.0 / bags.len() as f64;
    let mut mean_loss = f64::INFINITY;
    for _ in 0..cfg.iters {
        let mut total = AbmilGrads {
            v: Tensor::zeros(&[dim, cfg.attn_dim]),
            u: Tensor::zeros(&[dim, cfg.attn_dim]),
            w: Tensor::zeros(&[cfg.attn_dim]),
            classifier_w: Tensor::zeros(&[dim, n_classes]),
            classifier_b: Tensor::zeros(&[n_classes]),
        };
        mean_loss = 0.0;
        for (h, y) in bags {
            let (loss, g) = head.loss_and_grads(h, *y)?;
            mean_loss += loss * inv;
            for (dst, src) in [
                (&mut total.v, &g.v),
                (&mut total.u, &g.u),
                (&mut total.w, &g.w),
                (&mut total.classifier_w, &g.classifier_w),
                (&mut total.classifier_b, &g.classifier_b),
            ] {
                for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d += *s * inv as f32;
                }
            }
        }
        let step = cfg.lr as f32;
        for (p, g) in head.params_and_grads(&total) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= step * gv;
            }
        }
    }
    Ok((head, mean_loss))
}
