//! Reduced-precision emulation, gradient clipping, the learning-rate
//! schedule, and AdamW.
//!
//! Emulation runs everything in f64 and truncates the mantissa to the
//! target format's width, clamping magnitude to the format's max. Values
//! past the max become signed infinities so downstream code can detect the
//! overflow instead of silently training on garbage.

use crate::nn::ParamsMut;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericFormat {
    Fp32,
    Fp16Range,
    Bf16Range,
}

#[derive(Debug, Clone, Copy)]
pub struct FormatSpec {
    pub max_abs: f64,
    pub mantissa_bits: u32,
}

impl NumericFormat {
    pub fn spec(self) -> FormatSpec {
        match self {
            NumericFormat::Fp32 => FormatSpec {
                max_abs: f32::MAX as f64,
                mantissa_bits: 23,
            },
            NumericFormat::Fp16Range => FormatSpec {
                max_abs: 65504.0,
                mantissa_bits: 10,
            },
            NumericFormat::Bf16Range => FormatSpec {
                max_abs: 3.39e38,
                mantissa_bits: 7,
            },
        }
    }
}

/// Truncate an f64 mantissa (52 bits) down to `bits`, rounding toward zero.
pub fn truncate_mantissa(v: f64, bits: u32) -> f64 {
    if v == 0.0 || !v.is_finite() || bits >= 52 {
        return v;
    }
    let mask = !((1u64 << (52 - bits)) - 1);
    f64::from_bits(v.to_bits() & mask)
}

#[derive(Debug, Clone)]
pub struct OverflowEvent {
    pub site: String,
    pub count: usize,
    pub max_abs: f64,
}

/// Rewrite `x` in place as if it had been stored in `fmt`. Returns an event
/// when any entry exceeded the format's range; those entries are left as
/// signed infinities.
pub fn emulate_format<T: Scalar>(
    x: &mut Tensor<T>,
    fmt: NumericFormat,
    site: &str,
) -> Option<OverflowEvent> {
    let spec = fmt.spec();
    let mut count = 0usize;
    let mut max_abs = 0.0f64;
    for v in x.data_mut() {
        let f = v.to_f64_lossy();
        if !f.is_finite() || f.abs() > spec.max_abs {
            count += 1;
            max_abs = max_abs.max(f.abs());
            *v = if f.is_sign_negative() {
                T::neg_infinity()
            } else {
                T::infinity()
            };
        } else {
            *v = T::from_f64(truncate_mantissa(f, spec.mantissa_bits));
        }
    }
    if count > 0 {
        Some(OverflowEvent {
            site: site.to_string(),
            count,
            max_abs,
        })
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Gradient clipping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ClipReport {
    /// Global L2 norm before clipping, accumulated in f64.
    pub norm: f64,
    /// Factor the gradients were multiplied by (1.0 when under the cap).
    pub scale: f64,
    pub finite: bool,
}

pub fn clip_global_norm<T: Scalar>(params: &mut ParamsMut<'_, T>, max_norm: f64) -> ClipReport {
    let mut sq = 0.0f64;
    for (_, p) in params.iter() {
        sq += p.grad.sq_norm_f64();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return ClipReport {
            norm,
            scale: 1.0,
            finite: false,
        };
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        let s = T::from_f64(scale);
        for (_, p) in params.iter_mut() {
            p.grad.scale_assign(s);
        }
    }
    ClipReport {
        norm,
        scale,
        finite: true,
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup from zero to `base`, then cosine decay to `floor`. Steps
/// past `total_steps` stay clamped at the floor; the two segments meet at
/// `base` so the schedule is continuous.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step.saturating_sub(self.warmup_steps).min(span);
        let progress = done as f64 / span as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay Adam. Moment state lives in f64 regardless of the
/// model's scalar type (the usual fp32-master-state trick, one level up).
/// Decay only touches parameters named `*.weight`; biases, norms and
/// learned tokens are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn defaults() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 0.04)
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over `params` in traversal order. The order must match
    /// across calls — state is positional.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamsMut<'_, T>, lr: f64) -> crate::error::Result<()> {
        if self.m.is_empty() {
            for (_, p) in params.iter() {
                self.m.push(Tensor::zeros(p.value.shape()));
                self.v.push(Tensor::zeros(p.value.shape()));
            }
        }
        if self.m.len() != params.len() {
            return Err(crate::error::Error::argument(
                "adamw",
                format!("state tracks {} tensors, step got {}", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if self.m[i].shape() != p.value.shape() {
                return Err(crate::error::Error::shape(
                    "adamw",
                    format!("state {i} is {:?}, param '{name}' is {:?}", self.m[i].shape(), p.value.shape()),
                ));
            }
            let decay = if name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for j in 0..value.len() {
                let g = grad[j].to_f64_lossy();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = value[j].to_f64_lossy();
                let updated = w - lr * (mhat / (vhat.sqrt() + self.eps) + decay * w);
                value[j] = T::from_f64(updated);
            }
        }
        Ok(())
    }
}
