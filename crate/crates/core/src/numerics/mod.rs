//! Numerical substrate: dense tensors, the fixed-vocabulary reverse-mode
//! tape, primitive activations, the Adam optimizer, and the warmup/decay
//! learning-rate schedule.

pub mod adam;
pub mod fd;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::ParamSet;
pub use schedule::{lr_at_step, ScheduleConfig};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Standard normal CDF, evaluated through the double-precision error
/// function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact Gaussian-CDF GELU, elementwise: y = x * Phi(x).
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

/// Numerically stable softmax along one axis of an n-d tensor.
///
/// Outputs are in (0, 1) and sum to 1 along `axis`; shifting all logits by a
/// constant leaves the result unchanged (log-sum-exp stabilization).
pub fn softmax(logits: &Tensor, axis: usize) -> Tensor {
    let shape = logits.shape();
    assert!(axis < shape.len(), "softmax axis {axis} out of range");
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; logits.len()];
    let data = logits.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("softmax preserves shape")
}

/// Layer normalization over the last axis with learned gain and bias.
///
/// With unit gain and zero bias every position ends up with mean 0 and
/// variance 1 (up to the stabilizing epsilon). The normalized axis must have
/// extent >= 2.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().expect("layer_norm needs at least 1-d input");
    if d < 2 {
        return Err(Error::InvalidConfig {
            key: "layer_norm.axis_extent".into(),
            reason: format!("normalized axis extent must be >= 2, got {d}"),
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            expected: vec![d],
            got: vec![gain.len(), bias.len()],
        });
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let (mean, inv_std) = row_stats(row);
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * inv_std * gain.data()[c] + bias.data()[c];
        }
    }
    Ok(Tensor::new(shape.to_vec(), out).expect("layer_norm preserves shape"))
}

/// Epsilon in the layer-norm denominator. Small enough that unit-variance
/// checks hold to 1e-6 in f64, large enough to guard constant rows.
pub const LAYER_NORM_EPS: f64 = 1e-9;

pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
