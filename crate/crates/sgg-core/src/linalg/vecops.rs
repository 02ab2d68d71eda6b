//! Vector-valued primitives and their hand-written backward passes.
//!
//! Masking excludes indices from the normalizing sum outright instead of
//! substituting -inf scores, which keeps the gradients of the surviving
//! entries exact.

use crate::error::{Error, Result};

/// Layer-norm stabilizer used when no explicit epsilon is given.
pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Numerically stable softmax over all indices.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    softmax_masked(v, &[])
}

/// Softmax over the indices not listed in `excluded`. Excluded positions are
/// exactly zero in the output; the rest sum to one.
pub fn softmax_masked(v: &[f64], excluded: &[usize]) -> Result<Vec<f64>> {
    let mut keep = vec![true; v.len()];
    for &i in excluded {
        if i >= v.len() {
            return Err(Error::Range {
                what: "softmax mask",
                index: i,
                bound: v.len(),
            });
        }
        keep[i] = false;
    }
    let max = v
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyNeighborhood { op: "softmax" });
    }
    let mut out = vec![0.0; v.len()];
    let mut sum = 0.0;
    for i in 0..v.len() {
        if keep[i] {
            let e = (v[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Backward of [`softmax_masked`] given its output `y` and upstream `g`:
/// `ds_j = y_j (g_j - Σ_k y_k g_k)` over unmasked indices, zero elsewhere.
pub fn softmax_masked_backward(y: &[f64], upstream: &[f64], excluded: &[usize]) -> Vec<f64> {
    let mut keep = vec![true; y.len()];
    for &i in excluded {
        keep[i] = false;
    }
    let inner: f64 = y
        .iter()
        .zip(upstream)
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|((yi, gi), _)| yi * gi)
        .sum();
    y.iter()
        .zip(upstream)
        .zip(&keep)
        .map(|((yi, gi), k)| if *k { yi * (gi - inner) } else { 0.0 })
        .collect()
}

/// `log(softmax(v))`, computed as `v - max - log Σ exp(v - max)`.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|x| x - lse).collect()
}

/// Backward of [`log_softmax`]: `dv = g - softmax(v) · Σ g`.
pub fn log_softmax_backward(v: &[f64], upstream: &[f64]) -> Vec<f64> {
    let p = softmax_row(v).expect("log_softmax input cannot be fully masked");
    let gsum: f64 = upstream.iter().sum();
    upstream
        .iter()
        .zip(&p)
        .map(|(g, pi)| g - pi * gsum)
        .collect()
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| sigmoid_scalar(*x)).collect()
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(upstream)
        .map(|(yi, g)| g * yi * (1.0 - yi))
        .collect()
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Backward of [`relu`] given the forward input. Subgradient 0 at the kink.
pub fn relu_backward(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .map(|(xi, g)| if *xi > 0.0 { *g } else { 0.0 })
        .collect()
}

/// `(v - mean)/sqrt(var + eps) ⊙ gain + bias`, population variance.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::Dim {
            op: "layer_norm",
            detail: format!(
                "input length {}, gain length {}, bias length {}",
                v.len(),
                gain.len(),
                bias.len()
            ),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Domain {
            what: "layer_norm eps",
            detail: format!("must be positive, got {eps}"),
        });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| (x - mean) * rstd * g + b)
        .collect())
}

/// Backward of [`layer_norm`]: returns `(dv, dgain, dbias)`.
pub fn layer_norm_backward(
    v: &[f64],
    gain: &[f64],
    eps: f64,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = v.iter().map(|x| (x - mean) * rstd).collect();

    let dbias = upstream.to_vec();
    let dgain: Vec<f64> = upstream.iter().zip(&xhat).map(|(g, xh)| g * xh).collect();

    let dxhat: Vec<f64> = upstream.iter().zip(gain).map(|(g, w)| g * w).collect();
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dxhat.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / n;
    let dv = dxhat
        .iter()
        .zip(&xhat)
        .map(|(d, xh)| (d - m1 - xh * m2) * rstd)
        .collect();
    (dv, dgain, dbias)
}

/// `[alpha_fwd·m ; alpha_bwd·m]`: the two-direction stacking written as a
/// Kronecker product of `[alpha_fwd, alpha_bwd]ᵀ` with `m`.
pub fn kron_stack2(alpha_fwd: f64, alpha_bwd: f64, m: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m.len());
    out.extend(m.iter().map(|x| alpha_fwd * x));
    out.extend(m.iter().map(|x| alpha_bwd * x));
    out
}

/// Backward of [`kron_stack2`]: returns `(dalpha_fwd, dalpha_bwd, dm)`.
pub fn kron_stack2_backward(
    alpha_fwd: f64,
    alpha_bwd: f64,
    m: &[f64],
    upstream: &[f64],
) -> (f64, f64, Vec<f64>) {
    let d = m.len();
    debug_assert_eq!(upstream.len(), 2 * d);
    let (g1, g2) = upstream.split_at(d);
    let da_f = super::dot(g1, m);
    let da_b = super::dot(g2, m);
    let dm = g1
        .iter()
        .zip(g2)
        .map(|(a, b)| alpha_fwd * a + alpha_bwd * b)
        .collect();
    (da_f, da_b, dm)
}
