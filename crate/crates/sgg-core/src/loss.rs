//! Object-classification losses: a focal-style loss whose focusing parameter
//! follows each node's priority in the ground-truth graph, plus the fixed-
//! gamma focal loss it is compared against.
//!
//! The focusing parameter is `gamma(theta) = min(2, -(1-theta)^mu * ln(theta))`:
//! zero for a node in every triplet (plain cross-entropy), capped at 2 for
//! nodes that barely participate. Natural logarithms throughout. Gamma is a
//! constant of each sample -- priorities come from ground truth, so no
//! gradient flows through the mapping.

use crate::error::{Error, Result};
use crate::linalg::{softmax_row, Mat};

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Controls how fast gamma grows as priority drops. Larger values keep
    /// more mid-priority nodes near gamma = 0.
    pub mu: f64,
    /// Upper bound on the focusing parameter.
    pub gamma_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: 4.0,
            gamma_cap: 2.0,
        }
    }
}

/// Maps a node priority in [0, 1] to a focusing parameter in [0, cap].
/// Priority zero (a node outside every triplet) takes the cap.
pub fn gamma_map(theta: f64, mu: f64) -> Result<f64> {
    gamma_map_capped(theta, mu, 2.0)
}

fn gamma_map_capped(theta: f64, mu: f64, cap: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Domain {
            what: "gamma_map theta",
            detail: format!("priority must lie in [0, 1], got {theta}"),
        });
    }
    if mu <= 0.0 {
        return Err(Error::Domain {
            what: "gamma_map mu",
            detail: format!("controlling factor must be positive, got {mu}"),
        });
    }
    if theta == 0.0 {
        return Ok(cap);
    }
    Ok(cap.min(-(1.0 - theta).powf(mu) * theta.ln()))
}

/// Priority-sensitive loss `-(1-p)^{gamma(theta)} * ln(p)` for the
/// ground-truth-class probability `p`.
pub fn nps_loss(p: f64, theta: f64, config: &LossConfig) -> Result<f64> {
    let gamma = gamma_map_capped(theta, config.mu, config.gamma_cap)?;
    focal_loss(p, gamma)
}

/// Fixed-gamma focal loss `-(1-p)^gamma * ln(p)`; gamma = 0 is cross-entropy.
pub fn focal_loss(p: f64, gamma: f64) -> Result<f64> {
    if p <= 0.0 || p > 1.0 {
        return Err(Error::Domain {
            what: "focal_loss p",
            detail: format!("probability must lie in (0, 1], got {p}"),
        });
    }
    Ok(-(1.0 - p).powf(gamma) * p.ln())
}

/// d(loss)/dp for `-(1-p)^gamma * ln(p)`, with the gamma = 0 and p = 1
/// limits handled explicitly so no 0 * inf forms appear.
fn focal_loss_dp(p: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let term1 = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    term1 - q.powf(gamma) / p
}

/// Mean priority-sensitive loss over a batch of logit rows, with the
/// gradient w.r.t. the logits assembled through the softmax backward.
///
/// Row i of `logits` scores node i over the object classes; `targets[i]` is
/// its ground-truth class and `thetas[i]` its priority. Probabilities are
/// floored at [`PROB_FLOOR`] before the logarithm.
pub fn nps_loss_batch(
    logits: &Mat,
    targets: &[usize],
    thetas: &[f64],
    config: &LossConfig,
) -> Result<(f64, Mat)> {
    let n = logits.rows();
    if targets.len() != n || thetas.len() != n {
        return Err(Error::Dim {
            op: "nps_loss_batch",
            detail: format!(
                "{} logit rows, {} targets, {} thetas",
                n,
                targets.len(),
                thetas.len()
            ),
        });
    }
    let classes = logits.cols();
    let mut total = 0.0;
    let mut grad = Mat::zeros(n, classes);
    for i in 0..n {
        let target = targets[i];
        if target >= classes {
            return Err(Error::Range {
                what: "nps_loss_batch target",
                index: target,
                bound: classes,
            });
        }
        let probs = softmax_row(logits.row(i))?;
        let p = probs[target].clamp(PROB_FLOOR, 1.0);
        let gamma = gamma_map_capped(thetas[i], config.mu, config.gamma_cap)?;
        total += focal_loss(p, gamma)?;
        // dL/dlogit_k = dL/dp * p * (delta_tk - probs_k), mean-reduced.
        let dp = focal_loss_dp(p, gamma) / n as f64;
        let row = grad.row_mut(i);
        for (k, pk) in probs.iter().enumerate() {
            let indicator = if k == target { 1.0 } else { 0.0 };
            row[k] = dp * p * (indicator - pk);
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_check, DiffOp};

    #[test]
    fn gamma_map_cases() {
        assert_eq!(gamma_map(1.0, 4.0).unwrap(), 0.0);
        // Direct evaluation: -(0.5)^4 * ln(0.5)
        let g = gamma_map(0.5, 4.0).unwrap();
        assert!((g - 0.043321698784997).abs() < 1e-12, "got {g}");
        // Cap active: 0.99^4 * 4.6052 = 4.4237 > 2
        assert_eq!(gamma_map(0.01, 4.0).unwrap(), 2.0);
        assert_eq!(gamma_map(0.0, 4.0).unwrap(), 2.0);
        assert!(gamma_map(1.5, 4.0).is_err());
        assert!(gamma_map(-0.1, 4.0).is_err());
    }

    #[test]
    fn gamma_monotone_in_theta_and_mu() {
        for mu in [0.5, 3.0, 4.0, 5.0] {
            let mut prev = f64::INFINITY;
            for k in 1..=1000 {
                let theta = k as f64 / 1000.0;
                let g = gamma_map(theta, mu).unwrap();
                assert!(g <= prev + 1e-12, "mu {mu}, theta {theta}");
                assert!((0.0..=2.0).contains(&g));
                prev = g;
            }
        }
        for k in 1..100 {
            let theta = k as f64 / 100.0;
            let g3 = gamma_map(theta, 3.0).unwrap();
            let g4 = gamma_map(theta, 4.0).unwrap();
            let g5 = gamma_map(theta, 5.0).unwrap();
            assert!(g4 <= g3 + 1e-12 && g5 <= g4 + 1e-12);
        }
    }

    #[test]
    fn nps_loss_cases() {
        let config = LossConfig::default();
        // theta = 1 makes gamma 0: exact cross-entropy.
        for p in [0.1, 0.5, 0.99] {
            let l = nps_loss(p, 1.0, &config).unwrap();
            assert!((l + p.ln()).abs() < 1e-15);
        }
        assert_eq!(nps_loss(1.0, 0.3, &config).unwrap(), 0.0);
        // gamma capped at 2 for theta = 0.01: 0.25 * ln 2.
        let l = nps_loss(0.5, 0.01, &config).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.173286795139986).abs() < 1e-12);
        assert!(nps_loss(0.0, 0.5, &config).is_err());
    }

    #[test]
    fn focal_loss_cases() {
        assert!((focal_loss(0.3, 0.0).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        assert_eq!(focal_loss(1.0, 2.0).unwrap(), 0.0);
        assert!((focal_loss(0.5, 2.0).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(-0.2, 2.0).is_err());
    }

    /// The loss decreases as the prediction improves, and for any priority it
    /// sits between the gamma = 2 focal loss and plain cross-entropy (gamma
    /// is capped at 2, and a smaller exponent on (1-p) < 1 enlarges the
    /// modulating factor).
    #[test]
    fn nps_bracketed_by_focal_and_cross_entropy() {
        let config = LossConfig::default();
        for theta in [0.05, 0.3, 0.7, 1.0] {
            let mut prev = f64::INFINITY;
            for k in 1..20 {
                let p = k as f64 / 20.0;
                let l = nps_loss(p, theta, &config).unwrap();
                assert!(l <= prev + 1e-12);
                prev = l;
                let lower = focal_loss(p, 2.0).unwrap();
                let upper = focal_loss(p, 0.0).unwrap();
                assert!(l >= lower - 1e-12 && l <= upper + 1e-12);
            }
        }
    }

    #[test]
    fn batch_reduces_to_cross_entropy_at_full_priority() {
        let logits = Mat::from_rows(&[vec![2.0, -1.0, 0.3], vec![0.0, 0.5, 1.0]]).unwrap();
        let targets = [0, 2];
        let thetas = [1.0, 1.0];
        let (loss, _) = nps_loss_batch(&logits, &targets, &thetas, &LossConfig::default()).unwrap();
        let mut want = 0.0;
        for (row, t) in [0, 1].into_iter().zip(targets) {
            let probs = softmax_row(logits.row(row)).unwrap();
            want -= probs[t].ln();
        }
        assert!((loss - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_single_sample_matches_scalar_op() {
        let logits = Mat::from_rows(&[vec![0.4, -0.2, 1.1, 0.0]]).unwrap();
        let (loss, _) =
            nps_loss_batch(&logits, &[2], &[0.4], &LossConfig::default()).unwrap();
        let p = softmax_row(logits.row(0)).unwrap()[2];
        let want = nps_loss(p, 0.4, &LossConfig::default()).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    struct BatchLossOp {
        targets: Vec<usize>,
        thetas: Vec<f64>,
    }

    impl DiffOp for BatchLossOp {
        fn name(&self) -> String {
            "nps_loss_batch".into()
        }
        fn forward(&self, inputs: &[Mat]) -> crate::error::Result<Mat> {
            let (loss, _) = nps_loss_batch(
                &inputs[0],
                &self.targets,
                &self.thetas,
                &LossConfig::default(),
            )?;
            Mat::from_vec(1, 1, vec![loss])
        }
        fn backward(&self, inputs: &[Mat], upstream: &Mat) -> crate::error::Result<Vec<Mat>> {
            let (_, grad) = nps_loss_batch(
                &inputs[0],
                &self.targets,
                &self.thetas,
                &LossConfig::default(),
            )?;
            Ok(vec![grad.scale(upstream.data()[0])])
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let logits = Mat::from_rows(&[
            vec![0.3, -1.2, 0.8, 0.1],
            vec![1.5, 0.2, -0.4, 0.9],
            vec![-0.3, 0.6, 0.0, -1.0],
        ])
        .unwrap();
        let op = BatchLossOp {
            targets: vec![2, 0, 1],
            thetas: vec![1.0, 0.5, 0.05],
        };
        let report = finite_diff_check(&op, &[logits], 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }
}
