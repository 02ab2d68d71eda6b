//! Central finite-difference gradient checker.
//!
//! The op's output is reduced to a scalar `s = Σ W ⊙ f(x)` with a fixed
//! non-uniform weight matrix, so bugs that would cancel under a plain sum
//! (softmax Jacobians are the classic case) still surface. Analytic gradients
//! are `backward(inputs, W)`; numeric ones come from central differences with
//! a per-entry step `h = step_scale · max(1, |x|)`.

use super::{DiffOp, Mat};
use crate::error::{Error, Result};

const DEFAULT_STEP_SCALE: f64 = 1e-6;

/// One entry whose analytic and numeric gradients disagree beyond tolerance.
#[derive(Debug, Clone)]
pub struct EntryFailure {
    pub input: usize,
    pub input_name: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub entries_checked: usize,
    pub kinks_excluded: usize,
    pub max_rel_err: f64,
    pub failures: Vec<EntryFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} entries, {} kinks excluded, max rel err {:.3e}, tol {:.1e})",
            self.op,
            if self.passed() { "PASS" } else { "FAIL" },
            self.entries_checked,
            self.kinks_excluded,
            self.max_rel_err,
            self.tolerance
        )?;
        for fail in &self.failures {
            write!(
                f,
                "\n  {} entry {}: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e})",
                fail.input_name, fail.entry, fail.analytic, fail.numeric, fail.rel_err
            )?;
        }
        Ok(())
    }
}

/// Checks `op.backward` against central differences at the default step.
pub fn finite_diff_check(op: &dyn DiffOp, inputs: &[Mat], tolerance: f64) -> Result<GradCheckReport> {
    finite_diff_check_with(op, inputs, tolerance, DEFAULT_STEP_SCALE)
}

pub fn finite_diff_check_with(
    op: &dyn DiffOp,
    inputs: &[Mat],
    tolerance: f64,
    step_scale: f64,
) -> Result<GradCheckReport> {
    let out = op.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} forward output during gradient check",
            op.name()
        )));
    }
    let weights = reduction_weights(out.rows(), out.cols());
    let analytic = op.backward(inputs, &weights)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Data(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    for (grad, input) in analytic.iter().zip(inputs) {
        if grad.shape() != input.shape() {
            return Err(Error::Dim {
                op: "finite_diff_check",
                detail: format!(
                    "gradient shape {}x{} does not match input shape {}x{}",
                    grad.rows(),
                    grad.cols(),
                    input.rows(),
                    input.cols()
                ),
            });
        }
    }

    let names = op.input_names(inputs);
    let mut probe: Vec<Mat> = inputs.to_vec();
    let mut report = GradCheckReport {
        op: op.name(),
        tolerance,
        entries_checked: 0,
        kinks_excluded: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for (idx, input) in inputs.iter().enumerate() {
        for entry in 0..input.len() {
            let orig = input.data()[entry];
            let h = step_scale * orig.abs().max(1.0);

            probe[idx].data_mut()[entry] = orig + h;
            let plus = scalar_forward(op, &probe, &weights)?;
            probe[idx].data_mut()[entry] = orig - h;
            let minus = scalar_forward(op, &probe, &weights)?;
            probe[idx].data_mut()[entry] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].data()[entry];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);

            report.entries_checked += 1;
            if rel > tolerance {
                if op.is_kink(inputs, idx, entry, h) {
                    report.kinks_excluded += 1;
                    continue;
                }
                report.failures.push(EntryFailure {
                    input: idx,
                    input_name: names.get(idx).cloned().unwrap_or_else(|| format!("input{idx}")),
                    entry,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
        }
    }
    Ok(report)
}

fn scalar_forward(op: &dyn DiffOp, inputs: &[Mat], weights: &Mat) -> Result<f64> {
    let out = op.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} forward output during gradient check",
            op.name()
        )));
    }
    Ok(out.hadamard(weights)?.sum())
}

/// Deterministic, non-uniform, nowhere-zero reduction weights.
fn reduction_weights(rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols)
        .map(|k| 1.0 + 0.5 * ((k as f64) * 1.618_033_988_749 + 0.37).sin())
        .collect();
    Mat::from_vec(rows, cols, data).expect("weights shape is exact by construction")
}
