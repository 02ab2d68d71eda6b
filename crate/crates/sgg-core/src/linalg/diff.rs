//! Differentiable-operation interface: a forward map on matrices paired with
//! a hand-written vector-Jacobian product. Everything implementing [`DiffOp`]
//! can be fed to [`finite_diff_check`](super::finite_diff_check).

use super::vecops;
use super::Mat;
use crate::error::Result;

/// A forward pass plus its vector-Jacobian product.
///
/// `backward` must return one gradient per input, each with the input's
/// shape, and must be linear in the upstream gradient.
pub trait DiffOp {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Mat]) -> Result<Mat>;

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>>;

    /// Names for the inputs, used by gradient-check reports.
    fn input_names(&self, inputs: &[Mat]) -> Vec<String> {
        (0..inputs.len()).map(|i| format!("input{i}")).collect()
    }

    /// True when the op is non-differentiable at this entry, so a finite
    /// difference straddling it is meaningless. Kink entries are excluded
    /// from gradient-check failures and counted separately.
    fn is_kink(&self, _inputs: &[Mat], _input: usize, _entry: usize, _step: f64) -> bool {
        false
    }
}

/// `A · B`.
pub struct MatMulOp;

impl DiffOp for MatMulOp {
    fn name(&self) -> String {
        "matmul".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        inputs[0].matmul(&inputs[1])
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let da = upstream.matmul(&inputs[1].transpose())?;
        let db = inputs[0].transpose().matmul(upstream)?;
        Ok(vec![da, db])
    }
}

/// `A ⊙ B`.
pub struct HadamardOp;

impl DiffOp for HadamardOp {
    fn name(&self) -> String {
        "hadamard".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        inputs[0].hadamard(&inputs[1])
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        Ok(vec![
            upstream.hadamard(&inputs[1])?,
            upstream.hadamard(&inputs[0])?,
        ])
    }
}

/// Masked softmax over a single row vector.
pub struct SoftmaxRowOp {
    pub excluded: Vec<usize>,
}

impl DiffOp for SoftmaxRowOp {
    fn name(&self) -> String {
        "softmax_row".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let y = vecops::softmax_masked(inputs[0].data(), &self.excluded)?;
        Mat::from_vec(1, y.len(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let y = vecops::softmax_masked(inputs[0].data(), &self.excluded)?;
        let dv = vecops::softmax_masked_backward(&y, upstream.data(), &self.excluded);
        Ok(vec![Mat::from_vec(1, dv.len(), dv)?])
    }
}

/// Log-softmax over a single row vector.
pub struct LogSoftmaxOp;

impl DiffOp for LogSoftmaxOp {
    fn name(&self) -> String {
        "log_softmax".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let y = vecops::log_softmax(inputs[0].data());
        Mat::from_vec(1, y.len(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let dv = vecops::log_softmax_backward(inputs[0].data(), upstream.data());
        Ok(vec![Mat::from_vec(1, dv.len(), dv)?])
    }
}

/// Elementwise sigmoid.
pub struct SigmoidOp;

impl DiffOp for SigmoidOp {
    fn name(&self) -> String {
        "sigmoid".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let y = vecops::sigmoid(inputs[0].data());
        Mat::from_vec(inputs[0].rows(), inputs[0].cols(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let y = vecops::sigmoid(inputs[0].data());
        let dv = vecops::sigmoid_backward(&y, upstream.data());
        Ok(vec![Mat::from_vec(inputs[0].rows(), inputs[0].cols(), dv)?])
    }
}

/// Elementwise ReLU; reports entries at the origin as kinks.
pub struct ReluOp;

impl DiffOp for ReluOp {
    fn name(&self) -> String {
        "relu".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let y = vecops::relu(inputs[0].data());
        Mat::from_vec(inputs[0].rows(), inputs[0].cols(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let dv = vecops::relu_backward(inputs[0].data(), upstream.data());
        Ok(vec![Mat::from_vec(inputs[0].rows(), inputs[0].cols(), dv)?])
    }

    fn is_kink(&self, inputs: &[Mat], input: usize, entry: usize, step: f64) -> bool {
        input == 0 && inputs[0].data()[entry].abs() <= step
    }
}

/// Layer normalization with learnable gain and bias.
/// Inputs: `[v, gain, bias]`, all 1×n.
pub struct LayerNormOp {
    pub eps: f64,
}

impl DiffOp for LayerNormOp {
    fn name(&self) -> String {
        "layer_norm".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let y = vecops::layer_norm(
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            self.eps,
        )?;
        Mat::from_vec(1, y.len(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let (dv, dg, db) = vecops::layer_norm_backward(
            inputs[0].data(),
            inputs[1].data(),
            self.eps,
            upstream.data(),
        );
        Ok(vec![
            Mat::from_vec(1, dv.len(), dv)?,
            Mat::from_vec(1, dg.len(), dg)?,
            Mat::from_vec(1, db.len(), db)?,
        ])
    }

    fn input_names(&self, _inputs: &[Mat]) -> Vec<String> {
        vec!["v".into(), "gain".into(), "bias".into()]
    }
}

/// Two-direction stacking. Inputs: `[alphas (1×2), m (1×d)]`.
pub struct KronStack2Op;

impl DiffOp for KronStack2Op {
    fn name(&self) -> String {
        "kron_stack2".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let a = inputs[0].data();
        let y = vecops::kron_stack2(a[0], a[1], inputs[1].data());
        Mat::from_vec(1, y.len(), y)
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let a = inputs[0].data();
        let (daf, dab, dm) =
            vecops::kron_stack2_backward(a[0], a[1], inputs[1].data(), upstream.data());
        Ok(vec![
            Mat::from_vec(1, 2, vec![daf, dab])?,
            Mat::from_vec(1, dm.len(), dm)?,
        ])
    }

    fn input_names(&self, _inputs: &[Mat]) -> Vec<String> {
        vec!["alphas".into(), "m".into()]
    }
}
