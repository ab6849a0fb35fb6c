//! Layer definitions, model assembly, and forward/backward passes.

mod kernels;
mod network;
mod params;
mod spec;

pub use kernels::{avgpool3d_forward, conv3d_forward, dense_forward, softmax};
pub(crate) use kernels::{dense_raw, dense_transpose, ConvGeometry, PoolGeometry};
pub use network::{
    backward_batch, forward_batch, model_backward, model_forward, update_running_stats, BackwardOutput, BatchStats,
    ForwardCache, ForwardOutput, Mode,
};
pub use params::{layer_params_from, param_shapes, Gradients, LayerParams, ParamSet};
pub use spec::{default_class_names, LayerSpec, ModelConfig, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm parameters of a single layer, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub epsilon: f64,
}

/// Per-channel `(x − μ)/√(σ² + ε)·γ + β` on a `C` or `C×D×H×W` tensor.
///
/// Training mode normalizes with the statistics of `input` itself and
/// returns them; inference mode uses the running statistics.
pub fn batchnorm_forward(input: &Tensor, bn: BatchNormParams<'_>, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
    let channels = bn.gamma.len();
    if input.ndim() == 0 || input.shape()[0] != channels {
        return Err(Error::Dimension(format!(
            "batchnorm with {channels} channels given input {:?}",
            input.shape()
        )));
    }
    for t in [bn.beta, bn.running_mean, bn.running_var] {
        if t.shape() != [channels] {
            return Err(Error::Dimension("batchnorm parameter shapes disagree".into()));
        }
    }
    if bn.running_var.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::State("batchnorm running variance must be positive".into()));
    }
    let spatial = input.len() / channels;
    let stats = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let seg = &input.data()[c * spatial..(c + 1) * spatial];
                mean[c] = crate::tensor::pairwise_sum(seg) / spatial as f64;
                var[c] = seg.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / spatial as f64;
            }
            Some(BatchStats {
                mean,
                var,
                count: spatial,
            })
        }
        Mode::Infer => None,
    };
    let (mean, var) = match &stats {
        Some(s) => (s.mean.as_slice(), s.var.as_slice()),
        None => (bn.running_mean.data(), bn.running_var.data()),
    };
    let mut out = Vec::with_capacity(input.len());
    for c in 0..channels {
        let denom = (var[c] + bn.epsilon).sqrt();
        out.extend(
            input.data()[c * spatial..(c + 1) * spatial]
                .iter()
                .map(|&x| (x - mean[c]) / denom * bn.gamma.data()[c] + bn.beta.data()[c]),
        );
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, stats))
}
