use lrp3d::layers::{forward_batch, layer_params_from, LayerSpec, Mode, ModelConfig, ParamSet};
use lrp3d::trainer::weighted_cross_entropy;
use lrp3d::Tensor;

use super::{random_net, random_tensor, rng};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const WEIGHTS: [f64; 2] = [0.8, 1.3];

/// Signs of every ReLU input across the batch.
pub fn relu_pattern(config: &ModelConfig, params: &ParamSet, inputs: &[Tensor], mode: Mode) -> Vec<bool> {
    let outs = forward_batch(config, params, inputs, mode).unwrap();
    let mut signs = Vec::new();
    for out in &outs {
        for (i, spec) in config.layers.iter().enumerate() {
            if matches!(spec, LayerSpec::Relu) {
                signs.extend(out.cache.input(i).data().iter().map(|&v| v > 0.0));
            }
        }
    }
    signs
}

pub fn batch_loss(config: &ModelConfig, params: &ParamSet, inputs: &[Tensor], labels: &[usize], mode: Mode) -> f64 {
    forward_batch(config, params, inputs, mode)
        .unwrap()
        .iter()
        .zip(labels)
        .map(|(o, &l)| weighted_cross_entropy(&o.probs, l, &WEIGHTS).unwrap().loss)
        .sum()
}

/// Gradients smaller than the floor are compared absolutely: central
/// differences of a loss near 1 carry about 1e-12 of rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn perturbed(config: &ModelConfig, params: &ParamSet, tensor: usize, index: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    let mut seen = 0;
    for (spec, layer) in config.layers.iter().zip(&mut p.layers) {
        let count = layer.learnable().len();
        if seen + count <= tensor {
            seen += count;
            continue;
        }
        let mut tensors: Vec<Tensor> = layer.tensors().into_iter().cloned().collect();
        let target = &tensors[tensor - seen];
        let mut data = target.data().to_vec();
        data[index] += delta;
        tensors[tensor - seen] = Tensor::new(target.shape().to_vec(), data).unwrap();
        *layer = layer_params_from(spec, tensors).unwrap();
        return p;
    }
    unreachable!("tensor index out of range")
}

pub struct Check {
    pub max_error: f64,
    pub checked: usize,
    pub kink_crossings: usize,
}

pub fn check(
    config: &ModelConfig,
    params: &ParamSet,
    inputs: &[Tensor],
    labels: &[usize],
    mode: Mode,
    analytic: &[Tensor],
) -> Check {
    let base = relu_pattern(config, params, inputs, mode);
    let mut result = Check {
        max_error: 0.0,
        checked: 0,
        kink_crossings: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let plus = perturbed(config, params, t, j, STEP);
            let minus = perturbed(config, params, t, j, -STEP);
            if relu_pattern(config, &plus, inputs, mode) != base || relu_pattern(config, &minus, inputs, mode) != base {
                result.kink_crossings += 1;
                continue;
            }
            let numeric = (batch_loss(config, &plus, inputs, labels, mode)
                - batch_loss(config, &minus, inputs, labels, mode))
                / (2.0 * STEP);
            result.max_error = result.max_error.max(relative_error(grad.data()[j], numeric));
            result.checked += 1;
        }
    }
    result
}

pub fn setup(seed: u64) -> (ModelConfig, ParamSet, Vec<Tensor>, Vec<usize>) {
    let (config, params) = random_net(seed, 2, false);
    let mut r = rng(seed + 100);
    let inputs: Vec<Tensor> = (0..5)
        .map(|_| random_tensor(&config.input_shape, -1.0, 1.0, &mut r))
        .collect();
    let labels = vec![0, 1, 1, 0, 1];
    (config, params, inputs, labels)
}
