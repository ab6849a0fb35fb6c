use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    /// `weight` is `out × in × k × k × k`, `bias` is `out`.
    Conv3d {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    /// `weight` is `out × in`, `bias` is `out`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
}

impl LayerParams {
    /// Trainable tensors in a fixed order (weight before bias, gamma before beta).
    pub fn learnable(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv3d { weight, bias } | LayerParams::Dense { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    pub(crate) fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv3d { weight, bias } | LayerParams::Dense { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    /// Every stored tensor, including batch-norm running statistics.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![gamma, beta, running_mean, running_var],
            other => other.learnable(),
        }
    }
}

/// Expected parameter shapes for a layer, in [`LayerParams::tensors`] order.
pub fn param_shapes(layer: &LayerSpec) -> Vec<Vec<usize>> {
    match *layer {
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![
            vec![out_channels, in_channels, kernel, kernel, kernel],
            vec![out_channels],
        ],
        LayerSpec::BatchNorm { channels, .. } => vec![vec![channels]; 4],
        LayerSpec::Dense {
            in_features,
            out_features,
        } => vec![vec![out_features, in_features], vec![out_features]],
        LayerSpec::Relu | LayerSpec::AvgPool3d { .. } | LayerSpec::Flatten => vec![],
    }
}

/// Rebuilds a layer's parameters from tensors in [`LayerParams::tensors`] order.
pub fn layer_params_from(layer: &LayerSpec, tensors: Vec<Tensor>) -> Result<LayerParams> {
    let expected = param_shapes(layer);
    if tensors.len() != expected.len() {
        return Err(Error::Dimension(format!(
            "{} expects {} parameter tensors, got {}",
            layer.kind(),
            expected.len(),
            tensors.len()
        )));
    }
    for (t, shape) in tensors.iter().zip(&expected) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "{} parameter has shape {:?}, expected {shape:?}",
                layer.kind(),
                t.shape()
            )));
        }
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("count checked above");
    Ok(match layer {
        LayerSpec::Conv3d { .. } => LayerParams::Conv3d {
            weight: next(),
            bias: next(),
        },
        LayerSpec::Dense { .. } => LayerParams::Dense {
            weight: next(),
            bias: next(),
        },
        LayerSpec::BatchNorm { .. } => LayerParams::BatchNorm {
            gamma: next(),
            beta: next(),
            running_mean: next(),
            running_var: next(),
        },
        _ => LayerParams::None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    /// He-normal weights, zero biases, identity batch norms.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        for layer in &config.layers {
            let params = match *layer {
                LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel * kernel;
                    LayerParams::Conv3d {
                        weight: he_normal(&[out_channels, in_channels, kernel, kernel, kernel], fan_in, &mut rng),
                        bias: Tensor::zeros(&[out_channels]),
                    }
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => LayerParams::Dense {
                    weight: he_normal(&[out_features, in_features], in_features, &mut rng),
                    bias: Tensor::zeros(&[out_features]),
                },
                LayerSpec::BatchNorm { channels, .. } => LayerParams::BatchNorm {
                    gamma: Tensor::full(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    running_mean: Tensor::zeros(&[channels]),
                    running_var: Tensor::full(&[channels], 1.0),
                },
                _ => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(Self { layers })
    }

    /// Checks that shapes match `config` and running variances are positive.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.layers.len() {
            return Err(Error::Dimension(format!(
                "parameter set has {} layers, config has {}",
                self.layers.len(),
                config.layers.len()
            )));
        }
        for (i, (p, spec)) in self.layers.iter().zip(&config.layers).enumerate() {
            let expected = param_shapes(spec);
            let actual = p.tensors();
            let kinds_match = matches!(
                (p, spec),
                (LayerParams::Conv3d { .. }, LayerSpec::Conv3d { .. })
                    | (LayerParams::Dense { .. }, LayerSpec::Dense { .. })
                    | (LayerParams::BatchNorm { .. }, LayerSpec::BatchNorm { .. })
                    | (
                        LayerParams::None,
                        LayerSpec::Relu | LayerSpec::AvgPool3d { .. } | LayerSpec::Flatten
                    )
            );
            if !kinds_match
                || actual.len() != expected.len()
                || actual.iter().zip(&expected).any(|(t, s)| t.shape() != s.as_slice())
            {
                return Err(Error::Dimension(format!(
                    "parameters of layer {i} ({}) do not match its spec",
                    spec.kind()
                )));
            }
            if let LayerParams::BatchNorm { running_var, .. } = p {
                if running_var.data().iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::State(format!(
                        "layer {i} (batchnorm) has a non-positive running variance"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn learnable(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.learnable()).collect()
    }

    pub(crate) fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.learnable_mut()).collect()
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    /// FNV-1a hash over every stored value; used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for t in layer.tensors() {
                for v in t.data() {
                    for b in v.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Gradients of every learnable tensor, flattened in [`ParamSet::learnable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            tensors: params.learnable().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}
