//! Whole-model forward and backward passes.
//!
//! Samples of a mini-batch are pushed through the network layer by layer so
//! that batch normalization in training mode can use statistics shared by
//! the whole batch. Everything else is per-sample and runs in parallel; all
//! reductions over the batch happen in fixed sample order.

use rayon::prelude::*;

use super::kernels::{dense_raw, dense_transpose, softmax, ConvGeometry, PoolGeometry};
use super::params::{Gradients, LayerParams, ParamSet};
use super::spec::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Infer,
}

/// Per-channel statistics of one batch-norm layer over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Values per channel that entered the statistics.
    pub count: usize,
}

/// Activations of one sample's forward pass: `activations[i]` is the input
/// of layer `i` and `activations[i + 1]` its output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Tensor>,
    /// Batch statistics for batch-norm layers run in training mode.
    pub batch_stats: Vec<Option<BatchStats>>,
    pub mode: Mode,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.batch_stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_stats.is_empty()
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: Gradients,
    pub input_grad: Tensor,
}

fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    x: &Tensor,
    stats: Option<(&[f64], &[f64])>,
) -> Result<Tensor> {
    match (spec, params) {
        (LayerSpec::Conv3d { stride, pad, .. }, LayerParams::Conv3d { weight, bias }) => {
            let geom = ConvGeometry::new(x.shape(), weight.shape(), *stride, *pad)?;
            Tensor::new(
                geom.out_shape(),
                geom.forward(x.data(), weight.data(), Some(bias.data())),
            )
        }
        (
            LayerSpec::Dense {
                in_features,
                out_features,
            },
            LayerParams::Dense { weight, bias },
        ) => {
            if x.shape() != [*in_features] {
                return Err(Error::Dimension(format!(
                    "dense expects [{in_features}], got {:?}",
                    x.shape()
                )));
            }
            Tensor::new(
                vec![*out_features],
                dense_raw(x.data(), weight.data(), Some(bias.data()), *out_features, *in_features),
            )
        }
        (
            LayerSpec::BatchNorm { epsilon, .. },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => {
            let (mean, var) = stats.unwrap_or((running_mean.data(), running_var.data()));
            Tensor::new(
                x.shape().to_vec(),
                batchnorm_apply(x.data(), mean, var, gamma.data(), beta.data(), *epsilon),
            )
        }
        (LayerSpec::Relu, _) => Ok(Tensor::from_raw(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        )),
        (LayerSpec::AvgPool3d { kernel, stride }, _) => {
            let geom = PoolGeometry::new(x.shape(), *kernel, *stride)?;
            Ok(Tensor::from_raw(geom.out_shape(), geom.forward(x.data())))
        }
        (LayerSpec::Flatten, _) => x.reshape(&[x.len()]),
        (spec, _) => Err(Error::State(format!("parameters do not match layer {}", spec.kind()))),
    }
}

fn batchnorm_apply(x: &[f64], mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let channels = mean.len();
    let spatial = x.len() / channels;
    let mut out = Vec::with_capacity(x.len());
    for c in 0..channels {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let scale = gamma[c] * inv;
        let shift = beta[c] - mean[c] * scale;
        out.extend(x[c * spatial..(c + 1) * spatial].iter().map(|&v| v * scale + shift));
    }
    out
}

fn batch_statistics(inputs: &[&Tensor], channels: usize) -> BatchStats {
    let spatial = inputs[0].len() / channels;
    let count = spatial * inputs.len();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let sums: Vec<f64> = inputs
            .iter()
            .map(|t| pairwise_sum(&t.data()[c * spatial..(c + 1) * spatial]))
            .collect();
        let m = pairwise_sum(&sums) / count as f64;
        let sq: Vec<f64> = inputs
            .iter()
            .map(|t| {
                t.data()[c * spatial..(c + 1) * spatial]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .collect();
        mean[c] = m;
        var[c] = pairwise_sum(&sq) / count as f64;
    }
    BatchStats { mean, var, count }
}

/// Forward pass of a single sample.
pub fn model_forward(config: &ModelConfig, params: &ParamSet, input: &Tensor, mode: Mode) -> Result<ForwardOutput> {
    let mut out = forward_batch(config, params, std::slice::from_ref(input), mode)?;
    Ok(out.pop().expect("one sample in, one out"))
}

/// Forward pass of a mini-batch. In [`Mode::Train`] every batch-norm layer
/// normalizes with statistics pooled over all samples of the batch.
pub fn forward_batch(
    config: &ModelConfig,
    params: &ParamSet,
    inputs: &[Tensor],
    mode: Mode,
) -> Result<Vec<ForwardOutput>> {
    if inputs.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    params.validate(config)?;
    for x in inputs {
        if x.shape() != config.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                config.input_shape
            )));
        }
    }
    let fingerprint = params.fingerprint();
    let mut acts: Vec<Vec<Tensor>> = inputs.iter().map(|x| vec![x.clone()]).collect();
    let mut all_stats = Vec::with_capacity(config.layers.len());

    for (i, (spec, lp)) in config.layers.iter().zip(&params.layers).enumerate() {
        let stats = match (spec, mode) {
            (LayerSpec::BatchNorm { channels, .. }, Mode::Train) => {
                let current: Vec<&Tensor> = acts.iter().map(|a| a.last().expect("non-empty")).collect();
                Some(batch_statistics(&current, *channels))
            }
            _ => None,
        };
        let stats_ref = stats.as_ref().map(|s| (s.mean.as_slice(), s.var.as_slice()));
        let outputs: Vec<Result<Tensor>> = acts
            .par_iter()
            .map(|a| layer_forward(spec, lp, a.last().expect("non-empty"), stats_ref))
            .collect();
        for (a, out) in acts.iter_mut().zip(outputs) {
            let out = out.map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("layer {i} ({}): {m}", spec.kind())),
                other => other,
            })?;
            a.push(out);
        }
        all_stats.push(stats);
    }

    acts.into_iter()
        .map(|activations| {
            let logits = activations.last().expect("non-empty").clone();
            let probs = softmax(&logits)?;
            Ok(ForwardOutput {
                logits,
                probs,
                cache: ForwardCache {
                    activations,
                    batch_stats: all_stats.clone(),
                    mode,
                    fingerprint,
                },
            })
        })
        .collect()
}

fn check_cache(config: &ModelConfig, params: &ParamSet, cache: &ForwardCache) -> Result<()> {
    if cache.batch_stats.len() != config.layers.len() || cache.activations.len() != config.layers.len() + 1 {
        return Err(Error::State(format!(
            "cache has {} layers, model has {}",
            cache.batch_stats.len(),
            config.layers.len()
        )));
    }
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::State("cache was produced with different parameters".into()));
    }
    let shapes = config.infer_shapes()?;
    if cache.activations[0].shape() != config.input_shape.as_slice()
        || cache.activations[1..]
            .iter()
            .zip(&shapes)
            .any(|(a, s)| a.shape() != s.as_slice())
    {
        return Err(Error::State("cached activation shapes do not match the model".into()));
    }
    Ok(())
}

/// Reverse-mode gradients for a single sample.
pub fn model_backward(
    config: &ModelConfig,
    params: &ParamSet,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<BackwardOutput> {
    let (grads, mut input_grads) = backward_batch(
        config,
        params,
        std::slice::from_ref(cache),
        std::slice::from_ref(grad_logits),
    )?;
    Ok(BackwardOutput {
        grads,
        input_grad: input_grads.pop().expect("one sample"),
    })
}

/// Reverse-mode gradients for a mini-batch produced by one [`forward_batch`]
/// call. Parameter gradients are summed over the batch.
pub fn backward_batch(
    config: &ModelConfig,
    params: &ParamSet,
    caches: &[ForwardCache],
    grad_logits: &[Tensor],
) -> Result<(Gradients, Vec<Tensor>)> {
    if caches.is_empty() || caches.len() != grad_logits.len() {
        return Err(Error::State(format!(
            "{} caches but {} logit gradients",
            caches.len(),
            grad_logits.len()
        )));
    }
    params.validate(config)?;
    for cache in caches {
        check_cache(config, params, cache)?;
        if cache.mode != caches[0].mode || cache.batch_stats != caches[0].batch_stats {
            return Err(Error::State("caches come from different forward batches".into()));
        }
    }
    let out_shape = caches[0].activations.last().expect("non-empty").shape();
    for g in grad_logits {
        if g.shape() != out_shape {
            return Err(Error::Dimension(format!(
                "logit gradient shape {:?} does not match output {:?}",
                g.shape(),
                out_shape
            )));
        }
    }

    let mut upstream: Vec<Vec<f64>> = grad_logits.iter().map(|g| g.data().to_vec()).collect();
    let mut layer_grads: Vec<Vec<Tensor>> = vec![Vec::new(); config.layers.len()];

    for i in (0..config.layers.len()).rev() {
        let spec = &config.layers[i];
        let lp = &params.layers[i];
        match (spec, lp) {
            (LayerSpec::Conv3d { stride, pad, .. }, LayerParams::Conv3d { weight, bias }) => {
                let geom = ConvGeometry::new(caches[0].input(i).shape(), weight.shape(), *stride, *pad)?;
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = caches
                    .par_iter()
                    .zip(upstream.par_iter())
                    .map(|(c, g)| geom.backward(c.input(i).data(), weight.data(), g))
                    .collect();
                let mut gw = vec![0.0; weight.len()];
                let mut gb = vec![0.0; bias.len()];
                let mut next = Vec::with_capacity(parts.len());
                for (gin, w, b) in parts {
                    gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                    gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
                    next.push(gin);
                }
                upstream = next;
                layer_grads[i] = vec![
                    Tensor::from_raw(weight.shape().to_vec(), gw),
                    Tensor::from_raw(bias.shape().to_vec(), gb),
                ];
            }
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                LayerParams::Dense { weight, bias },
            ) => {
                let (nin, nout) = (*in_features, *out_features);
                let mut gw = vec![0.0; nout * nin];
                let mut gb = vec![0.0; nout];
                let mut next = Vec::with_capacity(caches.len());
                for (c, g) in caches.iter().zip(&upstream) {
                    let x = c.input(i).data();
                    for o in 0..nout {
                        gb[o] += g[o];
                        if g[o] != 0.0 {
                            for (a, &xv) in gw[o * nin..(o + 1) * nin].iter_mut().zip(x) {
                                *a += g[o] * xv;
                            }
                        }
                    }
                    next.push(dense_transpose(g, weight.data(), nout, nin));
                }
                upstream = next;
                layer_grads[i] = vec![
                    Tensor::from_raw(weight.shape().to_vec(), gw),
                    Tensor::from_raw(bias.shape().to_vec(), gb),
                ];
            }
            (
                LayerSpec::BatchNorm { channels, epsilon, .. },
                LayerParams::BatchNorm {
                    gamma,
                    running_mean,
                    running_var,
                    ..
                },
            ) => {
                let channels = *channels;
                let spatial = caches[0].input(i).len() / channels;
                let (mean, var) = match &caches[0].batch_stats[i] {
                    Some(s) => (s.mean.clone(), s.var.clone()),
                    None => (running_mean.data().to_vec(), running_var.data().to_vec()),
                };
                let train = caches[0].batch_stats[i].is_some();
                let count = (spatial * caches.len()) as f64;
                let mut ggamma = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                for c in 0..channels {
                    let inv = 1.0 / (var[c] + epsilon).sqrt();
                    let mut sg = Vec::with_capacity(caches.len());
                    let mut sgx = Vec::with_capacity(caches.len());
                    for (cache, g) in caches.iter().zip(&upstream) {
                        let x = &cache.input(i).data()[c * spatial..(c + 1) * spatial];
                        let g = &g[c * spatial..(c + 1) * spatial];
                        sg.push(pairwise_sum(g));
                        sgx.push(x.iter().zip(g).map(|(&xv, &gv)| gv * (xv - mean[c]) * inv).sum::<f64>());
                    }
                    gbeta[c] = pairwise_sum(&sg);
                    ggamma[c] = pairwise_sum(&sgx);
                }
                for (cache, g) in caches.iter().zip(upstream.iter_mut()) {
                    let x = cache.input(i).data();
                    for c in 0..channels {
                        let inv = 1.0 / (var[c] + epsilon).sqrt();
                        let scale = gamma.data()[c] * inv;
                        let seg = c * spatial..(c + 1) * spatial;
                        for (gv, &xv) in g[seg.clone()].iter_mut().zip(&x[seg]) {
                            if train {
                                let xhat = (xv - mean[c]) * inv;
                                *gv = scale * (*gv - gbeta[c] / count - xhat * ggamma[c] / count);
                            } else {
                                *gv *= scale;
                            }
                        }
                    }
                }
                layer_grads[i] = vec![
                    Tensor::from_raw(vec![channels], ggamma),
                    Tensor::from_raw(vec![channels], gbeta),
                ];
            }
            (LayerSpec::Relu, _) => {
                for (cache, g) in caches.iter().zip(upstream.iter_mut()) {
                    for (gv, &xv) in g.iter_mut().zip(cache.input(i).data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
            (LayerSpec::AvgPool3d { kernel, stride }, _) => {
                let geom = PoolGeometry::new(caches[0].input(i).shape(), *kernel, *stride)?;
                upstream = upstream.par_iter().map(|g| geom.backward(g)).collect();
            }
            (LayerSpec::Flatten, _) => {}
            (spec, _) => return Err(Error::State(format!("parameters do not match layer {}", spec.kind()))),
        }
    }

    let grads = Gradients {
        tensors: layer_grads.into_iter().flatten().collect(),
    };
    for t in &grads.tensors {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter gradient".into()));
        }
    }
    let input_grads = upstream
        .into_iter()
        .map(|g| Tensor::new(config.input_shape.clone(), g))
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, input_grads))
}

/// Moves batch-norm running statistics towards the batch statistics recorded
/// in a training-mode cache (`running = (1 - momentum)·running + momentum·batch`,
/// using the unbiased batch variance).
pub fn update_running_stats(config: &ModelConfig, params: &mut ParamSet, cache: &ForwardCache) -> Result<()> {
    if cache.mode != Mode::Train {
        return Err(Error::State("running statistics need a training-mode cache".into()));
    }
    for ((spec, lp), stats) in config
        .layers
        .iter()
        .zip(params.layers.iter_mut())
        .zip(&cache.batch_stats)
    {
        if let (
            LayerSpec::BatchNorm { momentum, .. },
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Some(s),
        ) = (spec, lp, stats)
        {
            let correction = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, &m) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v * correction;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::kernels::{avgpool3d_forward, conv3d_forward, dense_forward};
    use crate::layers::spec::default_class_names;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig::blocks([1, 6, 6, 6], &[3, 4], 5, default_class_names()).unwrap()
    }

    /// Random parameters including non-trivial batch-norm state.
    fn toy_params(config: &ModelConfig, seed: u64) -> ParamSet {
        let mut p = ParamSet::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for lp in &mut p.layers {
            match lp {
                LayerParams::Conv3d { bias, .. } | LayerParams::Dense { bias, .. } => {
                    *bias = random(bias.shape(), &mut rng).scale(0.1).unwrap();
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    *gamma = random(gamma.shape(), &mut rng).map(|v| 1.0 + 0.5 * v).unwrap();
                    *beta = random(beta.shape(), &mut rng).scale(0.2).unwrap();
                    *running_mean = random(running_mean.shape(), &mut rng).scale(0.1).unwrap();
                    *running_var = random(running_var.shape(), &mut rng).map(|v| 1.0 + 0.5 * v).unwrap();
                }
                LayerParams::None => {}
            }
        }
        p
    }

    #[test]
    fn zero_model_gives_even_odds() {
        let config = toy_config();
        let mut params = ParamSet::init(&config, 0).unwrap();
        for t in params.learnable_mut() {
            t.data_mut().fill(0.0);
        }
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(1));
        let out = model_forward(&config, &params, &x, Mode::Infer).unwrap();
        assert_eq!(out.logits.data(), &[0.0, 0.0]);
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
        assert_eq!(out.cache.len(), config.layers.len());
    }

    #[test]
    fn forward_equals_manual_composition() {
        let config = toy_config();
        let params = toy_params(&config, 3);
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(2));
        let out = model_forward(&config, &params, &x, Mode::Infer).unwrap();

        let mut a = x.clone();
        for (spec, lp) in config.layers.iter().zip(&params.layers) {
            a = match (spec, lp) {
                (LayerSpec::Conv3d { stride, pad, .. }, LayerParams::Conv3d { weight, bias }) => {
                    conv3d_forward(&a, weight, bias, *stride, *pad).unwrap()
                }
                (
                    LayerSpec::BatchNorm { epsilon, .. },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let c = gamma.len();
                    let s = a.len() / c;
                    let data = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let ch = j / s;
                            (v - running_mean.data()[ch]) / (running_var.data()[ch] + epsilon).sqrt() * gamma.data()[ch]
                                + beta.data()[ch]
                        })
                        .collect();
                    Tensor::new(a.shape().to_vec(), data).unwrap()
                }
                (LayerSpec::Relu, _) => a.map(|v| v.max(0.0)).unwrap(),
                (LayerSpec::AvgPool3d { kernel, stride }, _) => avgpool3d_forward(&a, *kernel, *stride).unwrap(),
                (LayerSpec::Flatten, _) => a.reshape(&[a.len()]).unwrap(),
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                    dense_forward(&a, weight, bias).unwrap()
                }
                _ => unreachable!(),
            };
        }
        assert!(out.logits.max_abs_diff(&a).unwrap() <= 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = toy_config();
        let params = toy_params(&config, 4);
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(5));
        let a = model_forward(&config, &params, &x, Mode::Train).unwrap();
        let b = model_forward(&config, &params, &x, Mode::Train).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn batchnorm_identity_and_train_normalization() {
        let cfg = ModelConfig::new(
            vec![2, 2, 2, 2],
            vec![
                LayerSpec::BatchNorm {
                    channels: 2,
                    epsilon: 1e-12,
                    momentum: 0.1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 16,
                    out_features: 2,
                },
            ],
            default_class_names(),
        )
        .unwrap();
        let params = ParamSet::init(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 2, 2], &mut rng);
        let out = model_forward(&cfg, &params, &x, Mode::Infer).unwrap();
        assert!(out.cache.output(0).max_abs_diff(&x).unwrap() < 1e-11);

        let batch: Vec<Tensor> = (0..3)
            .map(|_| random(&[2, 2, 2, 2], &mut rng).map(|v| v * 3.0 + 5.0).unwrap())
            .collect();
        let outs = forward_batch(&cfg, &params, &batch, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = outs
                .iter()
                .flat_map(|o| o.cache.output(0).data()[c * 8..(c + 1) * 8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = toy_config();
        let params = toy_params(&config, 6);
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(7));
        let out = model_forward(&config, &params, &x, Mode::Train).unwrap();
        let back = model_backward(&config, &params, &out.cache, &Tensor::zeros(&[2])).unwrap();
        assert!(back.grads.is_zero());
        assert!(back.input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_gradient_is_outer_product() {
        let cfg = ModelConfig::new(
            vec![3],
            vec![LayerSpec::Dense {
                in_features: 3,
                out_features: 2,
            }],
            default_class_names(),
        )
        .unwrap();
        let params = ParamSet::init(&cfg, 1).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let out = model_forward(&cfg, &params, &x, Mode::Train).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let back = model_backward(&cfg, &params, &out.cache, &g).unwrap();
        let gw = &back.grads.tensors[0];
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw.data()[o * 3 + i], g.data()[o] * x.data()[i]);
            }
        }
        assert_eq!(back.grads.tensors[1].data(), g.data());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let config = toy_config();
        let params = toy_params(&config, 8);
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(8));
        let out = model_forward(&config, &params, &x, Mode::Train).unwrap();
        let mut changed = params.clone();
        changed.learnable_mut()[0].data_mut()[0] += 1.0;
        assert!(matches!(
            model_backward(&config, &changed, &out.cache, &Tensor::zeros(&[2])),
            Err(Error::State(_))
        ));
        let mut truncated = out.cache.clone();
        truncated.activations.pop();
        assert!(matches!(
            model_backward(&config, &params, &truncated, &Tensor::zeros(&[2])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let config = toy_config();
        let mut params = ParamSet::init(&config, 2).unwrap();
        let x = random(&[1, 6, 6, 6], &mut ChaCha8Rng::seed_from_u64(3));
        let out = model_forward(&config, &params, &x, Mode::Train).unwrap();
        let stats = out.cache.batch_stats[1].clone().unwrap();
        update_running_stats(&config, &mut params, &out.cache).unwrap();
        if let LayerParams::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &params.layers[1]
        {
            let n = stats.count as f64;
            assert!((running_mean.data()[0] - 0.1 * stats.mean[0]).abs() < 1e-15);
            assert!((running_var.data()[0] - (0.9 + 0.1 * stats.var[0] * n / (n - 1.0))).abs() < 1e-15);
        } else {
            panic!("layer 1 should be batchnorm");
        }
    }
}
