//! Layer-wise relevance propagation with αβ rules.

mod config;
mod fold;
mod rules;

pub use config::{BiasPolicy, InputRule, LrpConfig, DEFAULT_STABILIZER};
pub use fold::fold_batchnorm;
pub use rules::{init_relevance, lrp_avgpool, lrp_conv3d, lrp_flatten, lrp_linear, lrp_relu, Propagation};

use fold::{fold_model, FoldedModel};
use rules::{alpha_beta, z_box, DenseMap};

use crate::error::{Error, Result};
use crate::layers::{model_forward, ConvGeometry, ForwardCache, LayerParams, LayerSpec, Mode, ModelConfig, ParamSet};
use crate::tensor::Tensor;

/// Relevance bookkeeping of one layer of the original network.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAudit {
    pub layer: usize,
    pub kind: String,
    /// Σ relevance arriving at the layer's output.
    pub relevance_out: f64,
    /// Σ relevance handed to the layer's input.
    pub relevance_in: f64,
    pub dropped: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// Shaped like the model input.
    pub relevance: Tensor,
    pub target_class: usize,
    pub config: LrpConfig,
    pub subject_id: String,
    /// Pre-softmax score of the target class.
    pub logit: f64,
    /// One entry per layer of the original network.
    pub audit: Vec<LayerAudit>,
    /// Relevance the biases keep under [`BiasPolicy::Include`].
    pub bias_absorbed: f64,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.relevance.sum()
    }

    /// `key = value` metadata written next to a saved map.
    pub fn sidecar(&self, class_names: &[String]) -> String {
        let report = conservation_audit(self);
        let class = class_names.get(self.target_class).map_or("?", |s| s.as_str());
        format!(
            "subject_id = {}\ntarget_class = {}\ntarget_index = {}\nalpha = {}\nbeta = {}\nbias_policy = {}\ninput_rule = {}\nstabilizer = {}\nlogit = {}\nrelevance_sum = {}\ntotal_leak = {}\nrelative_leak = {}\nbias_absorbed = {}\ndropped = {}\n",
            self.subject_id,
            class,
            self.target_class,
            self.config.alpha(),
            self.config.beta(),
            self.config.bias_policy(),
            self.config.input_rule(),
            self.config.stabilizer(),
            self.logit,
            self.total(),
            report.total_leak,
            report.relative_leak,
            report.bias_absorbed,
            report.dropped,
        )
    }
}

struct Chain {
    relevance: Tensor,
    /// Per folded layer: (Σ out, Σ in, dropped, fallbacks).
    steps: Vec<(f64, f64, f64, usize)>,
}

fn check_input_bounds(input: &Tensor, low: f64, high: f64) -> Result<()> {
    if let Some(v) = input.data().iter().find(|&&v| v < low || v > high) {
        return Err(Error::Config(format!(
            "input value {v} lies outside the zB bounds [{low}, {high}]"
        )));
    }
    Ok(())
}

fn propagate(model: &FoldedModel, cache: &ForwardCache, seed: Tensor, cfg: &LrpConfig) -> Result<Chain> {
    let first_linear = model
        .config
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Conv3d { .. } | LayerSpec::Dense { .. }));
    let mut r = seed;
    let mut steps = vec![(0.0, 0.0, 0.0, 0); model.config.layers.len()];
    for i in (0..model.config.layers.len()).rev() {
        let a = cache.input(i);
        let out_sum = r.sum();
        let zb = match cfg.input_rule() {
            InputRule::ZB { low, high } if Some(i) == first_linear => Some((low, high)),
            _ => None,
        };
        let prop = match (&model.config.layers[i], &model.params.layers[i]) {
            (LayerSpec::Conv3d { stride, pad, .. }, LayerParams::Conv3d { weight, bias }) => match zb {
                Some(bounds) => {
                    check_input_bounds(a, bounds.0, bounds.1)?;
                    let geom = ConvGeometry::new(a.shape(), weight.shape(), *stride, *pad)?;
                    let (v, dropped, fallbacks) =
                        z_box(&geom, a.data(), weight.data(), bias.data(), r.data(), bounds, cfg);
                    Propagation {
                        relevance: Tensor::new(a.shape().to_vec(), v)?,
                        dropped,
                        fallbacks,
                    }
                }
                None => lrp_conv3d(a, weight, bias, &r, *stride, *pad, cfg)?,
            },
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                LayerParams::Dense { weight, bias },
            ) => match zb {
                Some(bounds) => {
                    check_input_bounds(a, bounds.0, bounds.1)?;
                    let map = DenseMap {
                        inputs: *in_features,
                        outputs: *out_features,
                    };
                    let (v, dropped, fallbacks) =
                        z_box(&map, a.data(), weight.data(), bias.data(), r.data(), bounds, cfg);
                    Propagation {
                        relevance: Tensor::new(a.shape().to_vec(), v)?,
                        dropped,
                        fallbacks,
                    }
                }
                None => {
                    let map = DenseMap {
                        inputs: *in_features,
                        outputs: *out_features,
                    };
                    let (v, dropped, fallbacks) = alpha_beta(&map, a.data(), weight.data(), bias.data(), r.data(), cfg);
                    Propagation {
                        relevance: Tensor::new(a.shape().to_vec(), v)?,
                        dropped,
                        fallbacks,
                    }
                }
            },
            (LayerSpec::AvgPool3d { kernel, stride }, _) => lrp_avgpool(a, &r, *kernel, *stride)?,
            (LayerSpec::Relu, _) => Propagation {
                relevance: lrp_relu(&r),
                dropped: 0.0,
                fallbacks: 0,
            },
            (LayerSpec::Flatten, _) => Propagation {
                relevance: lrp_flatten(&r, a.shape())?,
                dropped: 0.0,
                fallbacks: 0,
            },
            (spec, _) => {
                return Err(Error::State(format!(
                    "layer {} ({}) left after folding",
                    model.origin[i],
                    spec.kind()
                )))
            }
        };
        steps[i] = (out_sum, prop.relevance.sum(), prop.dropped, prop.fallbacks);
        r = prop.relevance;
    }
    Ok(Chain { relevance: r, steps })
}

fn check_finite(params: &ParamSet) -> Result<()> {
    for (i, layer) in params.layers.iter().enumerate() {
        if layer.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::State(format!("layer {i} has non-finite parameters")));
        }
    }
    Ok(())
}

/// Relevance of every input voxel for `target_class`.
///
/// Batch norms are folded, the input is run forward in inference mode, the
/// target logit seeds the relevance and the rules run from the last layer
/// back to the input.
pub fn explain(
    config: &ModelConfig,
    params: &ParamSet,
    input: &Tensor,
    target_class: usize,
    cfg: &LrpConfig,
) -> Result<RelevanceMap> {
    check_finite(params)?;
    let model = fold_model(config, params)?;
    let forward = model_forward(&model.config, &model.params, input, Mode::Infer)?;
    let seed = init_relevance(&forward.logits, target_class)?;
    let logit = forward.logits.data()[target_class];
    let chain = propagate(&model, &forward.cache, seed.clone(), cfg)?;

    let dropped: f64 = chain.steps.iter().map(|s| s.2).sum();
    let has_bias = model.params.layers.iter().any(|l| match l {
        LayerParams::Conv3d { bias, .. } | LayerParams::Dense { bias, .. } => bias.data().iter().any(|&b| b != 0.0),
        _ => false,
    });
    let bias_absorbed = match cfg.bias_policy() {
        BiasPolicy::Include => logit - chain.relevance.sum() - dropped,
        BiasPolicy::Exclude if has_bias => {
            let shadow_cfg = cfg.with_bias_policy(BiasPolicy::Include);
            let shadow = propagate(&model, &forward.cache, seed, &shadow_cfg)?;
            let shadow_dropped: f64 = shadow.steps.iter().map(|s| s.2).sum();
            logit - shadow.relevance.sum() - shadow_dropped
        }
        BiasPolicy::Exclude => 0.0,
    };

    let mut audit = Vec::with_capacity(config.layers.len());
    for (fi, &orig) in model.origin.iter().enumerate() {
        let (out_sum, in_sum, dropped, fallbacks) = chain.steps[fi];
        audit.push(LayerAudit {
            layer: orig,
            kind: config.layers[orig].kind().to_string(),
            relevance_out: out_sum,
            relevance_in: in_sum,
            dropped,
            fallbacks,
        });
        if let Some(bn) = model.absorbed[fi] {
            audit.push(LayerAudit {
                layer: bn,
                kind: config.layers[bn].kind().to_string(),
                relevance_out: out_sum,
                relevance_in: out_sum,
                dropped: 0.0,
                fallbacks: 0,
            });
        }
    }
    audit.sort_by_key(|a| a.layer);

    Ok(RelevanceMap {
        relevance: chain.relevance,
        target_class,
        config: *cfg,
        subject_id: String::new(),
        logit,
        audit,
        bias_absorbed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLeak {
    pub layer: usize,
    pub kind: String,
    /// `|Σ R_out − Σ R_in|`
    pub leak: f64,
    pub relative_leak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationReport {
    pub layers: Vec<LayerLeak>,
    /// `logit − Σ R_input`
    pub total_leak: f64,
    pub relative_leak: f64,
    /// Share the biases take under the include policy; also computed for
    /// exclude maps, where it is what the inputs receive in the biases' place.
    pub bias_absorbed: f64,
    pub dropped: f64,
}

fn relative(value: f64, reference: f64) -> f64 {
    value / reference.abs().max(f64::MIN_POSITIVE)
}

/// Per-layer and total relevance leaks of a map.
pub fn conservation_audit(map: &RelevanceMap) -> ConservationReport {
    let layers = map
        .audit
        .iter()
        .map(|a| {
            let leak = (a.relevance_out - a.relevance_in).abs();
            LayerLeak {
                layer: a.layer,
                kind: a.kind.clone(),
                leak,
                relative_leak: relative(leak, map.logit),
            }
        })
        .collect();
    let total_leak = map.logit - map.total();
    ConservationReport {
        layers,
        total_leak,
        relative_leak: relative(total_leak, map.logit),
        bias_absorbed: map.bias_absorbed,
        dropped: map.audit.iter().map(|a| a.dropped).sum(),
    }
}

/// Voxelwise mean relevance per group, summed in subject-id order.
/// Groups without members come back as `None`.
pub fn aggregate_group(
    maps: &[RelevanceMap],
    group_labels: &[usize],
    num_groups: usize,
) -> Result<Vec<Option<Tensor>>> {
    if maps.len() != group_labels.len() {
        return Err(Error::Dimension(format!(
            "{} maps but {} group labels",
            maps.len(),
            group_labels.len()
        )));
    }
    if let Some(first) = maps.first() {
        for m in maps {
            if m.relevance.shape() != first.relevance.shape() {
                return Err(Error::Dimension("relevance maps differ in shape".into()));
            }
            if m.config != first.config {
                return Err(Error::Config(
                    "relevance maps were computed with different rules".into(),
                ));
            }
        }
    }
    if let Some(&g) = group_labels.iter().find(|&&g| g >= num_groups) {
        return Err(Error::Config(format!("group {g} out of range")));
    }
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by(|&a, &b| maps[a].subject_id.cmp(&maps[b].subject_id).then(a.cmp(&b)));
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; num_groups];
    for &i in &order {
        let entry = sums[group_labels[i]].get_or_insert_with(|| (vec![0.0; maps[i].relevance.len()], 0));
        for (s, v) in entry.0.iter_mut().zip(maps[i].relevance.data()) {
            *s += v;
        }
        entry.1 += 1;
    }
    let shape = maps.first().map(|m| m.relevance.shape().to_vec());
    sums.into_iter()
        .map(|slot| {
            slot.map(|(sum, n)| {
                let inv = 1.0 / n as f64;
                Tensor::new(
                    shape.clone().expect("non-empty"),
                    sum.into_iter().map(|v| v * inv).collect(),
                )
            })
            .transpose()
        })
        .collect()
}
