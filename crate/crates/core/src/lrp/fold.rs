use crate::error::{Error, Result};
use crate::layers::{LayerParams, LayerSpec, ModelConfig, ParamSet};
use crate::tensor::Tensor;

/// A network with its batch norms absorbed, plus where each layer came from.
#[derive(Debug, Clone)]
pub(crate) struct FoldedModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Original index of every folded layer.
    pub origin: Vec<usize>,
    /// Original index of the batch norm absorbed into each folded layer.
    pub absorbed: Vec<Option<usize>>,
}

pub(crate) fn fold_model(config: &ModelConfig, params: &ParamSet) -> Result<FoldedModel> {
    params.validate(config)?;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut folded: Vec<LayerParams> = Vec::new();
    let mut origin = Vec::new();
    let mut absorbed: Vec<Option<usize>> = Vec::new();
    for (i, (spec, lp)) in config.layers.iter().zip(&params.layers).enumerate() {
        let (
            LayerSpec::BatchNorm { epsilon, .. },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) = (spec, lp)
        else {
            layers.push(spec.clone());
            folded.push(lp.clone());
            origin.push(i);
            absorbed.push(None);
            continue;
        };
        let preceded_by_linear = i > 0
            && matches!(config.layers[i - 1], LayerSpec::Conv3d { .. } | LayerSpec::Dense { .. })
            && absorbed.last() == Some(&None);
        if !preceded_by_linear {
            return Err(Error::Config(format!(
                "layer {i} (batchnorm) is not directly preceded by a conv3d or dense layer"
            )));
        }
        let (weight, bias) = match folded.last_mut() {
            Some(LayerParams::Conv3d { weight, bias } | LayerParams::Dense { weight, bias }) => (weight, bias),
            _ => unreachable!("checked above"),
        };
        let channels = gamma.len();
        let scale: Vec<f64> = (0..channels)
            .map(|c| gamma.data()[c] / (running_var.data()[c] + epsilon).sqrt())
            .collect();
        let per_channel = weight.len() / channels;
        let w: Vec<f64> = weight
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| v * scale[j / per_channel])
            .collect();
        let b: Vec<f64> = (0..channels)
            .map(|c| (bias.data()[c] - running_mean.data()[c]) * scale[c] + beta.data()[c])
            .collect();
        *weight = Tensor::new(weight.shape().to_vec(), w)?;
        *bias = Tensor::new(vec![channels], b)?;
        *absorbed.last_mut().expect("preceding layer") = Some(i);
    }
    Ok(FoldedModel {
        config: ModelConfig::new(config.input_shape.clone(), layers, config.class_names.clone())?,
        params: ParamSet { layers: folded },
        origin,
        absorbed,
    })
}

/// Absorbs every batch norm into the conv or dense layer before it:
/// `ŵ = w·γ/√(σ²+ε)`, `b̂ = (b−μ)·γ/√(σ²+ε) + β`. The folded network matches
/// the original in inference mode.
pub fn fold_batchnorm(config: &ModelConfig, params: &ParamSet) -> Result<(ModelConfig, ParamSet)> {
    let f = fold_model(config, params)?;
    Ok((f.config, f.params))
}
