use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeightMode {
    /// Every class weighs 1.
    None,
    /// `w_c = N / (K · N_c)`, so the rarer class weighs more.
    #[default]
    InverseFrequency,
}

impl std::str::FromStr for ClassWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "inverse_frequency" | "inverse" => Ok(Self::InverseFrequency),
            other => Err(Error::Config(format!("unknown class weight mode `{other}`"))),
        }
    }
}

/// Per-class loss weights for the given labels.
pub fn class_weights(labels: &[usize], num_classes: usize, mode: ClassWeightMode) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Config(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no samples")));
    }
    Ok(match mode {
        ClassWeightMode::None => vec![1.0; num_classes],
        ClassWeightMode::InverseFrequency => {
            let n = labels.len() as f64;
            counts.iter().map(|&c| n / (num_classes as f64 * c as f64)).collect()
        }
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of the loss with respect to the pre-softmax logits.
    pub grad_logits: Tensor,
    /// True when `p[label]` was below [`PROB_FLOOR`] and got clamped.
    pub clamped: bool,
}

/// `−w[label]·ln p[label]`, with gradient `w[label]·(p − onehot(label))` at the logits.
pub fn weighted_cross_entropy(probs: &Tensor, label: usize, weights: &[f64]) -> Result<LossOutput> {
    if probs.ndim() != 1 || probs.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs {} class weights",
            probs.shape(),
            weights.len()
        )));
    }
    if label >= probs.len() {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    let w = weights[label];
    let p = probs.data()[label];
    let clamped = p < PROB_FLOOR;
    let loss = -w * p.max(PROB_FLOOR).ln();
    let grad = probs
        .data()
        .iter()
        .enumerate()
        .map(|(k, &pk)| w * (pk - if k == label { 1.0 } else { 0.0 }))
        .collect();
    Ok(LossOutput {
        loss,
        grad_logits: Tensor::new(vec![probs.len()], grad)?,
        clamped,
    })
}
