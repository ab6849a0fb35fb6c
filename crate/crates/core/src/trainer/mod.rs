//! Loss, optimizer, learning-rate schedule, data splits and the training loop.

mod adam;
mod loss;
mod metrics;
mod schedule;
mod split;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use loss::{class_weights, weighted_cross_entropy, ClassWeightMode, LossOutput, PROB_FLOOR};
pub use metrics::{argmax, evaluate, predict, Metrics, Prediction};
pub use schedule::{cyclical_lr, CyclicalSchedule, LrPolicy};
pub use split::{kfold, stratified_split};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{backward_batch, forward_batch, update_running_stats, Mode, ModelConfig, ParamSet};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: Option<usize>,
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Voxels that truly differ between classes, when known (synthetic data).
    pub discriminative_mask: Option<Tensor>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let shape = samples[0].input.shape().to_vec();
        for s in &samples {
            if s.input.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "subject {} has shape {:?}, expected {:?}",
                    s.subject_id,
                    s.input.shape(),
                    shape
                )));
            }
            if let Some(l) = s.label {
                if l >= class_names.len() {
                    return Err(Error::Config(format!(
                        "subject {} has label {l} out of range",
                        s.subject_id
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            class_names,
            discriminative_mask: None,
        })
    }

    /// Attaches the known discriminative region; it must match the input shape.
    pub fn with_discriminative_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.input_shape() {
            return Err(Error::Dimension(format!(
                "mask shape {:?} does not match inputs {:?}",
                mask.shape(),
                self.input_shape()
            )));
        }
        self.discriminative_mask = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.samples[0].input.shape()
    }

    /// Every label; errors if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::Config(format!("subject {} has no label", s.subject_id)))
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            discriminative_mask: self.discriminative_mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations; `None` means four epochs.
    pub step_size: Option<usize>,
    pub policy: LrPolicy,
    pub adam: AdamConfig,
    pub class_weight_mode: ClassWeightMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            base_lr: 1e-5,
            max_lr: 1e-3,
            step_size: None,
            policy: LrPolicy::Triangular2,
            adam: AdamConfig::default(),
            class_weight_mode: ClassWeightMode::InverseFrequency,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        CyclicalSchedule::new(
            self.base_lr,
            self.max_lr,
            self.step_size.unwrap_or(1).max(1),
            self.policy,
        )?;
        if self.step_size == Some(0) {
            return Err(Error::Config("cycle step size must be >= 1".into()));
        }
        self.adam.validate()
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> Result<CyclicalSchedule> {
        let step = self
            .step_size
            .unwrap_or_else(|| 4 * self.iterations_per_epoch(samples))
            .max(1);
        CyclicalSchedule::new(self.base_lr, self.max_lr, step, self.policy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    /// Learning rate applied at this step.
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterationRecord>,
}

impl History {
    pub fn iterations_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,lr,loss\n");
        for r in &self.iterations {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.epoch, r.lr, r.loss));
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("epoch,mean_loss,train_accuracy,val_loss,val_accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.mean_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy)
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: History,
    /// Epoch whose parameters were kept (the last one without validation data).
    pub best_epoch: usize,
    pub adam_state: AdamState,
}

/// Weighted loss and accuracy of inference-mode predictions.
fn validation_scores(config: &ModelConfig, params: &ParamSet, data: &Dataset, weights: &[f64]) -> Result<(f64, f64)> {
    let labels = data.labels()?;
    let preds = predict(config, params, data)?;
    let mut losses = Vec::with_capacity(preds.len());
    let mut correct = 0usize;
    for (p, &l) in preds.iter().zip(&labels) {
        losses.push(-weights[l] * p.probs[l].max(PROB_FLOOR).ln());
        correct += usize::from(p.predicted == l);
    }
    Ok((
        pairwise_sum(&losses) / losses.len() as f64,
        correct as f64 / labels.len() as f64,
    ))
}

/// Trains a freshly initialized network on `train`.
///
/// With `val` given, the parameters of the epoch with the highest validation
/// accuracy (ties broken by lower validation loss) are returned.
pub fn fit(config: &ModelConfig, train: &Dataset, val: Option<&Dataset>, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.input_shape() != config.input_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "data shape {:?} does not match model input {:?}",
            train.input_shape(),
            config.input_shape
        )));
    }
    let labels = train.labels()?;
    let num_classes = config.num_classes();
    let weights = class_weights(&labels, num_classes, tc.class_weight_mode)?;
    let schedule = tc.schedule(train.len())?;

    let mut params = ParamSet::init(config, tc.seed)?;
    let mut state = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5348_5546_464c_4500);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut iteration = 0usize;
    let mut best: Option<(f64, f64, usize, ParamSet, AdamState)> = None;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train.len());
        let mut correct = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let lr = schedule.lr(iteration);
            let inputs: Vec<Tensor> = batch.iter().map(|&i| train.samples[i].input.clone()).collect();
            let outs = forward_batch(config, &params, &inputs, Mode::Train)?;
            let inv_b = 1.0 / batch.len() as f64;
            let mut batch_losses = Vec::with_capacity(batch.len());
            let mut grad_logits = Vec::with_capacity(batch.len());
            for (out, &i) in outs.iter().zip(batch) {
                let l = labels[i];
                let lo = weighted_cross_entropy(&out.probs, l, &weights)?;
                batch_losses.push(lo.loss);
                grad_logits.push(lo.grad_logits.scale(inv_b)?);
                correct += usize::from(argmax(out.probs.data()) == l);
            }
            let loss = pairwise_sum(&batch_losses) * inv_b;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} at epoch {epoch}, iteration {iteration} (lr {lr})"
                )));
            }
            let caches: Vec<_> = outs.into_iter().map(|o| o.cache).collect();
            let (grads, _) = backward_batch(config, &params, &caches, &grad_logits)?;
            if grads.tensors.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, iteration {iteration}"
                )));
            }
            adam_step(&mut params, &grads, &mut state, lr, &tc.adam)?;
            update_running_stats(config, &mut params, &caches[0])?;
            epoch_losses.extend_from_slice(&batch_losses);
            history.iterations.push(IterationRecord {
                iteration,
                epoch,
                lr,
                loss,
            });
            iteration += 1;
        }

        let (val_loss, val_accuracy) = match val {
            Some(v) => {
                let (l, a) = validation_scores(config, &params, v, &weights)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: pairwise_sum(&epoch_losses) / epoch_losses.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if let (Some(l), Some(a)) = (val_loss, val_accuracy) {
            let better = match &best {
                None => true,
                Some((ba, bl, ..)) => a > *ba || (a == *ba && l < *bl),
            };
            if better {
                best = Some((a, l, epoch, params.clone(), state.clone()));
            }
        }
    }

    Ok(match best {
        Some((_, _, epoch, p, s)) => TrainOutcome {
            params: p,
            history,
            best_epoch: epoch,
            adam_state: s,
        },
        None => TrainOutcome {
            params,
            history,
            best_epoch: tc.epochs - 1,
            adam_state: state,
        },
    })
}

/// Trains on the whole dataset without validation.
pub fn train(config: &ModelConfig, data: &Dataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    fit(config, data, None, tc)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub validation_indices: Vec<usize>,
    pub metrics: Metrics,
}

/// Stratified k-fold cross-validation: one model per fold, scored on the
/// held-out fold.
pub fn cross_validate(
    config: &ModelConfig,
    data: &Dataset,
    tc: &TrainConfig,
    k: usize,
    positive_class: usize,
) -> Result<Vec<FoldResult>> {
    let labels = data.labels()?;
    let folds = kfold(&labels, k, tc.seed)?;
    let mut results = Vec::with_capacity(k);
    for (f, held_out) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = (0..data.len()).filter(|i| held_out.binary_search(i).is_err()).collect();
        let fold_tc = TrainConfig {
            seed: tc.seed.wrapping_add(f as u64 + 1),
            ..tc.clone()
        };
        let outcome = train(config, &data.subset(&train_idx), &fold_tc)?;
        let metrics = evaluate(config, &outcome.params, &data.subset(held_out), positive_class)?;
        results.push(FoldResult {
            fold: f,
            validation_indices: held_out.clone(),
            metrics,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    fn dense_config() -> ModelConfig {
        ModelConfig::new(
            vec![2],
            vec![LayerSpec::Dense {
                in_features: 2,
                out_features: 2,
            }],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn toy(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let t = i as f64 / n as f64;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                Sample {
                    input: Tensor::new(vec![2], vec![sign * (0.5 + t), t - 0.5]).unwrap(),
                    label: Some(label),
                    subject_id: format!("s{i}"),
                }
            })
            .collect();
        Dataset::new(samples, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_learnable_params() {
        let cfg = dense_config();
        let tc = TrainConfig {
            epochs: 1,
            base_lr: 0.0,
            max_lr: 0.0,
            ..Default::default()
        };
        let out = train(&cfg, &toy(8), &tc).unwrap();
        let init = ParamSet::init(&cfg, tc.seed).unwrap();
        assert_eq!(out.params.learnable(), init.learnable());
        assert_eq!(out.history.epochs.len(), 1);
        assert!(out.history.iterations.iter().all(|r| r.lr == 0.0));
    }

    #[test]
    fn history_records_the_schedule() {
        let tc = TrainConfig {
            epochs: 3,
            step_size: Some(2),
            ..Default::default()
        };
        let out = train(&dense_config(), &toy(8), &tc).unwrap();
        let sched = tc.schedule(8).unwrap();
        assert_eq!(out.history.iterations.len(), 6);
        for r in &out.history.iterations {
            assert_eq!(r.lr, sched.lr(r.iteration));
        }
        assert!(out.history.iterations_csv().starts_with("iteration,epoch,lr,loss\n"));
    }

    #[test]
    fn training_is_deterministic() {
        let tc = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        let a = train(&dense_config(), &toy(12), &tc).unwrap();
        let b = train(&dense_config(), &toy(12), &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn best_validation_epoch_is_kept() {
        let data = toy(16);
        let tc = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let out = fit(&dense_config(), &data, Some(&data), &tc).unwrap();
        let best = &out.history.epochs[out.best_epoch];
        for r in &out.history.epochs {
            assert!(r.val_accuracy <= best.val_accuracy);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let data = toy(8);
        let bad = [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                base_lr: 1e-2,
                max_lr: 1e-3,
                ..Default::default()
            },
            TrainConfig {
                step_size: Some(0),
                ..Default::default()
            },
        ];
        for tc in bad {
            assert!(matches!(train(&dense_config(), &data, &tc), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let tc = TrainConfig {
            epochs: 3,
            base_lr: f64::MAX,
            max_lr: f64::MAX,
            ..Default::default()
        };
        let r = train(&dense_config(), &toy(8), &tc);
        assert!(matches!(r, Err(Error::Numerical(_))), "{r:?}");
    }

    #[test]
    fn unlabeled_data_cannot_train() {
        let mut data = toy(4);
        data.samples[0].label = None;
        assert!(train(&dense_config(), &data, &TrainConfig::default()).is_err());
    }
}
