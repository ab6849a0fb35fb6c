use rayon::prelude::*;

use super::Dataset;
use crate::error::{Error, Result};
use crate::layers::{model_forward, Mode, ModelConfig, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Prediction {
    pub fn is_correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.predicted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `TP / (TP + FN)` for the positive class; absent without positive samples.
    pub true_positive_rate: Option<f64>,
    /// `TN / (TN + FP)`; absent without negative samples.
    pub true_negative_rate: Option<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub positive_class: usize,
    pub predictions: Vec<Prediction>,
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode predictions for every sample, labeled or not.
pub fn predict(config: &ModelConfig, params: &ParamSet, data: &Dataset) -> Result<Vec<Prediction>> {
    data.samples
        .par_iter()
        .map(|s| {
            let out = model_forward(config, params, &s.input, Mode::Infer)?;
            Ok(Prediction {
                subject_id: s.subject_id.clone(),
                label: s.label,
                predicted: argmax(out.probs.data()),
                probs: out.probs.data().to_vec(),
                logits: out.logits.data().to_vec(),
            })
        })
        .collect()
}

impl Metrics {
    /// Metrics over the labeled predictions. Errors if none are labeled.
    pub fn from_predictions(predictions: Vec<Prediction>, num_classes: usize, positive_class: usize) -> Result<Self> {
        if positive_class >= num_classes {
            return Err(Error::Config(format!("positive class {positive_class} out of range")));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        let mut labeled = 0usize;
        for p in &predictions {
            if let Some(l) = p.label {
                if l >= num_classes || p.predicted >= num_classes {
                    return Err(Error::Config(format!("label {l} out of range")));
                }
                confusion[l][p.predicted] += 1;
                labeled += 1;
            }
        }
        if labeled == 0 {
            return Err(Error::Config("no labeled samples to score".into()));
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let pos = positive_class;
        let tp = confusion[pos][pos];
        let fn_: usize = confusion[pos].iter().sum::<usize>() - tp;
        let mut tn = 0;
        let mut fp = 0;
        for (t, row) in confusion.iter().enumerate() {
            if t == pos {
                continue;
            }
            fp += row[pos];
            tn += row.iter().sum::<usize>() - row[pos];
        }
        let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Ok(Self {
            accuracy: correct as f64 / labeled as f64,
            true_positive_rate: rate(tp, tp + fn_),
            true_negative_rate: rate(tn, tn + fp),
            confusion,
            positive_class,
            predictions,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// `key = value` report; absent rates are written as `absent`.
    pub fn to_report(&self, class_names: &[String]) -> String {
        let fmt_rate = |r: Option<f64>| r.map_or("absent".to_string(), |v| v.to_string());
        let mut out = String::new();
        out.push_str(&format!("samples = {}\n", self.sample_count()));
        out.push_str(&format!("accuracy = {}\n", self.accuracy));
        out.push_str(&format!(
            "positive_class = {}\n",
            class_names.get(self.positive_class).map_or("?", |s| s.as_str())
        ));
        out.push_str(&format!("true_positive_rate = {}\n", fmt_rate(self.true_positive_rate)));
        out.push_str(&format!("true_negative_rate = {}\n", fmt_rate(self.true_negative_rate)));
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                let tn = class_names.get(t).map_or("?", |s| s.as_str());
                let pn = class_names.get(p).map_or("?", |s| s.as_str());
                out.push_str(&format!("confusion.{tn}.{pn} = {n}\n"));
            }
        }
        out
    }
}

/// Scores a model on a fully labeled dataset.
pub fn evaluate(config: &ModelConfig, params: &ParamSet, data: &Dataset, positive_class: usize) -> Result<Metrics> {
    if data.samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config("evaluate needs every sample to be labeled".into()));
    }
    let predictions = predict(config, params, data)?;
    Metrics::from_predictions(predictions, config.num_classes(), positive_class)
}
