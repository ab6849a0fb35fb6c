use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use lrp3d::lrp::{conservation_audit, explain, BiasPolicy, ConservationReport, InputRule, LrpConfig, RelevanceMap};
use lrp3d::modelstore::load_model;
use lrp3d::trainer::{predict, Prediction};
use lrp3d::volume::{write_nifti, Manifest, Volume};
use rayon::prelude::*;

use crate::error::{usage, CliError, CliResult};
use crate::files::{
    check_classes, class_index, create_dir, file_id, predictions_csv, preprocess_for, relevance_path, sidecar_path,
    write_text,
};

pub const PREDICTIONS_NAME: &str = "predictions.csv";

/// Relevance map per subject, with sidecars and a conservation audit.
#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Weight of positive contributions; alpha − beta must be 1.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Weight of negative contributions, at least 0.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// `predicted` or a class name.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    /// exclude or include.
    #[arg(long, default_value = "exclude")]
    pub bias_policy: BiasPolicy,
    /// alphabeta or zb:LOW,HIGH.
    #[arg(long, default_value = "alphabeta")]
    pub input_rule: InputRule,
    /// Denominator stabilizer [default: 1e-12].
    #[arg(long)]
    pub stabilizer: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl ExplainArgs {
    pub fn lrp_config(&self) -> CliResult<LrpConfig> {
        let mut cfg = LrpConfig::new(self.alpha, self.beta)
            .map_err(usage)?
            .with_bias_policy(self.bias_policy)
            .with_input_rule(self.input_rule)
            .map_err(usage)?;
        if let Some(eps) = self.stabilizer {
            cfg = cfg.stabilized(eps).map_err(usage)?;
        }
        Ok(cfg)
    }
}

fn sidecar(map: &RelevanceMap, pred: &Prediction, audit: &ConservationReport, class_names: &[String]) -> String {
    let cfg = &map.config;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    kv("subject_id", map.subject_id.clone());
    kv("target_class", class_names[map.target_class].clone());
    kv("predicted_class", class_names[pred.predicted].clone());
    kv("label", pred.label.map_or("-".into(), |l| class_names[l].clone()));
    kv("alpha", cfg.alpha().to_string());
    kv("beta", cfg.beta().to_string());
    kv("stabilizer", cfg.stabilizer().to_string());
    kv("bias_policy", cfg.bias_policy().to_string());
    kv("input_rule", cfg.input_rule().to_string());
    kv("logit", map.logit.to_string());
    kv("relevance_sum", map.total().to_string());
    kv("total_leak", audit.total_leak.to_string());
    kv("relative_leak", audit.relative_leak.to_string());
    kv("bias_absorbed", audit.bias_absorbed.to_string());
    kv("dropped", audit.dropped.to_string());
    for (c, p) in class_names.iter().zip(&pred.probs) {
        kv(&format!("prob.{c}"), p.to_string());
    }
    out
}

pub fn run(args: &ExplainArgs) -> CliResult<()> {
    let lrp = args.lrp_config()?;
    let saved = load_model(&args.model)?;
    let config = saved.config;
    let fixed_target = match args.target.as_str() {
        "predicted" => None,
        name => Some(class_index(&config, name)?),
    };
    let manifest = Manifest::read(&args.data)?;
    check_classes(&config, &manifest)?;
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(file_id(&e.subject_id)) {
            return Err(CliError::Data(format!(
                "subject ids collide after making `{}` file-name safe",
                e.subject_id
            )));
        }
    }
    let data = manifest.load_dataset(&preprocess_for(&config)?)?;
    let preds = predict(&config, &saved.params, &data)?;
    create_dir(&args.out)?;

    let results: Vec<(RelevanceMap, ConservationReport)> = data
        .samples
        .par_iter()
        .zip(&preds)
        .map(|(s, p)| -> CliResult<_> {
            let target = fixed_target.unwrap_or(p.predicted);
            let mut map = explain(&config, &saved.params, &s.input, target, &lrp)?;
            map.subject_id = s.subject_id.clone();
            let audit = conservation_audit(&map);
            let shape = &map.relevance.shape()[1..];
            let volume = Volume::new(map.relevance.reshape(shape)?, [1.0; 3], s.subject_id.clone())?;
            write_nifti(&volume, relevance_path(&args.out, &s.subject_id))?;
            write_text(
                &sidecar_path(&args.out, &s.subject_id),
                &sidecar(&map, p, &audit, &config.class_names),
            )?;
            Ok((map, audit))
        })
        .collect::<CliResult<_>>()?;

    write_text(
        &args.out.join(PREDICTIONS_NAME),
        &predictions_csv(&preds, &config.class_names),
    )?;
    let mut audit_csv =
        String::from("subject_id,target,logit,relevance_sum,total_leak,relative_leak,bias_absorbed,dropped\n");
    let mut layers_csv = String::from("subject_id,layer,kind,leak,relative_leak\n");
    let mut worst = 0.0f64;
    for (map, a) in &results {
        audit_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            map.subject_id,
            config.class_names[map.target_class],
            map.logit,
            map.total(),
            a.total_leak,
            a.relative_leak,
            a.bias_absorbed,
            a.dropped
        ));
        for l in &a.layers {
            layers_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                map.subject_id, l.layer, l.kind, l.leak, l.relative_leak
            ));
        }
        worst = worst.max(a.relative_leak.abs());
    }
    write_text(&args.out.join("audit.csv"), &audit_csv)?;
    write_text(&args.out.join("audit_layers.csv"), &layers_csv)?;
    if let Some((map, a)) = results.iter().find(|(_, a)| !a.total_leak.is_finite()) {
        return Err(
            lrp3d::Error::Numerical(format!("relevance leak for {} is {}", map.subject_id, a.total_leak)).into(),
        );
    }
    println!(
        "{} relevance maps written to {}; largest relative leak {worst:e}",
        results.len(),
        args.out.display()
    );
    Ok(())
}
