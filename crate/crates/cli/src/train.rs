use std::path::PathBuf;

use clap::Args;
use lrp3d::layers::ModelConfig;
use lrp3d::modelstore::save_model;
use lrp3d::trainer::{
    cross_validate, evaluate, fit, stratified_split, ClassWeightMode, FoldResult, LrPolicy, Metrics, TrainConfig,
};
use lrp3d::volume::{Manifest, ManifestEntry};

use crate::error::{io_error, usage, CliError, CliResult};
use crate::files::{check_classes, class_index, create_dir, parse_dims, preprocess_for, sibling, write_text};

const DEFAULT_DIMS: [usize; 3] = [128, 96, 96];

/// Split, optionally cross-validate, train and save a model.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture file. Without it the default four-block network is
    /// sized to the manifest's `@dims` (or 128,96,96).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file to write; reports go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub max_lr: f64,
    /// Half-cycle length in iterations [default: four epochs].
    #[arg(long)]
    pub step_size: Option<usize>,
    /// triangular or triangular2.
    #[arg(long, default_value = "triangular2")]
    pub policy: LrPolicy,
    /// inverse or none.
    #[arg(long, default_value = "inverse")]
    pub class_weights: ClassWeightMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of subjects held out for testing.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Share of the training subjects used to pick the best epoch.
    /// Without it the last epoch is kept.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Run K-fold cross-validation on the training subjects first.
    #[arg(long)]
    pub kfold: Option<usize>,
    #[arg(long, default_value = "preterm")]
    pub positive_class: String,
}

impl TrainArgs {
    fn train_config(&self) -> CliResult<TrainConfig> {
        let tc = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            max_lr: self.max_lr,
            step_size: self.step_size,
            policy: self.policy,
            class_weight_mode: self.class_weights,
            seed: self.seed,
            ..Default::default()
        };
        tc.validate().map_err(usage)?;
        for (name, f) in [("test", Some(self.test_fraction)), ("validation", self.val_fraction)] {
            if let Some(f) = f {
                if !(f > 0.0 && f < 1.0) {
                    return Err(CliError::Usage(format!("{name} fraction must lie in (0, 1), got {f}")));
                }
            }
        }
        if self.kfold.is_some_and(|k| k < 2) {
            return Err(CliError::Usage("--kfold needs at least 2 folds".into()));
        }
        Ok(tc)
    }
}

fn load_config(args: &TrainArgs, manifest: &Manifest) -> CliResult<ModelConfig> {
    match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Ok(ModelConfig::parse(&text)?)
        }
        None => {
            let [d, h, w] = match manifest.metadata.get("dims") {
                Some(s) => parse_dims(s).map_err(|m| CliError::Data(format!("manifest @dims: {m}")))?,
                None => DEFAULT_DIMS,
            };
            let standard = ModelConfig::standard([1, d, h, w])?;
            if standard.num_classes() != manifest.class_names.len() {
                return Err(CliError::Data(format!(
                    "the default network has {} outputs but the manifest lists {} classes; pass --config",
                    standard.num_classes(),
                    manifest.class_names.len()
                )));
            }
            Ok(ModelConfig::new(
                standard.input_shape,
                standard.layers,
                manifest.class_names.clone(),
            )?)
        }
    }
}

fn fold_report(f: &FoldResult, class_names: &[String], ids: &[String]) -> String {
    let mut out = format!("fold = {}\n", f.fold + 1);
    out.push_str(&f.metrics.to_report(class_names));
    let held: Vec<&str> = f.validation_indices.iter().map(|&i| ids[i].as_str()).collect();
    out.push_str(&format!("validation_subjects = {}\n", held.join(",")));
    out
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> String {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        "absent".into()
    } else {
        (v.iter().sum::<f64>() / v.len() as f64).to_string()
    }
}

fn cv_summary(folds: &[FoldResult]) -> String {
    let mut out = format!("folds = {}\n", folds.len());
    out.push_str(&format!(
        "mean_accuracy = {}\n",
        mean_of(folds.iter().map(|f| Some(f.metrics.accuracy)))
    ));
    out.push_str(&format!(
        "mean_true_positive_rate = {}\n",
        mean_of(folds.iter().map(|f| f.metrics.true_positive_rate))
    ));
    out.push_str(&format!(
        "mean_true_negative_rate = {}\n",
        mean_of(folds.iter().map(|f| f.metrics.true_negative_rate))
    ));
    for f in folds {
        out.push_str(&format!("fold.{}.accuracy = {}\n", f.fold + 1, f.metrics.accuracy));
    }
    out
}

/// Manifest of the held-out subjects with absolute paths, for predict and
/// explain.
fn test_manifest(manifest: &Manifest, test_idx: &[usize]) -> CliResult<Manifest> {
    let abs = |p: &std::path::Path| -> CliResult<PathBuf> {
        let r = manifest.resolve(p);
        std::path::absolute(&r).map_err(|e| io_error(&r, e))
    };
    let mut m = Manifest::new(manifest.class_names.clone());
    for (k, v) in &manifest.metadata {
        let v = if k == "ground_truth" {
            abs(std::path::Path::new(v))?.to_string_lossy().into_owned()
        } else {
            v.clone()
        };
        m.metadata.insert(k.clone(), v);
    }
    for &i in test_idx {
        let e = &manifest.entries[i];
        m.entries.push(ManifestEntry {
            subject_id: e.subject_id.clone(),
            label: e.label.clone(),
            path: abs(&e.path)?,
            mask: e.mask.as_deref().map(abs).transpose()?,
        });
    }
    Ok(m)
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let tc = args.train_config()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let manifest = Manifest::read(&args.data)?;
    let config = load_config(args, &manifest)?;
    check_classes(&config, &manifest)?;
    let positive = class_index(&config, &args.positive_class)?;
    let data = manifest.load_dataset(&preprocess_for(&config)?)?;
    let labels = data.labels()?;
    let ids: Vec<String> = data.samples.iter().map(|s| s.subject_id.clone()).collect();

    let (train_idx, test_idx) = stratified_split(&labels, args.test_fraction, args.seed)?;
    let train_set = data.subset(&train_idx);

    if let Some(k) = args.kfold {
        let train_ids: Vec<String> = train_idx.iter().map(|&i| ids[i].clone()).collect();
        let folds = cross_validate(&config, &train_set, &tc, k, positive)?;
        for f in &folds {
            let path = sibling(&args.out, &format!("fold-{:02}.txt", f.fold + 1));
            write_text(&path, &fold_report(f, &config.class_names, &train_ids))?;
        }
        let summary = cv_summary(&folds);
        write_text(&sibling(&args.out, "cv.txt"), &summary)?;
        print!("{summary}");
    }

    let (fit_set, val_set) = match args.val_fraction {
        Some(f) => {
            let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let (fit_local, val_local) = stratified_split(&train_labels, f, args.seed ^ 0x76616c)?;
            let pick = |local: &[usize]| -> Vec<usize> { local.iter().map(|&j| train_idx[j]).collect() };
            (data.subset(&pick(&fit_local)), Some(data.subset(&pick(&val_local))))
        }
        None => (train_set, None),
    };
    let outcome = fit(&config, &fit_set, val_set.as_ref(), &tc)?;
    save_model(&config, &outcome.params, &args.out, Some(&outcome.adam_state))?;
    write_text(&sibling(&args.out, "history.csv"), &outcome.history.iterations_csv())?;
    write_text(&sibling(&args.out, "epochs.csv"), &outcome.history.epochs_csv())?;

    let test = data.subset(&test_idx);
    let metrics: Metrics = evaluate(&config, &outcome.params, &test, positive)?;
    let mut report = format!(
        "train_subjects = {}\nvalidation_subjects = {}\ntest_subjects = {}\nbest_epoch = {}\n",
        fit_set.len(),
        val_set.as_ref().map_or(0, |v| v.len()),
        test.len(),
        outcome.best_epoch
    );
    report.push_str(&metrics.to_report(&config.class_names));
    write_text(&sibling(&args.out, "metrics.txt"), &report)?;
    test_manifest(&manifest, &test_idx)?.write(sibling(&args.out, "test.tsv"))?;
    print!("{report}");
    Ok(())
}
