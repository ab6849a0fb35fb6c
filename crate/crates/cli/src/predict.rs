use std::path::PathBuf;

use clap::Args;
use lrp3d::modelstore::load_model;
use lrp3d::trainer::{predict, Metrics};
use lrp3d::volume::Manifest;

use crate::error::CliResult;
use crate::files::{check_classes, class_index, create_dir, predictions_csv, preprocess_for, sibling, write_text};

/// Class probabilities per subject, plus metrics for labeled subjects.
#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset manifest; labels are optional.
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions CSV; metrics go to `<stem>.metrics.txt` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "preterm")]
    pub positive_class: String,
}

pub fn run(args: &PredictArgs) -> CliResult<()> {
    let saved = load_model(&args.model)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let config = saved.config;
    let positive = class_index(&config, &args.positive_class)?;
    let manifest = Manifest::read(&args.data)?;
    check_classes(&config, &manifest)?;
    let data = manifest.load_dataset(&preprocess_for(&config)?)?;
    let preds = predict(&config, &saved.params, &data)?;
    write_text(&args.out, &predictions_csv(&preds, &config.class_names))?;
    println!("{} predictions written to {}", preds.len(), args.out.display());

    if preds.iter().any(|p| p.label.is_some()) {
        let labeled: Vec<_> = preds.into_iter().filter(|p| p.label.is_some()).collect();
        let metrics = Metrics::from_predictions(labeled, config.num_classes(), positive)?;
        let report = metrics.to_report(&config.class_names);
        write_text(&sibling(&args.out, "metrics.txt"), &report)?;
        print!("{report}");
    } else {
        println!("no labels; metrics omitted");
    }
    Ok(())
}
