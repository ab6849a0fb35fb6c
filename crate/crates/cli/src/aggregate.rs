use std::path::{Path, PathBuf};

use clap::Args;
use lrp3d::lrp::{aggregate_group, LrpConfig, RelevanceMap};
use lrp3d::volume::{preprocess, read_nifti, write_nifti, Manifest, PreprocessConfig, Volume};
use lrp3d::Tensor;
use rayon::prelude::*;

use crate::error::{io_error, CliError, CliResult};
use crate::explain::PREDICTIONS_NAME;
use crate::files::{create_dir, file_id, parse_key_values, read_predicted, relevance_path, sidecar_path, write_text};
use crate::pgm::{abs_percentile, intensity_gray, mid_slices, relevance_gray, write_pgm};

const RELEVANCE_PERCENTILE: f64 = 99.0;

/// Group-mean relevance and input volumes with mid-slice images.
#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Directory written by `explain`.
    #[arg(long)]
    pub maps: PathBuf,
    /// Manifest whose labels define the groups.
    #[arg(long)]
    pub groups: PathBuf,
    /// Keep only subjects whose predicted class equals their label.
    #[arg(long)]
    pub correct_only: bool,
    /// Predictions report for --correct-only [default: MAPS/predictions.csv].
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_sidecar_config(path: &Path) -> CliResult<LrpConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let kv = parse_key_values(&text);
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| CliError::Data(format!("{}: missing `{k}`", path.display())))
    };
    let num = |k: &str| -> CliResult<f64> {
        get(k)?
            .parse()
            .map_err(|_| CliError::Data(format!("{}: `{k}` is not a number", path.display())))
    };
    Ok(LrpConfig::new(num("alpha")?, num("beta")?)?
        .stabilized(num("stabilizer")?)?
        .with_bias_policy(get("bias_policy")?.parse()?)
        .with_input_rule(get("input_rule")?.parse()?)?)
}

/// Voxelwise mean, summed in subject-id order.
fn mean_in_id_order(items: &mut [(String, Tensor)]) -> CliResult<Tensor> {
    items.sort_by(|a, b| a.0.cmp(&b.0));
    let shape = items[0].1.shape().to_vec();
    let mut sum = vec![0.0; items[0].1.len()];
    for (_, t) in items.iter() {
        for (s, v) in sum.iter_mut().zip(t.data()) {
            *s += v;
        }
    }
    let inv = 1.0 / items.len() as f64;
    Ok(Tensor::new(shape, sum.into_iter().map(|v| v * inv).collect()).map_err(lrp3d::Error::from)?)
}

fn write_montages(out: &Path, prefix: &str, volume: &Tensor, relevance: bool) -> CliResult<f64> {
    let scale = if relevance {
        abs_percentile(volume.data(), RELEVANCE_PERCENTILE)
    } else {
        0.0
    };
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    for slice in mid_slices(volume) {
        let pixels = if relevance {
            relevance_gray(&slice.values, scale)
        } else {
            intensity_gray(&slice.values, lo, hi)
        };
        write_pgm(
            &out.join(format!("{prefix}_{}.pgm", slice.plane)),
            slice.width,
            slice.height,
            &pixels,
        )?;
    }
    Ok(if relevance { scale } else { hi - lo })
}

pub fn run(args: &AggregateArgs) -> CliResult<()> {
    let manifest = Manifest::read(&args.groups)?;
    let predicted = if args.correct_only {
        let path = args
            .predictions
            .clone()
            .unwrap_or_else(|| args.maps.join(PREDICTIONS_NAME));
        Some(read_predicted(&path)?)
    } else {
        None
    };

    let mut selected = Vec::new();
    let mut missing = 0usize;
    let mut wrong = 0usize;
    for e in &manifest.entries {
        let Some(label) = manifest.label_index(e) else { continue };
        if !relevance_path(&args.maps, &e.subject_id).exists() {
            missing += 1;
            continue;
        }
        if let Some(pred) = &predicted {
            let p = pred.get(&e.subject_id).ok_or_else(|| {
                CliError::Data(format!("subject `{}` is not in the predictions report", e.subject_id))
            })?;
            if p != &manifest.class_names[label] {
                wrong += 1;
                continue;
            }
        }
        selected.push((e.clone(), label));
    }
    if selected.is_empty() {
        return Err(CliError::Data(format!(
            "no labeled subject in {} has a relevance map in {}",
            args.groups.display(),
            args.maps.display()
        )));
    }

    let maps: Vec<RelevanceMap> = selected
        .par_iter()
        .map(|(e, label)| -> CliResult<_> {
            let volume = read_nifti(relevance_path(&args.maps, &e.subject_id))?;
            Ok(RelevanceMap {
                relevance: volume.into_data(),
                target_class: *label,
                config: read_sidecar_config(&sidecar_path(&args.maps, &e.subject_id))?,
                subject_id: e.subject_id.clone(),
                logit: 0.0,
                audit: Vec::new(),
                bias_absorbed: 0.0,
            })
        })
        .collect::<CliResult<_>>()?;
    let labels: Vec<usize> = selected.iter().map(|s| s.1).collect();
    let num_groups = manifest.class_names.len();
    let relevance_means = aggregate_group(&maps, &labels, num_groups)?;

    let dims = {
        let s = maps[0].relevance.shape();
        [s[0], s[1], s[2]]
    };
    let sub = Manifest {
        entries: selected.iter().map(|s| s.0.clone()).collect(),
        ..manifest.clone()
    };
    let cfg = PreprocessConfig {
        target_dims: dims,
        ..Default::default()
    };
    let inputs: Vec<Tensor> = sub
        .load_volumes()?
        .par_iter()
        .map(|v| preprocess(v, &cfg).and_then(|t| t.reshape(&dims)))
        .collect::<lrp3d::Result<_>>()?;

    create_dir(&args.out)?;
    let mut report = format!(
        "maps = {}\ncorrect_only = {}\nskipped_without_map = {missing}\nskipped_misclassified = {wrong}\n",
        args.maps.display(),
        args.correct_only
    );
    report.push_str(&format!(
        "# relevance images: 0 maps to gray 128, +-scale to 255/0, scale = {RELEVANCE_PERCENTILE}th percentile of |R| over the group mean\n"
    ));
    report.push_str("# input images: linear from the group-mean minimum (0) to maximum (255)\n");
    for (g, mean) in relevance_means.iter().enumerate() {
        let name = &manifest.class_names[g];
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
        report.push_str(&format!("group.{name}.subjects = {}\n", members.len()));
        let Some(mean) = mean else { continue };
        let prefix = file_id(name);
        let mut group_inputs: Vec<(String, Tensor)> = members
            .iter()
            .map(|&i| (maps[i].subject_id.clone(), inputs[i].clone()))
            .collect();
        let input_mean = mean_in_id_order(&mut group_inputs)?;
        write_nifti(
            &Volume::new(mean.clone(), [1.0; 3], format!("{name} mean relevance"))?,
            args.out.join(format!("{prefix}_mean_relevance.nii")),
        )?;
        write_nifti(
            &Volume::new(input_mean.clone(), [1.0; 3], format!("{name} mean input"))?,
            args.out.join(format!("{prefix}_mean_input.nii")),
        )?;
        let scale = write_montages(&args.out, &format!("{prefix}_relevance"), mean, true)?;
        let range = write_montages(&args.out, &format!("{prefix}_input"), &input_mean, false)?;
        report.push_str(&format!("group.{name}.relevance_scale = {scale}\n"));
        report.push_str(&format!("group.{name}.relevance_sum = {}\n", mean.sum()));
        report.push_str(&format!("group.{name}.input_range = {range}\n"));
    }
    write_text(&args.out.join("aggregate.txt"), &report)?;
    print!("{report}");
    Ok(())
}
