use std::path::PathBuf;

use clap::Args;
use lrp3d::volume::{
    default_appearances, phantom_dataset, write_nifti, write_nifti_as, Datatype, Manifest, ManifestEntry, Volume,
};

use crate::error::CliResult;
use crate::files::{create_dir, file_id, parse_dims};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const GROUND_TRUTH_NAME: &str = "ground_truth.nii";

/// Generate a labeled synthetic cohort with its ground-truth mask.
#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Subjects per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Volume size as D,H,W.
    #[arg(long, default_value = "32,24,24", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &PhantomArgs) -> CliResult<()> {
    let classes = default_appearances();
    let set = phantom_dataset(args.n as usize, args.dims, args.seed, &classes)?;
    create_dir(&args.out)?;

    let mut manifest = Manifest::new(set.class_names.clone());
    let [d, h, w] = args.dims;
    let meta = [
        ("source", "phantom".to_string()),
        ("dims", format!("{d},{h},{w}")),
        ("seed", args.seed.to_string()),
        ("n_per_class", args.n.to_string()),
        ("ground_truth", GROUND_TRUTH_NAME.to_string()),
        (
            "rim_thickness",
            classes
                .iter()
                .map(|c| c.rim_thickness.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
    ];
    for (k, v) in meta {
        manifest.metadata.insert(k.into(), v);
    }

    for (v, &label) in set.volumes.iter().zip(&set.labels) {
        let id = file_id(&v.subject_id);
        let image = format!("{id}.nii");
        let mask = format!("{id}_mask.nii");
        write_nifti(v, args.out.join(&image))?;
        if let Some(m) = v.mask() {
            let mv = Volume::new(m.clone(), v.voxel_size_mm(), v.subject_id.clone())?;
            write_nifti_as(&mv, args.out.join(&mask), Datatype::U8)?;
        }
        manifest.entries.push(ManifestEntry {
            subject_id: v.subject_id.clone(),
            label: Some(set.class_names[label].clone()),
            path: image.into(),
            mask: v.mask().map(|_| mask.into()),
        });
    }
    let gt = Volume::new(set.ground_truth.clone(), [1.0; 3], "ground_truth")?;
    write_nifti_as(&gt, args.out.join(GROUND_TRUTH_NAME), Datatype::U8)?;
    manifest.write(args.out.join(MANIFEST_NAME))?;
    println!(
        "wrote {} phantoms ({} per class) to {}",
        set.volumes.len(),
        args.n,
        args.out.display()
    );
    Ok(())
}
