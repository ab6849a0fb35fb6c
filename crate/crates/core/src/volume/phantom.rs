//! Synthetic "brains": a bright ellipsoidal rim around a darker interior,
//! with a class-dependent rim thickness.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::preprocess::{center_fit, preprocess, PreprocessConfig};
use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Dataset, Sample};

pub const DEFAULT_PHANTOM_DIMS: [usize; 3] = [32, 24, 24];
/// Radii are scaled by a factor drawn from `1 ± RADIUS_JITTER` per axis.
pub const RADIUS_JITTER: f64 = 0.05;

/// How one class looks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAppearance {
    pub name: String,
    pub rim_thickness: usize,
    pub rim_intensity: f64,
    pub interior_intensity: f64,
    pub noise_sigma: f64,
}

/// Term phantoms get a one-voxel rim, preterm phantoms a three-voxel rim.
pub fn default_appearances() -> Vec<ClassAppearance> {
    [("term", 1), ("preterm", 3)]
        .into_iter()
        .map(|(name, rim)| ClassAppearance {
            name: name.into(),
            rim_thickness: rim,
            rim_intensity: 2.5,
            interior_intensity: 1.0,
            noise_sigma: 0.1,
        })
        .collect()
}

/// Everything needed to render one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub label: usize,
    pub rim_thickness: usize,
    pub rim_intensity: f64,
    pub interior_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Per-axis factors applied to the nominal radii.
    pub radius_scale: [f64; 3],
}

impl PhantomSpec {
    fn radii(&self) -> [f64; 3] {
        let mut r = [0.0; 3];
        for k in 0..3 {
            r[k] = (self.dims[k] as f64 - 3.0) / 2.0 * self.radius_scale[k];
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!(
                "phantom dims must be at least 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.rim_thickness == 0 {
            return Err(Error::Config("rim thickness must be at least 1".into()));
        }
        for (what, v) in [
            ("rim intensity", self.rim_intensity),
            ("interior intensity", self.interior_intensity),
            ("noise sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be finite and >= 0, got {v}")));
            }
        }
        if !self.radius_scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("bad radius scale {:?}", self.radius_scale)));
        }
        let smallest = self.radii().iter().cloned().fold(f64::INFINITY, f64::min);
        if smallest - (self.rim_thickness as f64) < 1.0 {
            return Err(Error::Config(format!(
                "dims {:?} are too small for a rim of {} voxels",
                self.dims, self.rim_thickness
            )));
        }
        Ok(())
    }
}

/// `Σ (xₖ/rₖ)²` at voxel `(z, y, x)` for an ellipsoid centered in the grid.
fn ellipsoid_norm(dims: [usize; 3], radii: [f64; 3], at: [usize; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let c = (dims[k] as f64 - 1.0) / 2.0;
            let u = (at[k] as f64 - c) / radii[k];
            u * u
        })
        .sum()
}

/// Noise-free intensities.
fn render(spec: &PhantomSpec) -> (Vec<f64>, Vec<bool>) {
    let outer = spec.radii();
    let t = spec.rim_thickness as f64;
    let inner = outer.map(|r| r - t);
    let [d, h, w] = spec.dims;
    let mut values = Vec::with_capacity(d * h * w);
    let mut brain = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let at = [z, y, x];
                if ellipsoid_norm(spec.dims, outer, at) > 1.0 {
                    values.push(0.0);
                    brain.push(false);
                } else if ellipsoid_norm(spec.dims, inner, at) > 1.0 {
                    values.push(spec.rim_intensity);
                    brain.push(true);
                } else {
                    values.push(spec.interior_intensity);
                    brain.push(true);
                }
            }
        }
    }
    (values, brain)
}

/// Renders a phantom with its brain mask attached. Gaussian noise is added
/// inside the brain only; the background stays exactly zero.
pub fn phantom_volume(spec: &PhantomSpec, subject_id: impl Into<String>) -> Result<Volume> {
    spec.validate()?;
    let (mut values, brain) = render(spec);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (v, &inside) in values.iter_mut().zip(&brain) {
            if inside {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let shape = spec.dims.to_vec();
    let mask = Tensor::new(shape.clone(), brain.iter().map(|&b| f64::from(u8::from(b))).collect())?;
    Volume::new(Tensor::new(shape, values)?, [1.0; 3], subject_id)?.with_mask(mask)
}

/// A generated cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSet {
    pub volumes: Vec<Volume>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// 1 where noise-free phantoms of different classes differ, else 0.
    pub ground_truth: Tensor,
}

impl PhantomSet {
    /// Preprocesses every volume into a labeled dataset carrying the
    /// ground-truth mask.
    pub fn dataset(&self, cfg: &PreprocessConfig) -> Result<Dataset> {
        let inputs: Vec<Tensor> = self
            .volumes
            .par_iter()
            .map(|v| preprocess(v, cfg))
            .collect::<Result<_>>()?;
        let samples = inputs
            .into_iter()
            .zip(&self.volumes)
            .zip(&self.labels)
            .map(|((input, v), &label)| Sample {
                input,
                label: Some(label),
                subject_id: v.subject_id.clone(),
            })
            .collect();
        let [d, h, w] = cfg.target_dims;
        let mask = center_fit(&self.ground_truth, cfg.target_dims)?.reshape(&[1, d, h, w])?;
        Dataset::new(samples, self.class_names.clone())?.with_discriminative_mask(mask)
    }
}

/// Generates `n_per_class` phantoms per class.
///
/// Subjects come in matched groups, one per class, sharing the same radius
/// jitter, so the only noise-free difference inside a group is the rim.
/// Subject `k` of group `g` gets index `g·K + k` and id `sub-NNN`; output
/// depends only on `seed`.
pub fn phantom_dataset(
    n_per_class: usize,
    dims: [usize; 3],
    seed: u64,
    classes: &[ClassAppearance],
) -> Result<PhantomSet> {
    if n_per_class == 0 {
        return Err(Error::Config("need at least one phantom per class".into()));
    }
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two classes, got {}",
            classes.len()
        )));
    }
    let spec_for = |label: usize, c: &ClassAppearance, seed: u64, radius_scale: [f64; 3]| PhantomSpec {
        dims,
        label,
        rim_thickness: c.rim_thickness,
        rim_intensity: c.rim_intensity,
        interior_intensity: c.interior_intensity,
        noise_sigma: c.noise_sigma,
        seed,
        radius_scale,
    };
    // the smallest possible jitter must still fit every rim
    for (label, c) in classes.iter().enumerate() {
        spec_for(label, c, 0, [1.0 - RADIUS_JITTER; 3]).validate()?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(n_per_class * classes.len());
    for _ in 0..n_per_class {
        let scale = [0; 3].map(|_| 1.0 + master.random_range(-RADIUS_JITTER..=RADIUS_JITTER));
        for (label, c) in classes.iter().enumerate() {
            specs.push(spec_for(label, c, master.next_u64(), scale));
        }
    }
    let volumes: Vec<Volume> = specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| phantom_volume(s, format!("sub-{i:03}")))
        .collect::<Result<_>>()?;

    let n: usize = dims.iter().product();
    let mut differs = vec![false; n];
    for group in specs.chunks(classes.len()) {
        let clean: Vec<Vec<f64>> = group.iter().map(|s| render(s).0).collect();
        for (j, flag) in differs.iter_mut().enumerate() {
            if clean.iter().any(|c| c[j] != clean[0][j]) {
                *flag = true;
            }
        }
    }
    Ok(PhantomSet {
        labels: specs.iter().map(|s| s.label).collect(),
        volumes,
        class_names: classes.iter().map(|c| c.name.clone()).collect(),
        ground_truth: Tensor::new(dims.to_vec(), differs.iter().map(|&b| f64::from(u8::from(b))).collect())?,
    })
}
