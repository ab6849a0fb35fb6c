//! Volumes on disk and their preparation for the network: NIfTI-1 files,
//! crop and normalization, dataset manifests and synthetic phantoms.

mod manifest;
mod nifti;
mod phantom;
mod preprocess;

pub use manifest::{Manifest, ManifestEntry, MANIFEST_MAGIC};
pub use nifti::{
    decode_nifti, encode_nifti, read_nifti, write_nifti, write_nifti_as, Datatype, HEADER_SIZE, VOX_OFFSET,
};
pub use phantom::{
    default_appearances, phantom_dataset, phantom_volume, ClassAppearance, PhantomSet, PhantomSpec,
    DEFAULT_PHANTOM_DIMS, RADIUS_JITTER,
};
pub use preprocess::{center_fit, preprocess, Normalization, PreprocessConfig, MIN_MASK_VOXELS, STD_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel `D×H×W` image.
///
/// Axis order matches the in-memory tensor: the last axis (W) is the one
/// stored fastest on disk, i.e. NIfTI's `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Tensor,
    voxel_size_mm: [f64; 3],
    mask: Option<Tensor>,
    pub subject_id: String,
}

impl Volume {
    pub fn new(data: Tensor, voxel_size_mm: [f64; 3], subject_id: impl Into<String>) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Dimension(format!(
                "a volume is D×H×W, got shape {:?}",
                data.shape()
            )));
        }
        if !voxel_size_mm.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "voxel sizes must be positive, got {voxel_size_mm:?}"
            )));
        }
        Ok(Self {
            data,
            voxel_size_mm,
            mask: None,
            subject_id: subject_id.into(),
        })
    }

    /// Attaches a brain mask; any nonzero value counts as inside.
    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.data.shape() {
            return Err(Error::Dimension(format!(
                "mask shape {:?} does not match volume {:?}",
                mask.shape(),
                self.data.shape()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }
}
