use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Standard deviations below this are clamped before dividing.
pub const STD_FLOOR: f64 = 1e-8;
/// Masks with fewer voxels give no usable statistics.
pub const MIN_MASK_VOXELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Per-subject z-score over the brain mask; voxels outside are zeroed.
    #[default]
    ZscoreInMask,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::ZscoreInMask),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub target_dims: [usize; 3],
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_dims: [128, 96, 96],
            normalization: Normalization::ZscoreInMask,
        }
    }
}

/// Center-crops or zero-pads each axis of a `D×H×W` tensor to `target`.
/// An odd surplus is removed (or added) one more at the far end.
pub fn center_fit(t: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let [d, h, w] = match t.shape() {
        &[d, h, w] => [d, h, w],
        other => return Err(Error::Dimension(format!("center_fit expects D×H×W, got {other:?}"))),
    };
    if target.contains(&0) {
        return Err(Error::Config(format!("target dims must be positive, got {target:?}")));
    }
    if [d, h, w] == target {
        return Ok(t.clone());
    }
    // source index = target index + shift
    let shift = |n: usize, m: usize| {
        if n >= m {
            ((n - m) / 2) as isize
        } else {
            -(((m - n) / 2) as isize)
        }
    };
    let shift = [shift(d, target[0]), shift(h, target[1]), shift(w, target[2])];
    let [td, th, tw] = target;
    let mut out = vec![0.0; td * th * tw];
    let src = t.data();
    for z in 0..td {
        let sz = z as isize + shift[0];
        if sz < 0 || sz >= d as isize {
            continue;
        }
        for y in 0..th {
            let sy = y as isize + shift[1];
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..tw {
                let sx = x as isize + shift[2];
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(z * th + y) * tw + x] = src[((sz as usize) * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Crops or pads `volume` to `cfg.target_dims` and normalizes it, giving a
/// `1×D×H×W` network input. Without a mask, nonzero voxels form the mask.
pub fn preprocess(volume: &Volume, cfg: &PreprocessConfig) -> Result<Tensor> {
    let data = center_fit(volume.data(), cfg.target_dims)?;
    let shape = vec![1, cfg.target_dims[0], cfg.target_dims[1], cfg.target_dims[2]];
    if cfg.normalization == Normalization::None {
        return data.reshape(&shape);
    }
    let inside: Vec<bool> = match volume.mask() {
        Some(m) => center_fit(m, cfg.target_dims)?
            .data()
            .iter()
            .map(|&v| v != 0.0)
            .collect(),
        None => data.data().iter().map(|&v| v != 0.0).collect(),
    };
    let values: Vec<f64> = data
        .data()
        .iter()
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if values.len() < MIN_MASK_VOXELS {
        return Err(Error::Preprocess(format!(
            "subject `{}`: mask holds {} voxels after cropping, need at least {MIN_MASK_VOXELS}",
            volume.subject_id,
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let std = (pairwise_sum(&sq) / n).sqrt().max(STD_FLOOR);
    let out = data
        .data()
        .iter()
        .zip(&inside)
        .map(|(&v, &m)| if m { (v - mean) / std } else { 0.0 })
        .collect();
    Tensor::new(shape, out)
}
