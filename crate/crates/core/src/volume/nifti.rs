//! Uncompressed single-file NIfTI-1 (`.nii`), little-endian only.

use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const VOX_OFFSET: usize = 352;

const MAGIC: &[u8; 4] = b"n+1\0";
const DESCRIP_LEN: usize = 80;
const UNITS_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            16 => Some(Datatype::F32),
            64 => Some(Datatype::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Datatype::U8 => b[0] as f64,
            Datatype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Datatype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Datatype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) -> Result<()> {
        let integral = |lo: f64, hi: f64| {
            if v.fract() != 0.0 || v < lo || v > hi {
                Err(Error::Config(format!("value {v} is not representable as {self:?}")))
            } else {
                Ok(())
            }
        };
        match self {
            Datatype::U8 => {
                integral(0.0, 255.0)?;
                out.push(v as u8);
            }
            Datatype::I16 => {
                integral(i16::MIN as f64, i16::MAX as f64)?;
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Datatype::F32 => {
                let s = v as f32;
                if !s.is_finite() {
                    return Err(Error::Config(format!("value {v} overflows float32")));
                }
                out.extend_from_slice(&s.to_le_bytes());
            }
            Datatype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
        Ok(())
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes([self.0[at], self.0[at + 1]])
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.0[at..at + 4].try_into().expect("4 bytes"))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.0[at..at + 4].try_into().expect("4 bytes"))
    }
}

/// Decodes a complete `.nii` image held in memory. `fallback_id` names the
/// subject when the header description is empty.
pub fn decode_nifti(bytes: &[u8], fallback_id: &str) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(
            "sizeof_hdr",
            format!(
                "file holds {} bytes, shorter than the {HEADER_SIZE}-byte header",
                bytes.len()
            ),
        ));
    }
    let r = Reader(bytes);
    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let message = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("expected {HEADER_SIZE}, found {sizeof_hdr}")
        };
        return Err(Error::parse("sizeof_hdr", message));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::parse(
            "magic",
            format!(
                "expected \"n+1\\0\" (single-file NIfTI-1), found {:?}",
                &bytes[344..348]
            ),
        ));
    }

    let ndim = r.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::parse(
            "dim",
            format!("dim[0] must be 3 for a volume, found {ndim}"),
        ));
    }
    let mut extents = [0usize; 7];
    for (k, e) in extents.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * k);
        if v < 1 {
            return Err(Error::parse("dim", format!("dim[{}] = {v} is not positive", k + 1)));
        }
        *e = v as usize;
    }
    if extents[3..ndim as usize].iter().any(|&e| e != 1) {
        return Err(Error::parse("dim", "only single 3D volumes are supported"));
    }

    let code = r.i16(70);
    let dtype = Datatype::from_code(code).ok_or_else(|| {
        Error::parse(
            "datatype",
            format!("unsupported code {code} (want uint8, int16, float32 or float64)"),
        )
    })?;
    let bitpix = r.i16(72);
    if bitpix as usize != 8 * dtype.bytes() {
        return Err(Error::parse(
            "bitpix",
            format!("{bitpix} does not match datatype {dtype:?}"),
        ));
    }

    let mut voxel = [1.0f64; 3];
    for (k, v) in voxel.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * k) as f64;
        if !p.is_finite() || p < 0.0 {
            return Err(Error::parse("pixdim", format!("pixdim[{}] = {p}", k + 1)));
        }
        if p > 0.0 {
            *v = p;
        }
    }
    // disk order is x, y, z; tensor order is z, y, x
    voxel.reverse();

    let offset = r.f32(108);
    if !(offset >= VOX_OFFSET as f32) || offset.fract() != 0.0 {
        return Err(Error::parse(
            "vox_offset",
            format!("{offset} (must be an integer >= {VOX_OFFSET})"),
        ));
    }
    let offset = offset as usize;

    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else if !inter.is_finite() {
        return Err(Error::parse("scl_inter", format!("{inter}")));
    } else {
        (slope, inter)
    };

    let shape = vec![extents[2], extents[1], extents[0]];
    let n: usize = shape.iter().product();
    let width = dtype.bytes();
    let needed = offset + n * width;
    if bytes.len() < needed {
        return Err(Error::parse(
            "payload",
            format!(
                "truncated: {} voxel bytes expected, {} present",
                n * width,
                bytes.len().saturating_sub(offset)
            ),
        ));
    }
    let data: Vec<f64> = bytes[offset..needed]
        .chunks_exact(width)
        .map(|b| {
            let v = dtype.decode(b);
            // an identity scale must not turn -0.0 into +0.0
            if slope == 1.0 && inter == 0.0 {
                v
            } else {
                v * slope + inter
            }
        })
        .collect();
    let data = Tensor::new(shape, data).map_err(|e| Error::parse("payload", e.to_string()))?;

    let descrip = &bytes[148..148 + DESCRIP_LEN];
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(DESCRIP_LEN);
    let id = String::from_utf8_lossy(&descrip[..end]).trim().to_string();
    let id = if id.is_empty() { fallback_id.to_string() } else { id };
    Volume::new(data, voxel, id)
}

/// Serializes `volume` as a single-file NIfTI-1 image with a unit scale.
/// Integer types accept only integral values within range.
pub fn encode_nifti(volume: &Volume, dtype: Datatype) -> Result<Vec<u8>> {
    let [d, h, w] = volume.dims();
    let [vz, vy, vx] = volume.voxel_size_mm();
    for &e in &[d, h, w] {
        if e > i16::MAX as usize {
            return Err(Error::Config(format!("extent {e} does not fit a NIfTI-1 header")));
        }
    }
    let mut hdr = vec![0u8; VOX_OFFSET];
    let put_i16 = |hdr: &mut [u8], at: usize, v: i16| hdr[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |hdr: &mut [u8], at: usize, v: f32| hdr[at..at + 4].copy_from_slice(&v.to_le_bytes());

    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    hdr[38] = b'r';
    for (k, v) in [3, w as i16, h as i16, d as i16, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut hdr, 40 + 2 * k, v);
    }
    put_i16(&mut hdr, 70, dtype.code());
    put_i16(&mut hdr, 72, 8 * dtype.bytes() as i16);
    for (k, v) in [1.0, vx, vy, vz, 1.0, 1.0, 1.0, 1.0].into_iter().enumerate() {
        put_f32(&mut hdr, 76 + 4 * k, v as f32);
    }
    put_f32(&mut hdr, 108, VOX_OFFSET as f32);
    put_f32(&mut hdr, 112, 1.0);
    put_f32(&mut hdr, 116, 0.0);
    hdr[123] = UNITS_MM;

    let mut id_end = volume.subject_id.len().min(DESCRIP_LEN - 1);
    while !volume.subject_id.is_char_boundary(id_end) {
        id_end -= 1;
    }
    hdr[148..148 + id_end].copy_from_slice(&volume.subject_id.as_bytes()[..id_end]);

    // scanner-space affine: scaling only
    put_i16(&mut hdr, 254, 1);
    put_f32(&mut hdr, 280, vx as f32);
    put_f32(&mut hdr, 296 + 4, vy as f32);
    put_f32(&mut hdr, 312 + 8, vz as f32);
    hdr[344..348].copy_from_slice(MAGIC);

    let mut out = hdr;
    out.reserve(volume.data().len() * dtype.bytes());
    for &v in volume.data().data() {
        dtype.encode(v, &mut out)?;
    }
    Ok(out)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_nifti(&bytes, &stem)
}

/// Writes `volume` as float64, which reads back bit-exactly.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_as(volume, path, Datatype::F64)
}

pub fn write_nifti_as(volume: &Volume, path: impl AsRef<Path>, dtype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(volume, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
