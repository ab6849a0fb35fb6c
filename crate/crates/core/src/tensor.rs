//! Dense row-major `f64` tensors.
//!
//! The last axis is contiguous. There is no broadcasting: every binary
//! operation requires identical shapes, and reshaping is always explicit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Row-major strides for `shape` (innermost stride is 1).
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// Pairwise (cascade) summation; error grows as O(log n) instead of O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        let mut acc = [0.0f64; 4];
        let chunks = values.chunks_exact(4);
        let rest = chunks.remainder();
        for c in chunks {
            acc[0] += c[0];
            acc[1] += c[1];
            acc[2] += c[2];
            acc[3] += c[3];
        }
        let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for v in rest {
            total += v;
        }
        return total;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Dimension(format!(
            "extent of axis {axis} is zero in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output is finite whenever the
    /// inputs are; callers that can overflow must validate afterwards.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Dimension(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (axis, ((&i, &e), s)) in index.iter().zip(&self.shape).zip(strides_of(&self.shape)).enumerate() {
            if i >= e {
                return Err(Error::Dimension(format!(
                    "index {i} out of range for axis {axis} of extent {e}"
                )));
            }
            off += i * s;
        }
        Ok(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(Error::Dimension(format!(
                "flat offset {offset} out of range for {} values",
                self.data.len()
            )));
        }
        let strides = self.strides();
        let mut index = vec![0; self.shape.len()];
        for (axis, s) in strides.iter().enumerate() {
            index[axis] = offset / s;
            offset %= s;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Tensor::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map(|v| v * factor)
    }

    /// Sum of all entries (pairwise summation).
    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Sums over the listed axes, removing them from the shape. Summing over
    /// every axis yields a rank-0 tensor; an empty axis list is the identity.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::Dimension(format!("axis {a} out of range for rank {rank}")));
            }
            if reduce[a] {
                return Err(Error::Dimension(format!("axis {a} listed twice")));
            }
            reduce[a] = true;
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduce[a]).collect();
        let summed: Vec<usize> = (0..rank).filter(|&a| reduce[a]).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| self.shape[a]).collect();
        let inner_shape: Vec<usize> = summed.iter().map(|&a| self.shape[a]).collect();
        let strides = self.strides();
        let out_len: usize = out_shape.iter().product();
        let inner_len: usize = inner_shape.iter().product();

        let mut out = Vec::with_capacity(out_len);
        let mut buf = vec![0.0; inner_len];
        let out_strides = strides_of(&out_shape);
        let inner_strides = strides_of(&inner_shape);
        for o in 0..out_len {
            let mut base = 0;
            let mut rem = o;
            for (k, &axis) in kept.iter().enumerate() {
                base += (rem / out_strides[k]) * strides[axis];
                rem %= out_strides[k];
            }
            for (i, slot) in buf.iter_mut().enumerate() {
                let mut off = base;
                let mut rem = i;
                for (k, &axis) in summed.iter().enumerate() {
                    off += (rem / inner_strides[k]) * strides[axis];
                    rem %= inner_strides[k];
                }
                *slot = self.data[off];
            }
            out.push(pairwise_sum(&buf));
        }
        Tensor::new(out_shape, out)
    }

    /// Pads the three spatial axes of a `C×D×H×W` tensor by `pad[i]` on both
    /// sides, filling the border with `value`.
    pub fn pad3d(&self, pad: [usize; 3], value: f64) -> Result<Tensor> {
        let [c, d, h, w] = self.dims4("pad3d")?;
        if !value.is_finite() {
            return Err(Error::Numerical("pad value must be finite".into()));
        }
        if pad == [0, 0, 0] {
            return Ok(self.clone());
        }
        let (pd, ph, pw) = (d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]);
        let mut out = vec![value; c * pd * ph * pw];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ci * d + z) * h + y) * w;
                    let dst = ((ci * pd + z + pad[0]) * ph + y + pad[1]) * pw + pad[2];
                    out[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(Tensor::from_raw(vec![c, pd, ph, pw], out))
    }

    /// Extracts the spatial box `[start, start + extent)` of a `C×D×H×W` tensor.
    pub fn crop3d(&self, start: [usize; 3], extent: [usize; 3]) -> Result<Tensor> {
        let [c, d, h, w] = self.dims4("crop3d")?;
        for (axis, (&s, (&e, &n))) in start.iter().zip(extent.iter().zip(&[d, h, w])).enumerate() {
            if e == 0 || s + e > n {
                return Err(Error::Dimension(format!(
                    "crop [{s}, {}) exceeds spatial axis {axis} of extent {n}",
                    s + e
                )));
            }
        }
        let [ed, eh, ew] = extent;
        let mut out = Vec::with_capacity(c * ed * eh * ew);
        for ci in 0..c {
            for z in 0..ed {
                for y in 0..eh {
                    let src = ((ci * d + z + start[0]) * h + y + start[1]) * w + start[2];
                    out.extend_from_slice(&self.data[src..src + ew]);
                }
            }
        }
        Ok(Tensor::from_raw(vec![c, ed, eh, ew], out))
    }

    pub(crate) fn dims4(&self, op: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::Dimension(format!(
                "{op} expects a C×D×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Matrix product of `M×K` and `K×N` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return Err(Error::Dimension(format!("matmul lhs must be 2-D, got {:?}", a.shape))),
    };
    let (k2, n) = match b.shape[..] {
        [k2, n] => (k2, n),
        _ => return Err(Error::Dimension(format!("matmul rhs must be 2-D, got {:?}", b.shape))),
    };
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}
