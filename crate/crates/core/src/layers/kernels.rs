//! Raw numeric kernels for the layer types. Slices are row-major; shapes are
//! checked by the callers in `layers` and `network`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COL_BLOCK: usize = 512;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
            i += 1;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let arow = &a[p * m + i..p * m + i + 4];
                let (a0, a1, a2, a3) = (arow[0], arow[1], arow[2], arow[3]);
                let brow = &b[p * n + j0..p * n + j1];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[p * m + i];
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
            i += 1;
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in rx.iter().zip(ry) {
        s += a * b;
    }
    s
}

/// Shape bookkeeping for a cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, d, h, w) = match *input_shape {
            [c, d, h, w] => (c, d, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv3d input must be C×D×H×W, got {input_shape:?}"
                )))
            }
        };
        let (o, ci, k) = match *weight_shape {
            [o, ci, k0, k1, k2] if k0 == k1 && k1 == k2 => (o, ci, k0),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv3d weights must be O×C×k×k×k, got {weight_shape:?}"
                )))
            }
        };
        if ci != c {
            return Err(Error::Dimension(format!(
                "conv3d weights expect {ci} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv3d stride must be >= 1".into()));
        }
        let out = |n: usize| {
            if n + 2 * pad < k {
                Err(Error::Dimension(format!(
                    "padded extent {} smaller than kernel {k}",
                    n + 2 * pad
                )))
            } else {
                Ok((n + 2 * pad - k) / stride + 1)
            }
        };
        Ok(Self {
            in_channels: c,
            out_channels: o,
            kernel: k,
            stride,
            pad,
            in_dims: [d, h, w],
            out_dims: [out(d)?, out(h)?, out(w)?],
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_dims.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_spatial()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    /// Valid output index range `[lo, hi)` along one axis for kernel offset
    /// `kk`: those outputs whose input coordinate `o*stride + kk - pad` is inside.
    fn valid_range(&self, axis: usize, kk: usize) -> (usize, usize) {
        let n = self.in_dims[axis] as isize;
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let out = self.out_dims[axis] as isize;
        // o*s + off >= 0  and  o*s + off < n
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n - off <= 0 {
            0
        } else {
            ((n - off + s - 1) / s).min(out)
        };
        (lo.max(0) as usize, hi.max(lo).max(0) as usize)
    }

    /// Unrolls the input into a `(C·k³) × (Do·Ho·Wo)` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let k = self.kernel;
        let s = self.stride;
        let n = self.out_spatial();
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.in_channels {
            for kz in 0..k {
                let (z0, z1) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (x0, x1) = self.valid_range(2, kx);
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let dst = &mut cols[row * n..(row + 1) * n];
                        for oz in z0..z1 {
                            let iz = oz * s + kz - self.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.pad;
                                let src = ((c * d + iz) * h + iy) * w;
                                let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                if s == 1 {
                                    let ix0 = x0 + kx - self.pad;
                                    drow[x0..x1].copy_from_slice(&input[src + ix0..src + ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        drow[ox] = input[src + ox * s + kx - self.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let _ = od;
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-adds patch columns back
    /// into an input-shaped buffer.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let k = self.kernel;
        let s = self.stride;
        let n = self.out_spatial();
        let mut out = vec![0.0; self.in_len()];
        for c in 0..self.in_channels {
            for kz in 0..k {
                let (z0, z1) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (x0, x1) = self.valid_range(2, kx);
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let src = &cols[row * n..(row + 1) * n];
                        for oz in z0..z1 {
                            let iz = oz * s + kz - self.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.pad;
                                let dst = ((c * d + iz) * h + iy) * w;
                                let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for ox in x0..x1 {
                                    out[dst + ox * s + kx - self.pad] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Convolution (cross-correlation) of `input` with `weight`, plus an
    /// optional per-channel bias.
    pub fn forward(&self, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let n = self.out_spatial();
        let mut out = vec![0.0; self.out_len()];
        if let Some(b) = bias {
            for (o, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let cols = self.im2col(input);
        gemm_nn(self.out_channels, self.patch_len(), n, weight, &cols, &mut out);
        out
    }

    /// Transposed convolution: gradient of the forward map with respect to its input.
    pub fn transpose(&self, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
        let n = self.out_spatial();
        let mut cols = vec![0.0; self.patch_len() * n];
        gemm_tn(self.patch_len(), self.out_channels, n, weight, grad_out, &mut cols);
        self.col2im(&cols)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, input: &[f64], weight: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.out_spatial();
        let grad_bias: Vec<f64> = grad_out.chunks(n).map(crate::tensor::pairwise_sum).collect();
        let cols = self.im2col(input);
        let mut grad_weight = vec![0.0; self.out_channels * self.patch_len()];
        gemm_nt(
            self.out_channels,
            n,
            self.patch_len(),
            grad_out,
            &cols,
            &mut grad_weight,
        );
        drop(cols);
        let grad_input = self.transpose(grad_out, weight);
        (grad_input, grad_weight, grad_bias)
    }
}

/// 3D convolution of a `C×D×H×W` input with `O×C×k×k×k` weights, no kernel
/// flip, zero padding of `pad` voxels on every spatial side.
pub fn conv3d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [geom.out_channels] {
        return Err(Error::Dimension(format!(
            "conv3d bias must have shape [{}], got {:?}",
            geom.out_channels,
            bias.shape()
        )));
    }
    Tensor::new(
        geom.out_shape(),
        geom.forward(input.data(), weight.data(), Some(bias.data())),
    )
}

/// Shape bookkeeping for average pooling.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeometry {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        let (c, d, h, w) = match *input_shape {
            [c, d, h, w] => (c, d, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "avgpool3d input must be C×D×H×W, got {input_shape:?}"
                )))
            }
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::Dimension("avgpool3d kernel and stride must be >= 1".into()));
        }
        let out = |n: usize| {
            if n < kernel {
                Err(Error::Dimension(format!(
                    "avgpool3d kernel {kernel} larger than spatial extent {n}"
                )))
            } else {
                Ok((n - kernel) / stride + 1)
            }
        };
        Ok(Self {
            channels: c,
            kernel,
            stride,
            in_dims: [d, h, w],
            out_dims: [out(d)?, out(h)?, out(w)?],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.channels, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    pub fn window_size(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Calls `f(out_index, in_index)` for every (output, window member) pair.
    pub fn for_each_window(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.channels {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = ((c * od + oz) * oh + oy) * ow + ox;
                        for kz in 0..k {
                            for ky in 0..k {
                                let base = ((c * d + oz * s + kz) * h + oy * s + ky) * w + ox * s;
                                for kx in 0..k {
                                    f(o, base + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_shape().iter().product()];
        self.for_each_window(|o, i| out[o] += input[i]);
        let inv = 1.0 / self.window_size() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.channels * self.in_dims.iter().product::<usize>()];
        let inv = 1.0 / self.window_size() as f64;
        self.for_each_window(|o, i| grad[i] += grad_out[o] * inv);
        grad
    }
}

/// Mean over each `kernel³` window; windows that would run past the edge are dropped.
pub fn avgpool3d_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let geom = PoolGeometry::new(input.shape(), kernel, stride)?;
    Ok(Tensor::from_raw(geom.out_shape(), geom.forward(input.data())))
}

/// Affine map `W·x + b` for a flat input.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::Dimension(format!(
                "dense weights must be 2-D, got {:?}",
                weight.shape()
            )))
        }
    };
    if input.shape() != [inp] || bias.shape() != [out] {
        return Err(Error::Dimension(format!(
            "dense {inp}->{out} given input {:?} and bias {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    Tensor::new(
        vec![out],
        dense_raw(input.data(), weight.data(), Some(bias.data()), out, inp),
    )
}

pub(crate) fn dense_raw(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: usize, inp: usize) -> Vec<f64> {
    (0..out)
        .map(|o| dot(&w[o * inp..(o + 1) * inp], x) + bias.map_or(0.0, |b| b[o]))
        .collect()
}

/// `Wᵀ · g`
pub(crate) fn dense_transpose(g: &[f64], w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut r = vec![0.0; inp];
    for o in 0..out {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        for (ri, &wv) in r.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
            *ri += go * wv;
        }
    }
    r
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 1 || logits.len() < 2 {
        return Err(Error::Dimension(format!(
            "softmax expects a vector of at least 2 logits, got {:?}",
            logits.shape()
        )));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}
