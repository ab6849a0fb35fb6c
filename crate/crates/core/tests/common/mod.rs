#![allow(dead_code)]

use lrp3d::layers::{default_class_names, LayerParams, ModelConfig, ParamSet};
use lrp3d::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcheck;
pub mod oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Small block network with random weights and batch-norm statistics.
/// With `zero_bias` every bias, batch-norm shift and running mean is zero,
/// so the folded network has no biases either.
pub fn random_net(seed: u64, blocks: usize, zero_bias: bool) -> (ModelConfig, ParamSet) {
    let side = 2usize.pow(blocks as u32 + 1);
    let channels: Vec<usize> = (0..blocks).map(|b| 2 + b).collect();
    let config = ModelConfig::blocks([1, side, side, side], &channels, 4, default_class_names()).unwrap();
    let mut params = ParamSet::init(&config, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    for layer in &mut params.layers {
        match layer {
            LayerParams::Conv3d { bias, .. } | LayerParams::Dense { bias, .. } => {
                if !zero_bias {
                    *bias = random_tensor(bias.shape(), -0.5, 0.5, &mut r);
                }
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                *gamma = random_tensor(gamma.shape(), 0.5, 1.5, &mut r);
                *running_var = random_tensor(running_var.shape(), 0.5, 2.0, &mut r);
                if !zero_bias {
                    *beta = random_tensor(beta.shape(), -0.5, 0.5, &mut r);
                    *running_mean = random_tensor(running_mean.shape(), -0.5, 0.5, &mut r);
                }
            }
            LayerParams::None => {}
        }
    }
    (config, params)
}

/// Explicit 7-loop convolution without bias, `weight` as `out × in × k³`.
pub fn naive_conv(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [c, d, h, wd] = dims;
    let o = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = vec![0.0; out_ch * od * oh * ow];
    for co in 0..out_ch {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = (z * stride + kz) as isize - pad as isize;
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((co * c + ci) * k + kz) * k + ky) * k + kx;
                                    s += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((co * od + z) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (out, [out_ch, od, oh, ow])
}

/// The convolution written out as an `out_len × in_len` matrix.
pub fn unrolled_conv(
    dims: [usize; 4],
    w: &[f64],
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let in_len: usize = dims.iter().product();
    let mut cols = Vec::with_capacity(in_len);
    let mut out_len = 0;
    for j in 0..in_len {
        let mut e = vec![0.0; in_len];
        e[j] = 1.0;
        let (col, _) = naive_conv(&e, dims, w, out_ch, k, stride, pad);
        out_len = col.len();
        cols.push(col);
    }
    let mut m = vec![0.0; out_len * in_len];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[i * in_len + j] = v;
        }
    }
    (m, out_len, in_len)
}
