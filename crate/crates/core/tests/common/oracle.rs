use lrp3d::layers::{model_forward, LayerParams, LayerSpec, Mode, ModelConfig, ParamSet};
use lrp3d::Tensor;

use super::naive_conv;

/// z⁺ share of one output unit. A unit without positive contributions hands
/// its relevance to the negative ones instead, the library's convention for
/// the case the plain rule leaves undefined.
pub fn share(z: &[(usize, f64)], r: f64, eps: f64, out: &mut [f64]) {
    let pos: f64 = z.iter().map(|c| c.1.max(0.0)).sum();
    let neg: f64 = z.iter().map(|c| c.1.min(0.0)).sum();
    for &(j, v) in z {
        if pos > 0.0 {
            out[j] += v.max(0.0) / (pos + eps) * r;
        } else if neg < 0.0 {
            out[j] += v.min(0.0) / (neg - eps) * r;
        }
    }
}

/// Straightforward z⁺ rule, written independently of the library: its own
/// batch-norm folding, explicit convolution loops and per-unit sums.
pub fn zplus_oracle(config: &ModelConfig, params: &ParamSet, input: &Tensor, target: usize, eps: f64) -> Vec<f64> {
    // folded linear layers: (weights, bias, kind, conv geometry)
    enum Op {
        Conv {
            w: Vec<f64>,
            b: Vec<f64>,
            out_ch: usize,
            k: usize,
            stride: usize,
            pad: usize,
        },
        Dense {
            w: Vec<f64>,
            b: Vec<f64>,
            out: usize,
            inp: usize,
        },
        Relu,
        Pool {
            k: usize,
            s: usize,
        },
        Flatten,
    }
    let mut ops: Vec<Op> = Vec::new();
    for (spec, p) in config.layers.iter().zip(&params.layers) {
        match (spec, p) {
            (
                LayerSpec::Conv3d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                LayerParams::Conv3d { weight, bias },
            ) => ops.push(Op::Conv {
                w: weight.data().to_vec(),
                b: bias.data().to_vec(),
                out_ch: *out_channels,
                k: *kernel,
                stride: *stride,
                pad: *pad,
            }),
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                LayerParams::Dense { weight, bias },
            ) => ops.push(Op::Dense {
                w: weight.data().to_vec(),
                b: bias.data().to_vec(),
                out: *out_features,
                inp: *in_features,
            }),
            (
                LayerSpec::BatchNorm { epsilon, .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let (w, b) = match ops.last_mut().unwrap() {
                    Op::Conv { w, b, .. } | Op::Dense { w, b, .. } => (w, b),
                    _ => panic!("batchnorm after non-linear layer"),
                };
                let per = w.len() / b.len();
                for c in 0..b.len() {
                    let s = gamma.data()[c] / (running_var.data()[c] + epsilon).sqrt();
                    for v in &mut w[c * per..(c + 1) * per] {
                        *v *= s;
                    }
                    b[c] = (b[c] - running_mean.data()[c]) * s + beta.data()[c];
                }
            }
            (LayerSpec::Relu, _) => ops.push(Op::Relu),
            (LayerSpec::AvgPool3d { kernel, stride }, _) => ops.push(Op::Pool { k: *kernel, s: *stride }),
            (LayerSpec::Flatten, _) => ops.push(Op::Flatten),
            other => panic!("unexpected layer {other:?}"),
        }
    }

    // forward, keeping each op's input and 4-D dims
    let mut acts: Vec<(Vec<f64>, [usize; 4])> = Vec::new();
    let s = input.shape();
    let mut x = input.data().to_vec();
    let mut dims = if s.len() == 4 {
        [s[0], s[1], s[2], s[3]]
    } else {
        [s[0], 1, 1, 1]
    };
    for op in &ops {
        acts.push((x.clone(), dims));
        match op {
            Op::Conv {
                w,
                b,
                out_ch,
                k,
                stride,
                pad,
            } => {
                let (mut y, od) = naive_conv(&x, dims, w, *out_ch, *k, *stride, *pad);
                let sp = od[1] * od[2] * od[3];
                for (i, v) in y.iter_mut().enumerate() {
                    *v += b[i / sp];
                }
                x = y;
                dims = od;
            }
            Op::Dense { w, b, out, inp } => {
                x = (0..*out)
                    .map(|o| (0..*inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>() + b[o])
                    .collect();
                dims = [*out, 1, 1, 1];
            }
            Op::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Op::Pool { k, s } => {
                let [c, d, h, w] = dims;
                let o = |n: usize| (n - k) / s + 1;
                let od = [c, o(d), o(h), o(w)];
                let mut y = vec![0.0; c * od[1] * od[2] * od[3]];
                for ci in 0..c {
                    for z in 0..od[1] {
                        for yy in 0..od[2] {
                            for xx in 0..od[3] {
                                let mut sum = 0.0;
                                for a in 0..*k {
                                    for bb in 0..*k {
                                        for cc in 0..*k {
                                            sum += x[((ci * d + z * s + a) * h + yy * s + bb) * w + xx * s + cc];
                                        }
                                    }
                                }
                                y[((ci * od[1] + z) * od[2] + yy) * od[3] + xx] = sum / (k * k * k) as f64;
                            }
                        }
                    }
                }
                x = y;
                dims = od;
            }
            Op::Flatten => dims = [x.len(), 1, 1, 1],
        }
    }

    // backward z⁺ rule
    let mut r = vec![0.0; x.len()];
    r[target] = x[target];
    for (op, (a, dims)) in ops.iter().zip(&acts).rev() {
        r = match op {
            Op::Relu | Op::Flatten => r,
            Op::Dense { w, out, inp, .. } => {
                let mut rin = vec![0.0; *inp];
                for o in 0..*out {
                    let z: Vec<(usize, f64)> = (0..*inp).map(|i| (i, a[i] * w[o * inp + i])).collect();
                    share(&z, r[o], eps, &mut rin);
                }
                rin
            }
            Op::Conv {
                w,
                out_ch,
                k,
                stride,
                pad,
                ..
            } => {
                let [c, d, h, wd] = *dims;
                let o = |n: usize| (n + 2 * pad - k) / stride + 1;
                let (od, oh, ow) = (o(d), o(h), o(wd));
                let mut rin = vec![0.0; a.len()];
                for co in 0..*out_ch {
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let ro = r[((co * od + z) * oh + y) * ow + xx];
                                let mut contrib = Vec::new();
                                for ci in 0..c {
                                    for kz in 0..*k {
                                        for ky in 0..*k {
                                            for kx in 0..*k {
                                                let iz = (z * stride + kz) as isize - *pad as isize;
                                                let iy = (y * stride + ky) as isize - *pad as isize;
                                                let ix = (xx * stride + kx) as isize - *pad as isize;
                                                if iz < 0
                                                    || iy < 0
                                                    || ix < 0
                                                    || iz >= d as isize
                                                    || iy >= h as isize
                                                    || ix >= wd as isize
                                                {
                                                    continue;
                                                }
                                                let j = ((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                                let wi = (((co * c + ci) * k + kz) * k + ky) * k + kx;
                                                contrib.push((j, a[j] * w[wi]));
                                            }
                                        }
                                    }
                                }
                                share(&contrib, ro, eps, &mut rin);
                            }
                        }
                    }
                }
                rin
            }
            Op::Pool { k, s } => {
                let [c, d, h, w] = *dims;
                let o = |n: usize| (n - k) / s + 1;
                let od = [o(d), o(h), o(w)];
                let mut rin = vec![0.0; a.len()];
                for ci in 0..c {
                    for z in 0..od[0] {
                        for yy in 0..od[1] {
                            for xx in 0..od[2] {
                                let ro = r[((ci * od[0] + z) * od[1] + yy) * od[2] + xx];
                                let idx: Vec<usize> = (0..k * k * k)
                                    .map(|m| {
                                        ((ci * d + z * s + m / (k * k)) * h + yy * s + (m / k) % k) * w + xx * s + m % k
                                    })
                                    .collect();
                                let sum: f64 = idx.iter().map(|&j| a[j]).sum();
                                for &j in &idx {
                                    rin[j] += if sum != 0.0 {
                                        a[j] / sum * ro
                                    } else {
                                        ro / (k * k * k) as f64
                                    };
                                }
                            }
                        }
                    }
                }
                rin
            }
        };
    }
    r
}

pub fn target_of(config: &ModelConfig, params: &ParamSet, x: &Tensor) -> usize {
    let out = model_forward(config, params, x, Mode::Infer).unwrap();
    if out.logits.data()[0] >= out.logits.data()[1] {
        0
    } else {
        1
    }
}
