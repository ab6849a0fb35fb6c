//! Per-layer relevance rules.
//!
//! Convolutions and dense layers share one implementation of the αβ and zB
//! rules, written against the layer's bias-free forward map and its adjoint.

use super::config::{BiasPolicy, LrpConfig};
use crate::error::{Error, Result};
use crate::layers::{dense_raw, dense_transpose, ConvGeometry, PoolGeometry};
use crate::tensor::Tensor;

/// Relevance at a layer's input, plus what could not be routed.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub relevance: Tensor,
    /// Relevance of output units with no contributions at all.
    pub dropped: f64,
    /// Units that took a fallback path (one-sided αβ split, zero-sum pool window).
    pub fallbacks: usize,
}

/// One-hot relevance on the target logit.
pub fn init_relevance(logits: &Tensor, target: usize) -> Result<Tensor> {
    if logits.ndim() != 1 {
        return Err(Error::Dimension(format!(
            "logits must be a vector, got {:?}",
            logits.shape()
        )));
    }
    if target >= logits.len() {
        return Err(Error::Config(format!(
            "target class {target} out of range for {} outputs",
            logits.len()
        )));
    }
    let mut r = vec![0.0; logits.len()];
    r[target] = logits.data()[target];
    Tensor::new(vec![logits.len()], r)
}

pub(crate) trait LinearMap {
    fn in_len(&self) -> usize;
    /// Bias-free forward map.
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64>;
    /// Adjoint of [`LinearMap::apply`] in its input.
    fn adjoint(&self, r: &[f64], w: &[f64]) -> Vec<f64>;
    /// Bias value seen by every output element.
    fn expand_bias(&self, bias: &[f64]) -> Vec<f64>;
}

pub(crate) struct DenseMap {
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearMap for DenseMap {
    fn in_len(&self) -> usize {
        self.inputs
    }

    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        dense_raw(x, w, None, self.outputs, self.inputs)
    }

    fn adjoint(&self, r: &[f64], w: &[f64]) -> Vec<f64> {
        dense_transpose(r, w, self.outputs, self.inputs)
    }

    fn expand_bias(&self, bias: &[f64]) -> Vec<f64> {
        bias.to_vec()
    }
}

impl LinearMap for ConvGeometry {
    fn in_len(&self) -> usize {
        ConvGeometry::in_len(self)
    }

    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        self.forward(x, w, None)
    }

    fn adjoint(&self, r: &[f64], w: &[f64]) -> Vec<f64> {
        self.transpose(r, w)
    }

    fn expand_bias(&self, bias: &[f64]) -> Vec<f64> {
        let spatial = self.out_spatial();
        bias.iter().flat_map(|&b| std::iter::repeat_n(b, spatial)).collect()
    }
}

fn split_signs(v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        v.iter().map(|&x| x.max(0.0)).collect(),
        v.iter().map(|&x| x.min(0.0)).collect(),
    )
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// αβ rule over a linear map.
///
/// Each contribution `z = a·w` is split by sign. Output `k` hands
/// `alpha·R_k` to its positive contributions in proportion to `z⁺` and
/// `−beta·R_k` to its negative ones in proportion to `z⁻`. If only one side
/// exists it receives all of `R_k`; if neither does, `R_k` is dropped.
pub(crate) fn alpha_beta<M: LinearMap>(
    map: &M,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    upstream: &[f64],
    cfg: &LrpConfig,
) -> (Vec<f64>, f64, usize) {
    let (ap, an) = split_signs(input);
    let (wp, wn) = split_signs(weight);
    let has_neg_input = !all_zero(&an);

    let mut zp = map.apply(&ap, &wp);
    let mut zn = map.apply(&ap, &wn);
    if has_neg_input {
        add_into(&mut zp, &map.apply(&an, &wn));
        add_into(&mut zn, &map.apply(&an, &wp));
    }
    if cfg.bias_policy() == BiasPolicy::Include {
        for ((p, n), b) in zp.iter_mut().zip(zn.iter_mut()).zip(map.expand_bias(bias)) {
            *p += b.max(0.0);
            *n += b.min(0.0);
        }
    }

    let eps = cfg.stabilizer();
    let (alpha, beta) = (cfg.alpha(), cfg.beta());
    let mut cp = vec![0.0; upstream.len()];
    let mut cn = vec![0.0; upstream.len()];
    let mut dropped = 0.0;
    let mut fallbacks = 0;
    for k in 0..upstream.len() {
        let r = upstream[k];
        if r == 0.0 {
            continue;
        }
        match (zp[k] != 0.0, zn[k] != 0.0) {
            (true, true) => {
                cp[k] = alpha * r / (zp[k] + eps);
                cn[k] = -beta * r / (zn[k] - eps);
            }
            (true, false) => {
                cp[k] = r / (zp[k] + eps);
                fallbacks += 1;
            }
            (false, true) => {
                cn[k] = r / (zn[k] - eps);
                fallbacks += 1;
            }
            (false, false) => dropped += r,
        }
    }

    let mut out = vec![0.0; map.in_len()];
    let pos_side = [(&ap, &wp, &cp), (&ap, &wn, &cn)];
    let neg_side = [(&an, &wn, &cp), (&an, &wp, &cn)];
    let terms = pos_side.iter().chain(if has_neg_input { &neg_side[..] } else { &[] });
    for (a, w, c) in terms {
        if all_zero(c) {
            continue;
        }
        let back = map.adjoint(c, w);
        for ((o, &av), bv) in out.iter_mut().zip(a.iter()).zip(back) {
            *o += av * bv;
        }
    }
    (out, dropped, fallbacks)
}

/// zB rule: `z = x·w − low·w⁺ − high·w⁻`, which is nonnegative whenever
/// `low <= x <= high`.
pub(crate) fn z_box<M: LinearMap>(
    map: &M,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    upstream: &[f64],
    bounds: (f64, f64),
    cfg: &LrpConfig,
) -> (Vec<f64>, f64, usize) {
    let (wp, wn) = split_signs(weight);
    let lo = vec![bounds.0; input.len()];
    let hi = vec![bounds.1; input.len()];
    let mut den = map.apply(input, weight);
    for ((d, l), h) in den.iter_mut().zip(map.apply(&lo, &wp)).zip(map.apply(&hi, &wn)) {
        *d -= l + h;
    }
    if cfg.bias_policy() == BiasPolicy::Include {
        add_into(&mut den, &map.expand_bias(bias));
    }
    let eps = cfg.stabilizer();
    let mut dropped = 0.0;
    let s: Vec<f64> = den
        .iter()
        .zip(upstream)
        .map(|(&d, &r)| {
            if r == 0.0 {
                0.0
            } else if d == 0.0 {
                dropped += r;
                0.0
            } else {
                r / (d + eps.copysign(d))
            }
        })
        .collect();
    let sx = map.adjoint(&s, weight);
    let sl = map.adjoint(&s, &wp);
    let sh = map.adjoint(&s, &wn);
    let out = (0..input.len())
        .map(|j| input[j] * sx[j] - lo[j] * sl[j] - hi[j] * sh[j])
        .collect();
    (out, dropped, 0)
}

fn check_relevance(upstream: &Tensor, expected: usize, what: &str) -> Result<()> {
    if upstream.len() != expected {
        return Err(Error::Dimension(format!(
            "{what} produces {expected} outputs but received relevance of shape {:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

/// αβ relevance for a dense layer with `weight` of shape `out × in`.
pub fn lrp_linear(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagation> {
    let (outputs, inputs) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::Dimension(format!(
                "dense weights must be 2-D, got {:?}",
                weight.shape()
            )))
        }
    };
    if input.len() != inputs || bias.shape() != [outputs] {
        return Err(Error::Dimension(format!(
            "dense {inputs}->{outputs} given input {:?} and bias {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    check_relevance(upstream, outputs, "dense layer")?;
    let map = DenseMap { inputs, outputs };
    let (r, dropped, fallbacks) = alpha_beta(&map, input.data(), weight.data(), bias.data(), upstream.data(), cfg);
    Ok(Propagation {
        relevance: Tensor::new(input.shape().to_vec(), r)?,
        dropped,
        fallbacks,
    })
}

/// αβ relevance for a 3-D convolution; same result as [`lrp_linear`] on the
/// convolution's unrolled matrix.
pub fn lrp_conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
    cfg: &LrpConfig,
) -> Result<Propagation> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [geom.out_channels] {
        return Err(Error::Dimension(format!("conv3d bias shape {:?}", bias.shape())));
    }
    check_relevance(upstream, geom.out_len(), "conv3d")?;
    let (r, dropped, fallbacks) = alpha_beta(&geom, input.data(), weight.data(), bias.data(), upstream.data(), cfg);
    Ok(Propagation {
        relevance: Tensor::new(input.shape().to_vec(), r)?,
        dropped,
        fallbacks,
    })
}

/// Proportional redistribution `R_j = a_j / Σ_window a · R_k`. Windows that
/// sum to zero split their relevance equally; overlapping windows add up.
pub fn lrp_avgpool(input: &Tensor, upstream: &Tensor, kernel: usize, stride: usize) -> Result<Propagation> {
    let geom = PoolGeometry::new(input.shape(), kernel, stride)?;
    let out_len: usize = geom.out_shape().iter().product();
    check_relevance(upstream, out_len, "avgpool3d")?;
    let a = input.data();
    let mut sums = vec![0.0; out_len];
    geom.for_each_window(|o, i| sums[o] += a[i]);
    let equal = 1.0 / geom.window_size() as f64;
    let r = upstream.data();
    let mut out = vec![0.0; input.len()];
    geom.for_each_window(|o, i| {
        out[i] += if sums[o] != 0.0 {
            a[i] / sums[o] * r[o]
        } else {
            r[o] * equal
        };
    });
    let fallbacks = sums.iter().zip(r).filter(|(&s, &rv)| s == 0.0 && rv != 0.0).count();
    Ok(Propagation {
        relevance: Tensor::new(input.shape().to_vec(), out)?,
        dropped: 0.0,
        fallbacks,
    })
}

/// Relevance passes through a ReLU to its pre-activation unchanged.
pub fn lrp_relu(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Restores the pre-flatten shape.
pub fn lrp_flatten(upstream: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    upstream.reshape(input_shape)
}
