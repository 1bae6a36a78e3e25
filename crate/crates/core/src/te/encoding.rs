//! Residual encoding over learnable codewords.
//!
//! Every spatial position of the input map is a descriptor `x_i`. With
//! codewords `c_k` and smoothing factors `s_k`:
//!
//! ```text
//! r_ik = x_i - c_k
//! a_ik = softmax_k(-s_k * |r_ik|^2)
//! e_k  = sum_i a_ik * r_ik
//! ```
//!
//! The `K*C` aggregate is L2-normalised, projected by a linear layer and
//! batch-normalised.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{uniform, BatchNorm, Linear, Mode, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub n_codes: usize,
    pub out_features: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { n_codes: 8, out_features: 128 }
    }
}

#[derive(Clone, Debug)]
pub struct EncodingLayer {
    pub config: EncodingConfig,
    pub channels: usize,
    pub codewords: ParamId,
    pub smoothing: ParamId,
    pub projection: Linear,
    pub bn: BatchNorm,
}

impl EncodingLayer {
    pub fn new<S: Scalar>(
        config: EncodingConfig,
        channels: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = config.n_codes;
        if k == 0 || config.out_features == 0 {
            return Err(Error::Config("encoding needs at least one codeword and output feature".into()));
        }
        let bound = 1.0 / (k as f64).sqrt();
        let codewords = store.add("encoding.codewords", uniform(&[k, channels], -bound, bound, rng));
        let smoothing = store.add("encoding.smoothing", Tensor::ones([k]));
        let projection = Linear::new(store, "encoding.proj", k * channels, config.out_features, rng);
        let bn = BatchNorm::new(store, "encoding.bn", config.out_features);
        Ok(EncodingLayer { config, channels, codewords, smoothing, projection, bn })
    }

    pub fn output_len(&self) -> usize {
        self.config.out_features
    }

    /// The unit-normalised `[N, K*C]` aggregate before projection.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var) -> Result<Var> {
        let cw = tape.param(store, self.codewords);
        let sm = tape.param(store, self.smoothing);
        let e = residual_aggregate(tape, x_b, cw, sm)?;
        tape.l2_normalize_rows(e)
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var, mode: Mode) -> Result<Var> {
        let e = self.encode(tape, store, x_b)?;
        let p = self.projection.forward(tape, store, e)?;
        self.bn.forward(tape, store, p, mode)
    }
}

fn check_shapes(x: &[usize], cw: &[usize], sm: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let &[n, c, h, w] = x else {
        return Err(shape_err!("encoding input must be [N, C, H, W], got {:?}", x));
    };
    let &[k, cc] = cw else {
        return Err(shape_err!("codewords must be [K, C], got {:?}", cw));
    };
    if cc != c {
        return Err(shape_err!("codewords have dimension {cc} but the input has {c} channels"));
    }
    if sm != [k] {
        return Err(shape_err!("smoothing factors {:?} for {k} codewords", sm));
    }
    Ok((n, c, h * w, k))
}

/// Squared residual norms `|x_i - c_k|^2` for one sample, `[P, K]`.
fn squared_distances<S: Scalar>(xs: &[S], cw: &[S], c: usize, p: usize, k: usize) -> Vec<S> {
    let mut d = vec![S::zero(); p * k];
    for ch in 0..c {
        let plane = &xs[ch * p..(ch + 1) * p];
        for kk in 0..k {
            let ck = cw[kk * c + ch];
            for (i, &v) in plane.iter().enumerate() {
                let r = v - ck;
                d[i * k + kk] += r * r;
            }
        }
    }
    d
}

/// Softmax of `-s_k * d_ik` over `k` in place.
fn assign<S: Scalar>(d: &mut [S], sm: &[S], k: usize) {
    for row in d.chunks_mut(k) {
        let mut m = S::neg_infinity();
        for (kk, v) in row.iter_mut().enumerate() {
            *v = -sm[kk] * *v;
            m = m.max(*v);
        }
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Soft-assignment weights `[N, H*W, K]`.
pub fn encoding_assignments<S: Scalar>(x: &Tensor<S>, codewords: &Tensor<S>, smoothing: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, p, k) = check_shapes(x.shape(), codewords.shape(), smoothing.shape())?;
    let mut out = Vec::with_capacity(n * p * k);
    for b in 0..n {
        let mut a = squared_distances(&x.data()[b * c * p..(b + 1) * c * p], codewords.data(), c, p, k);
        assign(&mut a, smoothing.data(), k);
        out.extend(a);
    }
    Ok(Tensor::from_parts(vec![n, p, k], out))
}

/// `e_k = sum_i a_ik (x_i - c_k)` flattened to `[N, K*C]` (codeword-major).
fn residual_aggregate<S: Scalar>(tape: &mut Tape<S>, x: Var, codewords: Var, smoothing: Var) -> Result<Var> {
    let (n, c, p, k) = check_shapes(tape.shape(x), tape.shape(codewords), tape.shape(smoothing))?;
    let xs = tape.value(x).data();
    let cw = tape.value(codewords).data();
    let sm = tape.value(smoothing).data();
    let mut out = vec![S::zero(); n * k * c];
    for b in 0..n {
        let xb = &xs[b * c * p..(b + 1) * c * p];
        let mut a = squared_distances(xb, cw, c, p, k);
        assign(&mut a, sm, k);
        let e = &mut out[b * k * c..(b + 1) * k * c];
        for kk in 0..k {
            for ch in 0..c {
                let ck = cw[kk * c + ch];
                let plane = &xb[ch * p..(ch + 1) * p];
                e[kk * c + ch] = plane.iter().enumerate().map(|(i, &v)| a[i * k + kk] * (v - ck)).sum();
            }
        }
    }
    let out = Tensor::from_parts(vec![n, k * c], out);

    Ok(tape.record(&[x, codewords, smoothing], out, move |ctx| {
        let g = ctx.grad.data();
        let xs = ctx.inputs[0].data();
        let cw = ctx.inputs[1].data();
        let sm = ctx.inputs[2].data();
        let mut dx = vec![S::zero(); xs.len()];
        let mut dcw = vec![S::zero(); k * c];
        let mut dsm = vec![S::zero(); k];
        let two = S::c(2.0);
        for b in 0..n {
            let xb = &xs[b * c * p..(b + 1) * c * p];
            let gb = &g[b * k * c..(b + 1) * k * c];
            let dist = squared_distances(xb, cw, c, p, k);
            let mut a = dist.clone();
            assign(&mut a, sm, k);

            // da_ik = G_k . r_ik
            let mut da = vec![S::zero(); p * k];
            for kk in 0..k {
                for ch in 0..c {
                    let gk = gb[kk * c + ch];
                    let ck = cw[kk * c + ch];
                    let plane = &xb[ch * p..(ch + 1) * p];
                    for (i, &v) in plane.iter().enumerate() {
                        da[i * k + kk] += gk * (v - ck);
                    }
                }
            }
            // softmax backward, then logits = -s_k d_ik
            let mut dd = vec![S::zero(); p * k];
            for i in 0..p {
                let ar = &a[i * k..(i + 1) * k];
                let dr = &da[i * k..(i + 1) * k];
                let dotp: S = ar.iter().zip(dr).map(|(&x, &y)| x * y).sum();
                for kk in 0..k {
                    let dlogit = ar[kk] * (dr[kk] - dotp);
                    dsm[kk] -= dlogit * dist[i * k + kk];
                    dd[i * k + kk] = -sm[kk] * dlogit;
                }
            }
            // dr_ik = a_ik G_k + 2 r_ik dd_ik ; dx_i += dr_ik ; dc_k -= dr_ik
            for kk in 0..k {
                for ch in 0..c {
                    let gk = gb[kk * c + ch];
                    let ck = cw[kk * c + ch];
                    let plane = &xb[ch * p..(ch + 1) * p];
                    let dplane = &mut dx[(b * c + ch) * p..(b * c + ch + 1) * p];
                    let mut acc = S::zero();
                    for (i, &v) in plane.iter().enumerate() {
                        let dr = a[i * k + kk] * gk + two * (v - ck) * dd[i * k + kk];
                        dplane[i] += dr;
                        acc += dr;
                    }
                    dcw[kk * c + ch] -= acc;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
            Some(Tensor::from_parts(vec![k, c], dcw)),
            Some(Tensor::from_parts(vec![k], dsm)),
        ]
    }))
}
