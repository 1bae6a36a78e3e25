//! Elementwise, reduction, dense and loss operations.

use super::{Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norms below this are treated as zero by [`Tape::l2_normalize_rows`].
const NORM_FLOOR: f64 = 1e-12;

fn binary_shape_check<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!("{op}: {:?} vs {:?}", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn matrix_dims<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(shape_err!("{what} must be 2-d, got {:?}", s)),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        binary_shape_check(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(&[a, b], out, |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        binary_shape_check(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(&[a, b], out, |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        binary_shape_check(self, a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(&[a, b], out, |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(y, |g, v| g * v).unwrap()),
                ctx.needs[1].then(|| ctx.grad.zip_map(x, |g, v| g * v).unwrap()),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        binary_shape_check(self, a, b, "div")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.record(&[a, b], out, |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let gx = ctx.grad.zip_map(y, |g, v| g / v).unwrap();
            let gy = ctx.needs[1].then(|| {
                let mut t = gx.zip_map(x, |g, v| -g * v).unwrap();
                t.data_mut().iter_mut().zip(y.data()).for_each(|(t, &v)| *t /= v);
                t
            });
            vec![Some(gx), gy]
        }))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.record(&[a], out, |ctx| vec![Some(ctx.grad.clone())])
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.record(&[a], out, move |ctx| vec![Some(ctx.grad.map(|g| g * c))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -S::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(S::zero()));
        self.record(&[a], out, |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x > S::zero() { g } else { S::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(S::exp);
        self.record(&[a], out, |ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y).unwrap())])
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let floor = S::c(LOG_FLOOR);
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.record(&[a], out, move |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x > floor { g / x } else { S::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn powf(&mut self, a: Var, p: S) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.record(&[a], out, move |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * p * x.powf(p - S::one())).unwrap())]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.record(&[a], out, move |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x > lo && x < hi { g } else { S::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(&[a], out, |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.record(&[a], out, |ctx| {
            let n = S::from_usize(ctx.inputs[0].len());
            let g = ctx.grad.item() / n;
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(&[a], out, |ctx| {
            vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()).unwrap())]
        }))
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(a, &[n, rest])
    }

    /// Concatenates along `axis`; the other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| arg_err!("concat needs at least one input"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat on axis {axis}: {:?} vs {:?}", base, s));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in inputs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(inputs, out, move |ctx| {
            let mut grads: Vec<Vec<S>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let g = ctx.grad.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &e) in extents.iter().enumerate() {
                    grads[k].extend_from_slice(&g[pos..pos + e * inner]);
                    pos += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&ctx.inputs)
                .map(|(d, t)| Some(Tensor::from_parts(t.shape().to_vec(), d)))
                .collect()
        }))
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul inner extents {k} vs {k2}"));
        }
        let mut c = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let out = Tensor::from_parts(vec![m, n], c);
        Ok(self.record(&[a, b], out, move |ctx| {
            let g = ctx.grad.data();
            let ga = ctx.needs[0].then(|| {
                let mut d = vec![S::zero(); m * k];
                gemm_nt(g, ctx.inputs[1].data(), &mut d, m, n, k);
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = ctx.needs[1].then(|| {
                let mut d = vec![S::zero(); k * n];
                gemm_tn(ctx.inputs[0].data(), g, &mut d, k, m, n);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// `x [n, in] · w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = matrix_dims(self.value(x), "linear input")?;
        let (fout, win) = matrix_dims(self.value(w), "linear weight")?;
        if fin != win {
            return Err(shape_err!("linear expects {win} input features, got {fin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err!("linear bias {:?} for {fout} outputs", self.shape(b)));
            }
        }
        let mut y = vec![S::zero(); n * fout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut y, n, fin, fout);
        let out = Tensor::from_parts(vec![n, fout], y);
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.record(&inputs, out, move |ctx| {
            let g = ctx.grad.data();
            let gx = ctx.needs[0].then(|| {
                let mut d = vec![S::zero(); n * fin];
                gemm_nn(g, ctx.inputs[1].data(), &mut d, n, fout, fin);
                Tensor::from_parts(vec![n, fin], d)
            });
            let gw = ctx.needs[1].then(|| {
                let mut d = vec![S::zero(); fout * fin];
                gemm_tn(g, ctx.inputs[0].data(), &mut d, fout, n, fin);
                Tensor::from_parts(vec![fout, fin], d)
            });
            let mut out = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                let mut d = vec![S::zero(); fout];
                for row in g.chunks(fout) {
                    d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                out.push(Some(Tensor::from_parts(vec![fout], d)));
            }
            out
        }))
    }

    /// Row-wise softmax of a `[n, c]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = matrix_dims(self.value(x), "softmax input")?;
        let out = softmax_rows(self.value(x));
        Ok(self.record(&[x], out, move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut d = vec![S::zero(); y.len()];
            for r in 0..y.len() / c {
                let ys = &y[r * c..(r + 1) * c];
                let gs = &g[r * c..(r + 1) * c];
                let dotp: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    d[r * c + j] = ys[j] * (gs[j] - dotp);
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(logits), "logits")?;
        if targets.len() != n {
            return Err(shape_err!("{} targets for a batch of {n}", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidLabel { label: bad, n_classes: c });
        }
        let probs = softmax_rows(self.value(logits));
        let x = self.value(logits).data();
        let mut loss = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            loss += lse - row[t];
        }
        loss /= S::from_usize(n);
        let targets = targets.to_vec();
        Ok(self.record(&[logits], Tensor::scalar(loss), move |ctx| {
            let scale = ctx.grad.item() / S::from_usize(n);
            let mut d = probs.data().to_vec();
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] -= S::one();
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::from_parts(vec![n, c], d))]
        }))
    }

    /// Flattened per-sample outer product: `out[n, i*J + j] = a[n,i] * b[n,j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, i_dim) = matrix_dims(self.value(a), "outer lhs")?;
        let (n2, j_dim) = matrix_dims(self.value(b), "outer rhs")?;
        if n != n2 {
            return Err(shape_err!("outer product batch {n} vs {n2}"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * i_dim * j_dim);
        for r in 0..n {
            for i in 0..i_dim {
                let ai = av[r * i_dim + i];
                data.extend(bv[r * j_dim..(r + 1) * j_dim].iter().map(|&bj| ai * bj));
            }
        }
        let out = Tensor::from_parts(vec![n, i_dim * j_dim], data);
        Ok(self.record(&[a, b], out, move |ctx| {
            let g = ctx.grad.data();
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = vec![S::zero(); n * i_dim];
            let mut gb = vec![S::zero(); n * j_dim];
            for r in 0..n {
                for i in 0..i_dim {
                    let gi = &g[(r * i_dim + i) * j_dim..(r * i_dim + i + 1) * j_dim];
                    let brow = &bv[r * j_dim..(r + 1) * j_dim];
                    ga[r * i_dim + i] = gi.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    let ai = av[r * i_dim + i];
                    gb[r * j_dim..(r + 1) * j_dim].iter_mut().zip(gi).for_each(|(d, &x)| *d += x * ai);
                }
            }
            vec![
                Some(Tensor::from_parts(vec![n, i_dim], ga)),
                Some(Tensor::from_parts(vec![n, j_dim], gb)),
            ]
        }))
    }

    /// Scales each row of a `[n, d]` tensor to unit L2 norm; an all-zero row
    /// maps to the zero vector.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "l2 normalize input")?;
        let floor = S::c(NORM_FLOOR);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![S::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            norms.push(norm);
            if norm > floor {
                data[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(o, &v)| *o = v / norm);
            }
        }
        let out = Tensor::from_parts(vec![n, d], data);
        Ok(self.record(&[x], out, move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut dx = vec![S::zero(); n * d];
            for r in 0..n {
                if norms[r] <= floor {
                    continue;
                }
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let proj: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = (gs[j] - ys[j] * proj) / norms[r];
                }
            }
            vec![Some(Tensor::from_parts(vec![n, d], dx))]
        }))
    }

    /// Batch normalisation with batch statistics over every axis but 1.
    /// Returns the output plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        if m < 2 {
            return Err(shape_err!("batch norm in training mode needs more than one value per channel"));
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut means = vec![0.0f64; c];
        let mut vars = vec![0.0f64; c];
        let mut inv_std = vec![S::zero(); c];
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let o = (b * c + ch) * inner;
                s += src[o..o + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = s / m as f64;
            let mut v = 0.0;
            for b in 0..n {
                let o = (b * c + ch) * inner;
                v += src[o..o + inner].iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = v / m as f64;
            means[ch] = mean;
            vars[ch] = var;
            let is = S::c(1.0 / (var + eps).sqrt());
            inv_std[ch] = is;
            let mu = S::c(mean);
            for b in 0..n {
                let o = (b * c + ch) * inner;
                for k in o..o + inner {
                    let xh = (src[k] - mu) * is;
                    xhat[k] = xh;
                    out[k] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), out);
        let y = self.record(&[x, gamma, beta], out, move |ctx| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![S::zero(); g.len()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let mf = S::from_usize(m);
            for ch in 0..c {
                let (mut sg, mut sgx) = (S::zero(), S::zero());
                for b in 0..n {
                    let o = (b * c + ch) * inner;
                    for k in o..o + inner {
                        sg += g[k];
                        sgx += g[k] * xhat[k];
                    }
                }
                dgamma[ch] = sgx;
                dbeta[ch] = sg;
                let scale = gamma[ch] * inv_std[ch] / mf;
                for b in 0..n {
                    let o = (b * c + ch) * inner;
                    for k in o..o + inner {
                        dx[k] = scale * (mf * g[k] - sg - xhat[k] * sgx);
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        });
        Ok((y, means, vars))
    }

    /// Batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let inv_std: Vec<S> = var.iter().map(|v| S::c(1.0 / (v + eps).sqrt())).collect();
        let mu: Vec<S> = mean.iter().map(|&v| S::c(v)).collect();
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![S::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                for k in o..o + inner {
                    out[k] = gv[ch] * (src[k] - mu[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(self.record(&[x, gamma, beta], out, move |ctx| {
            let g = ctx.grad.data();
            let xs = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![S::zero(); g.len()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * inner;
                    for k in o..o + inner {
                        dx[k] = g[k] * gamma[ch] * inv_std[ch];
                        dgamma[ch] += g[k] * (xs[k] - mu[ch]) * inv_std[ch];
                        dbeta[ch] += g[k];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        }))
    }
}

/// Numerically stabilised row-wise softmax of a `[n, c]` tensor.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = *x.shape().last().expect("softmax of empty shape");
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln4() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::zeros([1, 4]));
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_stay_accurate() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::new([1, 2], vec![10.0, -10.0]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((tape.value(loss).item() - want).abs() / want < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let l = tape.input(Tensor::zeros([2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[0, 3]),
            Err(Error::InvalidLabel { label: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn concat_preserves_order_and_lengths() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new([1], vec![3.0]).unwrap());
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        assert!(tape.concat(&[], 0).is_err());
        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
    }

    #[test]
    fn concat_widths_for_published_head_sizes() {
        let mut tape = Tape::<f32>::new();
        let parts: Vec<Var> = [128, 128, 16]
            .iter()
            .map(|&w| tape.constant(Tensor::zeros([2, w])))
            .collect();
        let c = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 272]);
    }

    #[test]
    fn outer_product_layout() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new([1, 2], vec![3.0, 4.0]).unwrap());
        let o = tape.outer(a, b).unwrap();
        assert_eq!(tape.value(o).data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_row_normalises_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new([2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }
}
