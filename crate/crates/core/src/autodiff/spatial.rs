//! Convolution, pooling and resampling over `[N, C, H, W]` tensors.

use super::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

fn nchw<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(shape_err!("{what} must be [N, C, H, W], got {:?}", s)),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `c_in` channels of one sample into `[c_in*kh*kw, ho*wo]` columns.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw_out;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oi * g.wo..row + (oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { S::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into the input layout.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, x: &mut [S]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw_out;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oi * g.wo..row + (oi + 1) * g.wo];
                    for (oj, &v) in src.iter().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            plane[ii as usize * g.w + jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Cross-correlation of `[N,C,H,W]` input with a `[F,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_grouped(x, kernel, stride, padding, 1)
    }

    /// Grouped cross-correlation; the kernel is `[F, C/groups, kh, kw]`.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "conv2d input")?;
        let [f, cg, kh, kw] = nchw(self.value(kernel), "conv2d kernel")?;
        if stride == 0 {
            return Err(arg_err!("conv2d stride must be at least 1"));
        }
        if groups == 0 || c % groups != 0 || f % groups != 0 {
            return Err(shape_err!("conv2d: {groups} groups do not divide {c} inputs and {f} outputs"));
        }
        if cg * groups != c {
            return Err(shape_err!(
                "conv2d: input has {c} channels but kernel expects {}",
                cg * groups
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { c_in: cg, h, w, kh, kw, stride, pad: padding, ho, wo };
        let fg = f / groups;
        let krow = cg * kh * kw;
        let hw_out = ho * wo;

        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![S::zero(); n * f * hw_out];
        let mut cols = vec![S::zero(); if geom.is_pointwise() { 0 } else { krow * hw_out }];
        for b in 0..n {
            for g in 0..groups {
                let xg = &xs[(b * c + g * cg) * h * w..(b * c + (g + 1) * cg) * h * w];
                let cols_ref: &[S] = if geom.is_pointwise() {
                    xg
                } else {
                    im2col(xg, &geom, &mut cols);
                    &cols
                };
                let kg = &ks[g * fg * krow..(g + 1) * fg * krow];
                let og = &mut out[(b * f + g * fg) * hw_out..(b * f + (g + 1) * fg) * hw_out];
                gemm_nn(kg, cols_ref, og, fg, krow, hw_out);
            }
        }
        let out = Tensor::from_parts(vec![n, f, ho, wo], out);

        Ok(self.record(&[x, kernel], out, move |ctx| {
            let gout = ctx.grad.data();
            let xs = ctx.inputs[0].data();
            let ks = ctx.inputs[1].data();
            let mut dx = ctx.needs[0].then(|| vec![S::zero(); xs.len()]);
            let mut dk = ctx.needs[1].then(|| vec![S::zero(); ks.len()]);
            let mut cols = vec![S::zero(); if geom.is_pointwise() { 0 } else { krow * hw_out }];
            let mut dcols = vec![S::zero(); krow * hw_out];
            for b in 0..n {
                for g in 0..groups {
                    let go = &gout[(b * f + g * fg) * hw_out..(b * f + (g + 1) * fg) * hw_out];
                    let xrange = (b * c + g * cg) * h * w..(b * c + (g + 1) * cg) * h * w;
                    if let Some(dk) = dk.as_mut() {
                        let xg = &xs[xrange.clone()];
                        let cols_ref: &[S] = if geom.is_pointwise() {
                            xg
                        } else {
                            im2col(xg, &geom, &mut cols);
                            &cols
                        };
                        gemm_nt(go, cols_ref, &mut dk[g * fg * krow..(g + 1) * fg * krow], fg, hw_out, krow);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let kg = &ks[g * fg * krow..(g + 1) * fg * krow];
                        if geom.is_pointwise() {
                            gemm_tn(kg, go, &mut dx[xrange], krow, fg, hw_out);
                        } else {
                            dcols.iter_mut().for_each(|v| *v = S::zero());
                            gemm_tn(kg, go, &mut dcols, krow, fg, hw_out);
                            col2im(&dcols, &geom, &mut dx[xrange]);
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                dk.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ]
        }))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(shape_err!("channel bias {:?} for input {:?}", self.shape(bias), shape));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for (plane, &bias) in out.chunks_mut(inner.max(1)).zip(bv.iter().cycle()) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.record(&[x, bias], out, move |ctx| {
            let g = ctx.grad.data();
            let mut db = vec![S::zero(); c];
            for (k, plane) in g.chunks(inner.max(1)).enumerate() {
                db[k % c] += plane.iter().copied().sum::<S>();
            }
            vec![Some(ctx.grad.clone()), Some(Tensor::from_parts(vec![c], db))]
        }))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "avg_pool2d input")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(shape_err!("avg_pool2d kernel {kernel} stride {stride} on {h}x{w}"));
        }
        let out = avg_pool2d_forward(self.value(x), kernel, stride);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        Ok(self.record(&[x], out, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![S::zero(); n * c * h * w];
            let scale = S::one() / S::from_usize(kernel * kernel);
            for p in 0..n * c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let gv = g[(p * ho + oi) * wo + oj] * scale;
                        for ki in 0..kernel {
                            let row = (p * h + oi * stride + ki) * w + oj * stride;
                            dx[row..row + kernel].iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "global_avg_pool input")?;
        let hw = h * w;
        let inv = S::one() / S::from_usize(hw);
        let data: Vec<S> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.record(&[x], out, move |ctx| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &g in ctx.grad.data() {
                dx.extend(std::iter::repeat_n(g * inv, hw));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }

    /// Unweighted mean across channels: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "channel_mean input")?;
        let hw = h * w;
        let inv = S::one() / S::from_usize(c);
        let xs = self.value(x).data();
        let mut data = vec![S::zero(); n * hw];
        for b in 0..n {
            let dst = &mut data[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let src = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::from_parts(vec![n, 1, h, w], data);
        Ok(self.record(&[x], out, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![S::zero(); n * c * hw];
            for b in 0..n {
                for ch in 0..c {
                    let dst = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    dst.iter_mut().zip(&g[b * hw..(b + 1) * hw]).for_each(|(d, &s)| *d = s * inv);
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize target must be positive"));
        }
        let out = resize_bilinear_forward(self.value(x), out_h, out_w);
        Ok(self.record(&[x], out, move |ctx| {
            let ys = taps(h, out_h);
            let xs = taps(w, out_w);
            let g = ctx.grad.data();
            let mut dx = vec![S::zero(); n * c * h * w];
            for p in 0..n * c {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = g[(p * out_h + oi) * out_w + oj];
                        let (fy, fx) = (S::c(fy), S::c(fx));
                        let (gy0, gy1) = (gv * (S::one() - fy), gv * fy);
                        plane[y0 * w + x0] += gy0 * (S::one() - fx);
                        plane[y0 * w + x1] += gy0 * fx;
                        plane[y1 * w + x0] += gy1 * (S::one() - fx);
                        plane[y1 * w + x1] += gy1 * fx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize target must be positive"));
        }
        let src_y: Vec<usize> = (0..out_h).map(|i| (i * h / out_h).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..out_w).map(|j| (j * w / out_w).min(w - 1)).collect();
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            for &sy in &src_y {
                data.extend(src_x.iter().map(|&sx| xs[(p * h + sy) * w + sx]));
            }
        }
        let out = Tensor::from_parts(vec![n, c, out_h, out_w], data);
        Ok(self.record(&[x], out, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![S::zero(); n * c * h * w];
            for p in 0..n * c {
                for (oi, &sy) in src_y.iter().enumerate() {
                    for (oj, &sx) in src_x.iter().enumerate() {
                        dx[(p * h + sy) * w + sx] += g[(p * out_h + oi) * out_w + oj];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }
}

pub(crate) fn avg_pool2d_forward<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Tensor<S> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let scale = S::one() / S::from_usize(kernel * kernel);
    let xs = x.data();
    let mut out = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = S::zero();
                for ki in 0..kernel {
                    let row = (p * h + oi * stride + ki) * w + oj * stride;
                    acc += xs[row..row + kernel].iter().copied().sum::<S>();
                }
                out[(p * ho + oi) * wo + oj] = acc * scale;
            }
        }
    }
    Tensor::from_parts(vec![n, c, ho, wo], out)
}

/// Source taps `(lo, hi, frac)` for each output index (half-pixel centres,
/// negative source coordinates clamped to zero).
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of the last two axes of any tensor with rank >= 2.
pub(crate) fn resize_bilinear_forward<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = x.data();
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let fy = S::c(fy);
            for &(x0, x1, fx) in &xs {
                let fx = S::c(fx);
                let top = plane[y0 * w + x0] * (S::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (S::one() - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (S::one() - fy) + bot * fy);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_three_by_three_gives_nine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let input = Tensor::from_fn([1, 1, 5, 4], |i| (i as f64).sin());
        let mut kernel = Tensor::zeros([1, 1, 3, 3]);
        kernel.set(&[0, 0, 1, 1], 1.0);
        let x = tape.constant(input.clone());
        let k = tape.constant(kernel);
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let k = tape.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(crate::Error::InvalidShape(_))));
    }

    #[test]
    fn output_extent_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 9, 7]));
        let k = tape.constant(Tensor::ones([2, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 5, 4]);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 0.25);
        let y = resize_bilinear_forward(&x, 6, 6);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
