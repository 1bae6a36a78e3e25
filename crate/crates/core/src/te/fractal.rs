//! Fractal analysis pooling.
//!
//! The local dimension estimate is differential box counting on the
//! intensity surface. A window of side `L = max(scales)` is anchored at every
//! pixel `(i, j)` with `i + L < H`, `j + L < W`, and covers the `(L+1)^2`
//! pixels `[i, i+L] x [j, j+L]`. At scale `s` the window is tiled by
//! `(L/s)^2` blocks of `(s+1)^2` pixels (neighbouring blocks share an edge).
//! A block whose intensities span `rho` needs
//!
//! ```text
//! n = rho * M / (s * G) + 1
//! ```
//!
//! boxes of height `s * G / M`, where `G` is the intensity range of the whole
//! surface and `M = max(H, W)`. The box count `N(s)` sums `n` over blocks and
//! the dimension is the negated least-squares slope of `ln N(s)` against
//! `ln s`, clamped to `[0, 3]`. A flat block contributes a single box, so a
//! constant surface gets exactly 2.

use serde::{Deserialize, Serialize};

use super::rbf::rbf_soft_counts;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Surfaces flatter than this are treated as constant.
const FLAT_RANGE: f64 = 1e-12;
const MAX_DIMENSION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractalConfig {
    pub n_bins: usize,
    pub scales: Vec<usize>,
    /// Bilinear upsampling factor applied before estimation.
    pub upsample: usize,
    /// Initial bin centres are spread evenly over `[bin_min, bin_max]`.
    pub bin_min: f64,
    pub bin_max: f64,
}

impl Default for FractalConfig {
    fn default() -> Self {
        FractalConfig { n_bins: 16, scales: vec![1, 2, 4, 8], upsample: 2, bin_min: 2.0, bin_max: 3.0 }
    }
}

impl FractalConfig {
    /// A 7x7 map needs x4 to reach the 16-pixel minimum of scale 8.
    pub fn paper() -> Self {
        FractalConfig { upsample: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_scales(&self.scales)?;
        if self.n_bins == 0 || self.upsample == 0 {
            return Err(Error::Config("fractal bins and upsample factor must be positive".into()));
        }
        if !(self.bin_min < self.bin_max) {
            return Err(Error::Config(format!("fractal bin range {}..{} is empty", self.bin_min, self.bin_max)));
        }
        Ok(())
    }
}

fn check_scales(scales: &[usize]) -> Result<usize> {
    let &max = scales.iter().max().ok_or_else(|| Error::Config("at least one box scale is required".into()))?;
    if scales.contains(&0) {
        return Err(Error::Config("box scales must be positive".into()));
    }
    if let Some(s) = scales.iter().find(|&&s| max % s != 0) {
        return Err(Error::Config(format!("box scale {s} does not divide the largest scale {max}")));
    }
    Ok(max)
}

/// Least-squares weights: `slope = sum_s w_s ln N(s)`. `None` when all
/// scales coincide.
fn slope_weights(scales: &[usize]) -> Option<Vec<f64>> {
    let logs: Vec<f64> = scales.iter().map(|&s| (s as f64).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sxx: f64 = logs.iter().map(|l| (l - mean).powi(2)).sum();
    (sxx > 0.0).then(|| logs.iter().map(|l| (l - mean) / sxx).collect())
}

/// Block statistics of one window at one scale, with extreme positions.
struct Block {
    range: f64,
    argmax: usize,
    argmin: usize,
}

fn block<S: Scalar>(z: &[S], w: usize, r0: usize, c0: usize, s: usize) -> Block {
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut argmax, mut argmin) = (0, 0);
    for r in r0..=r0 + s {
        for c in c0..=c0 + s {
            let i = r * w + c;
            let v = z[i].as_f64();
            if v > hi {
                hi = v;
                argmax = i;
            }
            if v < lo {
                lo = v;
                argmin = i;
            }
        }
    }
    Block { range: hi - lo, argmax, argmin }
}

fn extremes<S: Scalar>(z: &[S]) -> (f64, usize, usize) {
    let (mut hi, mut lo, mut ih, mut il) = (f64::NEG_INFINITY, f64::INFINITY, 0, 0);
    for (i, v) in z.iter().enumerate() {
        let v = v.as_f64();
        if v > hi {
            hi = v;
            ih = i;
        }
        if v < lo {
            lo = v;
            il = i;
        }
    }
    (hi - lo, ih, il)
}

/// Box counts `N(s)` of the window anchored at `(i, j)`.
#[allow(clippy::too_many_arguments)]
fn box_counts<S: Scalar>(z: &[S], w: usize, i: usize, j: usize, scales: &[usize], l: usize, m: f64, g: f64) -> Vec<f64> {
    scales
        .iter()
        .map(|&s| {
            let per = l / s;
            let mut total = 0.0;
            for bi in 0..per {
                for bj in 0..per {
                    let b = block(z, w, i + bi * s, j + bj * s, s);
                    total += b.range * m / (s as f64 * g) + 1.0;
                }
            }
            total
        })
        .collect()
}

fn check_surface(shape: &[usize], scales: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let l = check_scales(scales).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let &[n, 1, h, w] = shape else {
        return Err(shape_err!("fractal dimension map needs [N, 1, H, W], got {:?}", shape));
    };
    if h < 2 * l || w < 2 * l {
        return Err(shape_err!("surface {h}x{w} is smaller than twice the largest box scale {l}"));
    }
    Ok((n, h, w, l))
}

/// Local fractal dimension of every window, `[N, 1, H-L, W-L]`, without
/// recording on a tape.
pub fn local_fractal_dimensions<S: Scalar>(x: &Tensor<S>, scales: &[usize]) -> Result<Tensor<S>> {
    let (n, h, w, l) = check_surface(x.shape(), scales)?;
    let (oh, ow) = (h - l, w - l);
    let weights = slope_weights(scales);
    let m = h.max(w) as f64;
    let mut out = Vec::with_capacity(n * oh * ow);
    for z in x.data().chunks(h * w) {
        let (g, _, _) = extremes(z);
        for i in 0..oh {
            for j in 0..ow {
                let d = match &weights {
                    Some(wt) if g >= FLAT_RANGE => {
                        let counts = box_counts(z, w, i, j, scales, l, m, g);
                        let slope: f64 = wt.iter().zip(&counts).map(|(a, c)| a * c.ln()).sum();
                        (-slope).clamp(0.0, MAX_DIMENSION)
                    }
                    _ => 2.0,
                };
                out.push(S::c(d));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, 1, oh, ow], out))
}

/// Differentiable [`local_fractal_dimensions`]. Gradients flow through the
/// block extremes and the global intensity range; clamped estimates pass
/// none.
pub fn fractal_dimension_map<S: Scalar>(tape: &mut Tape<S>, x: Var, scales: &[usize]) -> Result<Var> {
    let out = local_fractal_dimensions(tape.value(x), scales)?;
    let (n, h, w, l) = check_surface(tape.shape(x), scales)?;
    let scales = scales.to_vec();
    Ok(tape.record(&[x], out, move |ctx| {
        let (oh, ow) = (h - l, w - l);
        let mut dx = vec![S::zero(); n * h * w];
        let Some(weights) = slope_weights(&scales) else {
            return vec![Some(Tensor::from_parts(vec![n, 1, h, w], dx))];
        };
        let m = h.max(w) as f64;
        let gd = ctx.grad.data();
        let dims = ctx.output.data();
        for (b, z) in ctx.inputs[0].data().chunks(h * w).enumerate() {
            let (g, gmax, gmin) = extremes(z);
            if g < FLAT_RANGE {
                continue;
            }
            let dz = &mut dx[b * h * w..(b + 1) * h * w];
            let mut d_range = 0.0;
            for i in 0..oh {
                for j in 0..ow {
                    let o = (b * oh + i) * ow + j;
                    let d = dims[o].as_f64();
                    let go = gd[o].as_f64();
                    if go == 0.0 || d <= 0.0 || d >= MAX_DIMENSION {
                        continue;
                    }
                    let counts = box_counts(z, w, i, j, &scales, l, m, g);
                    for ((&s, wt), count) in scales.iter().zip(&weights).zip(&counts) {
                        let d_count = -go * wt / count;
                        let unit = m / (s as f64 * g);
                        let per = l / s;
                        for bi in 0..per {
                            for bj in 0..per {
                                let blk = block(z, w, i + bi * s, j + bj * s, s);
                                let dr = d_count * unit;
                                dz[blk.argmax] += S::c(dr);
                                dz[blk.argmin] -= S::c(dr);
                                d_range -= d_count * blk.range * unit / g;
                            }
                        }
                    }
                }
            }
            dz[gmax] += S::c(d_range);
            dz[gmin] -= S::c(d_range);
        }
        vec![Some(Tensor::from_parts(vec![n, 1, h, w], dx))]
    }))
}

/// Upsampling, channel mean, local dimension map, then soft binning of the
/// dimensions into learnable radial-basis bins.
#[derive(Clone, Debug)]
pub struct FractalLayer {
    pub config: FractalConfig,
    pub centers: ParamId,
    pub log_widths: ParamId,
}

impl FractalLayer {
    pub fn new<S: Scalar>(config: FractalConfig, store: &mut ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let b = config.n_bins;
        let spacing = if b > 1 { (config.bin_max - config.bin_min) / (b - 1) as f64 } else { 1.0 };
        let (lo, hi) = (config.bin_min, config.bin_max);
        let centers = Tensor::from_fn([1, b], |k| S::c(if b > 1 { lo + k as f64 * spacing } else { 0.5 * (lo + hi) }));
        let centers = store.add("fractal.centers", centers);
        let log_widths = store.add("fractal.log_widths", Tensor::full([1, b], S::c((1.0 / (spacing * spacing)).ln())));
        Ok(FractalLayer { config, centers, log_widths })
    }

    pub fn output_len(&self) -> usize {
        self.config.n_bins
    }

    /// The `[N, 1, h', w']` dimension map that feeds the binning.
    pub fn dimension_map<S: Scalar>(&self, tape: &mut Tape<S>, x_b: Var) -> Result<Var> {
        let &[_, _, h, w] = tape.shape(x_b) else {
            return Err(shape_err!("fractal pooling input must be [N, C, H, W], got {:?}", tape.shape(x_b)));
        };
        let u = self.config.upsample;
        let x = if u > 1 { tape.resize_bilinear(x_b, h * u, w * u)? } else { x_b };
        let surface = tape.channel_mean(x)?;
        fractal_dimension_map(tape, surface, &self.config.scales)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var) -> Result<Var> {
        let d = self.dimension_map(tape, x_b)?;
        let mu = tape.param(store, self.centers);
        let lw = tape.param(store, self.log_widths);
        rbf_soft_counts(tape, d, mu, lw, false)
    }
}
