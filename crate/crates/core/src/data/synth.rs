//! Procedural grey-level textures.
//!
//! Every image gets a random contrast in `[0.6, 1]`, a random offset that
//! keeps it inside `[0, 1]`, additive Gaussian noise, and 8-bit quantisation
//! so that writing and re-reading it is lossless.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageSample};
use crate::error::{arg_err, Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Sinusoid with random orientation and phase; period in pixels.
    Grating { period: (f64, f64) },
    /// Rotated checkerboard; square side in pixels.
    Checkerboard { period: (f64, f64) },
    /// Fractional Brownian surface with the given Hurst exponent.
    Fbm { hurst: f64 },
    /// Nearest-seed cells with independent grey levels.
    Voronoi { cells: (usize, usize) },
}

impl SynthKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SynthKind::Grating { period: (a, b) } | SynthKind::Checkerboard { period: (a, b) } => a >= 2.0 && a <= b,
            SynthKind::Fbm { hurst } => hurst > 0.0 && hurst < 1.0,
            SynthKind::Voronoi { cells: (a, b) } => a >= 2 && a <= b,
        };
        if ok {
            Ok(())
        } else {
            Err(arg_err!("invalid texture parameters: {self}"))
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthKind::Grating { period: (a, b) } => write!(f, "grating:{a}-{b}"),
            SynthKind::Checkerboard { period: (a, b) } => write!(f, "checkerboard:{a}-{b}"),
            SynthKind::Fbm { hurst } => write!(f, "fbm:{hurst}"),
            SynthKind::Voronoi { cells: (a, b) } => write!(f, "voronoi:{a}-{b}"),
        }
    }
}

fn range<T: FromStr>(s: &str) -> Option<(T, T)> {
    let (a, b) = s.split_once('-')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// `grating[:lo-hi]`, `checkerboard[:lo-hi]`, `fbm:H`, `voronoi[:lo-hi]`.
impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (s.trim(), None),
        };
        let bad = || arg_err!("cannot parse texture kind '{s}'");
        let kind = match (name.to_ascii_lowercase().as_str(), arg) {
            ("grating", None) => SynthKind::Grating { period: (6.0, 12.0) },
            ("grating", Some(a)) => SynthKind::Grating { period: range(a).ok_or_else(bad)? },
            ("checkerboard", None) => SynthKind::Checkerboard { period: (6.0, 12.0) },
            ("checkerboard", Some(a)) => SynthKind::Checkerboard { period: range(a).ok_or_else(bad)? },
            ("fbm", Some(a)) => SynthKind::Fbm { hurst: a.trim().parse().map_err(|_| bad())? },
            ("voronoi", None) => SynthKind::Voronoi { cells: (16, 32) },
            ("voronoi", Some(a)) => SynthKind::Voronoi { cells: range(a).ok_or_else(bad)? },
            _ => return Err(arg_err!("unknown texture kind '{s}'")),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub kind: SynthKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTextureSpec {
    pub classes: Vec<SynthClass>,
    pub samples_per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl SyntheticTextureSpec {
    /// Four clearly different texture families.
    pub fn easy(samples_per_class: usize, size: usize, seed: u64) -> Self {
        let classes = ["checkerboard", "fbm:0.5", "grating", "voronoi"]
            .iter()
            .map(|k| {
                let kind: SynthKind = k.parse().expect("built-in kinds parse");
                let name = k.split(':').next().unwrap().to_string();
                SynthClass { name, kind }
            })
            .collect();
        SyntheticTextureSpec { classes, samples_per_class, size, seed, noise_std: 0.02 }
    }

    /// Same family at different roughness.
    pub fn fbm_pair(low: f64, high: f64, samples_per_class: usize, size: usize, seed: u64) -> Self {
        let classes = [low, high]
            .iter()
            .map(|&h| SynthClass { name: format!("fbm_h{:02}", (h * 10.0).round() as u32), kind: SynthKind::Fbm { hurst: h } })
            .collect();
        SyntheticTextureSpec { classes, samples_per_class, size, seed, noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.samples_per_class == 0 || self.size < 4 {
            return Err(arg_err!("need classes, samples and an image size of at least 4"));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(arg_err!("class names must be unique plain directory names"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(arg_err!("noise std must be non-negative"));
        }
        self.classes.iter().try_for_each(|c| c.kind.validate())
    }

    /// Deterministic dataset; classes are labelled in sorted-name order so
    /// that writing and reloading keeps the labels.
    pub fn generate(&self) -> Result<DatasetManifest> {
        self.validate()?;
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.sort_by(|&a, &b| self.classes[a].name.cmp(&self.classes[b].name));
        let mut manifest = DatasetManifest {
            class_names: order.iter().map(|&i| self.classes[i].name.clone()).collect(),
            ..Default::default()
        };
        for (label, &ci) in order.iter().enumerate() {
            let class = &self.classes[ci];
            for k in 0..self.samples_per_class {
                let mut rng = stream(&[self.seed, ci as u64, k as u64]);
                let surface = render(&class.kind, self.size, &mut rng);
                let pixels = finish(surface, self.size, self.noise_std, &mut rng);
                manifest.samples.push(ImageSample { pixels, label, source: format!("{}/{}_{k:04}.ppm", class.name, class.name) });
            }
        }
        Ok(manifest)
    }
}

/// Raw surface in `[0, 1]`, row-major `size x size`.
pub fn render(kind: &SynthKind, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = size;
    match *kind {
        SynthKind::Grating { period: (lo, hi) } => {
            let p = rng.gen_range(lo..=hi);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    0.5 + 0.5 * (2.0 * PI * (x * c + y * s) / p + phase).sin()
                })
                .collect()
        }
        SynthKind::Checkerboard { period: (lo, hi) } => {
            let p = rng.gen_range(lo..=hi);
            let theta = rng.gen_range(0.0..PI / 2.0);
            let (ox, oy) = (rng.gen_range(0.0..p), rng.gen_range(0.0..p));
            let (c, s) = (theta.cos(), theta.sin());
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    let u = ((x * c - y * s + ox) / p).floor() as i64;
                    let v = ((x * s + y * c + oy) / p).floor() as i64;
                    ((u + v).rem_euclid(2)) as f64
                })
                .collect()
        }
        SynthKind::Fbm { hurst } => fbm_surface(n, hurst, rng),
        SynthKind::Voronoi { cells: (lo, hi) } => {
            let k = rng.gen_range(lo..=hi);
            let seeds: Vec<(f64, f64, f64)> =
                (0..k).map(|_| (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64), rng.gen_range(0.0..1.0))).collect();
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                    let mut best = (f64::INFINITY, 0.0);
                    for &(sx, sy, g) in &seeds {
                        // Wrap around so the pattern tiles.
                        let dx = (x - sx).abs().min(n as f64 - (x - sx).abs());
                        let dy = (y - sy).abs().min(n as f64 - (y - sy).abs());
                        let d = dx * dx + dy * dy;
                        if d < best.0 {
                            best = (d, g);
                        }
                    }
                    best.1
                })
                .collect()
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Spectral synthesis: Gaussian white noise shaped by `|f|^-(H+1)`,
/// inverse-transformed and rescaled to `[0, 1]`.
pub fn fbm_surface(n: usize, hurst: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = (0..n * n)
        .map(|i| {
            let fy = (i / n).min(n - i / n) as f64;
            let fx = (i % n).min(n - i % n) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            let amp = if f > 0.0 { f.powf(-(hurst + 1.0)) } else { 0.0 };
            Complex::new(gaussian(rng) * amp, gaussian(rng) * amp)
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_inverse(n);
    fft.process(&mut spec);
    // columns: transpose, transform rows, transpose back
    let mut t = vec![Complex::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = spec[r * n + c];
        }
    }
    fft.process(&mut t);
    let re: Vec<f64> = (0..n * n).map(|i| t[(i % n) * n + i / n].re).collect();
    let (lo, hi) = re.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    re.into_iter().map(|v| (v - lo) / span).collect()
}

fn finish(surface: Vec<f64>, n: usize, noise_std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let contrast = rng.gen_range(0.6..=1.0);
    let offset = rng.gen_range(0.0..=1.0 - contrast);
    let grey: Vec<f32> = surface
        .into_iter()
        .map(|v| {
            let noisy = offset + contrast * v + if noise_std > 0.0 { noise_std * gaussian(rng) } else { 0.0 };
            (noisy.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
        })
        .collect();
    let mut data = grey.clone();
    data.extend_from_slice(&grey);
    data.extend_from_slice(&grey);
    Tensor::new([3, n, n], data).expect("sizes match")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_fifty() {
        let m = SyntheticTextureSpec::easy(50, 16, 1).generate().unwrap();
        assert_eq!(m.len(), 200);
        assert_eq!(m.class_names, ["checkerboard", "fbm", "grating", "voronoi"]);
        assert!(m.samples.iter().all(|s| s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn same_seed_same_bits() {
        let a = SyntheticTextureSpec::easy(3, 16, 9).generate().unwrap();
        let b = SyntheticTextureSpec::easy(3, 16, 9).generate().unwrap();
        assert_eq!(a, b);
        let c = SyntheticTextureSpec::easy(3, 16, 10).generate().unwrap();
        assert_ne!(a.samples[0].pixels, c.samples[0].pixels);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("fbm:0.2".parse::<SynthKind>().unwrap(), SynthKind::Fbm { hurst: 0.2 });
        assert_eq!("voronoi:4-9".parse::<SynthKind>().unwrap(), SynthKind::Voronoi { cells: (4, 9) });
        assert!(matches!("plasma".parse::<SynthKind>(), Err(Error::InvalidArgument(_))));
        assert!("fbm:1.5".parse::<SynthKind>().is_err());
    }
}
