//! Resize, flip, crop and normalise.
//!
//! Training view: short side to `resize` (bilinear), horizontal flip with
//! probability `flip_prob`, then one random `crop` square or the five fixed
//! crops (four corners and centre). Evaluation view: the same resize, then
//! the centre crop or the five crops. Every view is normalised per channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::autodiff::resize_bilinear_forward;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Standard deviations are floored here so constant channels stay finite.
const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl ChannelStats {
    /// Mean and population std of each channel over a set of `[3, H, W]`
    /// views.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = check_image(img)?.1 * check_image(img)?.2;
            for c in 0..3 {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(arg_err!("channel statistics need at least one image"));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(MIN_STD));
        Ok(ChannelStats { mean, std })
    }

    /// Normalised value range implied by inputs in `[0, 1]`.
    pub fn bounds(&self, c: usize) -> (f64, f64) {
        (-self.mean[c] / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,
    /// Five fixed crops per training image instead of one random crop.
    pub five_crop: bool,
    /// Average predictions over the five crops at evaluation.
    pub eval_five_crop: bool,
    /// Explicit normalisation; computed from the training split when absent.
    pub stats: Option<ChannelStats>,
}

impl AugmentConfig {
    pub fn paper() -> Self {
        AugmentConfig { resize: 256, crop: 224, flip_prob: 0.5, five_crop: false, eval_five_crop: false, stats: None }
    }

    /// The full-size 256/224 ratio at a 64-pixel crop.
    pub fn desk() -> Self {
        AugmentConfig { resize: 73, crop: 64, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be in 1..={}", self.crop, self.resize)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((3, h, w)),
        _ => Err(shape_err!("expected a [3, H, W] image, got {:?}", img.shape())),
    }
}

/// Scales so the shorter side equals `size`, keeping the aspect ratio.
pub fn resize_short_side(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = check_image(img)?;
    if size == 0 {
        return Err(arg_err!("resize target must be positive"));
    }
    let (oh, ow) = if h <= w {
        (size, ((w as f64 * size as f64 / h as f64).round() as usize).max(size))
    } else {
        (((h as f64 * size as f64 / w as f64).round() as usize).max(size), size)
    };
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    Ok(resize_bilinear_forward(img, oh, ow))
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let w = s[s.len() - 1];
    let mut out = img.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

pub fn crop(img: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    if top + size > h || left + size > w {
        return Err(arg_err!("crop {size} at ({top}, {left}) exceeds the {h}x{w} image"));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let start = (ch * h + r) * w + left;
            out.extend_from_slice(&d[start..start + size]);
        }
    }
    Ok(Tensor::new([c, size, size], out).expect("sizes match"))
}

pub fn center_crop(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = check_image(img)?;
    if size > h || size > w {
        return Err(arg_err!("crop {size} exceeds the {h}x{w} image"));
    }
    crop(img, (h - size) / 2, (w - size) / 2, size)
}

/// Top-left, top-right, bottom-left, bottom-right, centre.
pub fn five_crop(img: &Tensor<f32>, size: usize) -> Result<Vec<Tensor<f32>>> {
    let (_, h, w) = check_image(img)?;
    if size > h || size > w {
        return Err(arg_err!("crop {size} exceeds the {h}x{w} image"));
    }
    let (b, r) = (h - size, w - size);
    Ok(vec![
        crop(img, 0, 0, size)?,
        crop(img, 0, r, size)?,
        crop(img, b, 0, size)?,
        crop(img, b, r, size)?,
        center_crop(img, size)?,
    ])
}

pub fn normalize(img: &mut Tensor<f32>, stats: &ChannelStats) {
    let plane = img.len() / 3;
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c] as f32, stats.std[c] as f32);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// An augmentation configuration bound to normalisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub config: AugmentConfig,
    pub stats: ChannelStats,
}

impl Transform {
    /// Uses the configured statistics, or measures them on the evaluation
    /// views of the given training samples.
    pub fn fit(config: AugmentConfig, manifest: &DatasetManifest, train: &[usize]) -> Result<Self> {
        config.validate()?;
        let stats = match &config.stats {
            Some(s) => s.clone(),
            None => {
                let views = train
                    .iter()
                    .map(|&i| center_crop(&resize_short_side(&manifest.samples[i].pixels, config.resize)?, config.crop))
                    .collect::<Result<Vec<_>>>()?;
                ChannelStats::from_images(&views)?
            }
        };
        Ok(Transform { config, stats })
    }

    pub fn views_per_image(&self, train: bool) -> usize {
        if (train && self.config.five_crop) || (!train && self.config.eval_five_crop) {
            5
        } else {
            1
        }
    }

    pub fn train_views(&self, img: &Tensor<f32>, rng: &mut impl Rng) -> Result<Vec<Tensor<f32>>> {
        let cfg = &self.config;
        let mut x = resize_short_side(img, cfg.resize)?;
        if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
            x = hflip(&x);
        }
        let mut views = if cfg.five_crop {
            five_crop(&x, cfg.crop)?
        } else {
            let (_, h, w) = check_image(&x)?;
            if cfg.crop > h || cfg.crop > w {
                return Err(arg_err!("crop {} exceeds the {h}x{w} image", cfg.crop));
            }
            let top = rng.gen_range(0..=h - cfg.crop);
            let left = rng.gen_range(0..=w - cfg.crop);
            vec![crop(&x, top, left, cfg.crop)?]
        };
        views.iter_mut().for_each(|v| normalize(v, &self.stats));
        Ok(views)
    }

    pub fn eval_views(&self, img: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let x = resize_short_side(img, self.config.resize)?;
        let mut views = if self.config.eval_five_crop { five_crop(&x, self.config.crop)? } else { vec![center_crop(&x, self.config.crop)?] };
        views.iter_mut().for_each(|v| normalize(v, &self.stats));
        Ok(views)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn landscape_resize_then_crop() {
        let img = Tensor::from_fn([3, 384, 512], |i| (i % 7) as f32 / 7.0);
        let r = resize_short_side(&img, 256).unwrap();
        assert_eq!(r.shape(), &[3, 256, 341]);
        let t = Transform { config: AugmentConfig::paper(), stats: ChannelStats::default() };
        let v = t.train_views(&img, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].shape(), &[3, 224, 224]);
    }

    #[test]
    fn five_crops_are_corners_and_centre() {
        let img = Tensor::from_fn([3, 4, 4], |i| i as f32);
        let crops = five_crop(&img, 2).unwrap();
        assert_eq!(crops.len(), 5);
        assert_eq!(crops[0].data()[..4], [0.0, 1.0, 4.0, 5.0]);
        assert_eq!(crops[3].data()[..4], [10.0, 11.0, 14.0, 15.0]);
        assert_eq!(crops[4].data()[..4], [5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let img = Tensor::from_fn([3, 2, 3], |i| i as f32);
        let f = hflip(&img);
        assert_eq!(f.data()[..3], [2.0, 1.0, 0.0]);
        let square = Tensor::from_fn([3, 3, 3], |i| i as f32);
        let cfg = AugmentConfig { resize: 3, crop: 3, flip_prob: 1.0, ..AugmentConfig::desk() };
        let t = Transform { config: cfg, stats: ChannelStats::default() };
        let v = t.train_views(&square, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(v[0], hflip(&square));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = Tensor::zeros([3, 10, 10]);
        assert!(crop(&img, 0, 0, 11).is_err());
        assert!(AugmentConfig { crop: 300, ..AugmentConfig::paper() }.validate().is_err());
    }
}
