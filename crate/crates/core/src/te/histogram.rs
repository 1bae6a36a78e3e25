use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rbf::rbf_soft_counts;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub n_bins: usize,
    /// Channels left after the pointwise reduction.
    pub reduced_channels: usize,
    /// Requested group count for the reduction; clamped to what the
    /// channel counts allow.
    pub groups: usize,
    /// Average-pooling factor applied before binning (1 disables it).
    pub downsample: usize,
    /// Divide memberships by their per-position sum.
    pub normalized: bool,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { n_bins: 4, reduced_channels: 32, groups: 512, downsample: 2, normalized: false }
    }
}

impl HistogramConfig {
    pub fn output_len(&self) -> usize {
        self.n_bins * self.reduced_channels
    }

    /// Largest divisor of both channel counts not above the requested groups.
    pub fn effective_groups(&self, in_channels: usize) -> usize {
        let g = gcd(in_channels, self.reduced_channels);
        (1..=g.min(self.groups.max(1))).rev().find(|d| g.is_multiple_of(*d)).unwrap_or(1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Downsampling, grouped pointwise channel reduction, then learnable
/// radial-basis binning of every reduced channel.
#[derive(Clone, Debug)]
pub struct HistogramLayer {
    pub config: HistogramConfig,
    pub in_channels: usize,
    pub groups: usize,
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub centers: ParamId,
    pub log_widths: ParamId,
}

impl HistogramLayer {
    pub fn new<S: Scalar>(
        config: HistogramConfig,
        in_channels: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.n_bins == 0 || config.reduced_channels == 0 || config.downsample == 0 {
            return Err(Error::Config("histogram bins, channels and downsample must be positive".into()));
        }
        let groups = config.effective_groups(in_channels);
        let per_group = in_channels / groups;
        let r = config.reduced_channels;
        let reduce_weight = store.add("histogram.reduce.weight", fan_in_uniform(&[r, per_group, 1, 1], per_group, rng));
        let reduce_bias = store.add("histogram.reduce.bias", Tensor::zeros([r]));

        // Evenly spaced on [-1, 1]; neighbouring bins meet at exp(-1).
        let b = config.n_bins;
        let spacing = if b > 1 { 2.0 / (b - 1) as f64 } else { 1.0 };
        let centers = Tensor::from_fn([r, b], |i| {
            let k = i % b;
            S::c(if b > 1 { -1.0 + k as f64 * spacing } else { 0.0 })
        });
        let log_gamma = S::c((1.0 / (spacing * spacing)).ln());
        let centers = store.add("histogram.centers", centers);
        let log_widths = store.add("histogram.log_widths", Tensor::full([r, b], log_gamma));
        Ok(HistogramLayer { config, in_channels, groups, reduce_weight, reduce_bias, centers, log_widths })
    }

    pub fn output_len(&self) -> usize {
        self.config.output_len()
    }

    /// Downsampled and channel-reduced map that feeds the binning.
    pub fn reduce<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var) -> Result<Var> {
        let &[_, c, h, w] = tape.shape(x_b) else {
            return Err(shape_err!("histogram input must be [N, C, H, W], got {:?}", tape.shape(x_b)));
        };
        if c != self.in_channels {
            return Err(shape_err!("histogram built for {} channels, got {c}", self.in_channels));
        }
        if h < 2 || w < 2 {
            return Err(shape_err!("histogram needs a spatial extent of at least 2, got {h}x{w}"));
        }
        let d = self.config.downsample;
        let x = if d > 1 && h >= d && w >= d { tape.avg_pool2d(x_b, d, d)? } else { x_b };
        let wgt = tape.param(store, self.reduce_weight);
        let bias = tape.param(store, self.reduce_bias);
        let y = tape.conv2d_grouped(x, wgt, 1, 0, self.groups)?;
        tape.add_channel_bias(y, bias)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var) -> Result<Var> {
        let reduced = self.reduce(tape, store, x_b)?;
        let mu = tape.param(store, self.centers);
        let lw = tape.param(store, self.log_widths);
        rbf_soft_counts(tape, reduced, mu, lw, self.config.normalized)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_clamping() {
        let cfg = HistogramConfig::default();
        assert_eq!(cfg.effective_groups(512), 32);
        assert_eq!(cfg.effective_groups(64), 32);
        assert_eq!(cfg.effective_groups(48), 16);
        let one = HistogramConfig { groups: 1, ..cfg };
        assert_eq!(one.effective_groups(512), 1);
    }

    #[test]
    fn paper_sizes_give_128() {
        assert_eq!(HistogramConfig::default().output_len(), 128);
    }
}
