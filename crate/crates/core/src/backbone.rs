//! Compact residual network producing the shared activation map that every
//! texture head consumes.
//!
//! Layout: a stem convolution (optionally followed by 2x2 average pooling),
//! then one stage per entry of `stage_channels`. Each stage holds
//! `blocks_per_stage` two-convolution residual blocks; every stage after the
//! first halves the resolution in its first block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv2d, Mode, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_resolution: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    /// Keep backbone weights fixed while the heads train.
    pub frozen: bool,
}

impl BackboneConfig {
    /// ResNet18-shaped: 224 input, 7x7 map with 512 channels.
    pub fn paper() -> Self {
        BackboneConfig {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            input_resolution: 224,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            frozen: false,
        }
    }

    /// 64x64 input, 8x8 map with 64 channels.
    pub fn desk() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            input_resolution: 64,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            frozen: false,
        }
    }

    pub fn total_stride(&self) -> usize {
        let stages = self.stage_channels.len().saturating_sub(1);
        self.stem_stride * if self.stem_pool { 2 } else { 1 } * (1 << stages)
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Spatial extent of the final map for a square input.
    pub fn out_resolution(&self, input: usize) -> usize {
        input / self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(crate::Error::Config("backbone needs positive stage channels".into()));
        }
        if self.blocks_per_stage == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(crate::Error::Config("backbone block count, stem kernel and stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out);
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), c_in, c_out, 1, stride, 0, rng),
                BatchNorm::new(store, &format!("{name}.down_bn"), c_out),
            )
        });
        ResidualBlock { conv1, bn1, conv2, bn2, shortcut }
    }

    /// The skip path alone.
    pub fn skip<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let d = conv.forward(tape, store, x)?;
                bn.forward(tape, store, d, mode)
            }
            None => Ok(x),
        }
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, mode)?;
        let s = self.skip(tape, store, x, mode)?;
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }

    /// Parameters of the residual branch (everything except the skip path).
    pub fn branch_params(&self) -> Vec<ParamId> {
        vec![self.conv1.weight, self.bn1.gamma, self.bn1.beta, self.conv2.weight, self.bn2.gamma, self.bn2.beta]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlock>,
    params: Vec<ParamId>,
}

impl Backbone {
    pub fn new<S: Scalar>(config: BackboneConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let c0 = config.stage_channels[0];
        let stem = Conv2d::new(store, "backbone.stem", 3, c0, config.stem_kernel, config.stem_stride, config.stem_kernel / 2, rng);
        let stem_bn = BatchNorm::new(store, "backbone.stem_bn", c0);
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(store, &format!("backbone.stage{s}.block{b}"), c_in, c_out, stride, rng));
                c_in = c_out;
            }
        }
        let params: Vec<ParamId> = store.ids().skip(first).collect();
        if config.frozen {
            for &p in &params {
                store.get_mut(p).frozen = true;
            }
        }
        Ok(Backbone { config, stem, stem_bn, blocks, params })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(shape_err!("backbone input must be [N, 3, H, W], got {:?}", shape));
        };
        if c != 3 {
            return Err(shape_err!("backbone expects 3 input channels, got {c}"));
        }
        let t = self.config.total_stride();
        if h % t != 0 || w % t != 0 {
            return Err(shape_err!("input {h}x{w} is not divisible by the total stride {t}"));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, images: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape.shape(images))?;
        let x = self.stem.forward(tape, store, images)?;
        let x = self.stem_bn.forward(tape, store, x, mode)?;
        let mut x = tape.relu(x);
        if self.config.stem_pool {
            x = tape.avg_pool2d(x, 2, 2)?;
        }
        for block in &mut self.blocks {
            x = block.forward(tape, store, x, mode)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut bb = Backbone::new(BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        assert_eq!(bb.config.total_stride(), 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3, 64, 64]));
        let y = bb.forward(&mut tape, &store, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 8, 8]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn paper_total_stride_maps_224_to_7() {
        let cfg = BackboneConfig::paper();
        assert_eq!(cfg.total_stride(), 32);
        assert_eq!(cfg.out_resolution(224), 7);
        assert_eq!(cfg.out_channels(), 512);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut bb = Backbone::new(BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 60, 60]));
        assert!(matches!(bb.forward(&mut tape, &store, x, Mode::Eval), Err(crate::Error::InvalidShape(_))));
    }
}
