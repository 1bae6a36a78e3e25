use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm, Linear, Mode, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Pooling window, which must cover the whole map. `None` pools
    /// globally whatever the extent.
    pub pool_kernel: Option<usize>,
    pub out_features: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig { pool_kernel: Some(7), out_features: 48 }
    }
}

/// Average pooling, a linear projection and batch norm.
#[derive(Clone, Debug)]
pub struct GapLayer {
    pub config: GapConfig,
    pub in_channels: usize,
    pub projection: Linear,
    pub bn: BatchNorm,
}

impl GapLayer {
    pub fn new<S: Scalar>(config: GapConfig, in_channels: usize, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        if config.out_features == 0 || config.pool_kernel == Some(0) {
            return Err(Error::Config("GAP kernel and output features must be positive".into()));
        }
        let projection = Linear::new(store, "gap.proj", in_channels, config.out_features, rng);
        let bn = BatchNorm::new(store, "gap.bn", config.out_features);
        Ok(GapLayer { config, in_channels, projection, bn })
    }

    pub fn output_len(&self) -> usize {
        self.config.out_features
    }

    pub fn pool<S: Scalar>(&self, tape: &mut Tape<S>, x_b: Var) -> Result<Var> {
        let &[_, c, h, w] = tape.shape(x_b) else {
            return Err(shape_err!("GAP input must be [N, C, H, W], got {:?}", tape.shape(x_b)));
        };
        if c != self.in_channels {
            return Err(shape_err!("GAP built for {} channels, got {c}", self.in_channels));
        }
        if let Some(k) = self.config.pool_kernel {
            if h != k || w != k {
                return Err(shape_err!("GAP kernel {k} does not match the {h}x{w} map"));
            }
        }
        tape.global_avg_pool(x_b)
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var, mode: Mode) -> Result<Var> {
        let pooled = self.pool(tape, x_b)?;
        let p = self.projection.forward(tape, store, pooled)?;
        self.bn.forward(tape, store, p, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_must_match_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let layer = GapLayer::new(GapConfig::default(), 4, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 4, 8, 8]));
        assert!(matches!(layer.pool(&mut tape, x), Err(Error::InvalidShape(_))));
        let x = tape.constant(Tensor::full([2, 4, 7, 7], 0.25));
        let p = layer.pool(&mut tape, x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v: &f32| (v - 0.25f32).abs() < 1e-7));
    }
}
