//! Texture-extraction heads. Each consumes the backbone activation map and
//! emits a fixed-length descriptor per sample.

mod encoding;
mod fractal;
mod gap;
mod histogram;
mod rbf;

pub use encoding::{encoding_assignments, EncodingConfig, EncodingLayer};
pub use fractal::{fractal_dimension_map, local_fractal_dimensions, FractalConfig, FractalLayer};
pub use gap::{GapConfig, GapLayer};
pub use histogram::{HistogramConfig, HistogramLayer};
pub use rbf::rbf_soft_counts;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Scalar;

/// The four texture-extraction methods, in their fixed aggregation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DeepTen,
    Gap,
    Histogram,
    Fap,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DeepTen, Method::Gap, Method::Histogram, Method::Fap];

    pub fn name(self) -> &'static str {
        match self {
            Method::DeepTen => "deepten",
            Method::Gap => "gap",
            Method::Histogram => "histogram",
            Method::Fap => "fap",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::DeepTen => "DeepTEN",
            Method::Gap => "GAP",
            Method::Histogram => "Histogram",
            Method::Fap => "FAP",
        }
    }

    /// Bit position in a selection mask.
    pub fn bit(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deepten" | "encoding" => Ok(Method::DeepTen),
            "gap" => Ok(Method::Gap),
            "histogram" | "hist" => Ok(Method::Histogram),
            "fap" | "fractal" => Ok(Method::Fap),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Hyperparameters of all four heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeConfig {
    pub histogram: HistogramConfig,
    pub encoding: EncodingConfig,
    pub fractal: FractalConfig,
    pub gap: GapConfig,
}

impl TeConfig {
    pub fn paper() -> Self {
        TeConfig {
            histogram: HistogramConfig::default(),
            encoding: EncodingConfig::default(),
            fractal: FractalConfig::paper(),
            gap: GapConfig::default(),
        }
    }

    pub fn desk() -> Self {
        TeConfig {
            histogram: HistogramConfig::default(),
            encoding: EncodingConfig::default(),
            fractal: FractalConfig::default(),
            gap: GapConfig { pool_kernel: None, ..GapConfig::default() },
        }
    }

    pub fn output_len(&self, method: Method) -> usize {
        match method {
            Method::DeepTen => self.encoding.out_features,
            Method::Gap => self.gap.out_features,
            Method::Histogram => self.histogram.output_len(),
            Method::Fap => self.fractal.n_bins,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TeHead {
    Encoding(EncodingLayer),
    Gap(GapLayer),
    Histogram(HistogramLayer),
    Fractal(FractalLayer),
}

impl TeHead {
    pub fn new<S: Scalar>(
        method: Method,
        cfg: &TeConfig,
        in_channels: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match method {
            Method::DeepTen => TeHead::Encoding(EncodingLayer::new(cfg.encoding.clone(), in_channels, store, rng)?),
            Method::Gap => TeHead::Gap(GapLayer::new(cfg.gap.clone(), in_channels, store, rng)?),
            Method::Histogram => TeHead::Histogram(HistogramLayer::new(cfg.histogram.clone(), in_channels, store, rng)?),
            Method::Fap => TeHead::Fractal(FractalLayer::new(cfg.fractal.clone(), store)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            TeHead::Encoding(_) => Method::DeepTen,
            TeHead::Gap(_) => Method::Gap,
            TeHead::Histogram(_) => Method::Histogram,
            TeHead::Fractal(_) => Method::Fap,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            TeHead::Encoding(l) => l.output_len(),
            TeHead::Gap(l) => l.output_len(),
            TeHead::Histogram(l) => l.output_len(),
            TeHead::Fractal(l) => l.output_len(),
        }
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, x_b: Var, mode: Mode) -> Result<Var> {
        match self {
            TeHead::Encoding(l) => l.forward(tape, store, x_b, mode),
            TeHead::Gap(l) => l.forward(tape, store, x_b, mode),
            TeHead::Histogram(l) => l.forward(tape, store, x_b),
            TeHead::Fractal(l) => l.forward(tape, store, x_b),
        }
    }
}
