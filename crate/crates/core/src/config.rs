//! Run configuration as a flat `section.key = value` text file.
//!
//! ```text
//! # comments start with '#'
//! scale = desk
//! model.methods = deepten,histogram,fap
//! train.lr = 0.01
//! ```
//!
//! `scale` picks the base preset and `train.protocol` applies a published
//! per-dataset protocol; every other key then overrides a single field,
//! whatever its position in the file. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{AugmentConfig, ChannelStats};
use crate::ensemble::ModelConfig;
use crate::error::{Error, Result};
use crate::te::TeConfig;
use crate::training::{Protocol, Scheduler, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// ResNet18-shaped backbone, 224 crops, published protocol.
    #[default]
    Paper,
    /// Reduced backbone and 64 crops for single-core runs.
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale '{other}' (paper or desk)"))),
        }
    }
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub n_splits: usize,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub seeds: Vec<u64>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 200, seeds: (0..10).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub protocol: Option<Protocol>,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub forest: ForestConfig,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Paper => {
                let mut cfg = RunConfig {
                    scale,
                    seed: 0,
                    workers: 1,
                    output: None,
                    data: DataConfig { dataset: None, n_splits: 10, train_fraction: 0.75 },
                    model: ModelConfig::paper(),
                    protocol: None,
                    train: TrainConfig::default(),
                    augment: AugmentConfig::paper(),
                    forest: ForestConfig::default(),
                };
                cfg.apply_protocol(Protocol::Fmd);
                cfg
            }
            Scale::Desk => RunConfig {
                scale,
                seed: 0,
                workers: 1,
                output: None,
                data: DataConfig { dataset: None, n_splits: 1, train_fraction: 0.75 },
                model: ModelConfig::desk(),
                protocol: None,
                train: TrainConfig { epochs: 15, batch_size: 16, lr: 0.01, scheduler: Scheduler::Cosine, ..TrainConfig::default() },
                augment: AugmentConfig::desk(),
                forest: ForestConfig::default(),
            },
        }
    }

    pub fn apply_protocol(&mut self, p: Protocol) {
        let seed = self.train.seed;
        self.train = TrainConfig { seed, ..p.train_config() };
        self.augment.five_crop = p.five_crop();
        self.protocol = Some(p);
    }

    /// Parses config text, starting from `scale` (or the file's own `scale`
    /// key when `scale` is `None`).
    pub fn parse(text: &str, scale: Option<Scale>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let file_scale = pairs.iter().find(|(k, _)| k == "scale").map(|(_, v)| v.parse()).transpose()?;
        let mut cfg = RunConfig::preset(scale.or(file_scale).unwrap_or_default());
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "train.protocol") {
            if v != "none" {
                cfg.apply_protocol(v.parse()?);
            }
        }
        for (k, v) in &pairs {
            if k != "scale" && k != "train.protocol" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, scale).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.model.te.fractal.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment.crop != self.model.backbone.input_resolution {
            return Err(Error::Config(format!(
                "augment.crop {} differs from backbone.input_resolution {}",
                self.augment.crop, self.model.backbone.input_resolution
            )));
        }
        if self.data.n_splits == 0 || !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config("data.n_splits must be positive and data.train_fraction in (0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.forest.n_trees == 0 || self.forest.seeds.is_empty() {
            return Err(Error::Config("forest needs trees and seeds".into()));
        }
        Ok(())
    }

    /// Sets one key. Values use the same syntax as the config file.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let te: &mut TeConfig = &mut m.te;
        let bb: &mut BackboneConfig = &mut m.backbone;
        let t = &mut self.train;
        let a = &mut self.augment;
        match key {
            "scale" => {
                if v.parse::<Scale>()? != self.scale {
                    return Err(Error::Config("scale can only be set first".into()));
                }
            }
            "seed" => self.seed = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "output.dir" => self.output = opt_path(v),
            "data.dataset" => self.data.dataset = opt_path(v),
            "data.n_splits" => self.data.n_splits = num(key, v)?,
            "data.train_fraction" => self.data.train_fraction = num(key, v)?,
            "model.methods" => m.selection = v.parse()?,
            "model.aggregator" => m.aggregator = v.parse()?,
            "model.head_depth" => m.head_depth = num(key, v)?,
            "model.head_hidden" => m.head_hidden = num(key, v)?,
            "backbone.stage_channels" => bb.stage_channels = list(key, v)?,
            "backbone.blocks_per_stage" => bb.blocks_per_stage = num(key, v)?,
            "backbone.input_resolution" => bb.input_resolution = num(key, v)?,
            "backbone.stem_kernel" => bb.stem_kernel = num(key, v)?,
            "backbone.stem_stride" => bb.stem_stride = num(key, v)?,
            "backbone.stem_pool" => bb.stem_pool = num(key, v)?,
            "backbone.frozen" => bb.frozen = num(key, v)?,
            "histogram.n_bins" => te.histogram.n_bins = num(key, v)?,
            "histogram.reduced_channels" => te.histogram.reduced_channels = num(key, v)?,
            "histogram.groups" => te.histogram.groups = num(key, v)?,
            "histogram.downsample" => te.histogram.downsample = num(key, v)?,
            "histogram.normalized" => te.histogram.normalized = num(key, v)?,
            "encoding.n_codes" => te.encoding.n_codes = num(key, v)?,
            "encoding.out_features" => te.encoding.out_features = num(key, v)?,
            "fractal.n_bins" => te.fractal.n_bins = num(key, v)?,
            "fractal.scales" => te.fractal.scales = list(key, v)?,
            "fractal.upsample" => te.fractal.upsample = num(key, v)?,
            "fractal.bin_min" => te.fractal.bin_min = num(key, v)?,
            "fractal.bin_max" => te.fractal.bin_max = num(key, v)?,
            "gap.pool_kernel" => te.gap.pool_kernel = if v == "global" { None } else { Some(num(key, v)?) },
            "gap.out_features" => te.gap.out_features = num(key, v)?,
            "train.protocol" => match v {
                "none" => self.protocol = None,
                p => self.apply_protocol(p.parse()?),
            },
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.lr_min" => t.lr_min = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.scheduler" => t.scheduler = v.parse()?,
            "train.t0" => t.t0 = num(key, v)?,
            "train.t_mult" => t.t_mult = num(key, v)?,
            "augment.resize" => a.resize = num(key, v)?,
            "augment.crop" => a.crop = num(key, v)?,
            "augment.flip_prob" => a.flip_prob = num(key, v)?,
            "augment.five_crop" => a.five_crop = num(key, v)?,
            "augment.eval_five_crop" => a.eval_five_crop = num(key, v)?,
            "augment.mean" | "augment.std" => {
                if v == "auto" {
                    a.stats = None;
                } else {
                    let vals: Vec<f64> = list(key, v)?;
                    let arr: [f64; 3] = vals.try_into().map_err(|_| Error::Config(format!("{key} needs three values")))?;
                    let stats = a.stats.get_or_insert_with(ChannelStats::default);
                    if key.ends_with("mean") {
                        stats.mean = arr;
                    } else {
                        stats.std = arr;
                    }
                }
            }
            "forest.n_trees" => self.forest.n_trees = num(key, v)?,
            "forest.seeds" => self.forest.seeds = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value; parsing the text gives back an
    /// identical configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let (bb, te, t, a) = (&m.backbone, &m.te, &self.train, &self.augment);
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let trip = |v: &[f64; 3]| format!("{:?},{:?},{:?}", v[0], v[1], v[2]);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("scale", self.scale.name().into());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("output.dir", path(&self.output));
        kv("data.dataset", path(&self.data.dataset));
        kv("data.n_splits", self.data.n_splits.to_string());
        kv("data.train_fraction", format!("{:?}", self.data.train_fraction));
        kv("model.methods", m.selection.to_string());
        kv("model.aggregator", m.aggregator.to_string());
        kv("model.head_depth", m.head_depth.to_string());
        kv("model.head_hidden", m.head_hidden.to_string());
        kv("backbone.stage_channels", join(&bb.stage_channels));
        kv("backbone.blocks_per_stage", bb.blocks_per_stage.to_string());
        kv("backbone.input_resolution", bb.input_resolution.to_string());
        kv("backbone.stem_kernel", bb.stem_kernel.to_string());
        kv("backbone.stem_stride", bb.stem_stride.to_string());
        kv("backbone.stem_pool", bb.stem_pool.to_string());
        kv("backbone.frozen", bb.frozen.to_string());
        kv("histogram.n_bins", te.histogram.n_bins.to_string());
        kv("histogram.reduced_channels", te.histogram.reduced_channels.to_string());
        kv("histogram.groups", te.histogram.groups.to_string());
        kv("histogram.downsample", te.histogram.downsample.to_string());
        kv("histogram.normalized", te.histogram.normalized.to_string());
        kv("encoding.n_codes", te.encoding.n_codes.to_string());
        kv("encoding.out_features", te.encoding.out_features.to_string());
        kv("fractal.n_bins", te.fractal.n_bins.to_string());
        kv("fractal.scales", join(&te.fractal.scales));
        kv("fractal.upsample", te.fractal.upsample.to_string());
        kv("fractal.bin_min", format!("{:?}", te.fractal.bin_min));
        kv("fractal.bin_max", format!("{:?}", te.fractal.bin_max));
        kv("gap.pool_kernel", te.gap.pool_kernel.map(|k| k.to_string()).unwrap_or_else(|| "global".into()));
        kv("gap.out_features", te.gap.out_features.to_string());
        kv("train.protocol", self.protocol.map(|p| p.name().to_string()).unwrap_or_else(|| "none".into()));
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.lr_min", format!("{:?}", t.lr_min));
        kv("train.momentum", format!("{:?}", t.momentum));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.scheduler", t.scheduler.to_string());
        kv("train.t0", t.t0.to_string());
        kv("train.t_mult", t.t_mult.to_string());
        kv("augment.resize", a.resize.to_string());
        kv("augment.crop", a.crop.to_string());
        kv("augment.flip_prob", format!("{:?}", a.flip_prob));
        kv("augment.five_crop", a.five_crop.to_string());
        kv("augment.eval_five_crop", a.eval_five_crop.to_string());
        match &a.stats {
            Some(st) => {
                kv("augment.mean", trip(&st.mean));
                kv("augment.std", trip(&st.std));
            }
            None => {
                kv("augment.mean", "auto".into());
                kv("augment.std", "auto".into());
            }
        }
        kv("forest.n_trees", self.forest.n_trees.to_string());
        kv("forest.seeds", self.forest.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        s
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::MethodSelection;

    #[test]
    fn paper_defaults() {
        let cfg = RunConfig::preset(Scale::Paper);
        assert_eq!(cfg.model.selection, MethodSelection::proposed());
        assert_eq!(cfg.model.aggregated_width().unwrap(), 272);
        assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.train.lr), (30, 16, 1e-3));
        assert_eq!((cfg.augment.resize, cfg.augment.crop), (256, 224));
        assert_eq!(cfg.data.n_splits, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        for scale in [Scale::Paper, Scale::Desk] {
            let mut cfg = RunConfig::preset(scale);
            cfg.augment.stats = Some(ChannelStats { mean: [0.1, 0.2, 0.3], std: [0.5, 0.25, 1.0 / 3.0] });
            cfg.model.te.gap.pool_kernel = None;
            let back = RunConfig::parse(&cfg.to_text(), None).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("train.learning_rate = 0.1", None).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn protocol_then_overrides() {
        let cfg = RunConfig::parse("train.epochs = 3\ntrain.protocol = dtd\n", Some(Scale::Paper)).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (3, 64));
        assert!(cfg.augment.five_crop);
    }

    #[test]
    fn bilinear_with_three_methods_fails_validation() {
        assert!(RunConfig::parse("model.aggregator = bilinear", Some(Scale::Desk)).is_err());
        assert!(RunConfig::parse("model.aggregator = bilinear\nmodel.methods = gap,fap", Some(Scale::Desk)).is_ok());
    }
}
