//! Combining texture heads: selection, aggregation and the classifier.

mod correlation;

pub use correlation::{correlation_matrix, cross_correlation, method_correlations, CorrelationMatrix, CrossCorrelation, PairCorrelation};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, Mode, ParamStore};
use crate::te::{Method, TeConfig, TeHead};
use crate::tensor::{Scalar, Tensor};

/// Widest-to-narrowest descriptor ratio at which a warning is raised.
pub const SIZE_IMBALANCE_RATIO: f64 = 8.0;

/// A nonempty subset of the four methods, stored as a bit mask in
/// [`Method::bit`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSelection(u8);

impl MethodSelection {
    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask == 0 || mask > 0b1111 {
            return Err(Error::Config(format!("selection mask {mask} must be in 1..=15")));
        }
        Ok(MethodSelection(mask))
    }

    pub fn new(methods: &[Method]) -> Result<Self> {
        Self::from_mask(methods.iter().fold(0, |m, &x| m | 1 << x.bit()))
    }

    pub fn all() -> Self {
        MethodSelection(0b1111)
    }

    /// DeepTEN, Histogram and FAP.
    pub fn proposed() -> Self {
        MethodSelection(0b1101)
    }

    /// Every nonempty selection in ascending mask order.
    pub fn grid() -> impl Iterator<Item = MethodSelection> {
        (1..=15).map(MethodSelection)
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Method) -> bool {
        self.0 & (1 << m.bit()) != 0
    }

    pub fn methods(self) -> Vec<Method> {
        Method::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl fmt::Display for MethodSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.methods().iter().map(|m| m.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for MethodSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let methods = s.split([',', '+']).filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<Method>>>()?;
        MethodSelection::new(&methods)
    }
}

impl TryFrom<String> for MethodSelection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSelection> for String {
    fn from(s: MethodSelection) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    #[default]
    Concat,
    /// Flattened outer product of exactly two descriptors.
    Bilinear,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Concat => "concat",
            AggregatorKind::Bilinear => "bilinear",
        }
    }

    pub fn check(self, selection: MethodSelection) -> Result<()> {
        if self == AggregatorKind::Bilinear && selection.len() != 2 {
            return Err(Error::Config(format!(
                "bilinear aggregation takes exactly two methods, got {} ({selection})",
                selection.len()
            )));
        }
        Ok(())
    }

    /// Aggregated width for descriptor widths in selection order.
    pub fn width(self, widths: &[usize]) -> Result<usize> {
        match self {
            AggregatorKind::Concat if !widths.is_empty() => Ok(widths.iter().sum()),
            AggregatorKind::Bilinear if widths.len() == 2 => Ok(widths[0] * widths[1]),
            _ => Err(Error::Config(format!("{} aggregation cannot combine {} descriptors", self.name(), widths.len()))),
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" | "concatenation" => Ok(AggregatorKind::Concat),
            "bilinear" => Ok(AggregatorKind::Bilinear),
            other => Err(Error::Config(format!("unknown aggregator '{other}'"))),
        }
    }
}

/// Joins descriptors along the feature axis in the order given.
pub fn aggregate_concat<S: Scalar>(tape: &mut Tape<S>, features: &[Var]) -> Result<Var> {
    tape.concat(features, 1)
}

pub fn aggregate_bilinear<S: Scalar>(tape: &mut Tape<S>, features: &[Var]) -> Result<Var> {
    match features {
        &[a, b] => tape.outer(a, b),
        _ => Err(Error::Config(format!("bilinear aggregation takes two inputs, got {}", features.len()))),
    }
}

/// Message describing a large spread between descriptor widths, if any.
pub fn size_imbalance(widths: &[(Method, usize)]) -> Option<String> {
    let max = widths.iter().max_by_key(|w| w.1)?;
    let min = widths.iter().min_by_key(|w| w.1)?;
    let ratio = max.1 as f64 / min.1.max(1) as f64;
    (ratio >= SIZE_IMBALANCE_RATIO).then(|| {
        format!(
            "{} ({}) is {ratio:.1}x wider than {} ({}); the wider descriptor may dominate",
            max.0.label(),
            max.1,
            min.0.label(),
            min.1
        )
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub te: TeConfig,
    pub selection: MethodSelection,
    pub aggregator: AggregatorKind,
    /// Number of linear layers in the classifier (ReLU between them).
    pub head_depth: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            backbone: BackboneConfig::paper(),
            te: TeConfig::paper(),
            selection: MethodSelection::proposed(),
            aggregator: AggregatorKind::Concat,
            head_depth: 1,
            head_hidden: 256,
        }
    }

    pub fn desk() -> Self {
        ModelConfig { backbone: BackboneConfig::desk(), te: TeConfig::desk(), ..Self::paper() }
    }

    pub fn head_widths(&self) -> Vec<(Method, usize)> {
        self.selection.methods().into_iter().map(|m| (m, self.te.output_len(m))).collect()
    }

    /// Aggregator arity, and a map large enough for fractal pooling.
    pub fn validate(&self) -> Result<usize> {
        let width = self.aggregated_width()?;
        if self.selection.contains(Method::Fap) {
            let f = &self.te.fractal;
            let side = self.backbone.out_resolution(self.backbone.input_resolution) * f.upsample;
            let largest = f.scales.iter().copied().max().unwrap_or(0);
            if side < 2 * largest {
                return Err(Error::Config(format!(
                    "fractal pooling sees a {side}x{side} surface, less than twice its largest box scale {largest}"
                )));
            }
        }
        Ok(width)
    }

    pub fn aggregated_width(&self) -> Result<usize> {
        self.aggregator.check(self.selection)?;
        let widths: Vec<usize> = self.head_widths().iter().map(|w| w.1).collect();
        self.aggregator.width(&widths)
    }
}

/// Fully connected classifier on the aggregated descriptor.
#[derive(Clone, Debug)]
pub struct FcHead {
    pub layers: Vec<Linear>,
}

impl FcHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        in_features: usize,
        n_classes: usize,
        depth: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 || n_classes == 0 || (depth > 1 && hidden == 0) {
            return Err(Error::Config("classifier depth, width and class count must be positive".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_features;
        for d in 0..depth {
            let out = if d + 1 == depth { n_classes } else { hidden };
            layers.push(Linear::new(store, &format!("fc{d}"), width, out, rng));
            width = out;
        }
        Ok(FcHead { layers })
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Backbone, the selected heads and the classifier.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub config: ModelConfig,
    pub n_classes: usize,
    pub backbone: Backbone,
    /// In [`Method::ALL`] order, restricted to the selection.
    pub heads: Vec<TeHead>,
    pub fc: FcHead,
}

impl EnsembleModel {
    pub fn new<S: Scalar>(config: ModelConfig, n_classes: usize, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        let width = config.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least two classes, got {n_classes}")));
        }
        let backbone = Backbone::new(config.backbone.clone(), store, rng)?;
        let c = config.backbone.out_channels();
        let heads = config
            .selection
            .methods()
            .into_iter()
            .map(|m| TeHead::new(m, &config.te, c, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let fc = FcHead::new(store, width, n_classes, config.head_depth, config.head_hidden, rng)?;
        if let Some(msg) = size_imbalance(&config.head_widths()) {
            log::warn!("{msg}");
        }
        Ok(EnsembleModel { config, n_classes, backbone, heads, fc })
    }

    /// Per-method descriptors for a batch of images.
    pub fn features<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, images: Var, mode: Mode) -> Result<Vec<(Method, Var)>> {
        let x_b = self.backbone.forward(tape, store, images, mode)?;
        self.heads
            .iter_mut()
            .map(|h| Ok((h.method(), h.forward(tape, store, x_b, mode)?)))
            .collect()
    }

    pub fn forward<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, images: Var, mode: Mode) -> Result<Var> {
        let feats: Vec<Var> = self.features(tape, store, images, mode)?.into_iter().map(|f| f.1).collect();
        let agg = match self.config.aggregator {
            AggregatorKind::Concat => aggregate_concat(tape, &feats)?,
            AggregatorKind::Bilinear => aggregate_bilinear(tape, &feats)?,
        };
        let width = tape.shape(agg)[1];
        if width != self.fc.in_features() {
            return Err(shape_err!("aggregated width {width} but the classifier expects {}", self.fc.in_features()));
        }
        self.fc.forward(tape, store, agg)
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_grid_and_masks() {
        let cells: Vec<_> = MethodSelection::grid().collect();
        assert_eq!(cells.len(), 15);
        assert_eq!(cells[0].methods(), vec![Method::DeepTen]);
        assert_eq!(MethodSelection::proposed().methods(), vec![Method::DeepTen, Method::Histogram, Method::Fap]);
        assert!(MethodSelection::from_mask(0).is_err());
        assert!(MethodSelection::new(&[]).is_err());
    }

    #[test]
    fn selection_text_round_trip() {
        let s: MethodSelection = "fap, deepten".parse().unwrap();
        assert_eq!(s.to_string(), "deepten,fap");
        assert!("".parse::<MethodSelection>().is_err());
    }

    #[test]
    fn bilinear_needs_two_methods() {
        assert!(AggregatorKind::Bilinear.check(MethodSelection::proposed()).is_err());
        let two = MethodSelection::new(&[Method::Histogram, Method::Fap]).unwrap();
        assert!(AggregatorKind::Bilinear.check(two).is_ok());
        assert_eq!(AggregatorKind::Bilinear.width(&[128, 16]).unwrap(), 2048);
        assert_eq!(AggregatorKind::Concat.width(&[128, 16]).unwrap(), 144);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let t = Tensor::new([2, 3], vec![1.0f32, 3.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(predict(&t), vec![1, 0]);
    }

    #[test]
    fn imbalance_is_flagged() {
        assert!(size_imbalance(&[(Method::DeepTen, 128), (Method::Fap, 16)]).is_some());
        assert!(size_imbalance(&[(Method::DeepTen, 128), (Method::Gap, 48)]).is_none());
    }
}
