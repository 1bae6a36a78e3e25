//! Central-difference verification of backward rules.
//!
//! The function under test builds a scalar on a fresh [`Tape`] from the
//! parameters in a [`ParamStore`] and a list of input tensors. Each sampled
//! coordinate is perturbed by `±h` and `(f(x+h) - f(x-h)) / 2h` is compared
//! with the reverse-mode gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::backbone::ResidualBlock;
use crate::ensemble::FcHead;
use crate::error::Result;
use crate::nn::{uniform, Mode, ParamId, ParamStore};
use crate::te::{EncodingConfig, EncodingLayer, FractalConfig, FractalLayer, GapConfig, GapLayer, HistogramConfig, HistogramLayer};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates to probe; all are checked when fewer exist.
    pub max_coords: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, max_coords: 128, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Location of the worst coordinate, e.g. `param fc.weight[17]`.
    pub worst: Option<String>,
    /// Set when a non-finite value was met.
    pub failure: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Param(ParamId, usize),
    Input(usize, usize),
}

fn evaluate<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    Ok(tape.value(out).item())
}

pub fn grad_check<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mut f: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        failure: None,
        tolerance: cfg.tolerance,
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let analytic_inputs = match f(&mut tape, store, &vars).and_then(|loss| {
        if !tape.value(loss).item().is_finite() {
            return Err(crate::Error::Numerical("non-finite objective".into()));
        }
        let grads = tape.backward_into(loss, store)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect::<Vec<_>>())
    }) {
        Ok(g) => g,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };

    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if !p.frozen {
            coords.extend((0..p.value.len()).map(|i| Coord::Param(id, i)));
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|i| Coord::Input(k, i)));
    }
    if coords.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut inputs = inputs.to_vec();
    for coord in coords {
        let analytic = match coord {
            Coord::Param(id, i) => store.get(id).grad.data()[i],
            Coord::Input(k, i) => analytic_inputs[k].data()[i],
        };
        let probe = |delta: f64, store: &mut ParamStore<f64>, inputs: &mut Vec<Tensor<f64>>| {
            match coord {
                Coord::Param(id, i) => store.get_mut(id).value.data_mut()[i] += delta,
                Coord::Input(k, i) => inputs[k].data_mut()[i] += delta,
            }
        };
        let original = match coord {
            Coord::Param(id, i) => store.get(id).value.data()[i],
            Coord::Input(k, i) => inputs[k].data()[i],
        };
        probe(cfg.step, store, &mut inputs);
        let plus = evaluate(store, &inputs, &mut f);
        probe(-2.0 * cfg.step, store, &mut inputs);
        let minus = evaluate(store, &inputs, &mut f);
        match coord {
            Coord::Param(id, i) => store.get_mut(id).value.data_mut()[i] = original,
            Coord::Input(k, i) => inputs[k].data_mut()[i] = original,
        }
        let numeric = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p - m) / (2.0 * cfg.step),
            (Err(e), _) | (_, Err(e)) => {
                report.failure = Some(e.to_string());
                return report;
            }
            _ => {
                report.failure = Some(format!("non-finite objective near {}", describe(store, coord)));
                return report;
            }
        };
        if !analytic.is_finite() {
            report.failure = Some(format!("non-finite gradient at {}", describe(store, coord)));
            return report;
        }
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        report.coords_checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(describe(store, coord));
        }
    }
    report
}

/// Scalar objective `sum(y * probe)` with a fixed random probe, so that
/// every output coordinate contributes.
fn probe_sum(tape: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let z = tape.mul(y, p)?;
    Ok(tape.sum(z))
}

/// Checks every layer of the model in 64-bit on small random inputs:
/// histogram, encoding, fractal pooling, average pooling, a residual block
/// with a projection shortcut and a two-layer classifier.
pub fn layer_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    let mut reports = Vec::new();

    {
        let mut store = ParamStore::<f64>::new();
        let hcfg = HistogramConfig { n_bins: 4, reduced_channels: 4, groups: 4, downsample: 2, normalized: false };
        let layer = HistogramLayer::new(hcfg, 8, &mut store, &mut rng)?;
        let x = uniform(&[2, 8, 6, 6], -1.0, 1.0, &mut rng);
        let probe = uniform(&[2, 16], -1.0, 1.0, &mut rng);
        reports.push(grad_check("histogram", &mut store, &[x], |t, s, v| {
            let y = layer.forward(t, s, v[0])?;
            probe_sum(t, y, &probe)
        }, cfg));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let mut layer = EncodingLayer::new(EncodingConfig { n_codes: 3, out_features: 5 }, 4, &mut store, &mut rng)?;
        let x = uniform(&[3, 4, 3, 3], -1.0, 1.0, &mut rng);
        let probe = uniform(&[3, 5], -1.0, 1.0, &mut rng);
        reports.push(grad_check("encoding", &mut store, &[x], |t, s, v| {
            let y = layer.forward(t, s, v[0], Mode::Train)?;
            probe_sum(t, y, &probe)
        }, cfg));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let fcfg = FractalConfig { n_bins: 6, ..FractalConfig::default() };
        let layer = FractalLayer::new(fcfg, &mut store)?;
        let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let probe = uniform(&[2, 6], -1.0, 1.0, &mut rng);
        reports.push(grad_check("fractal", &mut store, &[x], |t, s, v| {
            let y = layer.forward(t, s, v[0])?;
            probe_sum(t, y, &probe)
        }, cfg));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let mut layer = GapLayer::new(GapConfig { pool_kernel: Some(3), out_features: 6 }, 8, &mut store, &mut rng)?;
        let x = uniform(&[3, 8, 3, 3], -1.0, 1.0, &mut rng);
        let probe = uniform(&[3, 6], -1.0, 1.0, &mut rng);
        reports.push(grad_check("gap", &mut store, &[x], |t, s, v| {
            let y = layer.forward(t, s, v[0], Mode::Train)?;
            probe_sum(t, y, &probe)
        }, cfg));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let mut block = ResidualBlock::new(&mut store, "block", 3, 4, 2, &mut rng);
        let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let probe = uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        reports.push(grad_check("backbone block", &mut store, &[x], |t, s, v| {
            let y = block.forward(t, s, v[0], Mode::Train)?;
            probe_sum(t, y, &probe)
        }, cfg));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let head = FcHead::new(&mut store, 12, 4, 2, 8, &mut rng)?;
        let x = uniform(&[3, 12], -1.0, 1.0, &mut rng);
        let labels = [0usize, 3, 1];
        reports.push(grad_check("fc head", &mut store, &[x], |t, s, v| {
            let logits = head.forward(t, s, v[0])?;
            t.softmax_cross_entropy(logits, &labels)
        }, cfg));
    }
    Ok(reports)
}

fn describe(store: &ParamStore<f64>, c: Coord) -> String {
    match c {
        Coord::Param(id, i) => format!("param {}[{i}]", store.get(id).name),
        Coord::Input(k, i) => format!("input {k}[{i}]"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 6, 4, &mut rng);
        let x = crate::nn::uniform(&[3, 6], -1.0, 1.0, &mut rng);
        let probe = crate::nn::uniform::<f64>(&[3, 4], -1.0, 1.0, &mut rng);
        let cfg = GradCheckConfig { tolerance: 1e-7, max_coords: 1000, ..Default::default() };
        let report = grad_check(
            "linear",
            &mut store,
            &[x],
            |tape, store, xs| {
                let y = fc.forward(tape, store, xs[0])?;
                let p = tape.constant(probe.clone());
                let z = tape.mul(y, p)?;
                Ok(tape.sum(z))
            },
            &cfg,
        );
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coords_checked, 6 * 4 + 4 + 18);
    }

    #[test]
    fn layer_suite_passes() {
        for r in layer_suite(&GradCheckConfig::default()).unwrap() {
            assert!(r.passed() && r.coords_checked >= 100, "{r:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::from_fn([5], |i| 0.3 + i as f64 * 0.1);
        let report = grad_check(
            "bad square",
            &mut store,
            &[x],
            |tape, _, xs| {
                let v = tape.value(xs[0]).map(|a| a * a);
                let y = tape.record(&[xs[0]], v, |ctx| {
                    vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, a| g * 2.0 * a * 1.01).unwrap())]
                });
                Ok(tape.sum(y))
            },
            &GradCheckConfig::default(),
        );
        assert!(!report.passed());
        assert!(report.max_rel_error > 1e-4);
        assert!(report.failure.is_none());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::full([2], 1000.0);
        let report = grad_check(
            "overflow",
            &mut store,
            &[x],
            |tape, _, xs| {
                let e = tape.exp(xs[0]);
                Ok(tape.sum(e))
            },
            &GradCheckConfig::default(),
        );
        assert!(report.failure.is_some());
        assert!(!report.passed());
    }
}
