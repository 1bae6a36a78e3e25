//! SGD with momentum, learning-rate schedules and the train/evaluate loop.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{DatasetManifest, Split, Transform};
use crate::ensemble::{predict, EnsembleModel};
use crate::error::{arg_err, Error, Result};
use crate::nn::{Mode, ParamStore};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Cosine,
    CosineWarmRestarts,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Cosine => "cosine",
            Scheduler::CosineWarmRestarts => "cosine_warm_restarts",
        })
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Scheduler::Cosine),
            "cosine_warm_restarts" | "warm_restarts" | "warm" => Ok(Scheduler::CosineWarmRestarts),
            other => Err(Error::Config(format!("unknown scheduler '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    /// First period of the warm-restart schedule, in epochs.
    pub t0: usize,
    /// Period growth factor after each restart.
    pub t_mult: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
            scheduler: Scheduler::CosineWarmRestarts,
            t0: 10,
            t_mult: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("need at least one epoch and a batch size of at least 2".into()));
        }
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config(format!("learning rates must satisfy 0 <= lr_min <= lr, lr > 0 (got {} / {})", self.lr_min, self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::Config("warm-restart period and multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at (possibly fractional) epoch `t`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let (pos, period) = match self.scheduler {
            Scheduler::Cosine => (t, self.epochs as f64),
            Scheduler::CosineWarmRestarts => {
                let (mut start, mut period) = (0.0, self.t0 as f64);
                while t >= start + period {
                    start += period;
                    period *= self.t_mult as f64;
                }
                (t - start, period)
            }
        };
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * pos / period).cos())
    }
}

/// The published per-dataset protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Kth,
    Fmd,
    Dtd,
    Minc,
    Gtos,
    GtosMobile,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [Protocol::Kth, Protocol::Fmd, Protocol::Dtd, Protocol::Minc, Protocol::Gtos, Protocol::GtosMobile];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Kth => "kth",
            Protocol::Fmd => "fmd",
            Protocol::Dtd => "dtd",
            Protocol::Minc => "minc",
            Protocol::Gtos => "gtos",
            Protocol::GtosMobile => "gtos-mobile",
        }
    }

    pub fn train_config(self) -> TrainConfig {
        use Scheduler::*;
        let (epochs, batch_size, lr, scheduler) = match self {
            Protocol::Kth => (30, 32, 5e-3, Cosine),
            Protocol::Fmd => (30, 16, 1e-3, CosineWarmRestarts),
            Protocol::Dtd => (30, 64, 1e-2, Cosine),
            Protocol::Minc => (20, 64, 5e-3, CosineWarmRestarts),
            Protocol::Gtos => (20, 64, 5e-3, Cosine),
            Protocol::GtosMobile => (20, 128, 5e-2, CosineWarmRestarts),
        };
        TrainConfig { epochs, batch_size, lr, scheduler, ..TrainConfig::default() }
    }

    pub fn five_crop(self) -> bool {
        matches!(self, Protocol::Dtd | Protocol::Gtos)
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == key || (key == "gtos-m" && *p == Protocol::GtosMobile))
            .ok_or_else(|| Error::Config(format!("unknown protocol '{s}'")))
    }
}

/// Momentum SGD: `v <- mu v + g`, `w <- w - lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<S: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<S>>>,
    pub steps: usize,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new(), steps: 0 }
    }

    /// Applies one update from the gradients held in the store. Nothing is
    /// changed if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if !p.frozen && !p.grad.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in {} (parameter {})", p.name, id.index())));
            }
        }
        self.velocity.resize(store.len(), None);
        let (mu, wd, lr) = (S::c(self.momentum), S::c(self.weight_decay), S::c(lr));
        for (p, slot) in store.iter_mut().zip(&mut self.velocity) {
            if p.frozen {
                continue;
            }
            let v = slot.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                let g = g + wd * *w;
                *vel = mu * *vel + g;
                *w -= lr * *vel;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub final_test_acc: f64,
}

fn batch_tensor(views: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack(&views)
}

/// Trains on `split.train`, evaluating on `split.test` after each epoch.
/// `on_epoch` sees every epoch's metrics as they are produced.
pub fn train(
    model: &mut EnsembleModel,
    store: &mut ParamStore<f32>,
    manifest: &DatasetManifest,
    split: &Split,
    transform: &Transform,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.check(manifest.len()).map_err(|e| arg_err!("{e}"))?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch as f64);
        let mut rng = stream(&[cfg.seed, epoch as u64]);
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::new();
            let mut labels = Vec::new();
            for &i in chunk {
                let s = &manifest.samples[i];
                let v = transform.train_views(&s.pixels, &mut rng)?;
                labels.extend(std::iter::repeat_n(s.label, v.len()));
                views.extend(v);
            }
            let mut tape = Tape::new();
            let x = tape.input(batch_tensor(views)?);
            let logits = model.forward(&mut tape, store, x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            store.zero_grad();
            tape.backward_into(loss, store)?;
            opt.step(store, lr)?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(arg_err!("training split has fewer than two samples"));
        }
        let test_acc = evaluate(model, store, manifest, &split.test, transform, cfg.batch_size)?;
        let m = EpochMetrics { epoch: epoch + 1, lr, train_loss: loss_sum / seen as f64, test_acc };
        log::info!("epoch {:>3}  lr {:.3e}  loss {:.4}  test {:.2}%", m.epoch, m.lr, m.train_loss, m.test_acc);
        on_epoch(&m)?;
        history.push(m);
    }
    let final_test_acc = history.last().map(|m| m.test_acc).unwrap_or(0.0);
    Ok(TrainOutcome { history, final_test_acc })
}

/// Class logits per sample, averaged over the evaluation views.
pub fn predict_logits(
    model: &mut EnsembleModel,
    store: &ParamStore<f32>,
    manifest: &DatasetManifest,
    indices: &[usize],
    transform: &Transform,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    if indices.is_empty() {
        return Err(arg_err!("cannot evaluate an empty sample set"));
    }
    let k = model.n_classes;
    let per = transform.views_per_image(false);
    let mut out = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut views = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            views.extend(transform.eval_views(&manifest.samples[i].pixels)?);
        }
        let mut tape = Tape::new();
        let x = tape.input(batch_tensor(views)?);
        let logits = model.forward(&mut tape, store, x, Mode::Eval)?;
        for img in tape.value(logits).data().chunks(per * k) {
            let mut avg = vec![0.0f32; k];
            for view in img.chunks(k) {
                avg.iter_mut().zip(view).for_each(|(a, &v)| *a += v);
            }
            out.extend(avg.into_iter().map(|a| a / per as f32));
        }
    }
    Tensor::new([indices.len(), k], out)
}

/// Percentage of correctly classified samples.
pub fn evaluate(
    model: &mut EnsembleModel,
    store: &ParamStore<f32>,
    manifest: &DatasetManifest,
    indices: &[usize],
    transform: &Transform,
    batch_size: usize,
) -> Result<f64> {
    let logits = predict_logits(model, store, manifest, indices, transform, batch_size)?;
    let correct = predict(&logits).iter().zip(indices).filter(|(p, &i)| **p == manifest.samples[i].label).count();
    Ok(accuracy(correct, indices.len()))
}

pub fn accuracy(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(arg_err!("nothing to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub const METRICS_HEADER: &str = "run_id,epoch,lr,train_loss,test_acc";

pub fn metrics_row(run_id: &str, m: &EpochMetrics) -> String {
    format!("{run_id},{},{:.9e},{:.9e},{:.6}", m.epoch, m.lr, m.train_loss, m.test_acc)
}

/// Appends rows to a metrics file, writing the header if the file is new.
pub fn append_metrics(path: &Path, run_id: &str, rows: &[EpochMetrics]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for m in rows {
        text.push_str(&metrics_row(run_id, m));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_momentum_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros([1]));
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            store.get_mut(id).grad.fill(1.0);
            opt.step(&mut store, 0.1).unwrap();
        }
        assert!((store.get(id).value.item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::ones([2]));
        store.get_mut(id).grad = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
        assert!(Sgd::new(0.9, 0.0).step(&mut store, 0.1).is_err());
        assert_eq!(store.get(id).value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn schedules() {
        let cos = TrainConfig { lr: 0.1, epochs: 10, scheduler: Scheduler::Cosine, ..TrainConfig::default() };
        assert_eq!(cos.lr_at(0.0), 0.1);
        assert!((cos.lr_at(5.0) - 0.05).abs() < 1e-15);
        let warm = TrainConfig { lr: 0.1, t0: 10, t_mult: 2, ..TrainConfig::default() };
        assert!(warm.lr_at(9.999) < 1e-6);
        assert_eq!(warm.lr_at(10.0), 0.1);
        assert_eq!(warm.lr_at(30.0), 0.1);
        assert!((warm.lr_at(20.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn population_std() {
        assert_eq!(aggregate(&[80.0, 90.0]).unwrap(), (85.0, 5.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn published_protocols() {
        let fmd = Protocol::Fmd.train_config();
        assert_eq!((fmd.epochs, fmd.batch_size, fmd.lr), (30, 16, 1e-3));
        assert!(Protocol::Dtd.five_crop() && Protocol::Gtos.five_crop() && !Protocol::Kth.five_crop());
        assert_eq!("GTOS_M".parse::<Protocol>().unwrap(), Protocol::GtosMobile);
    }
}
