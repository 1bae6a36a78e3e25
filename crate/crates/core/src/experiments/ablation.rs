//! Training selections across splits, and the grid of all fifteen.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_random, DatasetManifest, Transform};
use crate::ensemble::{EnsembleModel, MethodSelection};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{derive_seed, stream};
use crate::training::{aggregate, train, EpochMetrics, TrainConfig};

/// Stream ids below the master seed.
const SPLIT_STREAM: u64 = 0x5_9117;
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub split: usize,
    pub run_id: String,
    pub history: Vec<EpochMetrics>,
    pub test_acc: f64,
}

/// All splits of one selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub selection: MethodSelection,
    pub splits: Vec<SplitRun>,
}

impl CellRun {
    pub fn accuracies(&self) -> Vec<f64> {
        self.splits.iter().map(|s| s.test_acc).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub selection: MethodSelection,
    pub dataset: String,
    pub split_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// The DeepTEN + Histogram + FAP combination.
    pub proposed: bool,
    pub error: Option<String>,
}

impl AblationCell {
    pub fn from_run(run: &CellRun, dataset: &str) -> Result<Self> {
        let accs = run.accuracies();
        let (mean, std) = aggregate(&accs)?;
        Ok(AblationCell {
            selection: run.selection,
            dataset: dataset.to_string(),
            split_accuracies: accs,
            mean,
            std,
            proposed: run.selection == MethodSelection::proposed(),
            error: None,
        })
    }

    fn failed(selection: MethodSelection, dataset: &str, err: &Error) -> Self {
        AblationCell {
            selection,
            dataset: dataset.to_string(),
            split_accuracies: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            proposed: selection == MethodSelection::proposed(),
            error: Some(err.to_string()),
        }
    }
}

/// Attaches random splits when the dataset did not bring its own.
pub fn ensure_splits(manifest: &mut DatasetManifest, cfg: &RunConfig) -> Result<()> {
    if manifest.splits.is_empty() {
        split_random(manifest, cfg.data.n_splits, cfg.data.train_fraction, derive_seed(&[cfg.seed, SPLIT_STREAM]))?;
    }
    manifest.validate()
}

pub fn run_id(selection: MethodSelection, split: usize) -> String {
    format!("m{:02}-s{split}", selection.mask())
}

/// Trains and evaluates `selection` on every split of the manifest. Each
/// split draws its initialisation and its batches from streams derived from
/// the master seed, the selection mask and the split index.
pub fn run_selection(manifest: &DatasetManifest, cfg: &RunConfig, selection: MethodSelection) -> Result<CellRun> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.selection = selection;
    model_cfg.aggregated_width()?;
    let mask = selection.mask() as u64;
    let mut splits = Vec::with_capacity(manifest.splits.len());
    for (k, split) in manifest.splits.iter().enumerate() {
        let transform = Transform::fit(cfg.augment.clone(), manifest, &split.train)?;
        let mut store = ParamStore::<f32>::new();
        let mut init = stream(&[cfg.seed, mask, k as u64, INIT_STREAM]);
        let mut model = EnsembleModel::new(model_cfg.clone(), manifest.n_classes(), &mut store, &mut init)?;
        let tc = TrainConfig { seed: derive_seed(&[cfg.seed, mask, k as u64, TRAIN_STREAM]), ..cfg.train.clone() };
        let id = run_id(selection, k);
        log::info!("training {id} ({selection})");
        let outcome = train(&mut model, &mut store, manifest, split, &transform, &tc, |_| Ok(()))?;
        splits.push(SplitRun { split: k, run_id: id, test_acc: outcome.final_test_acc, history: outcome.history });
    }
    Ok(CellRun { selection, splits })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: String,
    run: CellRun,
}

fn checkpoint_path(dir: &Path, selection: MethodSelection) -> PathBuf {
    dir.join(format!("cell_{:02}.json", selection.mask()))
}

fn load_checkpoint(dir: &Path, selection: MethodSelection, config: &str) -> Option<CellRun> {
    let text = std::fs::read_to_string(checkpoint_path(dir, selection)).ok()?;
    let ck: Checkpoint = serde_json::from_str(&text).ok()?;
    (ck.config == config).then_some(ck.run)
}

fn save_checkpoint(dir: &Path, run: &CellRun, config: &str) -> Result<()> {
    let path = checkpoint_path(dir, run.selection);
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(&Checkpoint { config: config.to_string(), run: run.clone() })?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    /// In ascending mask order.
    pub cells: Vec<AblationCell>,
    /// Successful runs, aligned with `cells`.
    pub runs: Vec<Option<CellRun>>,
}

/// Runs all fifteen selections on up to `cfg.workers` threads. Finished
/// cells are checkpointed under `checkpoints` and reused on a rerun with the
/// same configuration. A failing cell is recorded and the grid continues.
pub fn run_ablation(manifest: &DatasetManifest, cfg: &RunConfig, dataset: &str, checkpoints: Option<&Path>) -> Result<AblationResult> {
    if manifest.splits.is_empty() {
        return Err(Error::InvalidArgument("the dataset has no splits".into()));
    }
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let config_text = cfg.to_text();
    let grid: Vec<MethodSelection> = MethodSelection::grid().collect();
    let results: Mutex<Vec<Option<Result<CellRun>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&sel) = grid.get(i) else { break };
        let res = match checkpoints.and_then(|d| load_checkpoint(d, sel, &config_text)) {
            Some(run) => {
                log::info!("cell {sel} restored from checkpoint");
                Ok(run)
            }
            None => run_selection(manifest, cfg, sel).and_then(|run| {
                if let Some(d) = checkpoints {
                    save_checkpoint(d, &run, &config_text)?;
                }
                Ok(run)
            }),
        };
        if let Err(e) = &res {
            log::warn!("cell {sel} failed: {e}");
        }
        results.lock().unwrap()[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 1..cfg.workers.min(grid.len()) {
            s.spawn(work);
        }
        work();
    });
    let mut cells = Vec::with_capacity(grid.len());
    let mut runs = Vec::with_capacity(grid.len());
    for (sel, res) in grid.into_iter().zip(results.into_inner().unwrap()) {
        match res.expect("every cell visited") {
            Ok(run) => {
                cells.push(AblationCell::from_run(&run, dataset)?);
                runs.push(Some(run));
            }
            Err(e) => {
                cells.push(AblationCell::failed(sel, dataset, &e));
                runs.push(None);
            }
        }
    }
    Ok(AblationResult { cells, runs })
}
