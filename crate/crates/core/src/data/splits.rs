use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Train and test sample indices of one evaluation round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Disjoint, covering `0..n`, and both sides nonempty.
    pub fn check(&self, n: usize) -> std::result::Result<(), String> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err("train and test sides must both be nonempty".into());
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            match seen.get_mut(i) {
                None => return Err(format!("index {i} out of range for {n} samples")),
                Some(true) => return Err(format!("index {i} appears twice")),
                Some(s) => *s = true,
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("split does not cover every sample".into());
        }
        Ok(())
    }
}

/// `n_splits` independent shuffles, each keeping `round(N * train_fraction)`
/// samples for training. Split `k` is seeded by `seed + k`.
pub fn split_random(manifest: &mut DatasetManifest, n_splits: usize, train_fraction: f64, seed: u64) -> Result<()> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} sample(s)")));
    }
    if n_splits == 0 || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need at least one split and a train fraction in (0, 1), got {n_splits} and {train_fraction}"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    manifest.splits = (0..n_splits as u64)
        .map(|k| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(k)));
            let test = idx.split_off(n_train);
            Split { train: idx, test }
        })
        .collect();
    Ok(())
}

fn read_list(path: &Path, index: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            index
                .get(l)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("{} lists unknown image '{l}'", path.display())))
        })
        .collect()
}

/// Reads `splits/<k>_train.txt` and `splits/<k>_test.txt` pairs. Returns no
/// splits when the directory is absent.
pub fn read_split_files(root: &Path, manifest: &DatasetManifest) -> Result<Vec<Split>> {
    let dir = root.join("splits");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let index: HashMap<&str, usize> = manifest.samples.iter().enumerate().map(|(i, s)| (s.source.as_str(), i)).collect();
    let mut ids: Vec<u64> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix("_train.txt")?.parse().ok())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    for k in ids {
        let train = read_list(&dir.join(format!("{k}_train.txt")), &index)?;
        let test_path = dir.join(format!("{k}_test.txt"));
        if !test_path.exists() {
            return Err(Error::NotFound(test_path));
        }
        let test = read_list(&test_path, &index)?;
        let mut seen = HashSet::new();
        if let Some(dup) = train.iter().chain(&test).find(|&&i| !seen.insert(i)) {
            return Err(Error::InvalidArgument(format!("split {k} lists '{}' twice", manifest.samples[*dup].source)));
        }
        out.push(Split { train, test });
    }
    Ok(out)
}
