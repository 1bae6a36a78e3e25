//! Random-forest regression on binary presence features, and method
//! importance derived from it.
//!
//! Trees grow to full depth on bootstrap resamples. Every feature is tried
//! at every node, in a random order so that equally good splits are chosen
//! at random; a split is kept only if it strictly reduces the squared error.
//! A feature's importance in a tree is the total squared-error reduction of
//! its splits, normalised over the tree. Forest importance is the mean over
//! trees, renormalised to sum to one.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::rng::stream;
use crate::te::Method;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split { feature: usize, absent: Box<Node>, present: Box<Node> },
}

impl Node {
    fn predict(&self, x: &[bool]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, absent, present } => {
                if x[*feature] {
                    present.predict(x)
                } else {
                    absent.predict(x)
                }
            }
        }
    }
}

fn sse(rows: &[usize], y: &[f64]) -> f64 {
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    rows.iter().map(|&r| (y[r] - mean).powi(2)).sum()
}

fn grow(rows: &[usize], x: &[Vec<bool>], y: &[f64], importance: &mut [f64], rng: &mut impl Rng) -> Node {
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    let parent = sse(rows, y);
    if parent <= 0.0 {
        return Node::Leaf(mean);
    }
    let mut features: Vec<usize> = (0..x[0].len()).collect();
    features.shuffle(rng);
    let mut best: Option<(usize, f64)> = None;
    for &f in &features {
        let (on, off): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][f]);
        if on.is_empty() || off.is_empty() {
            continue;
        }
        let gain = parent - sse(&on, y) - sse(&off, y);
        if gain > 1e-12 * parent.max(1.0) && best.is_none_or(|(_, g)| gain > g) {
            best = Some((f, gain));
        }
    }
    let Some((feature, gain)) = best else {
        return Node::Leaf(mean);
    };
    importance[feature] += gain;
    let (on, off): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][feature]);
    Node::Split {
        feature,
        absent: Box::new(grow(&off, x, y, importance, rng)),
        present: Box::new(grow(&on, x, y, importance, rng)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<Node>,
    /// Mean of the per-tree normalised importances, renormalised.
    pub importances: Vec<f64>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<bool>], y: &[f64], n_trees: usize, seed: u64) -> Result<Self> {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        if n < 2 || d == 0 || y.len() != n || x.iter().any(|r| r.len() != d) || n_trees == 0 {
            return Err(arg_err!("forest needs at least two rows of equal width, matching targets and a tree"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(arg_err!("targets must be finite"));
        }
        let mut trees = Vec::with_capacity(n_trees);
        let mut total = vec![0.0; d];
        for t in 0..n_trees {
            let mut rng = stream(&[seed, t as u64]);
            let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut imp = vec![0.0; d];
            trees.push(grow(&rows, x, y, &mut imp, &mut rng));
            let s: f64 = imp.iter().sum();
            if s > 0.0 {
                total.iter_mut().zip(&imp).for_each(|(a, b)| *a += b / s);
            }
        }
        let s: f64 = total.iter().sum();
        let importances = if s > 0.0 { total.iter().map(|v| v / s).collect() } else { vec![1.0 / d as f64; d] };
        Ok(RandomForest { trees, importances })
    }

    pub fn predict(&self, x: &[bool]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Method presence rows in [`Method::ALL`] order.
pub fn design_row(methods: &[Method]) -> Vec<bool> {
    Method::ALL.iter().map(|m| methods.contains(m)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub methods: Vec<Method>,
    /// Mean over seeds, summing to one.
    pub importances: Vec<f64>,
    pub per_seed: Vec<Vec<f64>>,
    pub seed_rankings: Vec<Vec<Method>>,
    /// Most frequent ordering across seeds.
    pub ranking: Vec<Method>,
    /// How many seeds produced `ranking`.
    pub ranking_votes: usize,
    pub n_trees: usize,
    pub seeds: Vec<u64>,
    /// Set when the targets are constant and importances are uniform by
    /// convention.
    pub degenerate: bool,
}

impl ImportanceReport {
    pub fn importance(&self, m: Method) -> f64 {
        self.methods.iter().position(|&x| x == m).map_or(0.0, |i| self.importances[i])
    }

    /// 1-based position of `m` in the majority ranking.
    pub fn rank(&self, m: Method) -> usize {
        self.ranking.iter().position(|&x| x == m).map_or(0, |i| i + 1)
    }
}

fn ranking(methods: &[Method], imp: &[f64]) -> Vec<Method> {
    let mut idx: Vec<usize> = (0..methods.len()).collect();
    idx.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| methods[i]).collect()
}

/// Fits one forest per seed on the presence design and ranks the methods.
pub fn rf_importance(rows: &[(Vec<Method>, f64)], n_trees: usize, seeds: &[u64]) -> Result<ImportanceReport> {
    if seeds.is_empty() {
        return Err(arg_err!("at least one seed is required"));
    }
    let x: Vec<Vec<bool>> = rows.iter().map(|(m, _)| design_row(m)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut patterns = x.clone();
    patterns.sort();
    if patterns.windows(2).any(|w| w[0] == w[1]) {
        return Err(arg_err!("design rows must have distinct method patterns"));
    }
    let methods = Method::ALL.to_vec();
    let d = methods.len();
    let degenerate = y.iter().all(|&v| v == y[0]);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        if degenerate {
            per_seed.push(vec![1.0 / d as f64; d]);
        } else {
            per_seed.push(RandomForest::fit(&x, &y, n_trees, seed)?.importances);
        }
    }
    let mut importances = vec![0.0; d];
    for imp in &per_seed {
        importances.iter_mut().zip(imp).for_each(|(a, b)| *a += b / seeds.len() as f64);
    }
    let seed_rankings: Vec<Vec<Method>> = per_seed.iter().map(|imp| ranking(&methods, imp)).collect();

    let mut votes: HashMap<&[Method], usize> = HashMap::new();
    for r in &seed_rankings {
        *votes.entry(r.as_slice()).or_default() += 1;
    }
    let top = votes.values().copied().max().unwrap_or(0);
    let mean_order = ranking(&methods, &importances);
    // Among equally frequent orderings prefer the mean-importance one, then
    // the earliest seed.
    let ranking = if votes.get(mean_order.as_slice()) == Some(&top) {
        mean_order
    } else {
        seed_rankings.iter().find(|r| votes[r.as_slice()] == top).cloned().unwrap_or(mean_order)
    };
    Ok(ImportanceReport {
        methods,
        importances,
        per_seed,
        seed_rankings,
        ranking,
        ranking_votes: top,
        n_trees,
        seeds: seeds.to_vec(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::MethodSelection;

    fn grid_rows(f: impl Fn(&[Method]) -> f64) -> Vec<(Vec<Method>, f64)> {
        MethodSelection::grid().map(|s| (s.methods(), f(&s.methods()))).collect()
    }

    #[test]
    fn single_informative_feature() {
        let rows = grid_rows(|m| if m.contains(&Method::DeepTen) { 1.0 } else { 0.0 });
        let r = rf_importance(&rows, 100, &[0, 1, 2]).unwrap();
        assert!(r.importance(Method::DeepTen) >= 0.95, "{:?}", r.importances);
        assert_eq!(r.ranking[0], Method::DeepTen);
    }

    #[test]
    fn constant_target_is_degenerate() {
        let r = rf_importance(&grid_rows(|_| 70.0), 10, &[0]).unwrap();
        assert!(r.degenerate);
        assert!(r.importances.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn duplicate_patterns_are_rejected() {
        let rows = vec![(vec![Method::Gap], 1.0), (vec![Method::Gap], 2.0)];
        assert!(rf_importance(&rows, 10, &[0]).is_err());
    }

    #[test]
    fn forest_fits_training_rows() {
        let rows = grid_rows(|m| m.len() as f64);
        let x: Vec<Vec<bool>> = rows.iter().map(|r| design_row(&r.0)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let f = RandomForest::fit(&x, &y, 50, 4).unwrap();
        let err: f64 = x.iter().zip(&y).map(|(r, t)| (f.predict(r) - t).abs()).sum::<f64>() / 15.0;
        assert!(err < 0.5, "{err}");
    }
}
