//! Pearson correlation between descriptor dimensions, used to judge how much
//! two methods overlap on a batch.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::te::Method;
use crate::tensor::{Scalar, Tensor};

/// Standard deviations below this mark a dimension as constant.
const MIN_STD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    /// Indices of the columns that were kept.
    pub kept: Vec<usize>,
    /// Row-major `kept.len() x kept.len()`.
    pub values: Vec<f64>,
    /// Constant columns left out.
    pub excluded: usize,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }
}

/// Column-standardised copy of `[N, D]` features plus the kept column ids.
fn standardise<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let &[n, d] = x.shape() else {
        return Err(shape_err!("correlation needs [N, D] features, got {:?}", x.shape()));
    };
    if n < 2 {
        return Err(shape_err!("correlation needs at least two samples, got {n}"));
    }
    let mut cols = Vec::new();
    let mut kept = Vec::new();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x.data()[i * d + j].as_f64()).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if std > MIN_STD {
            cols.push(col.iter().map(|v| (v - mean) / std).collect());
            kept.push(j);
        }
    }
    let excluded = d - kept.len();
    Ok((cols, kept, excluded))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let r = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    r.clamp(-1.0, 1.0)
}

/// Symmetric matrix with unit diagonal over the non-constant columns.
pub fn correlation_matrix<S: Scalar>(x: &Tensor<S>) -> Result<CorrelationMatrix> {
    let (cols, kept, excluded) = standardise(x)?;
    let d = cols.len();
    let mut values = vec![0.0; d * d];
    for i in 0..d {
        values[i * d + i] = 1.0;
        for j in i + 1..d {
            let r = pearson(&cols[i], &cols[j]);
            values[i * d + j] = r;
            values[j * d + i] = r;
        }
    }
    Ok(CorrelationMatrix { kept, values, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossCorrelation {
    /// Mean |r| over every pair of dimensions, one from each side.
    pub mean_abs: f64,
    /// For each dimension the largest |r| with any dimension of the other
    /// side, averaged over both sides. A duplicated descriptor scores 1.
    pub mean_best_abs: f64,
    pub excluded_a: usize,
    pub excluded_b: usize,
}

/// Overlap between two descriptors of the same samples.
pub fn cross_correlation<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<CrossCorrelation> {
    if a.shape().first() != b.shape().first() {
        return Err(shape_err!("cross correlation over {:?} and {:?}", a.shape(), b.shape()));
    }
    let (ca, _, excluded_a) = standardise(a)?;
    let (cb, _, excluded_b) = standardise(b)?;
    if ca.is_empty() || cb.is_empty() {
        return Ok(CrossCorrelation { mean_abs: 0.0, mean_best_abs: 0.0, excluded_a, excluded_b });
    }
    let r: Vec<Vec<f64>> = ca.iter().map(|x| cb.iter().map(|y| pearson(x, y).abs()).collect()).collect();
    let mean_abs = r.iter().flatten().sum::<f64>() / (ca.len() * cb.len()) as f64;
    let best_a: f64 = r.iter().map(|row| row.iter().cloned().fold(0.0, f64::max)).sum();
    let best_b: f64 = (0..cb.len()).map(|j| r.iter().map(|row| row[j]).fold(0.0, f64::max)).sum();
    let mean_best_abs = (best_a + best_b) / (ca.len() + cb.len()) as f64;
    Ok(CrossCorrelation { mean_abs, mean_best_abs, excluded_a, excluded_b })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub a: Method,
    pub b: Method,
    pub summary: CrossCorrelation,
}

/// Every unordered pair of the given descriptors.
pub fn method_correlations<S: Scalar>(features: &[(Method, Tensor<S>)]) -> Result<Vec<PairCorrelation>> {
    let mut out = Vec::new();
    for (i, (ma, fa)) in features.iter().enumerate() {
        for (mb, fb) in &features[i + 1..] {
            out.push(PairCorrelation { a: *ma, b: *mb, summary: cross_correlation(fa, fb)? });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_columns_are_excluded() {
        let x = Tensor::new([3, 3], vec![1.0, 5.0, 2.0, 2.0, 5.0, 4.0, 3.0, 5.0, 6.0]).unwrap();
        let m = correlation_matrix(&x).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(m.kept, vec![0, 2]);
        assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_descriptor_scores_one() {
        let a = Tensor::new([4, 2], vec![1.0, 0.0, 2.0, 3.0, 0.5, -1.0, 4.0, 2.0]).unwrap();
        let s = cross_correlation(&a, &a).unwrap();
        assert!((s.mean_best_abs - 1.0).abs() < 1e-12);
        assert!(s.mean_abs < 1.0);
    }
}
