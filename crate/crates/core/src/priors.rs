//! Class-conditional transition matrix and class frequency prior.
//!
//! The transition matrix averages surrogate score rows per noisy class over the
//! full training set; the prior counts noisy labels on the clean subset.

use rayon::prelude::*;

use crate::data::{validate_with_tolerance, Dataset, LabelSpace, ScoreMatrix, INGEST_ROW_SUM_TOL};
use crate::error::{Error, Result};

/// Additive smoothing applied to prior counts before normalizing.
pub const PRIOR_SMOOTHING: f64 = 0.5;

/// Rows accumulated per partial sum in the parallel estimator. Fixed so the
/// reduction tree does not depend on the number of worker threads.
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    values: Vec<Vec<f64>>,
    source_count: Vec<usize>,
    warnings: Vec<String>,
}

impl TransitionMatrix {
    /// Wraps an existing row-stochastic matrix (e.g. loaded from disk).
    pub fn from_rows(values: Vec<Vec<f64>>, source_count: Vec<usize>) -> Result<Self> {
        let c = values.len();
        if c < 2 {
            return Err(Error::invalid("transition matrix needs at least 2 classes"));
        }
        if source_count.len() != c {
            return Err(Error::invalid("source_count length differs from matrix size"));
        }
        for (row, r) in values.iter().enumerate() {
            if r.len() != c {
                return Err(Error::DimensionMismatch {
                    record: row,
                    expected: c,
                    got: r.len(),
                });
            }
            if let Some((col, &value)) = r
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0 + INGEST_ROW_SUM_TOL)
            {
                return Err(Error::InvalidEntry { row, col, value });
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > INGEST_ROW_SUM_TOL {
                return Err(Error::RowSum {
                    row,
                    sum,
                    tolerance: INGEST_ROW_SUM_TOL,
                });
            }
        }
        Ok(Self {
            values,
            source_count,
            warnings: Vec::new(),
        })
    }

    pub fn identity(num_classes: usize) -> Self {
        let values = (0..num_classes)
            .map(|i| (0..num_classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            values,
            source_count: vec![0; num_classes],
            warnings: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn source_count(&self) -> &[usize] {
        &self.source_count
    }

    /// Notes attached during estimation, e.g. classes absent from the labels.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    values: Vec<f64>,
    counts: Vec<usize>,
    total: usize,
}

impl ClassPrior {
    /// Builds the add-`PRIOR_SMOOTHING` prior from raw class counts.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("class prior needs at least one sample"));
        }
        if counts.len() < 2 {
            return Err(Error::invalid("class prior needs at least 2 classes"));
        }
        let denom = total as f64 + counts.len() as f64 * PRIOR_SMOOTHING;
        let mut values: Vec<f64> = counts
            .iter()
            .map(|&n| (n as f64 + PRIOR_SMOOTHING) / denom)
            .collect();
        let sum: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= sum);
        Ok(Self {
            values,
            counts,
            total,
        })
    }

    /// Restores a prior from stored values (e.g. a prior file). Values must be
    /// strictly positive and sum to one.
    pub fn from_parts(values: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if values.len() != counts.len() || values.len() < 2 {
            return Err(Error::invalid("prior values and counts must have equal length >= 2"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("prior values must be positive and finite"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > INGEST_ROW_SUM_TOL {
            return Err(Error::invalid(format!("prior sums to {sum}")));
        }
        let total = counts.iter().sum();
        Ok(Self {
            values,
            counts,
            total,
        })
    }

    /// Smoothed prior; every entry is strictly positive.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Unsmoothed frequencies `N'_j / N'`.
    pub fn raw(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&n| n as f64 / self.total as f64)
            .collect()
    }
}

fn check_inputs(dataset: &Dataset, scores: &ScoreMatrix) -> Result<()> {
    validate_with_tolerance(scores, dataset, INGEST_ROW_SUM_TOL).map(|_| ())
}

fn finish(sums: Vec<Vec<f64>>, counts: Vec<usize>) -> TransitionMatrix {
    let c = counts.len();
    let mut warnings = Vec::new();
    let values = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (row, &n))| {
            if n == 0 {
                warnings.push(format!(
                    "class {i} has no samples; its transition row is set to uniform"
                ));
                vec![1.0 / c as f64; c]
            } else {
                row.into_iter().map(|s| s / n as f64).collect()
            }
        })
        .collect();
    TransitionMatrix {
        values,
        source_count: counts,
        warnings,
    }
}

fn accumulate(dataset: &Dataset, scores: &ScoreMatrix, range: std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let c = dataset.num_classes();
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for i in range {
        let label = dataset.samples()[i].noisy_label;
        counts[label] += 1;
        for (acc, &q) in sums[label].iter_mut().zip(scores.row(i)) {
            *acc += q;
        }
    }
    (sums, counts)
}

/// Averages score rows per noisy class: `M[i][j] = mean q_k(j)` over samples
/// labeled `i`. Expects scores for the full dataset, not the clean subset.
pub fn estimate_transition_matrix(dataset: &Dataset, scores: &ScoreMatrix) -> Result<TransitionMatrix> {
    check_inputs(dataset, scores)?;
    let (sums, counts) = accumulate(dataset, scores, 0..dataset.len());
    Ok(finish(sums, counts))
}

/// Chunked variant of [`estimate_transition_matrix`]. Partial sums over
/// fixed-size chunks are combined by pairwise reduction in chunk order.
pub fn estimate_transition_matrix_parallel(dataset: &Dataset, scores: &ScoreMatrix) -> Result<TransitionMatrix> {
    check_inputs(dataset, scores)?;
    let n = dataset.len();
    let chunks: Vec<_> = (0..n.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|k| accumulate(dataset, scores, k * CHUNK_ROWS..((k + 1) * CHUNK_ROWS).min(n)))
        .collect();
    let (sums, counts) = pairwise_reduce(chunks);
    Ok(finish(sums, counts))
}

fn pairwise_reduce(mut parts: Vec<(Vec<Vec<f64>>, Vec<usize>)>) -> (Vec<Vec<f64>>, Vec<usize>) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((mut sa, mut ca)) = it.next() {
            if let Some((sb, cb)) = it.next() {
                for (ra, rb) in sa.iter_mut().zip(sb) {
                    ra.iter_mut().zip(rb).for_each(|(a, b)| *a += b);
                }
                ca.iter_mut().zip(cb).for_each(|(a, b)| *a += b);
            }
            next.push((sa, ca));
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Mean absolute entry-wise difference.
pub fn transition_matrix_error(estimated: &TransitionMatrix, reference: &[Vec<f64>]) -> Result<f64> {
    let c = estimated.num_classes();
    if reference.len() != c || reference.iter().any(|r| r.len() != c) {
        return Err(Error::invalid(format!(
            "reference matrix is not {c}x{c}"
        )));
    }
    for (row, r) in reference.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > INGEST_ROW_SUM_TOL {
            return Err(Error::RowSum {
                row,
                sum,
                tolerance: INGEST_ROW_SUM_TOL,
            });
        }
    }
    let total: f64 = estimated
        .values
        .iter()
        .zip(reference)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .sum();
    Ok(total / (c * c) as f64)
}

/// Frequency prior over the noisy labels of the clean subset.
pub fn compute_class_prior(clean_subset: &Dataset, label_space: &LabelSpace) -> Result<ClassPrior> {
    if clean_subset.is_empty() {
        return Err(Error::EmptySelection);
    }
    if clean_subset.num_classes() != label_space.num_classes() {
        return Err(Error::invalid("clean subset uses a different label space"));
    }
    let mut counts = vec![0usize; label_space.num_classes()];
    for s in clean_subset.samples() {
        counts[s.noisy_label] += 1;
    }
    ClassPrior::from_counts(counts)
}
