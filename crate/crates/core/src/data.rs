//! Shared data model: label space, samples, datasets and score matrices.
//!
//! Everything here is immutable once constructed. `true_label` is carried for
//! evaluation on synthetic benchmarks; selection and training code only reads
//! `noisy_label`.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Row-sum tolerance applied to externally supplied probability rows.
pub const INGEST_ROW_SUM_TOL: f64 = 1e-6;
/// Row-sum tolerance targeted by internally computed probability rows.
pub const INTERNAL_ROW_SUM_TOL: f64 = 1e-9;
pub const RENORMALIZE_SKIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::invalid("label space needs at least 2 classes"));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(Error::invalid("class names must be non-empty"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { class_names })
    }

    /// Label space with generated names `class_0 .. class_{C-1}`.
    pub fn with_classes(num_classes: usize) -> Result<Self> {
        Self::new((0..num_classes).map(|k| format!("class_{k}")).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub noisy_label: usize,
    pub true_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    label_space: LabelSpace,
    samples: Vec<Sample>,
    feature_dim: usize,
    has_ground_truth: bool,
}

impl Dataset {
    /// Validates and builds a dataset. Errors report the index of the
    /// offending sample.
    pub fn new(label_space: LabelSpace, samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("dataset must contain at least one sample"))?;
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let has_ground_truth = first.true_label.is_some();
        let num_classes = label_space.num_classes();
        let mut ids = HashSet::with_capacity(samples.len());
        for (record, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: feature_dim,
                    got: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed {
                    record,
                    reason: "non-finite feature".into(),
                });
            }
            if s.noisy_label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    record,
                    label: s.noisy_label,
                    num_classes,
                });
            }
            match s.true_label {
                Some(label) if label >= num_classes => {
                    return Err(Error::LabelOutOfRange {
                        record,
                        label,
                        num_classes,
                    })
                }
                Some(_) if !has_ground_truth => {
                    return Err(Error::Malformed {
                        record,
                        reason: "true labels must be present on all samples or none".into(),
                    })
                }
                None if has_ground_truth => {
                    return Err(Error::Malformed {
                        record,
                        reason: "true labels must be present on all samples or none".into(),
                    })
                }
                _ => {}
            }
            if !ids.insert(s.id) {
                return Err(Error::DuplicateId { record, id: s.id });
            }
        }
        Ok(Self {
            label_space,
            samples,
            feature_dim,
            has_ground_truth,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.num_classes()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn has_ground_truth(&self) -> bool {
        self.has_ground_truth
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    pub fn noisy_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.noisy_label).collect()
    }

    /// True labels, or an error when the dataset carries none.
    pub fn true_labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.true_label.ok_or(Error::MissingGroundTruth))
            .collect()
    }

    /// Keeps the samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("subset index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.label_space.clone(), samples)
    }

    /// Returns a copy with every noisy label replaced.
    pub fn with_noisy_labels(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid("label vector length differs from dataset"));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &l)| Sample {
                noisy_label: l,
                ..s.clone()
            })
            .collect();
        Self::new(self.label_space.clone(), samples)
    }
}

/// N×C surrogate predictions, one row per dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    sample_ids: Vec<u64>,
    values: Vec<Vec<f64>>,
    num_classes: usize,
}

impl ScoreMatrix {
    /// Shape checks only; probability checks happen in [`validate_score_matrix`].
    pub fn new(sample_ids: Vec<u64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if sample_ids.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} score rows",
                sample_ids.len(),
                values.len()
            )));
        }
        let num_classes = values.first().map_or(0, Vec::len);
        if num_classes < 2 {
            return Err(Error::invalid("score matrix needs at least 2 columns"));
        }
        for (row, r) in values.iter().enumerate() {
            if r.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    record: row,
                    expected: num_classes,
                    got: r.len(),
                });
            }
            if let Some((col, &value)) = r.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::InvalidEntry { row, col, value });
            }
        }
        Ok(Self {
            sample_ids,
            values,
            num_classes,
        })
    }

    /// Uniform 1/C rows for every id.
    pub fn uniform(sample_ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        let row = vec![1.0 / num_classes as f64; num_classes];
        let values = vec![row; sample_ids.len()];
        Self::new(sample_ids, values)
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.num_classes
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// Rescales rows to sum to one. Rows already within
    /// [`RENORMALIZE_SKIP_TOL`] of one are left bit-for-bit untouched.
    pub fn renormalize(&mut self) {
        for row in &mut self.values {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 && (sum - 1.0).abs() > RENORMALIZE_SKIP_TOL {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub rows: usize,
    pub max_row_sum_deviation: f64,
}

/// Checks that `scores` lines up with `dataset` row by row and that each row
/// is a probability vector within [`INGEST_ROW_SUM_TOL`].
pub fn validate_score_matrix(scores: &ScoreMatrix, dataset: &Dataset) -> Result<AlignmentReport> {
    validate_with_tolerance(scores, dataset, INGEST_ROW_SUM_TOL)
}

pub(crate) fn validate_with_tolerance(
    scores: &ScoreMatrix,
    dataset: &Dataset,
    tolerance: f64,
) -> Result<AlignmentReport> {
    if scores.rows() != dataset.len() {
        return Err(Error::RowCount {
            scores: scores.rows(),
            dataset: dataset.len(),
        });
    }
    if scores.cols() != dataset.num_classes() {
        return Err(Error::invalid(format!(
            "score matrix has {} columns, dataset has {} classes",
            scores.cols(),
            dataset.num_classes()
        )));
    }
    let mut max_dev = 0.0_f64;
    for (row, (sample, (&id, values))) in dataset
        .samples()
        .iter()
        .zip(scores.sample_ids.iter().zip(&scores.values))
        .enumerate()
    {
        if sample.id != id {
            return Err(Error::IdMismatch {
                row,
                expected: sample.id,
                got: id,
            });
        }
        if let Some((col, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0 + tolerance).contains(&v))
        {
            return Err(Error::InvalidEntry { row, col, value });
        }
        let sum: f64 = values.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev > tolerance {
            return Err(Error::RowSum {
                row,
                sum,
                tolerance,
            });
        }
        max_dev = max_dev.max(dev);
    }
    Ok(AlignmentReport {
        rows: scores.rows(),
        max_row_sum_deviation: max_dev,
    })
}

/// Validates against the ingest tolerance, then renormalizes in place.
pub fn ingest_scores(mut scores: ScoreMatrix, dataset: &Dataset) -> Result<ScoreMatrix> {
    validate_score_matrix(&scores, dataset)?;
    scores.renormalize();
    Ok(scores)
}
