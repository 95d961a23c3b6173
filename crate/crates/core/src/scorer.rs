//! Zero-shot surrogate scoring: temperature-scaled softmax over cosine
//! similarities between sample embeddings and per-class text embeddings.
//!
//! Real surrogate outputs can bypass this module entirely through a score
//! file; [`ScorerSource`] covers both routes.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::data::{ingest_scores, Dataset, ScoreMatrix};
use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// One embedding per class, produced by a single prompt variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingBank {
    embeddings: Vec<Vec<f64>>,
    prompt_id: String,
}

impl ClassEmbeddingBank {
    pub fn new(embeddings: Vec<Vec<f64>>, prompt_id: impl Into<String>) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Vec::len);
        if embeddings.len() < 2 || dim == 0 {
            return Err(Error::invalid(
                "embedding bank needs at least 2 classes of positive dimension",
            ));
        }
        for (k, e) in embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::DimensionMismatch {
                    record: k,
                    expected: dim,
                    got: e.len(),
                });
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("class embedding {k}"),
                });
            }
            if norm(e) == 0.0 {
                return Err(Error::ZeroNorm { index: k });
            }
        }
        Ok(Self {
            embeddings,
            prompt_id: prompt_id.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerConfig {
    temperature: f64,
}

impl ScorerConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Embeddings living in the surrogate's space, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Where a score matrix comes from.
#[derive(Debug, Clone)]
pub enum ScorerSource {
    /// Cosine-softmax against `bank`. Uses the dataset's own features unless
    /// `embeddings` supplies vectors from a different space.
    Cosine {
        bank: ClassEmbeddingBank,
        config: ScorerConfig,
        embeddings: Option<EmbeddingSet>,
    },
    /// Precomputed scores on disk.
    File(PathBuf),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `cosines / temperature` with max subtraction.
pub(crate) fn tempered_softmax(cosines: &[f64], temperature: f64) -> Vec<f64> {
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = cosines
        .iter()
        .map(|c| ((c - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Cosine similarities of one embedding against every class embedding.
pub fn cosine_row(embedding: &[f64], bank: &ClassEmbeddingBank) -> Vec<f64> {
    let n = norm(embedding);
    bank.embeddings
        .iter()
        .map(|t| dot(embedding, t) / (n * norm(t)))
        .collect()
}

pub fn cosine_softmax_score(
    sample_ids: Vec<u64>,
    image_embeddings: &[Vec<f64>],
    bank: &ClassEmbeddingBank,
    config: &ScorerConfig,
) -> Result<ScoreMatrix> {
    if sample_ids.len() != image_embeddings.len() {
        return Err(Error::invalid(format!(
            "{} ids for {} embeddings",
            sample_ids.len(),
            image_embeddings.len()
        )));
    }
    for (index, v) in image_embeddings.iter().enumerate() {
        if v.len() != bank.dim() {
            return Err(Error::DimensionMismatch {
                record: index,
                expected: bank.dim(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding {index}"),
            });
        }
        if norm(v) == 0.0 {
            return Err(Error::ZeroNorm { index });
        }
    }
    let values: Vec<Vec<f64>> = image_embeddings
        .par_iter()
        .map(|v| tempered_softmax(&cosine_row(v, bank), config.temperature))
        .collect();
    ScoreMatrix::new(sample_ids, values)
}

pub fn score_with_surrogate(dataset: &Dataset, source: &ScorerSource) -> Result<ScoreMatrix> {
    match source {
        ScorerSource::File(path) => {
            let scores = io::load_scores(path)?;
            ingest_scores(scores, dataset)
        }
        ScorerSource::Cosine {
            bank,
            config,
            embeddings,
        } => {
            if bank.num_classes() != dataset.num_classes() {
                return Err(Error::invalid(format!(
                    "bank has {} classes, dataset has {}",
                    bank.num_classes(),
                    dataset.num_classes()
                )));
            }
            let ids: Vec<u64> = dataset.ids().collect();
            match embeddings {
                None => {
                    let features: Vec<Vec<f64>> =
                        dataset.samples().iter().map(|s| s.features.clone()).collect();
                    cosine_softmax_score(ids, &features, bank, config)
                }
                Some(set) => {
                    if let Some(row) = set.ids.iter().zip(&ids).position(|(a, b)| a != b) {
                        return Err(Error::IdMismatch {
                            row,
                            expected: ids[row],
                            got: set.ids[row],
                        });
                    }
                    if set.ids.len() != ids.len() {
                        return Err(Error::RowCount {
                            scores: set.ids.len(),
                            dataset: ids.len(),
                        });
                    }
                    cosine_softmax_score(ids, &set.vectors, bank, config)
                }
            }
        }
    }
}
