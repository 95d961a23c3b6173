//! Synthetic benchmarks with known ground truth: Gaussian class blobs and
//! symmetric, asymmetric (pair) and instance-dependent label corruption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, LabelSpace, Sample, ScoreMatrix};
use crate::error::{Error, Result};
use crate::selection::SelectionMask;

// Stream ids keep feature generation and each injector on separate random
// sequences even when they share a seed.
const STREAM_MEANS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_SYMMETRIC: u64 = 11;
const STREAM_ASYMMETRIC: u64 = 12;
const STREAM_INSTANCE: u64 = 13;

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// Seeds the class means (and, in [`make_blobs`], the samples too).
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.per_class < 1 || self.dim < 2 {
            return Err(Error::invalid(format!(
                "blobs need C >= 2, n >= 1, d >= 2 (got C={}, n={}, d={})",
                self.num_classes, self.per_class, self.dim
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("blob separation must be positive"));
        }
        Ok(())
    }

    /// Class means: `separation * e_k` for the first `min(C, d)` classes and
    /// random directions of the same length for the rest.
    pub fn means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = rng_for(self.seed, STREAM_MEANS);
        Ok((0..self.num_classes)
            .map(|k| {
                if k < self.dim {
                    let mut m = vec![0.0; self.dim];
                    m[k] = self.separation;
                    m
                } else {
                    loop {
                        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n > 1e-8 {
                            break v.iter().map(|x| x * self.separation / n).collect();
                        }
                    }
                }
            })
            .collect())
    }

    /// Draws `per_class` unit-variance samples around each mean, class by
    /// class, using `sample_seed`. Labels are noise-free.
    pub fn sample(&self, sample_seed: u64) -> Result<Dataset> {
        let means = self.means()?;
        let mut rng = rng_for(sample_seed, STREAM_SAMPLES);
        let mut samples = Vec::with_capacity(self.num_classes * self.per_class);
        for (k, mean) in means.iter().enumerate() {
            for _ in 0..self.per_class {
                let features = mean
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    id: samples.len() as u64,
                    features,
                    noisy_label: k,
                    true_label: Some(k),
                });
            }
        }
        Dataset::new(LabelSpace::with_classes(self.num_classes)?, samples)
    }
}

pub fn make_blobs(num_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    BlobSpec {
        num_classes,
        per_class,
        dim,
        separation,
        seed,
    }
    .sample(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    InstanceDependent,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "sym",
            NoiseKind::Asymmetric => "asym",
            NoiseKind::InstanceDependent => "idn",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(NoiseKind::Symmetric),
            "asym" | "asymmetric" => Ok(NoiseKind::Asymmetric),
            "idn" | "instance" | "instance-dependent" => Ok(NoiseKind::InstanceDependent),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Flip-budget distribution for instance-dependent noise: a normal with mean
/// `rate` and this standard deviation, truncated to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationSpec {
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for TruncationSpec {
    fn default() -> Self {
        Self {
            sd: 0.1,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub pair_map: Option<BTreeMap<usize, usize>>,
    pub seed: u64,
    pub truncation: TruncationSpec,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: None,
            seed,
            truncation: TruncationSpec::default(),
        }
    }

    pub fn asymmetric(rate: f64, pair_map: BTreeMap<usize, usize>, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Asymmetric,
            rate,
            pair_map: Some(pair_map),
            seed,
            truncation: TruncationSpec::default(),
        }
    }

    pub fn instance_dependent(rate: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::InstanceDependent,
            rate,
            pair_map: None,
            seed,
            truncation: TruncationSpec::default(),
        }
    }

    fn validate(&self, expected: NoiseKind, num_classes: usize) -> Result<()> {
        if self.kind != expected {
            return Err(Error::invalid(format!(
                "noise spec kind {} used with the {} injector",
                self.kind, expected
            )));
        }
        let max_rate = if expected == NoiseKind::Asymmetric { 1.0 } else { 1.0 - f64::EPSILON };
        if !(0.0..=max_rate).contains(&self.rate) {
            return Err(Error::invalid(format!("noise rate {} out of range", self.rate)));
        }
        if let Some(map) = &self.pair_map {
            let mut targets = BTreeSet::new();
            for (&from, &to) in map {
                if from == to {
                    return Err(Error::invalid(format!("pair map sends class {from} to itself")));
                }
                if from >= num_classes || to >= num_classes {
                    return Err(Error::invalid(format!("pair {from}->{to} outside label space")));
                }
                if !targets.insert(to) {
                    return Err(Error::invalid(format!("pair map targets class {to} twice")));
                }
            }
        }
        Ok(())
    }
}

/// Parses `0:1,2:3` (or `;`-separated) into a pair map.
pub fn parse_pair_map(s: &str) -> Result<BTreeMap<usize, usize>> {
    s.split([',', ';'])
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad pair {pair:?}, expected a:b")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad class index {v:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// Ground truth about an injection.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub flipped_ids: BTreeSet<u64>,
    pub realized_rate: f64,
    /// Row = true class, column = noisy label, entries are empirical
    /// frequencies. Rows of absent classes are all zero.
    pub realized_transition: Vec<Vec<f64>>,
}

impl CorruptionRecord {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let c = dataset.num_classes();
        let truth = dataset.true_labels()?;
        let mut counts = vec![vec![0usize; c]; c];
        let mut flipped_ids = BTreeSet::new();
        for (s, &t) in dataset.samples().iter().zip(&truth) {
            counts[t][s.noisy_label] += 1;
            if s.noisy_label != t {
                flipped_ids.insert(s.id);
            }
        }
        let realized_transition = counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
                    .collect()
            })
            .collect();
        Ok(Self {
            realized_rate: flipped_ids.len() as f64 / dataset.len() as f64,
            flipped_ids,
            realized_transition,
        })
    }
}

fn relabel(dataset: &Dataset, labels: Vec<usize>) -> Result<(Dataset, CorruptionRecord)> {
    let noisy = dataset.with_noisy_labels(&labels)?;
    let record = CorruptionRecord::from_dataset(&noisy)?;
    Ok((noisy, record))
}

/// With probability `rate`, resample the label uniformly over all C classes
/// (so a `rate / C` share of the resampled labels keeps its value).
pub fn inject_symmetric(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, CorruptionRecord)> {
    let c = dataset.num_classes();
    spec.validate(NoiseKind::Symmetric, c)?;
    let truth = dataset.true_labels()?;
    let mut rng = rng_for(spec.seed, STREAM_SYMMETRIC);
    let labels = truth
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < spec.rate {
                rng.random_range(0..c)
            } else {
                t
            }
        })
        .collect();
    relabel(dataset, labels)
}

/// With probability `rate`, replace the label by `pair_map[true_label]`.
/// Classes outside the map never flip.
pub fn inject_asymmetric(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, CorruptionRecord)> {
    let c = dataset.num_classes();
    spec.validate(NoiseKind::Asymmetric, c)?;
    let map = spec
        .pair_map
        .as_ref()
        .ok_or_else(|| Error::invalid("asymmetric noise needs a pair map"))?;
    let truth = dataset.true_labels()?;
    let mut rng = rng_for(spec.seed, STREAM_ASYMMETRIC);
    let labels = truth
        .iter()
        .map(|&t| {
            // draw for every sample so the stream position depends only on the index
            let u = rng.random::<f64>();
            match map.get(&t) {
                Some(&to) if u < spec.rate => to,
                _ => t,
            }
        })
        .collect();
    relabel(dataset, labels)
}

fn truncated_normal(rng: &mut ChaCha20Rng, mean: f64, tr: &TruncationSpec) -> f64 {
    if tr.upper <= tr.lower || tr.sd <= 0.0 {
        return mean.clamp(tr.lower, tr.upper.max(tr.lower));
    }
    for _ in 0..10_000 {
        let x = mean + tr.sd * rng.sample::<f64, _>(StandardNormal);
        if (tr.lower..=tr.upper).contains(&x) {
            return x;
        }
    }
    mean.clamp(tr.lower, tr.upper)
}

/// Part-dependent style noise. Each sample gets a flip budget `q_i` from the
/// truncated normal; the budget is spread over the other classes by a softmax
/// of `x_i . w_k` with per-class Gaussian projections `w_k`.
pub fn inject_instance_dependent(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, CorruptionRecord)> {
    let c = dataset.num_classes();
    spec.validate(NoiseKind::InstanceDependent, c)?;
    let truth = dataset.true_labels()?;
    let d = dataset.feature_dim();
    let mut rng = rng_for(spec.seed, STREAM_INSTANCE);
    let budgets: Vec<f64> = (0..dataset.len())
        .map(|_| truncated_normal(&mut rng, spec.rate, &spec.truncation))
        .collect();
    let projections: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels = dataset
        .samples()
        .iter()
        .zip(&truth)
        .zip(&budgets)
        .map(|((s, &t), &q)| {
            let scores: Vec<f64> = projections
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != t)
                .map(|(_, w)| s.features.iter().zip(w).map(|(x, y)| x * y).sum())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let u = rng.random::<f64>();
            if u >= q {
                return t;
            }
            // u < q: walk the other classes' share of the budget
            let mut acc = 0.0;
            let others = (0..c).filter(|&k| k != t);
            let mut last = t;
            for (k, e) in others.zip(&exps) {
                acc += q * e / z;
                last = k;
                if u < acc {
                    return k;
                }
            }
            last
        })
        .collect();
    relabel(dataset, labels)
}

/// Dispatches on `spec.kind`.
pub fn inject(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, CorruptionRecord)> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(dataset, spec),
        NoiseKind::Asymmetric => inject_asymmetric(dataset, spec),
        NoiseKind::InstanceDependent => inject_instance_dependent(dataset, spec),
    }
}

/// Analytic transition matrix of [`inject_symmetric`].
pub fn symmetric_transition(num_classes: usize, rate: f64) -> Vec<Vec<f64>> {
    let c = num_classes as f64;
    (0..num_classes)
        .map(|i| {
            (0..num_classes)
                .map(|j| if i == j { 1.0 - rate * (c - 1.0) / c } else { rate / c })
                .collect()
        })
        .collect()
}

/// Benchmark scorer that reads ground truth: `confidence` on the true class
/// and the remainder spread evenly. Only meaningful on synthetic data.
pub fn oracle_scores(dataset: &Dataset, confidence: f64) -> Result<ScoreMatrix> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::invalid("oracle confidence must lie in [0, 1]"));
    }
    let c = dataset.num_classes();
    let rest = (1.0 - confidence) / (c - 1) as f64;
    let rows = dataset
        .true_labels()?
        .into_iter()
        .map(|t| (0..c).map(|j| if j == t { confidence } else { rest }).collect())
        .collect();
    ScoreMatrix::new(dataset.ids().collect(), rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionQuality {
    pub selected: usize,
    pub selected_clean: usize,
    pub total_clean: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall of a mask against the truly clean samples. Ratios
/// with an empty denominator are reported as 0.
pub fn selection_quality(mask: &SelectionMask, dataset: &Dataset, record: &CorruptionRecord) -> Result<SelectionQuality> {
    if mask.len() != dataset.len() {
        return Err(Error::RowCount {
            scores: mask.len(),
            dataset: dataset.len(),
        });
    }
    let truth = dataset.true_labels()?;
    let mut selected = 0;
    let mut selected_clean = 0;
    let mut total_clean = 0;
    for ((s, &t), (&verdict, &id)) in dataset
        .samples()
        .iter()
        .zip(&truth)
        .zip(mask.verdicts.iter().zip(&mask.sample_ids))
    {
        if s.id != id {
            return Err(Error::invalid(format!("mask id {id} does not match sample {}", s.id)));
        }
        let clean = s.noisy_label == t;
        debug_assert_eq!(clean, !record.flipped_ids.contains(&s.id));
        total_clean += usize::from(clean);
        if verdict {
            selected += 1;
            selected_clean += usize::from(clean);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(selected_clean, selected);
    let recall = ratio(selected_clean, total_clean);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SelectionQuality {
        selected,
        selected_clean,
        total_clean,
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::Criterion;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = make_blobs(2, 1, 2, 10.0, 42).unwrap();
        let b = make_blobs(2, 1, 2, 10.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noisy_labels(), vec![0, 1]);
        let ds = make_blobs(3, 10, 4, 2.0, 1).unwrap();
        let mut counts = [0; 3];
        ds.noisy_labels().iter().for_each(|&l| counts[l] += 1);
        assert_eq!(counts, [10, 10, 10]);
        assert_eq!(ds.true_labels().unwrap(), ds.noisy_labels());
    }

    #[test]
    fn excess_classes_get_unit_directions() {
        let spec = BlobSpec {
            num_classes: 5,
            per_class: 1,
            dim: 3,
            separation: 4.0,
            seed: 9,
        };
        for m in spec.means().unwrap() {
            let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_apart_blobs_are_nearest_mean_separable() {
        let spec = BlobSpec {
            num_classes: 4,
            per_class: 500,
            dim: 8,
            separation: 100.0,
            seed: 3,
        };
        let means = spec.means().unwrap();
        let ds = spec.sample(3).unwrap();
        for s in ds.samples() {
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = s.features.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = s.features.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, s.noisy_label);
        }
    }

    #[test]
    fn invalid_blob_params() {
        assert!(make_blobs(1, 5, 2, 1.0, 0).is_err());
        assert!(make_blobs(2, 0, 2, 1.0, 0).is_err());
        assert!(make_blobs(2, 5, 1, 1.0, 0).is_err());
        assert!(make_blobs(2, 5, 2, 0.0, 0).is_err());
    }

    #[test]
    fn zero_rate_injections_are_identity() {
        let ds = make_blobs(3, 20, 4, 3.0, 5).unwrap();
        let (sym, rec) = inject_symmetric(&ds, &NoiseSpec::symmetric(0.0, 1)).unwrap();
        assert_eq!(sym.noisy_labels(), ds.noisy_labels());
        assert!(rec.flipped_ids.is_empty());
        let pairs = BTreeMap::from([(0, 1), (1, 2), (2, 0)]);
        let (asym, _) = inject_asymmetric(&ds, &NoiseSpec::asymmetric(0.0, pairs, 1)).unwrap();
        assert_eq!(asym.noisy_labels(), ds.noisy_labels());
        let mut spec = NoiseSpec::instance_dependent(0.0, 1);
        spec.truncation = TruncationSpec {
            sd: 0.1,
            lower: 0.0,
            upper: 0.0,
        };
        let (idn, rec) = inject_instance_dependent(&ds, &spec).unwrap();
        assert_eq!(idn.noisy_labels(), ds.noisy_labels());
        assert_eq!(rec.realized_rate, 0.0);
    }

    #[test]
    fn forced_pair_flip() {
        let ds = make_blobs(3, 15, 4, 3.0, 5).unwrap();
        let (noisy, rec) = inject_asymmetric(&ds, &NoiseSpec::asymmetric(1.0, BTreeMap::from([(0, 1)]), 2)).unwrap();
        for (s, t) in noisy.samples().iter().zip(ds.true_labels().unwrap()) {
            assert_eq!(s.noisy_label, if t == 0 { 1 } else { t });
        }
        assert_eq!(rec.flipped_ids.len(), 15);
        assert!((rec.realized_rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let ds = make_blobs(3, 5, 4, 3.0, 5).unwrap();
        assert!(inject_asymmetric(&ds, &NoiseSpec::asymmetric(0.5, BTreeMap::from([(1, 1)]), 0)).is_err());
        let mut spec = NoiseSpec::asymmetric(0.5, BTreeMap::new(), 0);
        spec.pair_map = None;
        assert!(inject_asymmetric(&ds, &spec).is_err());
        assert!(inject_symmetric(&ds, &NoiseSpec::symmetric(1.0, 0)).is_err());
        assert!(inject_symmetric(&ds, &NoiseSpec::instance_dependent(0.2, 0)).is_err());
        let no_gt = ds.subset(&[0]).unwrap();
        let stripped: Vec<Sample> = no_gt.samples().iter().map(|s| Sample { true_label: None, ..s.clone() }).collect();
        let no_gt = Dataset::new(ds.label_space().clone(), stripped).unwrap();
        assert!(matches!(inject_symmetric(&no_gt, &NoiseSpec::symmetric(0.2, 0)), Err(Error::MissingGroundTruth)));
    }

    #[test]
    fn injectors_are_deterministic_and_keep_truth() {
        let ds = make_blobs(4, 50, 4, 2.0, 8).unwrap();
        for spec in [
            NoiseSpec::symmetric(0.4, 77),
            NoiseSpec::asymmetric(0.4, BTreeMap::from([(0, 1), (1, 0)]), 77),
            NoiseSpec::instance_dependent(0.4, 77),
        ] {
            let a = inject(&ds, &spec).unwrap();
            let b = inject(&ds, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.0.true_labels().unwrap(), ds.true_labels().unwrap());
            let feats: Vec<_> = a.0.samples().iter().map(|s| s.features.clone()).collect();
            let orig: Vec<_> = ds.samples().iter().map(|s| s.features.clone()).collect();
            assert_eq!(feats, orig);
        }
    }

    #[test]
    fn pair_map_parsing() {
        assert_eq!(parse_pair_map("0:1, 2:3").unwrap(), BTreeMap::from([(0, 1), (2, 3)]));
        assert_eq!(parse_pair_map("4:5;5:4").unwrap(), BTreeMap::from([(4, 5), (5, 4)]));
        assert!(parse_pair_map("0-1").is_err());
    }

    fn mask(ds: &Dataset, verdicts: Vec<bool>) -> SelectionMask {
        SelectionMask {
            sample_ids: ds.ids().collect(),
            scores: vec![0.0; verdicts.len()],
            verdicts,
            criterion: Criterion::Confidence,
            threshold: 0.5,
        }
    }

    #[test]
    fn quality_of_oracle_everything_and_random_masks() {
        let ds = make_blobs(3, 40, 4, 2.0, 8).unwrap();
        let (noisy, rec) = inject_symmetric(&ds, &NoiseSpec::symmetric(0.5, 4)).unwrap();
        let clean: Vec<bool> = noisy.ids().map(|id| !rec.flipped_ids.contains(&id)).collect();
        let q = selection_quality(&mask(&noisy, clean), &noisy, &rec).unwrap();
        assert_eq!((q.precision, q.recall, q.f1), (1.0, 1.0, 1.0));

        let q = selection_quality(&mask(&noisy, vec![true; noisy.len()]), &noisy, &rec).unwrap();
        assert!((q.precision - (1.0 - rec.realized_rate)).abs() < 1e-15);
        assert_eq!(q.recall, 1.0);

        let random: Vec<bool> = (0..noisy.len()).map(|i| (i * 7919) % 3 == 0).collect();
        let q = selection_quality(&mask(&noisy, random.clone()), &noisy, &rec).unwrap();
        let truth = noisy.true_labels().unwrap();
        let (mut sel, mut hit, mut clean_total) = (0, 0, 0);
        for i in 0..noisy.len() {
            let is_clean = noisy.samples()[i].noisy_label == truth[i];
            clean_total += is_clean as usize;
            if random[i] {
                sel += 1;
                hit += is_clean as usize;
            }
        }
        assert_eq!(q.precision, hit as f64 / sel as f64);
        assert_eq!(q.recall, hit as f64 / clean_total as f64);
    }

    #[test]
    fn oracle_scores_put_confidence_on_truth() {
        let ds = make_blobs(4, 3, 4, 2.0, 8).unwrap();
        let s = oracle_scores(&ds, 0.8).unwrap();
        for (row, t) in s.values().iter().zip(ds.true_labels().unwrap()) {
            assert_eq!(row[t], 0.8);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
