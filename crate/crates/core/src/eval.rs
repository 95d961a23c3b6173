//! Metrics and numeric reports: accuracies, confidence histograms and
//! threshold sweeps, rendered either as aligned tables or as `key=value`
//! records (one per line).

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Dataset, ScoreMatrix};
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::noise::{selection_quality, CorruptionRecord, SelectionQuality};
use crate::priors::{compute_class_prior, TransitionMatrix};
use crate::selection::{apply_mask, select_by_confidence};
use crate::trainer::{predict, train, TrainConfig};

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Records,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "records" => Ok(ReportFormat::Records),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::invalid(format!("length mismatch: {a} predictions, {b} references")))
    }
}

pub fn accuracy(predictions: &[usize], reference: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), reference.len())?;
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(reference).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// A hit when the reference is among the `k` most probable classes. Ties are
/// ranked by class index, lower first.
pub fn top_k_accuracy(probabilities: &[Vec<f64>], reference: &[usize], k: usize) -> Result<f64> {
    check_lengths(probabilities.len(), reference.len())?;
    if probabilities.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let hits = probabilities
        .iter()
        .zip(reference)
        .filter(|(row, &r)| {
            // rank of r = number of classes ordered strictly ahead of it
            let pr = row[r];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > pr || (v == pr && j < r))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / probabilities.len() as f64)
}

/// Recall of each class; `None` for classes absent from `reference`.
pub fn per_class_recall(predictions: &[usize], reference: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    check_lengths(predictions.len(), reference.len())?;
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &r) in predictions.iter().zip(reference) {
        if r >= num_classes {
            return Err(Error::invalid(format!("reference label {r} out of range")));
        }
        totals[r] += 1;
        hits[r] += usize::from(p == r);
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub source: String,
}

/// Ten equal bins over [0, 1]; exactly 1.0 goes to the last bin.
pub fn confidence_histogram(values: &[f64], source: impl Into<String>) -> Result<HistogramReport> {
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidEntry {
                row: i,
                col: 0,
                value: v,
            });
        }
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Ok(HistogramReport {
        bin_edges: (0..=HISTOGRAM_BINS).map(|k| k as f64 / HISTOGRAM_BINS as f64).collect(),
        counts,
        source: source.into(),
    })
}

/// Surrogate probability at each sample's noisy label.
pub fn label_confidences(dataset: &Dataset, scores: &ScoreMatrix) -> Result<Vec<f64>> {
    if scores.rows() != dataset.len() {
        return Err(Error::RowCount {
            scores: scores.rows(),
            dataset: dataset.len(),
        });
    }
    Ok(dataset
        .samples()
        .iter()
        .zip(scores.values())
        .map(|(s, row)| row[s.noisy_label])
        .collect())
}

impl HistogramReport {
    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Table => {
                let _ = writeln!(out, "confidence histogram ({})", self.source);
                let _ = writeln!(out, "{:<12} {:>8}", "bin", "count");
                for (k, c) in self.counts.iter().enumerate() {
                    let close = if k + 1 == self.counts.len() { ']' } else { ')' };
                    let bin = format!("[{:.1},{:.1}{close}", self.bin_edges[k], self.bin_edges[k + 1]);
                    let _ = writeln!(out, "{bin:<12} {c:>8}");
                }
            }
            ReportFormat::Records => {
                for (k, c) in self.counts.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "kind=histogram source={} bin={k} lo={:?} hi={:?} count={c}",
                        quote(&self.source),
                        self.bin_edges[k],
                        self.bin_edges[k + 1]
                    );
                }
            }
        }
        out
    }
}

/// Everything a sweep point needs downstream of selection.
#[derive(Debug, Clone)]
pub struct TrainBundle {
    /// Estimated once on the full noisy set.
    pub transition: TransitionMatrix,
    pub margin: MarginConfig,
    pub train: TrainConfig,
    /// Clean held-out data; scored against its true labels when present,
    /// otherwise against its (assumed clean) labels.
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepStatus {
    Ok,
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub selected_count: usize,
    pub quality: Option<SelectionQuality>,
    pub test_accuracy: Option<f64>,
    pub status: SweepStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn thresholds(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.threshold).collect()
    }

    pub fn selected_counts(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.selected_count).collect()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        match format {
            ReportFormat::Table => {
                let _ = writeln!(
                    out,
                    "{:>9} {:>9} {:>9} {:>9} {:>9}  status",
                    "rho", "selected", "precision", "recall", "test_acc"
                );
                for p in &self.points {
                    let _ = writeln!(
                        out,
                        "{:>9.4} {:>9} {:>9} {:>9} {:>9}  {}",
                        p.threshold,
                        p.selected_count,
                        opt(p.quality.map(|q| q.precision)),
                        opt(p.quality.map(|q| q.recall)),
                        opt(p.test_accuracy),
                        p.status_str()
                    );
                }
            }
            ReportFormat::Records => {
                for p in &self.points {
                    let _ = write!(out, "kind=sweep rho={:?} selected={}", p.threshold, p.selected_count);
                    if let Some(q) = p.quality {
                        let _ = write!(out, " precision={:?} recall={:?}", q.precision, q.recall);
                    }
                    if let Some(a) = p.test_accuracy {
                        let _ = write!(out, " test_accuracy={a:?}");
                    }
                    let _ = write!(out, " status={}", p.status_word());
                    if let SweepStatus::Failed(msg) = &p.status {
                        let _ = write!(out, " message={}", quote(msg));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

impl SweepPoint {
    fn status_word(&self) -> &'static str {
        match self.status {
            SweepStatus::Ok => "ok",
            SweepStatus::Skipped => "skipped",
            SweepStatus::Failed(_) => "failed",
        }
    }

    fn status_str(&self) -> String {
        match &self.status {
            SweepStatus::Failed(msg) => format!("failed: {msg}"),
            _ => self.status_word().to_string(),
        }
    }
}

/// Reference labels of a test set: true labels when recorded, else the
/// given labels.
pub fn reference_labels(test: &Dataset) -> Vec<usize> {
    test.true_labels().unwrap_or_else(|_| test.noisy_labels())
}

/// One sweep point: select at `rho`, compute the prior on the survivors,
/// train, evaluate on the test set.
pub fn sweep_point(dataset: &Dataset, scores: &ScoreMatrix, rho: f64, bundle: &TrainBundle) -> SweepPoint {
    let mut point = SweepPoint {
        threshold: rho,
        selected_count: 0,
        quality: None,
        test_accuracy: None,
        status: SweepStatus::Ok,
    };
    let mask = match select_by_confidence(dataset, scores, rho) {
        Ok(m) => m,
        Err(e) => {
            point.status = SweepStatus::Failed(e.to_string());
            return point;
        }
    };
    point.selected_count = mask.selected_count();
    if dataset.has_ground_truth() {
        point.quality = CorruptionRecord::from_dataset(dataset)
            .and_then(|rec| selection_quality(&mask, dataset, &rec))
            .ok();
    }
    if point.selected_count == 0 {
        point.status = SweepStatus::Skipped;
        return point;
    }
    let run = || -> Result<f64> {
        let clean = apply_mask(dataset, &mask)?;
        let prior = compute_class_prior(&clean, dataset.label_space())?;
        let report = train(&clean, &bundle.transition, &prior, &bundle.margin, &bundle.train)?;
        let (pred, _) = predict(&report.classifier, &bundle.test)?;
        accuracy(&pred, &reference_labels(&bundle.test))
    };
    match run() {
        Ok(acc) => point.test_accuracy = Some(acc),
        Err(e) => point.status = SweepStatus::Failed(e.to_string()),
    }
    point
}

/// Points run in parallel; each one is deterministic on its own, so the
/// report does not depend on the thread count.
pub fn threshold_sweep(
    dataset: &Dataset,
    scores: &ScoreMatrix,
    thresholds: &[f64],
    bundle: &TrainBundle,
) -> Result<SweepReport> {
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("sweep thresholds must be finite"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sweep thresholds must be strictly ascending"));
    }
    let points = thresholds
        .par_iter()
        .map(|&rho| sweep_point(dataset, scores, rho, bundle))
        .collect();
    Ok(SweepReport { points })
}

/// Quotes a record value when it contains whitespace, quotes or `=`.
pub fn quote(value: &str) -> String {
    if !value.is_empty() && !value.chars().any(|c| c.is_whitespace() || c == '"' || c == '=') {
        return value.to_string();
    }
    let mut out = String::with_capacity(value.len() + 2);
    out.push('"');
    for c in value.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Parses one `key=value` record line, undoing [`quote`].
pub fn parse_record(line: &str) -> Result<Vec<(String, String)>> {
    let mut fields = Vec::new();
    let mut chars = line.trim().chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let key: String = chars.by_ref().take_while(|&c| c != '=').collect();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('n') => value.push('\n'),
                        Some(other) => value.push(other),
                        None => break,
                    },
                    c => value.push(c),
                }
            }
            if !closed {
                return Err(Error::invalid(format!("unterminated quote in record {line:?}")));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        if key.is_empty() {
            return Err(Error::invalid(format!("field without key in record {line:?}")));
        }
        fields.push((key, value));
    }
    Ok(fields)
}

/// Evaluation summary for a trained classifier on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// `(k, accuracy)` when k is below the class count.
    pub top_k: Option<(usize, f64)>,
    pub per_class_recall: Vec<Option<f64>>,
    pub selection: Option<SelectionQuality>,
    pub train_size: usize,
    pub test_size: usize,
}

impl EvalReport {
    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Table => {
                let _ = writeln!(out, "{:<22} {}", "train samples", self.train_size);
                let _ = writeln!(out, "{:<22} {}", "test samples", self.test_size);
                let _ = writeln!(out, "{:<22} {:.4}", "top-1 accuracy", self.top1);
                if let Some((k, acc)) = self.top_k {
                    let _ = writeln!(out, "{:<22} {acc:.4}", format!("top-{k} accuracy"));
                }
                if let Some(q) = self.selection {
                    let _ = writeln!(out, "{:<22} {:.4}", "selection precision", q.precision);
                    let _ = writeln!(out, "{:<22} {:.4}", "selection recall", q.recall);
                }
                for (k, r) in self.per_class_recall.iter().enumerate() {
                    let r = r.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(out, "{:<22} {r}", format!("recall class {k}"));
                }
            }
            ReportFormat::Records => {
                let _ = write!(
                    out,
                    "kind=eval train_size={} test_size={} top1={:?}",
                    self.train_size, self.test_size, self.top1
                );
                if let Some((k, acc)) = self.top_k {
                    let _ = write!(out, " top_k={k} top_k_accuracy={acc:?}");
                }
                if let Some(q) = self.selection {
                    let _ = write!(
                        out,
                        " selected={} selected_clean={} precision={:?} recall={:?}",
                        q.selected, q.selected_clean, q.precision, q.recall
                    );
                }
                out.push('\n');
                for (k, r) in self.per_class_recall.iter().enumerate() {
                    if let Some(r) = r {
                        let _ = writeln!(out, "kind=class_recall class={k} recall={r:?}");
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{inject_symmetric, oracle_scores, BlobSpec, NoiseSpec};
    use crate::priors::estimate_transition_matrix;
    use proptest::prelude::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn top_k_includes_boundary() {
        let row = vec![0.30, 0.25, 0.2, 0.1, 0.08, 0.07];
        assert_eq!(top_k_accuracy(&[row.clone()], &[4], 5).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[row.clone()], &[5], 5).unwrap(), 0.0);
        // ties rank by class index
        let tied = vec![0.25; 4];
        assert_eq!(top_k_accuracy(&[tied.clone()], &[1], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[tied], &[2], 2).unwrap(), 0.0);
    }

    #[test]
    fn histogram_edges() {
        let h = confidence_histogram(&[0.05; 7], "x").unwrap();
        assert_eq!(h.counts, vec![7, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let h = confidence_histogram(&[0.0, 1.0], "x").unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(h.bin_edges.len(), 11);
        assert!(confidence_histogram(&[1.0000001], "x").is_err());
        assert!(confidence_histogram(&[f64::NAN], "x").is_err());
    }

    #[test]
    fn histogram_matches_direct_binning() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let h = confidence_histogram(&values, "grid").unwrap();
        let mut oracle = [0usize; 10];
        for &v in &values {
            let mut placed = false;
            for k in 0..10 {
                let lo = h.bin_edges[k];
                let hi = h.bin_edges[k + 1];
                if (v >= lo && v < hi) || (k == 9 && v == 1.0) {
                    oracle[k] += 1;
                    placed = true;
                    break;
                }
            }
            assert!(placed);
        }
        assert_eq!(h.counts, oracle);
    }

    #[test]
    fn record_quoting_round_trips() {
        let line = format!("kind=x a=1 msg={} empty={}", quote("two words \"q\" a=b"), quote(""));
        let fields = parse_record(&line).unwrap();
        assert_eq!(fields[2], ("msg".into(), "two words \"q\" a=b".into()));
        assert_eq!(fields[3], ("empty".into(), String::new()));
        assert!(parse_record("a=\"open").is_err());
    }

    fn small_setup() -> (Dataset, ScoreMatrix, TrainBundle) {
        let spec = BlobSpec {
            num_classes: 3,
            per_class: 40,
            dim: 4,
            separation: 3.0,
            seed: 5,
        };
        let clean = spec.sample(1).unwrap();
        let (noisy, _) = inject_symmetric(&clean, &NoiseSpec::symmetric(0.3, 2)).unwrap();
        let scores = oracle_scores(&noisy, 0.7).unwrap();
        let bundle = TrainBundle {
            transition: estimate_transition_matrix(&noisy, &scores).unwrap(),
            margin: MarginConfig::shallow(),
            train: TrainConfig {
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            test: spec.sample(99).unwrap(),
        };
        (noisy, scores, bundle)
    }

    #[test]
    fn sweep_is_monotone_and_skips_empty() {
        let (ds, scores, bundle) = small_setup();
        let r = threshold_sweep(&ds, &scores, &[0.1, 0.5, 0.9, 1.0], &bundle).unwrap();
        let counts = r.selected_counts();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
        assert_eq!(r.points[3].status, SweepStatus::Skipped);
        assert_eq!(r.points[3].selected_count, 0);
        assert!(r.points[0].test_accuracy.is_some());
        assert!(r.render(ReportFormat::Records).contains("status=skipped"));
        assert!(threshold_sweep(&ds, &scores, &[0.5, 0.1], &bundle).is_err());
    }

    #[test]
    fn single_point_sweep_equals_manual_pipeline() {
        let (ds, scores, bundle) = small_setup();
        let r = threshold_sweep(&ds, &scores, &[0.5], &bundle).unwrap();
        assert_eq!(r.points.len(), 1);

        let mask = select_by_confidence(&ds, &scores, 0.5).unwrap();
        let clean = apply_mask(&ds, &mask).unwrap();
        let prior = compute_class_prior(&clean, ds.label_space()).unwrap();
        let trained = train(&clean, &bundle.transition, &prior, &bundle.margin, &bundle.train).unwrap();
        let (pred, _) = predict(&trained.classifier, &bundle.test).unwrap();
        let acc = accuracy(&pred, &bundle.test.true_labels().unwrap()).unwrap();

        assert_eq!(r.points[0].selected_count, mask.selected_count());
        assert_eq!(r.points[0].test_accuracy, Some(acc));
    }

    proptest! {
        #[test]
        fn histogram_counts_sum_to_n(values in prop::collection::vec(0.0f64..=1.0, 0..200)) {
            let h = confidence_histogram(&values, "p").unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        }
    }
}
