//! Noise-aware balanced margin (NABM) objective.
//!
//! For a sample labeled `y` with logits `z`, the adjusted logits are
//!
//! ```text
//! a_j = (z_j + delta * M[y][j] + t * ln(pi_j)) / s
//! ```
//!
//! and `p_hat = softmax(a)[y]`. The per-sample loss is the focal loss
//! `(1 - p_hat)^gamma * -ln(p_hat)`. Gradients with respect to `z` are exact,
//! differentiating through the focal modulating factor as well.

use crate::error::{Error, Result};
use crate::priors::{ClassPrior, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    /// Weight of the transition-matrix margin.
    pub delta: f64,
    /// Weight of the log-prior margin.
    pub t: f64,
    /// Temperature dividing the adjusted logits.
    pub s: f64,
    /// Focal exponent.
    pub gamma: f64,
}

impl MarginConfig {
    pub fn new(delta: f64, t: f64, s: f64, gamma: f64) -> Result<Self> {
        let cfg = Self { delta, t, s, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset for a linear or shallow head.
    pub fn shallow() -> Self {
        Self {
            delta: 0.5,
            t: 1.0,
            s: 1.0,
            gamma: 1.0,
        }
    }

    /// Preset used with deeper backbones.
    pub fn deep() -> Self {
        Self {
            delta: 0.1,
            t: 0.01,
            s: 0.1,
            gamma: 1.0,
        }
    }

    /// Plain cross-entropy: no margins, unit temperature, no focusing.
    pub fn cross_entropy() -> Self {
        Self {
            delta: 0.0,
            t: 0.0,
            s: 1.0,
            gamma: 0.0,
        }
    }

    /// Focal loss without margins.
    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::cross_entropy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && self.delta >= 0.0
            && self.t >= 0.0
            && self.gamma >= 0.0
            && [self.delta, self.t, self.s, self.gamma].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid margin config {self:?}")))
        }
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self::shallow()
    }
}

fn check_finite(z: &[f64], context: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn check_label(label: usize, c: usize) -> Result<()> {
    if label < c {
        Ok(())
    } else {
        Err(Error::invalid(format!("label {label} out of range for {c} classes")))
    }
}

fn check_priors(c: usize, m: &TransitionMatrix, prior: &ClassPrior) -> Result<()> {
    if m.num_classes() != c || prior.num_classes() != c {
        return Err(Error::invalid(format!(
            "logits have {c} classes, transition matrix {} and prior {}",
            m.num_classes(),
            prior.num_classes()
        )));
    }
    Ok(())
}

fn adjusted_logits(
    logits: &[f64],
    label: usize,
    m: &TransitionMatrix,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Vec<f64> {
    logits
        .iter()
        .zip(m.row(label))
        .zip(prior.values())
        .map(|((z, mij), pi)| (z + cfg.delta * mij + cfg.t * pi.ln()) / cfg.s)
        .collect()
}

/// Softmax over the margin-adjusted logits; entry `label` is `p_hat`.
pub fn nabm_probability(
    logits: &[f64],
    label: usize,
    m: &TransitionMatrix,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    check_label(label, logits.len())?;
    check_priors(logits.len(), m, prior)?;
    cfg.validate()?;
    Ok(softmax(&adjusted_logits(logits, label, m, prior, cfg)))
}

/// `-ln softmax(z)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_finite(logits, "logits")?;
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// `(1 - p)^gamma * -ln p`.
pub fn focal_loss(prob_at_label: f64, gamma: f64) -> Result<f64> {
    if !(prob_at_label > 0.0 && prob_at_label <= 1.0) {
        return Err(Error::invalid(format!(
            "focal loss needs p in (0, 1], got {prob_at_label}"
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    Ok(modulating(1.0 - prob_at_label, gamma) * -prob_at_label.ln())
}

// (1 - p)^gamma with 0^0 = 1.
fn modulating(one_minus_p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        one_minus_p.powf(gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub per_sample_loss: Vec<f64>,
    /// Row `i` holds `d loss_i / d z_i`, not divided by the batch size.
    pub grad_logits: Vec<Vec<f64>>,
    pub nabm_prob: Vec<f64>,
}

impl LossBatch {
    /// Mean per-sample loss, summed left to right.
    pub fn mean(&self) -> f64 {
        let mut total = 0.0;
        for &l in &self.per_sample_loss {
            total += l;
        }
        total / self.per_sample_loss.len() as f64
    }
}

struct SampleLoss {
    loss: f64,
    grad: Vec<f64>,
    p_hat: f64,
}

fn sample_loss(
    logits: &[f64],
    label: usize,
    m: &TransitionMatrix,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> SampleLoss {
    let a = adjusted_logits(logits, label, m, prior, cfg);
    let p = softmax(&a);
    let log_p = a[label] - log_sum_exp(&a);
    // 1 - p_hat as a sum of the other classes keeps precision near p_hat = 1.
    let one_minus_p: f64 = p
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, v)| v)
        .sum();
    let p_hat = p[label];
    let gamma = cfg.gamma;
    let loss = modulating(one_minus_p, gamma) * -log_p;

    // dL/dp_hat * p_hat, with the (1-p)^(gamma-1) term vanishing at p_hat = 1.
    let focusing = if gamma == 0.0 || one_minus_p == 0.0 {
        0.0
    } else {
        gamma * one_minus_p.powf(gamma - 1.0) * p_hat * log_p
    };
    let scale = focusing - modulating(one_minus_p, gamma);
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            // d p_hat / d a_j = p_hat * (1[j = y] - p_j); d a_j / d z_j = 1 / s
            let dp = if j == label { one_minus_p } else { -pj };
            scale * dp / cfg.s
        })
        .collect();
    SampleLoss {
        loss,
        grad,
        p_hat,
    }
}

/// Per-sample focal loss on margin-adjusted probabilities, with exact
/// gradients with respect to the raw logits.
pub fn nabm_loss_batch(
    logits: &[Vec<f64>],
    labels: &[usize],
    m: &TransitionMatrix,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Result<LossBatch> {
    if logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    cfg.validate()?;
    let c = logits[0].len();
    check_priors(c, m, prior)?;
    let mut per_sample_loss = Vec::with_capacity(labels.len());
    let mut grad_logits = Vec::with_capacity(labels.len());
    let mut nabm_prob = Vec::with_capacity(labels.len());
    for (i, (row, &label)) in logits.iter().zip(labels).enumerate() {
        if row.len() != c {
            return Err(Error::DimensionMismatch {
                record: i,
                expected: c,
                got: row.len(),
            });
        }
        check_finite(row, &format!("logits row {i}"))?;
        check_label(label, c)?;
        let s = sample_loss(row, label, m, prior, cfg);
        per_sample_loss.push(s.loss);
        grad_logits.push(s.grad);
        nabm_prob.push(s.p_hat);
    }
    Ok(LossBatch {
        logits: logits.to_vec(),
        labels: labels.to_vec(),
        per_sample_loss,
        grad_logits,
        nabm_prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_tm(c: usize) -> TransitionMatrix {
        TransitionMatrix::from_rows(vec![vec![1.0 / c as f64; c]; c], vec![1; c]).unwrap()
    }

    fn uniform_prior(c: usize) -> ClassPrior {
        ClassPrior::from_counts(vec![10; c]).unwrap()
    }

    #[test]
    fn reduces_to_softmax_without_margins() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let p = nabm_probability(&z, 1, &uniform_tm(4), &uniform_prior(4), &MarginConfig::cross_entropy()).unwrap();
        for (a, b) in p.iter().zip(softmax(&z)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_two_class_case_is_half() {
        let tm = uniform_tm(2);
        let prior = uniform_prior(2);
        for cfg in [MarginConfig::shallow(), MarginConfig::deep(), MarginConfig::new(3.0, 2.0, 0.3, 0.5).unwrap()] {
            let p = nabm_probability(&[0.0, 0.0], 0, &tm, &prior, &cfg).unwrap();
            assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn three_class_example_matches_direct_evaluation() {
        let prior = ClassPrior::from_parts(vec![0.6, 0.3, 0.1], vec![6, 3, 1]).unwrap();
        let tm = TransitionMatrix::from_rows(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]],
            vec![1; 3],
        )
        .unwrap();
        let cfg = MarginConfig::new(0.5, 1.0, 1.0, 1.0).unwrap();
        let p = nabm_probability(&[1.0, 0.0, 0.0], 0, &tm, &prior, &cfg).unwrap();
        // exp(1 + 0.4 + ln 0.6), exp(0.05 + ln 0.3), exp(0.05 + ln 0.1), no max shift
        let e = [
            (1.4f64).exp() * 0.6,
            (0.05f64).exp() * 0.3,
            (0.05f64).exp() * 0.1,
        ];
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // frozen from a 40-digit evaluation
        let frozen = [0.852_640_786_795_822_05, 0.110_519_409_903_133_46, 0.036_839_803_301_044_487];
        for (a, b) in p.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut z = vec![0.0; 5];
        z[2] = 1000.0;
        assert!(cross_entropy(&z, 2).unwrap() <= 1e-10);
        assert!((cross_entropy(&[0.7; 10], 3).unwrap() - 10f64.ln()).abs() < 1e-15);
        let z: [f64; 3] = [0.2, -0.5, 1.3];
        let direct = -(z[1].exp() / z.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert!((cross_entropy(&z, 1).unwrap() - direct).abs() < 1e-12);
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(1.0, 2.0).unwrap(), 0.0);
        assert_eq!(focal_loss(1.0, 0.0).unwrap(), 0.0);
        assert!((focal_loss(0.5, 0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((focal_loss(0.5, 1.0).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!(focal_loss(0.0, 1.0).is_err());
        assert!(focal_loss(-0.1, 1.0).is_err());
    }

    #[test]
    fn single_row_batch_equals_cross_entropy() {
        let z = vec![vec![0.4, -2.0, 1.1]];
        let b = nabm_loss_batch(&z, &[2], &uniform_tm(3), &uniform_prior(3), &MarginConfig::cross_entropy()).unwrap();
        assert!((b.per_sample_loss[0] - cross_entropy(&z[0], 2).unwrap()).abs() < 1e-14);
        assert_eq!(b.mean(), b.per_sample_loss[0]);
    }

    #[test]
    fn saturated_label_has_zero_gradient_for_fractional_gamma() {
        let z = vec![vec![800.0, 0.0, 0.0]];
        let cfg = MarginConfig::new(0.0, 0.0, 1.0, 0.5).unwrap();
        let b = nabm_loss_batch(&z, &[0], &uniform_tm(3), &uniform_prior(3), &cfg).unwrap();
        assert!(b.grad_logits[0].iter().all(|g| g.is_finite() && g.abs() < 1e-300));
        assert_eq!(b.per_sample_loss[0], 0.0);
    }

    #[test]
    fn batch_rejects_bad_shapes() {
        let tm = uniform_tm(2);
        let prior = uniform_prior(2);
        let cfg = MarginConfig::shallow();
        assert!(nabm_loss_batch(&[vec![0.0, 1.0]], &[0, 1], &tm, &prior, &cfg).is_err());
        assert!(nabm_loss_batch(&[vec![0.0, 1.0, 2.0]], &[0], &tm, &prior, &cfg).is_err());
        assert!(nabm_loss_batch(&[vec![0.0, f64::INFINITY]], &[0], &tm, &prior, &cfg).is_err());
        assert!(MarginConfig::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    fn arb_logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, c)
    }

    proptest! {
        #[test]
        fn constant_shift_leaves_probability_unchanged(z in arb_logits(4), shift in -50.0f64..50.0, label in 0usize..4) {
            let tm = TransitionMatrix::from_rows(
                vec![vec![0.7, 0.1, 0.1, 0.1], vec![0.2, 0.6, 0.1, 0.1], vec![0.25; 4], vec![0.0, 0.0, 0.5, 0.5]],
                vec![1; 4],
            ).unwrap();
            let prior = ClassPrior::from_counts(vec![40, 5, 30, 12]).unwrap();
            let cfg = MarginConfig::shallow();
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let a = nabm_probability(&z, label, &tm, &prior, &cfg).unwrap();
            let b = nabm_probability(&shifted, label, &tm, &prior, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn temperature_keeps_ranking(z in arb_logits(5), s1 in 0.05f64..5.0, s2 in 0.05f64..5.0) {
            let tm = uniform_tm(5);
            let prior = ClassPrior::from_counts(vec![3, 9, 1, 4, 7]).unwrap();
            let c1 = MarginConfig::new(0.5, 1.0, s1, 1.0).unwrap();
            let c2 = MarginConfig::new(0.5, 1.0, s2, 1.0).unwrap();
            let a = nabm_probability(&z, 0, &tm, &prior, &c1).unwrap();
            let b = nabm_probability(&z, 0, &tm, &prior, &c2).unwrap();
            let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |best, (i, v)| if *v > r[best] { i } else { best });
            let (ia, ib) = (argmax(&a), argmax(&b));
            prop_assert!(ia == ib || (a[ia] - a[ib]).abs() < 1e-12 || (b[ia] - b[ib]).abs() < 1e-12);
        }

        #[test]
        fn gamma_zero_gradient_is_softmax_minus_onehot(z in arb_logits(6), label in 0usize..6, delta in 0.0f64..1.0, t in 0.0f64..1.0, s in 0.1f64..2.0) {
            let tm = TransitionMatrix::from_rows(vec![vec![1.0 / 6.0; 6]; 6], vec![1; 6]).unwrap();
            let prior = ClassPrior::from_counts(vec![5, 1, 8, 2, 9, 3]).unwrap();
            let cfg = MarginConfig::new(delta, t, s, 0.0).unwrap();
            let b = nabm_loss_batch(&[z.clone()], &[label], &tm, &prior, &cfg).unwrap();
            let p = nabm_probability(&z, label, &tm, &prior, &cfg).unwrap();
            for (j, g) in b.grad_logits[0].iter().enumerate() {
                let want = (p[j] - if j == label { 1.0 } else { 0.0 }) / s;
                prop_assert!((g - want).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_finite_and_nonnegative(z in arb_logits(3), label in 0usize..3, gamma in 0.0f64..3.0) {
            let cfg = MarginConfig::new(0.5, 1.0, 1.0, gamma).unwrap();
            let b = nabm_loss_batch(&[z], &[label], &uniform_tm(3), &ClassPrior::from_counts(vec![1, 0, 5]).unwrap(), &cfg).unwrap();
            prop_assert!(b.per_sample_loss[0].is_finite() && b.per_sample_loss[0] >= 0.0);
            prop_assert!(b.nabm_prob[0] > 0.0 && b.nabm_prob[0] <= 1.0);
        }
    }
}
