//! Training objectives: focal loss, its context-weighted variant and the
//! cross-entropy baselines. Every loss takes class probabilities `(B, 3)` and
//! reduces by the batch mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::tensor::Tensor;

/// Probabilities are clamped to at least this before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Cafl,
    Focal,
    CrossEntropy,
    WeightedCe,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cafl" => Ok(Self::Cafl),
            "focal" => Ok(Self::Focal),
            "cross_entropy" => Ok(Self::CrossEntropy),
            "weighted_ce" => Ok(Self::WeightedCe),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    InverseFrequency,
}

/// Class weights: explicit, or derived from the training label counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Explicit([f64; NUM_CLASSES]),
    Rule(AlphaRule),
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Rule(AlphaRule::InverseFrequency)
    }
}

impl Alpha {
    /// Concrete weights given the training labels.
    pub fn resolve(&self, train_labels: &[Label]) -> Result<[f64; NUM_CLASSES]> {
        let alpha = match self {
            Alpha::Explicit(a) => *a,
            Alpha::Rule(AlphaRule::InverseFrequency) => inverse_frequency(train_labels)?,
        };
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive and finite, got {alpha:?}")));
        }
        Ok(alpha)
    }
}

/// `1 / n_c`, scaled so the three weights average to 1.
pub fn inverse_frequency(labels: &[Label]) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {} has no training examples; inverse-frequency weights undefined", c + 1)));
    }
    let inv = counts.map(|n| 1.0 / n as f64);
    let mean = inv.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(inv.map(|v| v / mean))
}

fn check(probs: &Tensor, labels: &[Label]) -> Result<Vec<usize>> {
    if probs.shape() != [labels.len(), NUM_CLASSES] {
        return Err(Error::Usage(format!("{} labels for probabilities of shape {:?}", labels.len(), probs.shape())));
    }
    Ok(labels.iter().map(|l| l.index()).collect())
}

fn per_sample_alpha(idx: &[usize], alpha: &[f64; NUM_CLASSES]) -> Tensor {
    Tensor::from_vec(idx.iter().map(|&i| alpha[i]).collect())
}

/// `-log max(p, floor)` elementwise.
fn neg_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp_min(PROB_FLOOR).log()?.scale(-1.0))
}

/// `(1 - p)^gamma`, or `None` when `gamma == 0`.
fn modulation(p: &Tensor, gamma: f64) -> Option<Tensor> {
    (gamma != 0.0).then(|| p.affine(-1.0, 1.0).clamp_min(0.0).powf(gamma))
}

/// Per-sample focal terms `(B,)` at the true class.
pub fn focal_per_sample(probs: &Tensor, labels: &[Label], alpha: &[f64; NUM_CLASSES], gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let idx = check(probs, labels)?;
    let p = probs.pick(&idx)?;
    let mut loss = neg_log(&p)?.mul(&per_sample_alpha(&idx, alpha))?;
    if let Some(m) = modulation(&p, gamma) {
        loss = loss.mul(&m)?;
    }
    Ok(loss)
}

/// Per-sample focal terms summed over every class instead of the true one.
///
/// This ignores the label entirely, so it only rewards confident predictions
/// of any class. Kept for comparison.
pub fn all_class_focal_per_sample(probs: &Tensor, alpha: &[f64; NUM_CLASSES], gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let (b, c) = (probs.shape()[0], NUM_CLASSES);
    if probs.shape() != [b, c] {
        return Err(Error::Usage(format!("probabilities must be (B, 3), got {:?}", probs.shape())));
    }
    let a = Tensor::new(&[b, c], (0..b).flat_map(|_| alpha.iter().copied()).collect())?;
    let mut loss = neg_log(probs)?.mul(&a)?;
    if let Some(m) = modulation(probs, gamma) {
        loss = loss.mul(&m)?;
    }
    Ok(loss.sum_axis(1)?)
}

pub fn focal(probs: &Tensor, labels: &[Label], alpha: &[f64; NUM_CLASSES], gamma: f64) -> Result<Tensor> {
    Ok(focal_per_sample(probs, labels, alpha, gamma)?.mean_all())
}

/// Focal loss with every sample scaled by a constant weight `(B,)`.
pub fn cafl(
    probs: &Tensor,
    labels: &[Label],
    context: &Tensor,
    alpha: &[f64; NUM_CLASSES],
    gamma: f64,
) -> Result<Tensor> {
    weighted_mean(&focal_per_sample(probs, labels, alpha, gamma)?, context)
}

fn weighted_mean(per_sample: &Tensor, context: &Tensor) -> Result<Tensor> {
    if context.shape() != per_sample.shape() {
        return Err(Error::Usage(format!(
            "context weights {:?} do not match batch {:?}",
            context.shape(),
            per_sample.shape()
        )));
    }
    Ok(per_sample.mul(&context.detach())?.mean_all())
}

pub fn cross_entropy(probs: &Tensor, labels: &[Label]) -> Result<Tensor> {
    let idx = check(probs, labels)?;
    Ok(neg_log(&probs.pick(&idx)?)?.mean_all())
}

pub fn weighted_ce(probs: &Tensor, labels: &[Label], alpha: &[f64; NUM_CLASSES]) -> Result<Tensor> {
    let idx = check(probs, labels)?;
    Ok(neg_log(&probs.pick(&idx)?)?.mul(&per_sample_alpha(&idx, alpha))?.mean_all())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: Alpha,
    /// Sum the focal term over every class rather than only the true one.
    pub all_class_sum: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Cafl, gamma: 2.0, alpha: Alpha::default(), all_class_sum: false }
    }
}

impl LossConfig {
    pub fn objective(&self, train_labels: &[Label]) -> Result<Objective> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("loss.gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(Objective { kind: self.kind, alpha: self.alpha.resolve(train_labels)?, gamma: self.gamma, all_class_sum: self.all_class_sum })
    }
}

/// A loss kind with resolved class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub kind: LossKind,
    pub alpha: [f64; NUM_CLASSES],
    pub gamma: f64,
    pub all_class_sum: bool,
}

impl Objective {
    /// `context` is the per-sample weight, used only by [`LossKind::Cafl`].
    pub fn loss(&self, probs: &Tensor, labels: &[Label], context: &Tensor) -> Result<Tensor> {
        let focal_terms = || {
            if self.all_class_sum {
                check(probs, labels)?;
                all_class_focal_per_sample(probs, &self.alpha, self.gamma)
            } else {
                focal_per_sample(probs, labels, &self.alpha, self.gamma)
            }
        };
        match self.kind {
            LossKind::Cafl => weighted_mean(&focal_terms()?, context),
            LossKind::Focal => Ok(focal_terms()?.mean_all()),
            LossKind::CrossEntropy => cross_entropy(probs, labels),
            LossKind::WeightedCe => weighted_ce(probs, labels, &self.alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cue::{attend, contextual_weight, ContextMode};
    use crate::rng::seeded;
    use crate::testing::check_grads;
    use rand::RngExt;

    const ONES: [f64; 3] = [1.0; 3];

    fn labels(v: &[i64]) -> Vec<Label> {
        v.iter().map(|&x| Label::new(x).unwrap()).collect()
    }

    fn probs(rows: &[[f64; 3]]) -> Tensor {
        Tensor::new(&[rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap()
    }

    fn random_probs(rng: &mut crate::rng::SeededRng, b: usize) -> Tensor {
        let z: Vec<f64> = (0..b * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
        Tensor::new(&[b, 3], z).unwrap().softmax()
    }

    fn random_labels(rng: &mut crate::rng::SeededRng, b: usize) -> Vec<Label> {
        (0..b).map(|_| Label::from_index(rng.random_range(0..3)).unwrap()).collect()
    }

    #[test]
    fn focal_scalar_examples() {
        let p = probs(&[[0.25, 0.5, 0.25]]);
        let y = labels(&[2]);
        let l = focal(&p, &y, &ONES, 2.0).unwrap().item();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.173287).abs() < 1e-6);
        assert_eq!(focal(&probs(&[[0.0, 1.0, 0.0]]), &y, &ONES, 2.0).unwrap().item(), 0.0);
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let p = random_probs(&mut rng, 6);
            let y = random_labels(&mut rng, 6);
            let f = focal(&p, &y, &ONES, 0.0).unwrap().item();
            let ce = cross_entropy(&p, &y).unwrap().item();
            assert!((f - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let u = probs(&[[1.0 / 3.0; 3], [1.0 / 3.0; 3]]);
        let y = labels(&[1, 3]);
        assert!((cross_entropy(&u, &y).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&u, &y).unwrap().item() - 1.098612).abs() < 1e-6);
        let p = probs(&[[0.05, 0.9, 0.05]]);
        let y = labels(&[2]);
        let w = weighted_ce(&p, &y, &[1.0, 2.0, 1.0]).unwrap().item();
        assert!((w - (-2.0 * 0.9f64.ln())).abs() < 1e-15);
        assert!((w - 0.210721).abs() < 1e-6);
        let mut rng = seeded(2);
        let p = random_probs(&mut rng, 5);
        let y = random_labels(&mut rng, 5);
        assert_eq!(weighted_ce(&p, &y, &ONES).unwrap().item(), cross_entropy(&p, &y).unwrap().item());
    }

    #[test]
    fn cafl_examples() {
        let p = probs(&[[0.25, 0.5, 0.25]]);
        let y = labels(&[2]);
        let mask = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let s = Tensor::new(&[1, 2], vec![2.0, -2.0]).unwrap();
        let a = attend(&s, &mask).unwrap();
        let w = contextual_weight(&s, &a, &mask, ContextMode::SigmoidMean).unwrap();
        let l = cafl(&p, &y, &w, &ONES, 2.0).unwrap().item();
        assert!((l - 0.5 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.086643).abs() < 1e-6);

        let zero = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let w = contextual_weight(&zero, &attend(&zero, &mask).unwrap(), &mask, ContextMode::SigmoidMean).unwrap();
        let f = focal(&p, &y, &ONES, 2.0).unwrap().item();
        assert_eq!(cafl(&p, &y, &w, &ONES, 2.0).unwrap().item(), 0.5 * f);
    }

    #[test]
    fn paper_literal_cafl_is_focal() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let p = random_probs(&mut rng, 4);
            let y = random_labels(&mut rng, 4);
            let s = Tensor::new(&[4, 5], (0..20).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
            let mask = Tensor::new(&[4, 5], (0..20).map(|i| if i % 5 < 1 + (i / 5) { 1.0 } else { 0.0 }).collect()).unwrap();
            let a = attend(&s, &mask).unwrap();
            let w = contextual_weight(&s, &a, &mask, ContextMode::PaperLiteral).unwrap();
            let alpha = [0.5, 1.5, 1.0];
            let c = cafl(&p, &y, &w, &alpha, 2.0).unwrap().item();
            let f = focal(&p, &y, &alpha, 2.0).unwrap().item();
            assert!((c - f).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_labels_and_negative_gamma() {
        let p = probs(&[[0.2, 0.3, 0.5]]);
        assert!(focal(&p, &labels(&[1, 2]), &ONES, 2.0).is_err());
        assert!(focal(&p, &labels(&[1]), &ONES, -1.0).is_err());
        assert!(cross_entropy(&p, &[]).is_err());
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let p = probs(&[[1.0, 0.0, 0.0]]);
        let l = cross_entropy(&p, &labels(&[2])).unwrap().item();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn inverse_frequency_weights() {
        let y = labels(&[1, 2, 2, 2, 3, 3]);
        let a = inverse_frequency(&y).unwrap();
        // 1/n = (1, 1/3, 1/2), mean 11/18
        assert!((a[0] - 18.0 / 11.0).abs() < 1e-12);
        assert!((a[1] - 6.0 / 11.0).abs() < 1e-12);
        assert!((a[2] - 9.0 / 11.0).abs() < 1e-12);
        assert!(inverse_frequency(&labels(&[1, 2])).is_err());
        assert!(Alpha::Explicit([1.0, 0.0, 1.0]).resolve(&y).is_err());
    }

    #[test]
    fn alpha_serde_forms() {
        let a: Alpha = serde_json::from_str("\"inverse_frequency\"").unwrap();
        assert_eq!(a, Alpha::Rule(AlphaRule::InverseFrequency));
        let a: Alpha = serde_json::from_str("[1.0, 2.0, 3.0]").unwrap();
        assert_eq!(a, Alpha::Explicit([1.0, 2.0, 3.0]));
        assert!(serde_json::from_str::<Alpha>("\"median\"").is_err());
    }

    #[test]
    fn all_class_sum_ignores_labels() {
        let p = probs(&[[0.2, 0.3, 0.5]]);
        let ctx = Tensor::from_vec(vec![1.0]);
        let obj = Objective { kind: LossKind::Focal, alpha: ONES, gamma: 2.0, all_class_sum: true };
        let a = obj.loss(&p, &labels(&[1]), &ctx).unwrap().item();
        let b = obj.loss(&p, &labels(&[3]), &ctx).unwrap().item();
        assert_eq!(a, b);
        let expect: f64 = [0.2f64, 0.3, 0.5].iter().map(|p| -(1.0 - p).powi(2) * p.ln()).sum();
        assert!((a - expect).abs() < 1e-15);
    }

    #[test]
    fn focal_and_cafl_gradients() {
        for seed in 0..3 {
            let mut rng = seeded(seed);
            let z = Tensor::leaf(&[4, 3], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let y = random_labels(&mut rng, 4);
            let alpha = [1.7, 0.4, 0.9];
            check_grads(&[z.clone()], |v| focal(&v[0].softmax(), &y, &alpha, 2.0).unwrap());
            let s = Tensor::leaf(&[4, 3], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let mask = Tensor::new(&[4, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
            let a = attend(&s, &mask).unwrap();
            let w = contextual_weight(&s, &a, &mask, ContextMode::SigmoidMean).unwrap();
            check_grads(&[z.clone()], |v| cafl(&v[0].softmax(), &y, &w, &alpha, 2.0).unwrap());
            // Gradients with respect to the probabilities themselves.
            let p = Tensor::leaf(&[4, 3], random_probs(&mut rng, 4).to_vec()).unwrap();
            let w = Tensor::from_vec(vec![0.3, 0.6, 0.5, 0.7]);
            check_grads(&[p], |v| cafl(&v[0], &y, &w, &alpha, 2.0).unwrap());
        }
    }

    #[test]
    fn cafl_has_no_gradient_through_scores() {
        let mut rng = seeded(4);
        let s = Tensor::leaf(&[2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mask = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        let p = random_probs(&mut rng, 2);
        let y = random_labels(&mut rng, 2);
        let a = attend(&s, &mask).unwrap();
        let w = contextual_weight(&s, &a, &mask, ContextMode::SigmoidMean).unwrap();
        let l = cafl(&p, &y, &w, &ONES, 2.0).unwrap();
        l.backward().unwrap();
        assert!(s.grad().is_none());
        // In literal mode the loss value itself does not move with the scores.
        let literal = |s: &Tensor| {
            let a = attend(s, &mask).unwrap();
            let w = contextual_weight(s, &a, &mask, ContextMode::PaperLiteral).unwrap();
            cafl(&p, &y, &w, &ONES, 2.0).unwrap().item()
        };
        let h = 1e-5;
        for i in 0..6 {
            let shift = |d: f64| {
                let mut v = s.to_vec();
                v[i] += d;
                Tensor::new(&[2, 3], v).unwrap()
            };
            assert!(((literal(&shift(h)) - literal(&shift(-h))) / (2.0 * h)).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn focal_bounded_by_cross_entropy(p in 1e-6f64..1.0, gamma in 0.01f64..5.0) {
                let rest = (1.0 - p) / 2.0;
                let pr = probs(&[[p, rest, rest]]);
                let y = labels(&[1]);
                let f = focal(&pr, &y, &ONES, gamma).unwrap().item();
                let ce = cross_entropy(&pr, &y).unwrap().item();
                prop_assert!(f <= ce + 1e-15);
            }

            #[test]
            fn focal_decreases_in_true_probability(p in 1e-6f64..0.999, dp in 1e-4f64..0.5, gamma in 0.0f64..5.0) {
                let q = (p + dp).min(1.0);
                let at = |v: f64| focal(&probs(&[[v, (1.0 - v) / 2.0, (1.0 - v) / 2.0]]), &labels(&[1]), &ONES, gamma).unwrap().item();
                prop_assert!(at(q) <= at(p));
            }
        }
    }
}
