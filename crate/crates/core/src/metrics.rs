//! Classification metrics and annotator agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::label::{argmax, Label, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{what}: {left} predictions for {right} gold labels")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("score rows must have 3 entries, got {0}")]
    ScoreWidth(usize),
    #[error("kappa undefined: expected agreement is 1 (every rating is the same single label)")]
    DegenerateAgreement,
    #[error("fleiss kappa needs at least 2 ratings per item, item {item} has {count}")]
    TooFewRaters { item: usize, count: usize },
    #[error("fleiss kappa needs the same number of ratings for every item")]
    RaggedRatings,
}

type Result<T> = std::result::Result<T, MetricError>;

/// Counts indexed `[gold][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn new(preds: &[Label], golds: &[Label]) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(MetricError::LengthMismatch { what: "confusion", left: preds.len(), right: golds.len() });
        }
        let mut cm = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (p, g) in preds.iter().zip(golds) {
            cm[g.index()][p.index()] += 1;
        }
        Ok(Self(cm))
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.0[i][i]).sum()
    }

    pub fn get(&self, gold: Label, pred: Label) -> u64 {
        self.0[gold.index()][pred.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro precision, recall and F1.
///
/// Zero denominators give 0: precision of a never-predicted class, recall of
/// a class absent from the gold labels, and F1 when precision and recall are both 0.
pub fn macro_scores(cm: &ConfusionMatrix) -> Result<MacroScores> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    let per_class: [ClassScores; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = cm.0[c][c];
        let predicted: u64 = (0..NUM_CLASSES).map(|g| cm.0[g][c]).sum();
        let gold: u64 = cm.0[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassScores { precision, recall, f1 }
    });
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    Ok(MacroScores {
        accuracy: ratio(cm.trace(), total),
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
    })
}

/// Rank-statistic AUC for one binary problem, ties counted as one half.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks (1-based) over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucScores {
    /// Mean over classes whose AUC is defined; `None` when none is.
    pub macro_auc: Option<f64>,
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub warnings: Vec<String>,
}

/// One-vs-rest AUC per class and their mean over defined classes.
pub fn roc_auc_ovr(scores: &[[f64; NUM_CLASSES]], golds: &[Label]) -> Result<AucScores> {
    if scores.len() != golds.len() {
        return Err(MetricError::LengthMismatch { what: "roc_auc", left: scores.len(), right: golds.len() });
    }
    let mut warnings = Vec::new();
    let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = golds.iter().map(|g| g.index() == c).collect();
        let auc = binary_auc(&s, &pos);
        if auc.is_none() {
            warnings.push(format!("class {}: AUC undefined (needs positives and negatives); excluded from macro", c + 1));
        }
        auc
    });
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucScores { macro_auc, per_class, warnings })
}

fn kappa(p_o: f64, p_e: f64) -> Result<f64> {
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(MetricError::DegenerateAgreement);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Agreement of two annotators beyond chance.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { what: "cohen_kappa", left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ca = [0.0; NUM_CLASSES];
    let mut cb = [0.0; NUM_CLASSES];
    for (x, y) in a.iter().zip(b) {
        ca[x.index()] += 1.0;
        cb[y.index()] += 1.0;
    }
    let p_e = (0..NUM_CLASSES).map(|c| ca[c] * cb[c]).sum::<f64>() / (n * n);
    kappa(agree / n, p_e)
}

/// Agreement of a fixed number of raters per item; `ratings[i]` holds item i's labels.
pub fn fleiss_kappa(ratings: &[Vec<Label>]) -> Result<f64> {
    let first = ratings.first().ok_or(MetricError::Empty)?;
    let r = first.len();
    for (item, row) in ratings.iter().enumerate() {
        if row.len() < 2 {
            return Err(MetricError::TooFewRaters { item, count: row.len() });
        }
        if row.len() != r {
            return Err(MetricError::RaggedRatings);
        }
    }
    let (n, rf) = (ratings.len() as f64, r as f64);
    let mut totals = [0.0; NUM_CLASSES];
    let mut p_bar = 0.0;
    for row in ratings {
        let mut counts = [0.0; NUM_CLASSES];
        for l in row {
            counts[l.index()] += 1.0;
        }
        p_bar += counts.iter().map(|c| c * (c - 1.0)).sum::<f64>() / (rf * (rf - 1.0));
        for c in 0..NUM_CLASSES {
            totals[c] += counts[c];
        }
    }
    p_bar /= n;
    let p_e = totals.iter().map(|t| (t / (n * rf)).powi(2)).sum();
    kappa(p_bar, p_e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Everything one evaluation pass produces. Serializes with stable key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub roc_auc_macro: Option<f64>,
    /// Keyed by label value, `"1"` to `"3"`.
    pub per_class: BTreeMap<String, ClassReport>,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Predictions are the argmax of each probability row.
    pub fn from_probs(probs: &[[f64; NUM_CLASSES]], golds: &[Label]) -> Result<Self> {
        let preds: Vec<Label> =
            probs.iter().map(|p| Label::from_index(argmax(p)).expect("argmax of 3 entries")).collect();
        let cm = ConfusionMatrix::new(&preds, golds)?;
        let scores = macro_scores(&cm)?;
        let auc = roc_auc_ovr(probs, golds)?;
        let per_class = (0..NUM_CLASSES)
            .map(|c| {
                let s = scores.per_class[c];
                let r = ClassReport { precision: s.precision, recall: s.recall, f1: s.f1, auc: auc.per_class[c] };
                ((c + 1).to_string(), r)
            })
            .collect();
        Ok(Self {
            n: cm.total(),
            accuracy: scores.accuracy,
            macro_precision: scores.precision,
            macro_recall: scores.recall,
            macro_f1: scores.f1,
            roc_auc_macro: auc.macro_auc,
            per_class,
            confusion: cm,
            warnings: auc.warnings,
        })
    }

    pub fn class(&self, label: Label) -> &ClassReport {
        &self.per_class[&label.to_string()]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::RngExt;

    fn labels(v: &[i64]) -> Vec<Label> {
        v.iter().map(|&x| Label::new(x).unwrap()).collect()
    }

    fn random_labels(rng: &mut crate::rng::SeededRng, n: usize) -> Vec<Label> {
        (0..n).map(|_| Label::from_index(rng.random_range(0..3)).unwrap()).collect()
    }

    #[test]
    fn confusion_examples() {
        let y = labels(&[1, 2, 3]);
        let cm = ConfusionMatrix::new(&y, &y).unwrap();
        assert_eq!(cm.0, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(ConfusionMatrix::new(&[], &[]).unwrap().0, [[0; 3]; 3]);
        let cm = ConfusionMatrix::new(&labels(&[1, 1, 2]), &labels(&[1, 2, 2])).unwrap();
        assert_eq!(cm.0, [[1, 0, 0], [1, 1, 0], [0, 0, 0]]);
        assert!(ConfusionMatrix::new(&y, &y[..2]).is_err());
    }

    #[test]
    fn macro_scores_hand_example() {
        let cm = ConfusionMatrix([[2, 1, 0], [0, 3, 0], [0, 1, 2]]);
        let s = macro_scores(&cm).unwrap();
        assert!((s.accuracy - 7.0 / 9.0).abs() < 1e-15);
        let p = [1.0, 0.6, 1.0];
        let r = [2.0 / 3.0, 1.0, 2.0 / 3.0];
        let f = [0.8, 0.75, 0.8];
        for c in 0..3 {
            assert!((s.per_class[c].precision - p[c]).abs() < 1e-12);
            assert!((s.per_class[c].recall - r[c]).abs() < 1e-12);
            assert!((s.per_class[c].f1 - f[c]).abs() < 1e-12);
        }
        assert!((s.f1 - 0.78333).abs() < 1e-5);
        assert!((s.f1 - 2.35 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_scores_conventions() {
        assert!(macro_scores(&ConfusionMatrix::default()).is_err());
        let perfect = ConfusionMatrix([[3, 0, 0], [0, 4, 0], [0, 0, 1]]);
        let s = macro_scores(&perfect).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
        let single = ConfusionMatrix([[0, 0, 0], [0, 5, 0], [0, 0, 0]]);
        let s = macro_scores(&single).unwrap();
        assert_eq!(s.per_class[1].f1, 1.0);
        assert_eq!(s.per_class[0].f1, 0.0);
        assert_eq!(s.per_class[2].f1, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(binary_auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]), Some(0.75));
        assert_eq!(binary_auc(&[0.3; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(binary_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(binary_auc(&[0.9, 0.8], &[true, true]), None);
        let golds = labels(&[1, 2, 2]);
        let scores = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.2, 0.7, 0.1]];
        let auc = roc_auc_ovr(&scores, &golds).unwrap();
        assert_eq!(auc.per_class[2], None);
        assert_eq!(auc.warnings.len(), 1);
        assert_eq!(auc.macro_auc, Some(1.0));
    }

    #[test]
    fn kappa_examples() {
        let a = labels(&[1, 1, 2, 2]);
        let b = labels(&[1, 2, 2, 2]);
        assert!((cohen_kappa(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
        let same = labels(&[2, 2, 2]);
        assert_eq!(cohen_kappa(&same, &same), Err(MetricError::DegenerateAgreement));
        assert!(cohen_kappa(&a, &b[..3]).is_err());
    }

    #[test]
    fn kappa_near_zero_for_independent_raters() {
        let mut rng = seeded(11);
        let a = random_labels(&mut rng, 10_000);
        let b = random_labels(&mut rng, 10_000);
        assert!(cohen_kappa(&a, &b).unwrap().abs() < 0.05);
        let grid: Vec<Vec<Label>> = (0..10_000).map(|_| random_labels(&mut rng, 3)).collect();
        assert!(fleiss_kappa(&grid).unwrap().abs() < 0.05);
    }

    #[test]
    fn fleiss_examples() {
        let grid: Vec<Vec<Label>> = vec![labels(&[1, 1, 1]), labels(&[2, 2, 2]), labels(&[3, 3, 3])];
        assert!((fleiss_kappa(&grid).unwrap() - 1.0).abs() < 1e-12);
        // Two raters: Fleiss uses pooled marginals, so it differs from Cohen in general.
        // a = [1,1,2,2], b = [1,2,2,2]: P_bar = 0.75, pooled p = (3/8, 5/8), p_e = 34/64.
        let pairs: Vec<Vec<Label>> = [(1, 1), (1, 2), (2, 2), (2, 2)].iter().map(|&(x, y)| labels(&[x, y])).collect();
        let expect = (0.75 - 34.0 / 64.0) / (1.0 - 34.0 / 64.0);
        assert!((fleiss_kappa(&pairs).unwrap() - expect).abs() < 1e-12);
        assert!(fleiss_kappa(&[labels(&[1])]).is_err());
        assert!(fleiss_kappa(&[labels(&[1, 2]), labels(&[1, 2, 3])]).is_err());
        assert!(fleiss_kappa(&[labels(&[2, 2]), labels(&[2, 2])]).is_err());
    }

    #[test]
    fn report_keys_are_stable() {
        let golds = labels(&[1, 2, 3, 2]);
        let probs = [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.3, 0.5], [0.5, 0.4, 0.1]];
        let r = EvalReport::from_probs(&probs, &golds).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["accuracy", "macro_precision", "macro_recall", "macro_f1", "roc_auc_macro", "per_class", "confusion"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for c in ["1", "2", "3"] {
            for k in ["precision", "recall", "f1", "auc"] {
                assert!(v["per_class"][c].get(k).is_some());
            }
        }
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.to_json(), r.to_json());
    }

    /// Pair-counting AUC.
    fn auc_oracle(scores: &[f64], pos: &[bool]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Per-sample counting of TP/FP/FN without the confusion matrix.
    fn f1_oracle(preds: &[Label], golds: &[Label]) -> f64 {
        let mut total = 0.0;
        for c in Label::ALL {
            let tp = preds.iter().zip(golds).filter(|(p, g)| **p == c && **g == c).count() as f64;
            let fp = preds.iter().zip(golds).filter(|(p, g)| **p == c && **g != c).count() as f64;
            let fn_ = preds.iter().zip(golds).filter(|(p, g)| **p != c && **g == c).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            total += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        total / 3.0
    }

    #[test]
    fn brute_force_oracles_on_random_instances() {
        let mut rng = seeded(12);
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let golds = random_labels(&mut rng, n);
            let preds = random_labels(&mut rng, n);
            let s = macro_scores(&ConfusionMatrix::new(&preds, &golds).unwrap()).unwrap();
            assert!((s.f1 - f1_oracle(&preds, &golds)).abs() < 1e-10);
            // Coarse scores so ties occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let got = binary_auc(&scores, &pos);
            let want = auc_oracle(&scores, &pos);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label_vec(n: usize) -> impl Strategy<Value = Vec<Label>> {
            proptest::collection::vec((1i64..=3).prop_map(|v| Label::new(v).unwrap()), n)
        }

        proptest! {
            #[test]
            fn scores_within_bounds_and_means(golds in label_vec(12), preds in label_vec(12)) {
                let cm = ConfusionMatrix::new(&preds, &golds).unwrap();
                let s = macro_scores(&cm).unwrap();
                prop_assert_eq!(s.accuracy, cm.trace() as f64 / cm.total() as f64);
                let mean_f1 = s.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
                prop_assert!((s.f1 - mean_f1).abs() < 1e-12);
                for v in [s.accuracy, s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let Ok(k) = cohen_kappa(&preds, &golds) {
                    prop_assert!((-1.0..=1.0).contains(&k));
                }
            }

            #[test]
            fn auc_invariant_under_monotone_transform(
                scores in proptest::collection::vec(-3.0f64..3.0, 10),
                pos in proptest::collection::vec(any::<bool>(), 10),
            ) {
                let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
                prop_assert_eq!(binary_auc(&scores, &pos), binary_auc(&transformed, &pos));
            }
        }
    }
}
