//! Confusion matrices, per-label and macro precision/recall/F1, and
//! side-by-side run comparison.
//!
//! Conventions: a zero denominator scores 0. Macro averages run over the
//! labels that have gold support; labels absent from gold are excluded.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, PredictionFile};
use crate::label::EmotionLabel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("gold instance {0:?} has no label")]
    MissingGold(String),
    #[error("prediction for {0:?} has no gold instance")]
    UnknownId(String),
    #[error("no prediction for gold instance {0:?}")]
    MissingPrediction(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("length mismatch: {gold} gold vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
}

/// Counts indexed `[gold][predicted]` in canonical label order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 6]; 6],
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (EmotionLabel, EmotionLabel)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (g, p) in pairs {
            cm.add(g, p);
        }
        cm
    }

    pub fn add(&mut self, gold: EmotionLabel, pred: EmotionLabel) {
        self.counts[gold.index()][pred.index()] += 1;
        self.total += 1;
    }

    pub fn get(&self, gold: EmotionLabel, pred: EmotionLabel) -> u64 {
        self.counts[gold.index()][pred.index()]
    }

    pub fn true_positives(&self, l: EmotionLabel) -> u64 {
        self.get(l, l)
    }

    /// Gold count of `l`.
    pub fn support(&self, l: EmotionLabel) -> u64 {
        self.counts[l.index()].iter().sum()
    }

    /// Predicted count of `l`.
    pub fn predicted(&self, l: EmotionLabel) -> u64 {
        self.counts.iter().map(|row| row[l.index()]).sum()
    }

    pub fn trace(&self) -> u64 {
        EmotionLabel::ALL.iter().map(|&l| self.true_positives(l)).sum()
    }

    /// Gold labels down, predictions across.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in EmotionLabel::ALL {
            out.push('\t');
            out.push_str(l.canonical_text());
        }
        out.push('\n');
        for g in EmotionLabel::ALL {
            out.push_str(g.canonical_text());
            for p in EmotionLabel::ALL {
                let _ = write!(out, "\t{}", self.get(g, p));
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: EmotionLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// All six labels in canonical order, including unsupported ones.
    pub per_label: Vec<LabelMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub evaluated: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_label: Vec<LabelMetrics> = EmotionLabel::ALL
            .iter()
            .map(|&l| {
                let tp = cm.true_positives(l);
                let precision = ratio(tp, cm.predicted(l));
                let recall = ratio(tp, cm.support(l));
                LabelMetrics {
                    label: l,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support: cm.support(l),
                }
            })
            .collect();
        let included: Vec<&LabelMetrics> = per_label.iter().filter(|m| m.support > 0).collect();
        let avg = |f: fn(&LabelMetrics) -> f64| mean(&included.iter().map(|m| f(m)).collect::<Vec<_>>());
        MetricsReport {
            macro_precision: avg(|m| m.precision),
            macro_recall: avg(|m| m.recall),
            macro_f1: avg(|m| m.f1),
            accuracy: ratio(cm.trace(), cm.total),
            evaluated: cm.total,
            per_label,
            confusion: *cm,
        }
    }

    pub fn label(&self, l: EmotionLabel) -> &LabelMetrics {
        &self.per_label[l.index()]
    }

    /// Per-label table plus macro row.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>9} {:>9} {:>9} {:>8}\n",
            "Label", "F1", "Precision", "Recall", "Support"
        );
        for m in &self.per_label {
            let _ = writeln!(
                out,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.label.canonical_text(),
                m.f1,
                m.precision,
                m.recall,
                m.support
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}\naccuracy {:.4}",
            "macro", self.macro_f1, self.macro_precision, self.macro_recall, self.evaluated, self.accuracy
        );
        out
    }
}

/// Metrics over parallel gold/predicted label slices.
pub fn evaluate_labels(gold: &[EmotionLabel], pred: &[EmotionLabel]) -> Result<MetricsReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let cm = ConfusionMatrix::from_pairs(gold.iter().copied().zip(pred.iter().copied()));
    Ok(MetricsReport::from_confusion(&cm))
}

/// Scores `pred` against the gold labels of `gold`. Id sets must match.
pub fn evaluate(gold: &Dataset, pred: &PredictionFile) -> Result<MetricsReport, EvalError> {
    let gold_ids: HashSet<&str> = gold.instances.iter().map(|i| i.id.as_str()).collect();
    if let Some(p) = pred.predictions.iter().find(|p| !gold_ids.contains(p.instance_id.as_str())) {
        return Err(EvalError::UnknownId(p.instance_id.clone()));
    }
    let by_id = pred.label_map();
    let mut cm = ConfusionMatrix::default();
    for inst in &gold.instances {
        let g = inst.gold.ok_or_else(|| EvalError::MissingGold(inst.id.clone()))?;
        let p = by_id
            .get(inst.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(inst.id.clone()))?;
        cm.add(g, *p);
    }
    if cm.total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(MetricsReport::from_confusion(&cm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// Sorted by macro-F1, descending; ties keep input order.
    pub rows: Vec<ComparisonRow>,
    /// Row index holding the best value per column: f1, precision, recall, accuracy.
    pub best: [usize; 4],
}

pub const COMPARISON_COLUMNS: [&str; 4] = ["F1-score", "Precision", "Recall", "Accuracy"];

impl ComparisonRow {
    fn values(&self) -> [f64; 4] {
        [self.f1, self.precision, self.recall, self.accuracy]
    }
}

pub fn compare_runs(reports: &[(String, MetricsReport)]) -> ComparisonTable {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            name: name.clone(),
            f1: r.macro_f1,
            precision: r.macro_precision,
            recall: r.macro_recall,
            accuracy: r.accuracy,
        })
        .collect();
    rows.sort_by(|a, b| b.f1.total_cmp(&a.f1));
    let mut best = [0usize; 4];
    for (col, slot) in best.iter_mut().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            if row.values()[col] > rows[*slot].values()[col] {
                *slot = i;
            }
        }
    }
    ComparisonTable { rows, best }
}

impl ComparisonTable {
    /// Aligned text; the best value of each column is starred.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}", "Model");
        for c in COMPARISON_COLUMNS {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<width$}", row.name);
            for (col, v) in row.values().iter().enumerate() {
                let star = if self.best[col] == i { "*" } else { " " };
                let _ = write!(out, " {:>9.4}{star}", v);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{Instance, ModelId, Prediction};
    use proptest::prelude::*;
    use EmotionLabel::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = vec![Joy, Anger, Neutral, Love];
        let r = evaluate_labels(&g, &g).unwrap();
        assert_eq!((r.macro_f1, r.macro_precision, r.macro_recall, r.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_three_instances() {
        let r = evaluate_labels(&[Joy, Joy, Anger], &[Joy, Anger, Anger]).unwrap();
        let joy = r.label(Joy);
        assert!(close(joy.precision, 1.0) && close(joy.recall, 0.5) && close(joy.f1, 2.0 / 3.0));
        let anger = r.label(Anger);
        assert!(close(anger.precision, 0.5) && close(anger.recall, 1.0) && close(anger.f1, 2.0 / 3.0));
        assert!(close(r.macro_f1, 2.0 / 3.0));
        assert!(close(r.accuracy, 2.0 / 3.0));
        assert_eq!(r.label(Fear).support, 0);
    }

    #[test]
    fn predicted_but_unsupported_label_is_excluded_from_macro() {
        // gold has only Joy; a Fear prediction lowers Joy recall but Fear is not averaged.
        let r = evaluate_labels(&[Joy, Joy], &[Joy, Fear]).unwrap();
        assert!(close(r.macro_f1, r.label(Joy).f1));
        assert_eq!(r.label(Fear).precision, 0.0);
    }

    #[test]
    fn dataset_evaluation_checks_ids() {
        let gold = Dataset::from_instances(vec![
            Instance::new("1", "a").with_gold(Joy),
            Instance::new("2", "b").with_gold(Fear),
        ])
        .unwrap();
        let m = ModelId::new("m").unwrap();
        let full = PredictionFile::new(
            m.clone(),
            vec![
                Prediction::labeled("2", Fear, m.clone(), ""),
                Prediction::labeled("1", Joy, m.clone(), ""),
            ],
        )
        .unwrap();
        assert_eq!(evaluate(&gold, &full).unwrap().macro_f1, 1.0);

        let partial = PredictionFile::new(m.clone(), vec![Prediction::labeled("1", Joy, m.clone(), "")]).unwrap();
        assert_eq!(evaluate(&gold, &partial), Err(EvalError::MissingPrediction("2".into())));

        let extra = PredictionFile::new(
            m.clone(),
            vec![
                Prediction::labeled("1", Joy, m.clone(), ""),
                Prediction::labeled("2", Joy, m.clone(), ""),
                Prediction::labeled("3", Joy, m.clone(), ""),
            ],
        )
        .unwrap();
        assert_eq!(evaluate(&gold, &extra), Err(EvalError::UnknownId("3".into())));

        let unlabeled = Dataset::from_instances(vec![Instance::new("1", "a")]).unwrap();
        let one = PredictionFile::new(m.clone(), vec![Prediction::labeled("1", Joy, m, "")]).unwrap();
        assert_eq!(evaluate(&unlabeled, &one), Err(EvalError::MissingGold("1".into())));
    }

    #[test]
    fn confusion_tsv_shape() {
        let cm = ConfusionMatrix::from_pairs([(Joy, Anger), (Joy, Joy)]);
        let tsv = cm.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[2], "Joy\t0\t1\t1\t0\t0\t0");
    }

    fn report(f1_pairs: &[(EmotionLabel, EmotionLabel)]) -> MetricsReport {
        MetricsReport::from_confusion(&ConfusionMatrix::from_pairs(f1_pairs.iter().copied()))
    }

    #[test]
    fn comparison_sorts_and_marks_best() {
        let good = report(&[(Joy, Joy), (Anger, Anger)]);
        let bad = report(&[(Joy, Anger), (Anger, Anger)]);
        let t = compare_runs(&[("bad".into(), bad), ("good".into(), good)]);
        assert_eq!(t.rows[0].name, "good");
        assert_eq!(t.best, [0, 0, 0, 0]);
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("good"));

        let single = compare_runs(&[("only".into(), report(&[(Joy, Joy)]))]);
        assert_eq!(single.rows.len(), 1);
    }

    fn arb_label() -> impl Strategy<Value = EmotionLabel> {
        (0usize..6).prop_map(|i| EmotionLabel::ALL[i])
    }

    proptest! {
        #[test]
        fn macro_is_mean_of_supported_labels(pairs in prop::collection::vec((arb_label(), arb_label()), 1..200)) {
            let (g, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = evaluate_labels(&g, &p).unwrap();
            let f1s: Vec<f64> = r.per_label.iter().filter(|m| m.support > 0).map(|m| m.f1).collect();
            prop_assert!(close(r.macro_f1, mean(&f1s)));
            for m in &r.per_label {
                prop_assert!((0.0..=1.0).contains(&m.f1));
                prop_assert!((0.0..=1.0).contains(&m.precision));
                prop_assert!((0.0..=1.0).contains(&m.recall));
            }
            prop_assert_eq!(r.confusion.counts.iter().flatten().sum::<u64>(), r.evaluated);
        }

        #[test]
        fn permuting_rows_changes_nothing(pairs in prop::collection::vec((arb_label(), arb_label()), 1..100), seed: u64) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (g1, p1): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let (g2, p2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(evaluate_labels(&g1, &p1).unwrap(), evaluate_labels(&g2, &p2).unwrap());
        }
    }
}
