//! Per-class F1, the round-by-round F1 matrix, aged-class curves, the
//! forgetting rate and out-of-distribution rejection reports.
//!
//! All values are percentages kept at full precision; rounding to two
//! decimals happens only in the text renderers. Round cells average F1
//! over a round's classes (macro F1).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored test mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mention_id: String,
    pub gold: String,
    pub predicted: String,
    /// Class probabilities, aligned with the round's `known_classes`.
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn max_probability(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

/// Predictions after one incremental round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvaluation {
    /// 1-based incremental round index.
    pub round: usize,
    /// Classes introduced in this round.
    pub new_classes: Vec<String>,
    /// Known classes in arrival order; score vectors follow this order.
    pub known_classes: Vec<String>,
    /// Cumulative in-distribution test set.
    pub predictions: Vec<Prediction>,
    /// OOD test mentions (gold labels are unseen classes).
    pub ood_predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub config_name: String,
    pub variant: String,
    pub seed: u64,
    /// Base classes learned before round 1, when included.
    pub base_classes: Vec<String>,
    pub rounds: Vec<RoundEvaluation>,
}

/// One-vs-rest F1 for `class`, as a percentage; 0 when precision and recall
/// are both undefined or zero.
pub fn per_class_f1<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, class: &str) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (gold, pred) in pairs {
        match (gold == class, pred == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// Lower-triangular matrix: `cells[e][r]` (0-based, `r <= e`) is the mean
/// F1 of round-`r` classes measured after round `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Matrix {
    pub cells: Vec<Vec<f64>>,
}

impl F1Matrix {
    pub fn new(cells: Vec<Vec<f64>>) -> Result<Self> {
        for (e, row) in cells.iter().enumerate() {
            if row.len() != e + 1 {
                return Err(Error::Data(format!("matrix row {} has {} cells, expected {}", e + 1, row.len(), e + 1)));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::Data(format!("matrix cell {v} outside [0, 100]")));
            }
        }
        Ok(Self { cells })
    }

    pub fn rounds(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, e: usize, r: usize) -> f64 {
        self.cells[e][r]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { cells: self.cells.iter().map(|r| r.iter().map(|v| v * c).collect()).collect() }
    }
}

pub fn round_matrix(result: &SessionResult) -> F1Matrix {
    let cells = result
        .rounds
        .iter()
        .enumerate()
        .map(|(e, eval)| {
            (0..=e)
                .map(|r| {
                    let classes = &result.rounds[r].new_classes;
                    let pairs: Vec<(&str, &str)> =
                        eval.predictions.iter().map(|p| (p.gold.as_str(), p.predicted.as_str())).collect();
                    let total: f64 = classes.iter().map(|c| per_class_f1(pairs.iter().copied(), c)).sum();
                    total / classes.len().max(1) as f64
                })
                .collect()
        })
        .collect();
    F1Matrix { cells }
}

/// `new` is the mean diagonal; `aged[n-1]` is `p_n`, the mean F1 of classes
/// measured `n` rounds after they were learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub new: f64,
    pub aged: Vec<f64>,
}

impl AggregateCurve {
    /// `(new, p_1, …, p_{m-1})`.
    pub fn sequence(&self) -> Vec<f64> {
        std::iter::once(self.new).chain(self.aged.iter().copied()).collect()
    }

    /// Mean of `p_1 … p_{m-1}`.
    pub fn mean_aged(&self) -> f64 {
        if self.aged.is_empty() {
            return 0.0;
        }
        self.aged.iter().sum::<f64>() / self.aged.len() as f64
    }
}

pub fn aggregate_pn(matrix: &F1Matrix) -> AggregateCurve {
    let m = matrix.rounds();
    let new = (0..m).map(|e| matrix.get(e, e)).sum::<f64>() / m.max(1) as f64;
    let aged = (1..m)
        .map(|n| (n..m).map(|e| matrix.get(e, e - n)).sum::<f64>() / (m - n) as f64)
        .collect();
    AggregateCurve { new, aged }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingFormula {
    /// Mean relative drop between successive curve values, `0/0 := 0`.
    #[default]
    RelativeDrop,
    /// Mean of the signed successive differences `(next − prev)`.
    Literal,
}

/// Forgetting rate over `(new, p_1, …)` as a percentage (relative form) or
/// in F1 points (literal form).
pub fn forgetting_rate(curve: &AggregateCurve, formula: ForgettingFormula) -> Result<f64> {
    let seq = curve.sequence();
    if let Some(v) = seq.iter().find(|v| **v < 0.0) {
        return Err(Error::NegativePrev(*v));
    }
    let steps = seq.len().saturating_sub(1);
    if steps == 0 {
        return Ok(0.0);
    }
    let total: f64 = seq
        .windows(2)
        .map(|w| match formula {
            ForgettingFormula::Literal => w[1] - w[0],
            // A zero previous value leaves nothing to forget.
            ForgettingFormula::RelativeDrop if w[0] == 0.0 => 0.0,
            ForgettingFormula::RelativeDrop => 100.0 * (w[0] - w[1]) / w[0],
        })
        .sum();
    Ok(total / steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub threshold: f64,
    /// Fraction of OOD test mentions rejected.
    pub ood_rejection_rate: f64,
    /// Fraction of in-distribution test mentions rejected.
    pub false_rejection_rate: f64,
}

fn rejected_fraction(preds: &[Prediction], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.max_probability() < threshold).count() as f64 / preds.len() as f64
}

/// A mention is rejected when its top class probability is below
/// `threshold`. Uses the final round's predictions.
pub fn ood_report(result: &SessionResult, threshold: f64) -> Result<OodReport> {
    let last = result.rounds.last().ok_or_else(|| Error::Data("session has no rounds".into()))?;
    if last.ood_predictions.is_empty() {
        return Err(Error::Data("session has no OOD predictions".into()));
    }
    Ok(OodReport {
        threshold,
        ood_rejection_rate: rejected_fraction(&last.ood_predictions, threshold),
        false_rejection_rate: rejected_fraction(&last.predictions, threshold),
    })
}

pub fn ood_sweep(result: &SessionResult, thresholds: &[f64]) -> Result<Vec<OodReport>> {
    thresholds.iter().map(|&t| ood_report(result, t)).collect()
}

/// Evenly spaced thresholds `0, 1/steps, …, 1`.
pub fn default_thresholds(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Curve and forgetting rate for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub curve: AggregateCurve,
    pub forgetting_rate: f64,
    pub formula: ForgettingFormula,
}

pub fn summarize(model: &str, matrix: &F1Matrix, formula: ForgettingFormula) -> Result<Summary> {
    let curve = aggregate_pn(matrix);
    let forgetting_rate = forgetting_rate(&curve, formula)?;
    Ok(Summary { model: model.to_string(), curve, forgetting_rate, formula })
}

/// Aligned text in the layout of a round-by-round comparison table: one
/// block per evaluation round, one line per model.
pub fn render_matrices(matrices: &BTreeMap<String, F1Matrix>) -> String {
    let m = matrices.values().map(F1Matrix::rounds).max().unwrap_or(0);
    let width = matrices.keys().map(String::len).max().unwrap_or(5).max(5);
    let mut out = String::from("# macro F1 (%) of each learning round's classes, measured after each round\n");
    out.push_str(&format!("{:<6}{:<width$}", "eval", "model"));
    for r in 1..=m {
        out.push_str(&format!("{:>9}", format!("c_{r}")));
    }
    out.push('\n');
    for e in 0..m {
        for (name, matrix) in matrices {
            if e >= matrix.rounds() {
                continue;
            }
            out.push_str(&format!("{:<6}{:<width$}", format!("c_{}", e + 1), name));
            for v in &matrix.cells[e] {
                out.push_str(&format!("{v:>9.2}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn render_summaries(summaries: &[Summary]) -> String {
    let width = summaries.iter().map(|s| s.model.len()).max().unwrap_or(5).max(5);
    let aged = summaries.iter().map(|s| s.curve.aged.len()).max().unwrap_or(0);
    let mut out = String::from("# aged-class curve (macro F1 %) and forgetting rate\n");
    out.push_str(&format!("{:<width$}{:>9}", "model", "new"));
    for n in 1..=aged {
        out.push_str(&format!("{:>9}", format!("p-{n}")));
    }
    out.push_str(&format!("{:>12}\n", "forgetting"));
    for s in summaries {
        out.push_str(&format!("{:<width$}{:>9.2}", s.model, s.curve.new));
        for v in &s.curve.aged {
            out.push_str(&format!("{v:>9.2}"));
        }
        for _ in s.curve.aged.len()..aged {
            out.push_str(&format!("{:>9}", "-"));
        }
        let unit = match s.formula {
            ForgettingFormula::RelativeDrop => "%",
            ForgettingFormula::Literal => "",
        };
        out.push_str(&format!("{:>11.2}{unit}\n", s.forgetting_rate));
    }
    out
}

pub fn render_ood(reports: &[OodReport]) -> String {
    let mut out = String::from("# OOD rejection: reject when max class probability < threshold\n");
    out.push_str(&format!("{:>10}{:>16}{:>18}\n", "threshold", "ood_rejected", "false_rejected"));
    for r in reports {
        out.push_str(&format!(
            "{:>10.3}{:>16.4}{:>18.4}\n",
            r.threshold, r.ood_rejection_rate, r.false_rejection_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(gold: &str, predicted: &str, scores: Vec<f64>) -> Prediction {
        Prediction { mention_id: format!("{gold}-{predicted}"), gold: gold.into(), predicted: predicted.into(), scores }
    }

    #[test]
    fn f1_edge_cases() {
        let pairs = [("a", "a"), ("b", "b")];
        assert_eq!(per_class_f1(pairs, "a"), 100.0);
        assert_eq!(per_class_f1(pairs, "z"), 0.0);
        // tp=1, fp=1, fn=1 → P=R=0.5 → F1=50.
        let pairs = [("a", "a"), ("a", "b"), ("b", "a")];
        assert!((per_class_f1(pairs, "a") - 50.0).abs() < 1e-12);
    }

    #[test]
    fn f1_matches_hand_count_on_random_confusions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let classes = ["a", "b", "c", "d"];
        for _ in 0..50 {
            let pairs: Vec<(&str, &str)> =
                (0..40).map(|_| (classes[rng.gen_range(0..4)], classes[rng.gen_range(0..4)])).collect();
            for c in classes {
                let tp = pairs.iter().filter(|(g, p)| *g == c && *p == c).count() as f64;
                let predicted = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
                let gold = pairs.iter().filter(|(g, _)| *g == c).count() as f64;
                let oracle = if tp == 0.0 { 0.0 } else { 100.0 * 2.0 * tp / (predicted + gold) };
                assert!((per_class_f1(pairs.iter().copied(), c) - oracle).abs() < 1e-9);
            }
        }
    }

    fn constant(m: usize, c: f64) -> F1Matrix {
        F1Matrix::new((0..m).map(|e| vec![c; e + 1]).collect()).unwrap()
    }

    #[test]
    fn constant_matrix_aggregates_to_constant() {
        let curve = aggregate_pn(&constant(5, 37.5));
        assert_eq!(curve.sequence(), vec![37.5; 5]);
        assert_eq!(forgetting_rate(&curve, ForgettingFormula::RelativeDrop).unwrap(), 0.0);
    }

    #[test]
    fn matrix_validation() {
        assert!(F1Matrix::new(vec![vec![1.0], vec![2.0]]).is_err());
        assert!(F1Matrix::new(vec![vec![101.0]]).is_err());
    }

    #[test]
    fn negative_curve_value_rejected() {
        let curve = AggregateCurve { new: 10.0, aged: vec![-1.0] };
        assert!(matches!(forgetting_rate(&curve, ForgettingFormula::RelativeDrop), Err(Error::NegativePrev(_))));
    }

    #[test]
    fn literal_formula_telescopes() {
        let curve = AggregateCurve { new: 60.0, aged: vec![40.0, 30.0, 25.0, 20.0] };
        assert!((forgetting_rate(&curve, ForgettingFormula::Literal).unwrap() - (20.0 - 60.0) / 4.0).abs() < 1e-12);
    }

    fn session(rounds: Vec<(Vec<&str>, Vec<Prediction>)>) -> SessionResult {
        let mut known: Vec<String> = Vec::new();
        let rounds = rounds
            .into_iter()
            .enumerate()
            .map(|(i, (classes, predictions))| {
                known.extend(classes.iter().map(|c| c.to_string()));
                RoundEvaluation {
                    round: i + 1,
                    new_classes: classes.iter().map(|c| c.to_string()).collect(),
                    known_classes: known.clone(),
                    predictions,
                    ood_predictions: vec![pred("ood", "a", vec![0.9, 0.1]), pred("ood", "a", vec![0.5, 0.5])],
                }
            })
            .collect();
        SessionResult { config_name: "t".into(), variant: "v".into(), seed: 0, base_classes: vec![], rounds }
    }

    #[test]
    fn single_round_matrix() {
        let s = session(vec![(vec!["a", "b"], vec![pred("a", "a", vec![]), pred("b", "a", vec![])])]);
        let m = round_matrix(&s);
        // a: tp=1 fp=1 fn=0 → 66.67; b: 0.
        assert_eq!(m.rounds(), 1);
        assert!((m.get(0, 0) - (200.0 / 3.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn ood_thresholds() {
        let s = session(vec![(vec!["a", "b"], vec![pred("a", "a", vec![0.6, 0.4])])]);
        let r0 = ood_report(&s, 0.0).unwrap();
        assert_eq!((r0.ood_rejection_rate, r0.false_rejection_rate), (0.0, 0.0));
        let r1 = ood_report(&s, 1.0 + 1e-9).unwrap();
        assert_eq!((r1.ood_rejection_rate, r1.false_rejection_rate), (1.0, 1.0));
        let mid = ood_report(&s, 0.7).unwrap();
        assert_eq!((mid.ood_rejection_rate, mid.false_rejection_rate), (0.5, 1.0));
    }

    #[test]
    fn renderers_produce_aligned_rows() {
        let mut ms = BTreeMap::new();
        ms.insert("A".to_string(), constant(2, 50.0));
        let text = render_matrices(&ms);
        assert!(text.contains("c_2   A        50.00    50.00"));
        let s = summarize("A", &constant(2, 50.0), ForgettingFormula::RelativeDrop).unwrap();
        assert!(render_summaries(&[s]).contains("0.00%"));
    }
}
