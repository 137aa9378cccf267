//! Ranking and accuracy metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flexdata::{Label, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// `None` when no class has both positives and negatives.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
}

/// Area under the ROC curve by the rank statistic; tied scores earn half
/// credit. `None` for single-class labels.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve by step integration over
/// descending score thresholds (tie groups enter together).
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        area += (recall - last_recall) * tp as f64 / seen as f64;
        last_recall = recall;
        i = j + 1;
    }
    Some(area)
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics from per-sample score vectors (probabilities per output).
pub fn compute_metrics(objective: &Objective, scores: &[Vec<f64>], labels: &[Label]) -> Result<Metrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Precondition("metrics need one nonempty score row per label".into()));
    }
    let width = objective.outputs();
    if scores.iter().any(|s| s.len() != width) || labels.iter().any(|l| !l.conforms(objective)) {
        return Err(Error::Precondition("score or label width does not match the objective".into()));
    }
    let column = |c: usize| scores.iter().map(|s| s[c]).collect::<Vec<f64>>();
    let n = labels.len() as f64;
    Ok(match objective {
        Objective::Binary => {
            let y: Vec<bool> = labels.iter().map(|l| matches!(l, Label::Binary(true))).collect();
            let s = column(0);
            let correct = s.iter().zip(&y).filter(|(p, y)| (**p >= 0.5) == **y).count();
            Metrics {
                auroc: auroc(&s, &y),
                auprc: auprc(&s, &y),
                accuracy: correct as f64 / n,
            }
        }
        Objective::Multiclass(k) => {
            let class = |l: &Label| match l {
                Label::Class(c) => *c,
                _ => unreachable!("checked by conforms"),
            };
            let one_vs_rest = |c: usize| labels.iter().map(|l| class(l) == c).collect::<Vec<bool>>();
            let argmax = |s: &[f64]| {
                let mut best = 0;
                for (i, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = i;
                    }
                }
                best
            };
            let correct = scores.iter().zip(labels).filter(|(s, l)| argmax(s) == class(l)).count();
            Metrics {
                auroc: macro_mean((0..*k).map(|c| auroc(&column(c), &one_vs_rest(c)))),
                auprc: macro_mean((0..*k).map(|c| auprc(&column(c), &one_vs_rest(c)))),
                accuracy: correct as f64 / n,
            }
        }
        Objective::Multilabel(k) => {
            let bit = |c: usize| {
                labels
                    .iter()
                    .map(|l| match l {
                        Label::Multi(b) => b[c],
                        _ => unreachable!("checked by conforms"),
                    })
                    .collect::<Vec<bool>>()
            };
            let mut correct = 0usize;
            for c in 0..*k {
                correct += column(c).iter().zip(bit(c)).filter(|(p, y)| (**p >= 0.5) == *y).count();
            }
            Metrics {
                auroc: macro_mean((0..*k).map(|c| auroc(&column(c), &bit(c)))),
                auprc: macro_mean((0..*k).map(|c| auprc(&column(c), &bit(c)))),
                accuracy: correct as f64 / (n * *k as f64),
            }
        }
    })
}
