//! ROC/AUC machinery: rank-based AUC, tie-aware ROC curves, one-vs-rest
//! per-event evaluation and the macro/micro summaries over them.
//!
//! AUC is computed from average ranks (the Mann–Whitney statistic with ties
//! counting one half), which matches brute-force pairwise counting exactly —
//! both reduce to the same half-integer numerator over positives × negatives.

use serde::Serialize;

use crate::classifiers::{ClassifierSpec, TrainedClassifier};
use crate::error::{Error, Result};
use crate::features_global::{FeatureSpec, FeatureVector};

/// One vertex of a ROC curve. `threshold` is the score at or above which
/// items are called positive; `None` marks the (0,0) start vertex, which sits
/// above every score.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

/// A one-vs-rest ROC curve for one event.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RocCurve {
    pub event: String,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Area under the curve by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }
}

/// Result of evaluating one event one-vs-rest: either an AUC with its curve,
/// or a diagnostic explaining why the AUC is undefined.
#[derive(Debug, Clone, Serialize)]
pub struct EventOutcome {
    pub event: String,
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<RocCurve>,
}

/// Everything needed to reproduce an evaluation, embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub classifier: ClassifierSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_spec: Option<FeatureSpec>,
    pub classes: Vec<String>,
    pub test_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub outcomes: Vec<EventOutcome>,
    /// Unweighted mean of the defined per-event AUCs; `None` when every
    /// event's AUC is undefined.
    pub macro_auc: Option<f64>,
    /// AUC over all (item, event) score/label pairs pooled together.
    pub micro_auc: Option<f64>,
    pub metadata: RunMetadata,
}

impl EvaluationReport {
    pub fn outcome(&self, event: &str) -> Option<&EventOutcome> {
        self.outcomes.iter().find(|o| o.event == event)
    }
}

fn check_binary_instance(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Evaluation("empty score list".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(Error::Evaluation("auc undefined: no positive labels".into()));
    }
    if negatives == 0 {
        return Err(Error::Evaluation("auc undefined: no negative labels".into()));
    }
    Ok((positives, negatives))
}

/// Rank-based (Mann–Whitney) AUC; tied positive/negative pairs count 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check_binary_instance(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average 1-based ranks over tie groups; sum the positives' ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j average to (i + j + 1) / 2.
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC curve swept over descending score thresholds. Vertices are emitted
/// per distinct threshold with collinear interior points merged, so the
/// curve starts at (0,0), ends at (1,1), and the trapezoid area equals
/// [`auc`] up to rounding.
pub fn roc_curve(event: &str, scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (positives, negatives) = check_binary_instance(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    // Integer (fp, tp) path, one vertex per distinct threshold.
    let mut verts: Vec<(i64, i64, Option<f64>)> = vec![(0, 0, None)];
    let mut tp = 0i64;
    let mut fp = 0i64;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == threshold {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        verts.push((fp, tp, Some(threshold)));
        i = j;
    }

    // Drop interior vertices that sit on the segment between neighbours
    // (exact integer cross product, so no rounding is involved).
    let mut merged: Vec<(i64, i64, Option<f64>)> = Vec::with_capacity(verts.len());
    for v in verts {
        while merged.len() >= 2 {
            let a = merged[merged.len() - 2];
            let b = merged[merged.len() - 1];
            let cross = (b.0 - a.0) * (v.1 - b.1) - (b.1 - a.1) * (v.0 - b.0);
            if cross == 0 {
                merged.pop();
            } else {
                break;
            }
        }
        merged.push(v);
    }

    let points = merged
        .into_iter()
        .map(|(fp, tp, threshold)| RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        })
        .collect();
    Ok(RocCurve { event: event.to_string(), points })
}

/// Evaluate a trained classifier one-vs-rest over labeled test features
/// (`labels` pairs with `features` by position). Each model class becomes
/// one event outcome; events without positives or negatives in the test set
/// get a diagnostic instead of an AUC and are excluded from the macro mean.
pub fn evaluate(
    model: &TrainedClassifier,
    features: &[FeatureVector],
    labels: &[String],
) -> Result<EvaluationReport> {
    if features.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} test features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let classes = model.classes();
    for (i, label) in labels.iter().enumerate() {
        if !classes.iter().any(|c| c == label) {
            return Err(Error::Evaluation(format!(
                "test item {i} has label `{label}` which the model was not trained on \
                 (classes: {})",
                classes.join(", ")
            )));
        }
    }

    let score_rows: Vec<Vec<f64>> = features
        .iter()
        .map(|fv| model.score(&fv.values))
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::with_capacity(classes.len());
    let mut pooled_scores = Vec::with_capacity(features.len() * classes.len());
    let mut pooled_labels = Vec::with_capacity(features.len() * classes.len());
    for (c, event) in classes.iter().enumerate() {
        let scores: Vec<f64> = score_rows.iter().map(|row| row[c]).collect();
        let labels: Vec<bool> = labels.iter().map(|l| l == event).collect();
        pooled_scores.extend_from_slice(&scores);
        pooled_labels.extend_from_slice(&labels);

        let positives = labels.iter().filter(|&&l| l).count();
        let outcome = if positives == 0 {
            EventOutcome {
                event: event.clone(),
                auc: None,
                diagnostic: Some(format!("no positive test examples for event `{event}`")),
                curve: None,
            }
        } else if positives == labels.len() {
            EventOutcome {
                event: event.clone(),
                auc: None,
                diagnostic: Some(format!("no negative test examples for event `{event}`")),
                curve: None,
            }
        } else {
            let value = auc(&scores, &labels)?;
            let curve = roc_curve(event, &scores, &labels)?;
            EventOutcome { event: event.clone(), auc: Some(value), diagnostic: None, curve: Some(curve) }
        };
        outcomes.push(outcome);
    }

    let defined: Vec<f64> = outcomes.iter().filter_map(|o| o.auc).collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let micro_auc = auc(&pooled_scores, &pooled_labels).ok();

    Ok(EvaluationReport {
        outcomes,
        macro_auc,
        micro_auc,
        metadata: RunMetadata {
            classifier: model.spec().clone(),
            feature_spec: model.feature_spec().cloned(),
            classes: classes.to_vec(),
            test_count: features.len(),
        },
    })
}
