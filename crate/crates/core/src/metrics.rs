//! Group-fairness metrics and the black-box versus surrogate audits built on
//! them.
//!
//! Every metric is a signed gap "group 1 minus group 0" except equalized odds,
//! which is the larger of the absolute TPR and FPR gaps. Conditionals that
//! cannot be estimated (a group with no members, or no positives where a TPR
//! is needed) are reported as errors, never as zero.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::BlackBoxModel;
use crate::error::{Error, Result, Side};
use crate::neighborhood::flip_group;
use crate::surrogate::{surrogate_score, Explanation};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MetricError {
    #[error("metric undefined: group sizes are {n0} (group 0) and {n1} (group 1)")]
    EmptyGroup { n0: usize, n1: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("metric {0} needs ground-truth labels")]
    MissingLabels(MetricKind),
    #[error("{what} undefined for group {group}: no conditioning outcomes")]
    UndefinedConditional { what: &'static str, group: u8 },
    #[error("value {value} in {what} is not 0 or 1")]
    NonBinary { what: &'static str, value: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    DemographicParity,
    EqualizedOdds,
    EqualOpportunity,
    PredictiveParity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::DemographicParity,
        MetricKind::EqualizedOdds,
        MetricKind::EqualOpportunity,
        MetricKind::PredictiveParity,
    ];

    pub fn needs_labels(self) -> bool {
        self != MetricKind::DemographicParity
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::DemographicParity => "demographic_parity",
            MetricKind::EqualizedOdds => "equalized_odds",
            MetricKind::EqualOpportunity => "equal_opportunity",
            MetricKind::PredictiveParity => "predictive_parity",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    /// Accepts the snake_case names and the short forms `dp`, `eo`, `eop`, `pp`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dp" | "demographic_parity" => MetricKind::DemographicParity,
            "eo" | "equalized_odds" => MetricKind::EqualizedOdds,
            "eop" | "equal_opportunity" => MetricKind::EqualOpportunity,
            "pp" | "predictive_parity" => MetricKind::PredictiveParity,
            other => return Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        })
    }
}

fn check_binary(what: &'static str, v: &[u8]) -> Result<(), MetricError> {
    match v.iter().find(|&&x| x > 1) {
        Some(&value) => Err(MetricError::NonBinary { what, value }),
        None => Ok(()),
    }
}

fn check_len(what: &'static str, v: &[u8], expected: usize) -> Result<(), MetricError> {
    if v.len() != expected {
        return Err(MetricError::LengthMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    check_binary(what, v)
}

/// `P(pred = 1 | group = 1) - P(pred = 1 | group = 0)`.
pub fn demographic_parity(preds: &[u8], groups: &[u8]) -> Result<f64, MetricError> {
    check_len("preds", preds, groups.len())?;
    check_binary("groups", groups)?;
    let mut n = [0usize; 2];
    let mut pos = [0usize; 2];
    for (&p, &g) in preds.iter().zip(groups) {
        n[g as usize] += 1;
        pos[g as usize] += p as usize;
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(MetricError::EmptyGroup { n0: n[0], n1: n[1] });
    }
    Ok(pos[1] as f64 / n[1] as f64 - pos[0] as f64 / n[0] as f64)
}

/// Per-group confusion counts.
#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Confusion {
    fn rate(num: usize, den: usize, what: &'static str, group: u8) -> Result<f64, MetricError> {
        if den == 0 {
            return Err(MetricError::UndefinedConditional { what, group });
        }
        Ok(num as f64 / den as f64)
    }

    fn tpr(&self, group: u8) -> Result<f64, MetricError> {
        Self::rate(self.tp, self.tp + self.fn_, "true positive rate", group)
    }

    fn fpr(&self, group: u8) -> Result<f64, MetricError> {
        Self::rate(self.fp, self.fp + self.tn, "false positive rate", group)
    }

    fn ppv(&self, group: u8) -> Result<f64, MetricError> {
        Self::rate(self.tp, self.tp + self.fp, "positive predictive value", group)
    }
}

fn confusions(preds: &[u8], labels: &[u8], groups: &[u8]) -> Result<[Confusion; 2], MetricError> {
    let mut c = [Confusion::default(); 2];
    let mut n = [0usize; 2];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        let cg = &mut c[g as usize];
        n[g as usize] += 1;
        match (p, y) {
            (1, 1) => cg.tp += 1,
            (1, _) => cg.fp += 1,
            (_, 1) => cg.fn_ += 1,
            _ => cg.tn += 1,
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(MetricError::EmptyGroup { n0: n[0], n1: n[1] });
    }
    Ok(c)
}

/// Signed TPR and FPR gaps (group 1 minus group 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsGaps {
    pub tpr_gap: f64,
    pub fpr_gap: f64,
}

pub fn equalized_odds_gaps(preds: &[u8], labels: &[u8], groups: &[u8]) -> Result<OddsGaps, MetricError> {
    check_len("preds", preds, groups.len())?;
    check_len("labels", labels, groups.len())?;
    check_binary("groups", groups)?;
    let [c0, c1] = confusions(preds, labels, groups)?;
    Ok(OddsGaps {
        tpr_gap: c1.tpr(1)? - c0.tpr(0)?,
        fpr_gap: c1.fpr(1)? - c0.fpr(0)?,
    })
}

/// Evaluate `kind` on one prediction vector.
pub fn group_metric(kind: MetricKind, preds: &[u8], labels: Option<&[u8]>, groups: &[u8]) -> Result<f64, MetricError> {
    if kind == MetricKind::DemographicParity {
        return demographic_parity(preds, groups);
    }
    let labels = labels.ok_or(MetricError::MissingLabels(kind))?;
    check_len("preds", preds, groups.len())?;
    check_len("labels", labels, groups.len())?;
    check_binary("groups", groups)?;
    let [c0, c1] = confusions(preds, labels, groups)?;
    Ok(match kind {
        MetricKind::EqualizedOdds => {
            let tpr = c1.tpr(1)? - c0.tpr(0)?;
            let fpr = c1.fpr(1)? - c0.fpr(0)?;
            tpr.abs().max(fpr.abs())
        }
        MetricKind::EqualOpportunity => c1.tpr(1)? - c0.tpr(0)?,
        MetricKind::PredictiveParity => c1.ppv(1)? - c0.ppv(0)?,
        MetricKind::DemographicParity => unreachable!(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub metric: MetricKind,
    pub m_blackbox: f64,
    pub m_surrogate: f64,
    pub mismatch: f64,
    pub epsilon: f64,
    pub preserved: bool,
    /// Component gaps for equalized odds, black-box then surrogate.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub odds_components: Option<[OddsGaps; 2]>,
}

/// `|M(f) - M(E_f)|` on caller-supplied prediction vectors.
pub fn fairness_mismatch(
    kind: MetricKind,
    f_preds: &[u8],
    e_preds: &[u8],
    groups: &[u8],
    labels: Option<&[u8]>,
    epsilon: f64,
) -> Result<MismatchReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let side = |side: Side| move |source: MetricError| Error::SideMetric { side, source };
    let m_blackbox = group_metric(kind, f_preds, labels, groups).map_err(side(Side::Blackbox))?;
    let m_surrogate = group_metric(kind, e_preds, labels, groups).map_err(side(Side::Surrogate))?;
    let odds_components = match (kind, labels) {
        (MetricKind::EqualizedOdds, Some(y)) => Some([
            equalized_odds_gaps(f_preds, y, groups).map_err(side(Side::Blackbox))?,
            equalized_odds_gaps(e_preds, y, groups).map_err(side(Side::Surrogate))?,
        ]),
        _ => None,
    };
    let mismatch = (m_blackbox - m_surrogate).abs();
    Ok(MismatchReport {
        metric: kind,
        m_blackbox,
        m_surrogate,
        mismatch,
        epsilon,
        preserved: mismatch <= epsilon,
        odds_components,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    /// `f(x) - f(x')` on scores.
    pub f_delta: f64,
    /// Surrogate score at `x` minus surrogate score at `x'`.
    pub e_delta: f64,
    pub discrepancy: f64,
    /// Present only when the caller supplied a tolerance.
    pub within_tolerance: Option<bool>,
}

/// Compare the black-box's score change under a group flip with the change
/// predicted by the explanation's surrogate.
pub fn counterfactual_check(
    f: &BlackBoxModel,
    explanation: &Explanation,
    x: ArrayView1<'_, f64>,
    group_col: usize,
    tolerance: Option<f64>,
) -> Result<CounterfactualReport> {
    if let Some(t) = tolerance {
        if !(t >= 0.0) {
            return Err(Error::InvalidConfig(format!("tolerance must be nonnegative, got {t}")));
        }
    }
    let xf = flip_group(x, group_col)?;
    let f_delta = f.score(x)? - f.score(xf.view())?;
    let g = &explanation.surrogate;
    let e_delta = surrogate_score(g, x)? - surrogate_score(g, xf.view())?;
    let discrepancy = (f_delta - e_delta).abs();
    Ok(CounterfactualReport {
        f_delta,
        e_delta,
        discrepancy,
        within_tolerance: tolerance.map(|t| discrepancy <= t),
    })
}

pub const ZERO_IMPORTANCE_ADVISORY: &str =
    "a zero weight on the sensitive attribute is not evidence of fairness: correlated features can carry its influence";
pub const EXCLUDED_BY_SELECTION: &str = "excluded by selection";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveImportance {
    pub weight: f64,
    pub notes: Vec<String>,
}

/// Surrogate weight on the sensitive attribute, reported without a verdict.
pub fn sensitive_importance(explanation: &Explanation, group_col: usize) -> Result<SensitiveImportance> {
    let g = &explanation.surrogate;
    if group_col >= g.n_features() {
        return Err(Error::Dimension {
            expected: g.n_features(),
            got: group_col + 1,
        });
    }
    let mut notes = vec![ZERO_IMPORTANCE_ADVISORY.to_string()];
    if !explanation.selected_features.contains(&group_col) {
        notes.push(EXCLUDED_BY_SELECTION.to_string());
    }
    Ok(SensitiveImportance {
        weight: g.weights[group_col],
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::LogisticModel;
    use crate::surrogate::{LinearSurrogate, ObjectiveBreakdown};
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    fn explanation(weights: Array1<f64>, intercept: f64, selected: Vec<usize>) -> Explanation {
        let d = weights.len();
        Explanation {
            surrogate: LinearSurrogate::new(weights, intercept),
            center: Array1::zeros(d),
            selected_features: selected,
            lambda1: 0.0,
            lambda2: 0.0,
            tau: None,
            n_perturbations: 0,
            seed: 0,
            objective: ObjectiveBreakdown {
                fidelity: 0.0,
                complexity: 0.0,
                psi: None,
                psi_smooth: None,
            },
            restart_count: 0,
        }
    }

    #[test]
    fn dp_hand_examples() {
        assert_eq!(demographic_parity(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(demographic_parity(&[1, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), -0.5);
        assert_eq!(
            demographic_parity(&[1, 0], &[1, 1]),
            Err(MetricError::EmptyGroup { n0: 0, n1: 2 })
        );
    }

    #[test]
    fn dp_rejects_bad_input() {
        assert!(matches!(
            demographic_parity(&[1], &[1, 0]),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert!(matches!(
            demographic_parity(&[1, 0], &[2, 0]),
            Err(MetricError::NonBinary { .. })
        ));
    }

    #[test]
    fn equal_opportunity_hand_example() {
        let v = group_metric(MetricKind::EqualOpportunity, &[1, 1, 0, 0], Some(&[1, 0, 1, 0]), &[1, 1, 0, 0]);
        assert_eq!(v.unwrap(), 1.0);
    }

    #[test]
    fn perfect_classifier_has_zero_gaps() {
        let y = [1, 0, 1, 0, 1, 1, 0, 0];
        let g = [1, 1, 1, 1, 0, 0, 0, 0];
        for kind in MetricKind::ALL {
            assert_eq!(group_metric(kind, &y, Some(&y), &g).unwrap(), 0.0, "{kind}");
        }
    }

    #[test]
    fn undefined_conditionals_error() {
        let e = group_metric(MetricKind::EqualOpportunity, &[1, 0, 1, 0], Some(&[1, 0, 0, 0]), &[1, 1, 0, 0]);
        assert_eq!(
            e,
            Err(MetricError::UndefinedConditional {
                what: "true positive rate",
                group: 0
            })
        );
        let e = group_metric(MetricKind::PredictiveParity, &[1, 0, 0, 0], Some(&[1, 0, 1, 0]), &[1, 1, 0, 0]);
        assert!(matches!(e, Err(MetricError::UndefinedConditional { group: 0, .. })));
        let e = group_metric(MetricKind::EqualizedOdds, &[1, 0], None, &[1, 0]);
        assert_eq!(e, Err(MetricError::MissingLabels(MetricKind::EqualizedOdds)));
    }

    #[test]
    fn equalized_odds_is_max_abs_gap() {
        let preds = [1, 0, 1, 1, 0, 0, 1, 0];
        let labels = [1, 1, 0, 0, 1, 1, 0, 0];
        let groups = [1, 1, 1, 1, 0, 0, 0, 0];
        // group 1: TPR 1/2, FPR 2/2; group 0: TPR 0/2, FPR 1/2
        let gaps = equalized_odds_gaps(&preds, &labels, &groups).unwrap();
        assert_relative_eq!(gaps.tpr_gap, 0.5);
        assert_relative_eq!(gaps.fpr_gap, 0.5);
        let eo = group_metric(MetricKind::EqualizedOdds, &preds, Some(&labels), &groups).unwrap();
        assert_relative_eq!(eo, 0.5);
    }

    #[test]
    fn mismatch_hand_example_and_inclusive_epsilon() {
        let r = fairness_mismatch(
            MetricKind::DemographicParity,
            &[1, 0, 1, 1],
            &[1, 1, 1, 1],
            &[1, 1, 0, 0],
            None,
            0.5,
        )
        .unwrap();
        assert_eq!(r.mismatch, 0.5);
        assert!(r.preserved);
        let r = fairness_mismatch(MetricKind::DemographicParity, &[1, 0, 1, 1], &[1, 0, 1, 1], &[1, 1, 0, 0], None, 0.0)
            .unwrap();
        assert_eq!(r.mismatch, 0.0);
        assert!(r.preserved);
    }

    #[test]
    fn mismatch_tags_failing_side() {
        let labels = [1, 0, 1, 0];
        let groups = [1, 1, 0, 0];
        // surrogate predicts no positives in group 0, so its PPV there is undefined
        let e = fairness_mismatch(
            MetricKind::PredictiveParity,
            &[1, 0, 1, 0],
            &[1, 0, 0, 0],
            &groups,
            Some(&labels),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(e, Error::SideMetric { side: Side::Surrogate, .. }));
        let e = fairness_mismatch(
            MetricKind::PredictiveParity,
            &[1, 0, 0, 0],
            &[1, 0, 1, 0],
            &groups,
            Some(&labels),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(e, Error::SideMetric { side: Side::Blackbox, .. }));
    }

    #[test]
    fn mismatch_report_json_round_trip() {
        let r = fairness_mismatch(
            MetricKind::EqualizedOdds,
            &[1, 0, 1, 1],
            &[1, 1, 1, 0],
            &[1, 1, 0, 0],
            Some(&[1, 0, 1, 0]),
            0.1,
        )
        .unwrap();
        assert!(r.odds_components.is_some());
        let back: MismatchReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn counterfactual_insensitive_model() {
        let f = BlackBoxModel::Logistic(LogisticModel {
            weights: array![0.0, 1.0],
            intercept: 0.0,
        });
        let e = explanation(array![0.0, 0.3], 0.1, vec![1]);
        let r = counterfactual_check(&f, &e, array![1.0, 0.5].view(), 0, None).unwrap();
        assert_eq!(r.f_delta, 0.0);
        assert_eq!(r.e_delta, 0.0);
        assert_eq!(r.discrepancy, 0.0);
        assert_eq!(r.within_tolerance, None);
    }

    #[test]
    fn counterfactual_swap_negates_deltas() {
        let f = BlackBoxModel::Logistic(LogisticModel {
            weights: array![1.5, -0.4],
            intercept: 0.2,
        });
        let e = explanation(array![0.2, -0.1], 0.5, vec![0, 1]);
        let x = array![1.0, 0.7];
        let xf = flip_group(x.view(), 0).unwrap();
        let a = counterfactual_check(&f, &e, x.view(), 0, Some(0.01)).unwrap();
        let b = counterfactual_check(&f, &e, xf.view(), 0, Some(0.01)).unwrap();
        assert_eq!(a.f_delta, -b.f_delta);
        assert_eq!(a.e_delta, -b.e_delta);
        assert_relative_eq!(a.discrepancy, b.discrepancy, epsilon = 1e-15);
        assert_eq!(a.within_tolerance, Some(false));
    }

    #[test]
    fn sensitive_importance_reports_weight_and_notes() {
        let s = sensitive_importance(&explanation(array![-0.3, 1.0], 0.0, vec![0, 1]), 0).unwrap();
        assert_eq!(s.weight, -0.3);
        assert_eq!(s.notes, vec![ZERO_IMPORTANCE_ADVISORY.to_string()]);
        let s = sensitive_importance(&explanation(array![0.0, 1.0], 0.0, vec![1]), 0).unwrap();
        assert_eq!(s.weight, 0.0);
        assert!(s.notes.iter().any(|n| n == EXCLUDED_BY_SELECTION));
    }

    #[test]
    fn metric_kind_parses_short_names() {
        assert_eq!("dp".parse::<MetricKind>().unwrap(), MetricKind::DemographicParity);
        assert_eq!("equalized_odds".parse::<MetricKind>().unwrap(), MetricKind::EqualizedOdds);
        assert!("nope".parse::<MetricKind>().is_err());
    }
}
