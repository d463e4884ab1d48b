use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::power_law::PowerLawFit;
use crate::error::{Error, Result};
use crate::labeling::KcLabel;
use crate::model::OpportunityTable;

pub const DEFAULT_MIN_SUPPORT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based opportunity `n = T + 1`.
    pub opportunity: u32,
    pub error_rate: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub kc_id: String,
    /// Strictly increasing opportunities.
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Opportunity range covered by the curve.
    pub fn domain(&self) -> Option<(u32, u32)> {
        Some((self.points.first()?.opportunity, self.points.last()?.opportunity))
    }
}

fn opportunity(label: &KcLabel, opportunities: &OpportunityTable) -> Result<u32> {
    opportunities
        .get(&label.student_id, &label.problem_id, &label.kc_id)
        .map(|t| t + 1)
        .ok_or_else(|| {
            Error::Validation(format!(
                "no opportunity count for ({}, {}, {})",
                label.student_id, label.problem_id, label.kc_id
            ))
        })
}

/// Error rate by opportunity for one KC; points below `min_support` are
/// dropped.
pub fn empirical_curve(
    labels: &[KcLabel],
    kc_id: &str,
    opportunities: &OpportunityTable,
    min_support: usize,
) -> Result<LearningCurve> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for label in labels.iter().filter(|l| l.kc_id == kc_id) {
        let entry = counts.entry(opportunity(label, opportunities)?).or_default();
        entry.0 += usize::from(!label.correct);
        entry.1 += 1;
    }
    if counts.is_empty() {
        return Err(Error::Validation(format!("no labels for KC `{kc_id}`")));
    }
    let points = counts
        .into_iter()
        .filter(|&(_, (_, support))| support >= min_support.max(1))
        .map(|(opportunity, (wrong, support))| CurvePoint {
            opportunity,
            error_rate: wrong as f64 / support as f64,
            support,
        })
        .collect();
    Ok(LearningCurve {
        kc_id: kc_id.to_string(),
        points,
    })
}

/// One curve per labeled KC, ordered by kc_id.
pub fn empirical_curves(
    labels: &[KcLabel],
    opportunities: &OpportunityTable,
    min_support: usize,
) -> Result<Vec<LearningCurve>> {
    let mut kcs: Vec<&str> = labels.iter().map(|l| l.kc_id.as_str()).collect();
    kcs.sort_unstable();
    kcs.dedup();
    kcs.into_iter()
        .map(|kc| empirical_curve(labels, kc, opportunities, min_support))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub opportunity: u32,
    /// Unweighted mean over KCs with a point here.
    pub error_rate: f64,
    pub n_kcs: usize,
    /// Mean fitted value over KCs whose fit domain covers this opportunity.
    pub fitted_error: Option<f64>,
}

/// Averages curves across KCs at each opportunity. A KC's fit contributes
/// only inside its own curve's opportunity range.
pub fn aggregate_curves(curves: &[LearningCurve], fits: &BTreeMap<String, PowerLawFit>) -> Vec<AggregatePoint> {
    let mut empirical: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for curve in curves {
        for p in &curve.points {
            let e = empirical.entry(p.opportunity).or_default();
            e.0 += p.error_rate;
            e.1 += 1;
        }
    }
    empirical
        .into_iter()
        .map(|(n, (sum, count))| {
            let fitted: Vec<f64> = curves
                .iter()
                .filter_map(|c| {
                    let (lo, hi) = c.domain()?;
                    let fit = fits.get(&c.kc_id)?;
                    (lo <= n && n <= hi).then(|| fit.predict(n as f64))
                })
                .collect();
            AggregatePoint {
                opportunity: n,
                error_rate: sum / count as f64,
                n_kcs: count,
                fitted_error: (!fitted.is_empty()).then(|| fitted.iter().sum::<f64>() / fitted.len() as f64),
            }
        })
        .collect()
}
