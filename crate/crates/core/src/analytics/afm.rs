use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::auc::auc;
use crate::error::{Error, Result};
use crate::labeling::KcLabel;
use crate::model::OpportunityTable;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
/// Convergence threshold on the max-norm of the projected gradient.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// One KC label as a Bernoulli trial with logit `theta_s + beta_k + gamma_k * t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AfmObservation {
    pub student: usize,
    pub kc: usize,
    /// Prior opportunities `T`.
    pub t: f64,
    pub correct: bool,
}

/// Indexed observations. Parameter vectors are laid out as
/// `[theta (students), beta (kcs), gamma (kcs)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmData {
    pub students: Vec<String>,
    pub kcs: Vec<String>,
    pub observations: Vec<AfmObservation>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl AfmData {
    pub fn from_labels(labels: &[KcLabel], opportunities: &OpportunityTable) -> Result<Self> {
        let students: Vec<String> = labels
            .iter()
            .map(|l| l.student_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let kcs: Vec<String> = labels
            .iter()
            .map(|l| l.kc_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let s_index: BTreeMap<&str, usize> = students.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let k_index: BTreeMap<&str, usize> = kcs.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let observations = labels
            .iter()
            .map(|l| {
                let t = opportunities.get(&l.student_id, &l.problem_id, &l.kc_id).ok_or_else(|| {
                    Error::Validation(format!(
                        "no opportunity count for ({}, {}, {})",
                        l.student_id, l.problem_id, l.kc_id
                    ))
                })?;
                Ok(AfmObservation {
                    student: s_index[l.student_id.as_str()],
                    kc: k_index[l.kc_id.as_str()],
                    t: f64::from(t),
                    correct: l.correct,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AfmData { students, kcs, observations })
    }

    pub fn n_params(&self) -> usize {
        self.students.len() + 2 * self.kcs.len()
    }

    fn logit(&self, x: &[f64], o: &AfmObservation) -> f64 {
        let ns = self.students.len();
        let nk = self.kcs.len();
        x[o.student] + x[ns + o.kc] + x[ns + nk + o.kc] * o.t
    }

    /// Log-likelihood minus `lambda * ||x||^2`.
    pub fn objective(&self, x: &[f64], lambda: f64) -> f64 {
        let ll: f64 = self
            .observations
            .iter()
            .map(|o| {
                let z = self.logit(x, o);
                if o.correct {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum();
        ll - lambda * x.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn gradient(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        let ns = self.students.len();
        let nk = self.kcs.len();
        let mut g: Vec<f64> = x.iter().map(|v| -2.0 * lambda * v).collect();
        for o in &self.observations {
            let r = f64::from(u8::from(o.correct)) - sigmoid(self.logit(x, o));
            g[o.student] += r;
            g[ns + o.kc] += r;
            g[ns + nk + o.kc] += r * o.t;
        }
        g
    }

    fn gamma_range(&self) -> std::ops::Range<usize> {
        let start = self.students.len() + self.kcs.len();
        start..start + self.kcs.len()
    }

    fn project(&self, x: &mut [f64]) {
        for v in &mut x[self.gamma_range()] {
            *v = v.max(0.0);
        }
    }

    /// Gradient with components zeroed where the `gamma >= 0` bound blocks
    /// ascent.
    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let gamma = self.gamma_range();
        g.iter()
            .enumerate()
            .map(|(i, &gi)| if gamma.contains(&i) && x[i] <= 0.0 && gi < 0.0 { 0.0 } else { gi.abs() })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfmParams {
    pub theta: BTreeMap<String, f64>,
    pub beta: BTreeMap<String, f64>,
    /// Non-negative learning rates.
    pub gamma: BTreeMap<String, f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfmFit {
    pub params: AfmParams,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Penalized log-likelihood after each accepted step, starting at zero
    /// parameters.
    pub objective_trace: Vec<f64>,
}

/// Projected gradient ascent with Barzilai-Borwein steps and Armijo
/// backtracking, starting from all-zero parameters.
pub fn fit_afm(data: &AfmData, lambda: f64, max_iter: usize) -> Result<AfmFit> {
    if data.observations.is_empty() {
        return Err(Error::Precondition("AFM needs at least one observation".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Precondition(format!("invalid AFM penalty {lambda}")));
    }
    let mut x = vec![0.0; data.n_params()];
    let mut f = data.objective(&x, lambda);
    let mut g = data.gradient(&x, lambda);
    let mut trace = vec![f];
    let mut step = 1.0 / g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut converged = false;
    let mut iterations = 0;
    let mut pg_norm = data.projected_gradient_norm(&x, &g);

    while iterations < max_iter {
        if !f.is_finite() {
            return Err(Error::Numerical("AFM log-likelihood is not finite".into()));
        }
        if pg_norm < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let mut s = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut candidate: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + s * gi).collect();
            data.project(&mut candidate);
            let gain: f64 = g.iter().zip(candidate.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
            let fc = data.objective(&candidate, lambda);
            if fc.is_finite() && fc >= f + ARMIJO_C * gain {
                accepted = Some((candidate, fc));
                break;
            }
            s /= 2.0;
        }
        let Some((x_new, f_new)) = accepted else {
            // No ascent possible at machine precision.
            converged = true;
            break;
        };
        let g_new = data.gradient(&x_new, lambda);
        let (mut sy, mut ss) = (0.0, 0.0);
        for i in 0..x.len() {
            let dx = x_new[i] - x[i];
            sy += dx * (g_new[i] - g[i]);
            ss += dx * dx;
        }
        // Ascent on a concave objective: sy < 0 on a useful step.
        step = if sy < 0.0 { (ss / -sy).clamp(1e-12, 1e12) } else { s * 2.0 };
        x = x_new;
        f = f_new;
        g = g_new;
        pg_norm = data.projected_gradient_norm(&x, &g);
        trace.push(f);
        iterations += 1;
    }
    if !converged && pg_norm < GRADIENT_TOLERANCE {
        converged = true;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("AFM parameters are not finite".into()));
    }

    let ns = data.students.len();
    let nk = data.kcs.len();
    let params = AfmParams {
        theta: data.students.iter().cloned().zip(x[..ns].iter().copied()).collect(),
        beta: data.kcs.iter().cloned().zip(x[ns..ns + nk].iter().copied()).collect(),
        gamma: data.kcs.iter().cloned().zip(x[ns + nk..].iter().copied()).collect(),
        lambda,
    };
    Ok(AfmFit {
        params,
        iterations,
        converged,
        gradient_norm: pg_norm,
        objective_trace: trace,
    })
}

/// Probability of a correct response; unseen students get `theta = 0`.
pub fn afm_predict(params: &AfmParams, student_id: &str, kc_ids: &[&str], t_values: &[u32]) -> Result<f64> {
    if kc_ids.is_empty() {
        return Err(Error::Precondition("AFM prediction needs at least one KC".into()));
    }
    if kc_ids.len() != t_values.len() {
        return Err(Error::Precondition("one opportunity count per KC is required".into()));
    }
    let mut z = params.theta.get(student_id).copied().unwrap_or(0.0);
    for (kc, &t) in kc_ids.iter().zip(t_values) {
        let (Some(b), Some(g)) = (params.beta.get(*kc), params.gamma.get(*kc)) else {
            return Err(Error::Validation(format!("unknown KC `{kc}` in AFM prediction")));
        };
        z += b + g * f64::from(t);
    }
    Ok(sigmoid(z))
}

/// Seeded shuffle of the sorted student ids; the first
/// `round(test_fraction * n)` (at least one) are held out.
pub fn split_students(
    students: &BTreeSet<String>,
    test_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if students.len() < 2 {
        return Err(Error::Precondition("a student split needs at least two students".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Precondition(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut order: Vec<&String> = students.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((students.len() as f64 * test_fraction).round() as usize).clamp(1, students.len() - 1);
    let test = order[..n_test].iter().map(|s| s.to_string()).collect();
    let train = order[n_test..].iter().map(|s| s.to_string()).collect();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfmEvaluation {
    pub fit: AfmFit,
    /// Absent when the held-out labels contain a single class.
    pub auc: Option<f64>,
    pub n_train_observations: usize,
    pub n_test_observations: usize,
    pub split_seed: u64,
    pub test_students: Vec<String>,
    pub note: Option<String>,
}

/// Fits on training students and scores held-out students' labels.
pub fn evaluate_afm(
    labels: &[KcLabel],
    opportunities: &OpportunityTable,
    lambda: f64,
    max_iter: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<AfmEvaluation> {
    let students: BTreeSet<String> = labels.iter().map(|l| l.student_id.clone()).collect();
    let (_, test) = split_students(&students, test_fraction, seed)?;
    let (test_labels, train_labels): (Vec<KcLabel>, Vec<KcLabel>) =
        labels.iter().cloned().partition(|l| test.contains(&l.student_id));
    let fit = fit_afm(&AfmData::from_labels(&train_labels, opportunities)?, lambda, max_iter)?;

    let mut scores = Vec::with_capacity(test_labels.len());
    let mut truth = Vec::with_capacity(test_labels.len());
    let mut unscored = 0usize;
    for l in &test_labels {
        let t = opportunities
            .get(&l.student_id, &l.problem_id, &l.kc_id)
            .ok_or_else(|| Error::Validation(format!("no opportunity count for ({}, {}, {})", l.student_id, l.problem_id, l.kc_id)))?;
        match afm_predict(&fit.params, &l.student_id, &[&l.kc_id], &[t]) {
            Ok(p) => {
                scores.push(p);
                truth.push(l.correct);
            }
            // KC never seen in training: no parameters to score with.
            Err(Error::Validation(_)) => unscored += 1,
            Err(e) => return Err(e),
        }
    }
    let mut notes = Vec::new();
    if unscored > 0 {
        notes.push(format!("{unscored} held-out labels reference KCs absent from training"));
    }
    let auc = match auc(&scores, &truth) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("AUC undefined: {e}"));
            None
        }
    };
    Ok(AfmEvaluation {
        fit,
        auc,
        n_train_observations: train_labels.len(),
        n_test_observations: scores.len(),
        split_seed: seed,
        test_students: test.into_iter().collect(),
        note: (!notes.is_empty()).then(|| notes.join("; ")),
    })
}

/// Mean predicted error `1 - p` per opportunity for one KC over `labels`.
pub fn afm_error_curve(
    params: &AfmParams,
    labels: &[KcLabel],
    opportunities: &OpportunityTable,
    kc_id: &str,
) -> Result<Vec<(u32, f64)>> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.kc_id == kc_id) {
        let Some(t) = opportunities.get(&l.student_id, &l.problem_id, &l.kc_id) else {
            continue;
        };
        let p = afm_predict(params, &l.student_id, &[kc_id], &[t])?;
        let e = acc.entry(t + 1).or_default();
        e.0 += 1.0 - p;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect())
}
