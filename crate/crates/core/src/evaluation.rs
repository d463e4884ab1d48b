//! Agreement between annotators, human-evaluation worksheets and the
//! method comparison table.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::PowerLawFit;
use crate::artifact::strip_header;
use crate::error::{Error, Result};
use crate::labeling::KcLabel;
use crate::model::{AttemptPair, KcSet, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub kappa: f64,
    /// `confusion[a][b]`, indexed by `false = 0`, `true = 1`.
    pub confusion: [[usize; 2]; 2],
}

/// Cohen's kappa for two aligned binary raters. Two identical constant
/// raters give `kappa = 1`.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<AgreementReport> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("rater lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Precondition("kappa needs at least one item".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        confusion[usize::from(x)][usize::from(y)] += 1;
    }
    let n = a.len() as f64;
    let agree = (confusion[0][0] + confusion[1][1]) as f64;
    let a_true = (confusion[1][0] + confusion[1][1]) as f64 / n;
    let b_true = (confusion[0][1] + confusion[1][1]) as f64 / n;
    let p_o = agree / n;
    let p_e = a_true * b_true + (1.0 - a_true) * (1.0 - b_true);
    let kappa = if p_e == 1.0 {
        if a != b {
            return Err(Error::Numerical("kappa undefined for differing constant raters".into()));
        }
        1.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(AgreementReport {
        n: a.len(),
        observed_agreement: p_o,
        expected_agreement: p_e,
        kappa,
        confusion,
    })
}

pub const WORKSHEET_HEADER: [&str; 7] = [
    "student_id",
    "problem_id",
    "kc_id",
    "statement",
    "code",
    "kc_name",
    "judgment",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorksheetRow {
    pub student_id: String,
    pub problem_id: String,
    pub kc_id: String,
    pub statement: String,
    pub code: String,
    pub kc_name: String,
    pub judgment: String,
}

/// Seeded sample of `n` distinct labeled submissions, one row per labeled
/// KC, with the judgment left blank.
pub fn sample_for_human_eval(
    labels: &[KcLabel],
    problems: &[Problem],
    pairs: &[AttemptPair],
    kc_set: &KcSet,
    n: usize,
    seed: u64,
) -> Result<Vec<WorksheetRow>> {
    let mut by_submission: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for l in labels {
        by_submission
            .entry((l.student_id.as_str(), l.problem_id.as_str()))
            .or_default()
            .insert(l.kc_id.as_str());
    }
    if n > by_submission.len() {
        return Err(Error::Precondition(format!(
            "cannot sample {n} submissions from {} labeled ones",
            by_submission.len()
        )));
    }
    let mut population: Vec<(&(&str, &str), &BTreeSet<&str>)> = by_submission.iter().collect();
    population.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let problems: BTreeMap<&str, &Problem> = problems.iter().map(|p| (p.problem_id.as_str(), p)).collect();
    let pairs: BTreeMap<(&str, &str), &AttemptPair> = pairs
        .iter()
        .map(|p| ((p.student_id.as_str(), p.problem_id.as_str()), p))
        .collect();
    let mut rows = Vec::new();
    for (&(student, problem), kcs) in population.into_iter().take(n) {
        let statement = &problems
            .get(problem)
            .ok_or_else(|| Error::Validation(format!("unknown problem `{problem}`")))?
            .statement;
        let pair = pairs
            .get(&(student, problem))
            .ok_or_else(|| Error::Validation(format!("no attempts for ({student}, {problem})")))?;
        for &kc in kcs {
            let kc_name = kc_set
                .get(kc)
                .ok_or_else(|| Error::Validation(format!("unknown KC `{kc}`")))?
                .name
                .clone();
            rows.push(WorksheetRow {
                student_id: student.to_string(),
                problem_id: problem.to_string(),
                kc_id: kc.to_string(),
                statement: statement.clone(),
                code: pair.first.code.clone(),
                kc_name,
                judgment: String::new(),
            });
        }
    }
    Ok(rows)
}

pub fn worksheet_to_csv(rows: &[WorksheetRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(WORKSHEET_HEADER).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn parse_judgment(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "correct" => Some(true),
        "0" | "false" | "no" | "n" | "incorrect" => Some(false),
        _ => None,
    }
}

pub type AnnotationKey = (String, String, String);

/// Filled worksheet: `(student, problem, kc) -> judgment`. Accepts
/// `1/0`, `true/false`, `yes/no` and `correct/incorrect`.
pub fn parse_annotations(text: &str) -> Result<BTreeMap<AnnotationKey, bool>> {
    let body = strip_header(text);
    let offset = text.lines().count() - body.lines().count();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("annotations lack a `{name}` column")))
    };
    let (s, p, k, j) = (col("student_id")?, col("problem_id")?, col("kc_id")?, col("judgment")?);
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = (offset + i + 2) as u64;
        let malformed = |message: String| Error::MalformedRow {
            path: "annotations.csv".into(),
            line,
            message,
        };
        let judgment = parse_judgment(&record[j])
            .ok_or_else(|| malformed(format!("unreadable judgment `{}`", &record[j])))?;
        let key = (record[s].to_string(), record[p].to_string(), record[k].to_string());
        if out.insert(key, judgment).is_some() {
            return Err(malformed("duplicate (student_id, problem_id, kc_id)".into()));
        }
    }
    Ok(out)
}

/// Kappa between two keyed raters over the keys of `a`; every key must
/// exist in `b`.
pub fn agreement(a: &BTreeMap<AnnotationKey, bool>, b: &BTreeMap<AnnotationKey, bool>) -> Result<AgreementReport> {
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for (key, &x) in a {
        let y = *b.get(key).ok_or_else(|| {
            Error::Validation(format!("no counterpart judgment for ({}, {}, {})", key.0, key.1, key.2))
        })?;
        xs.push(x);
        ys.push(y);
    }
    cohens_kappa(&xs, &ys)
}

pub fn labels_as_judgments(labels: &[KcLabel]) -> BTreeMap<AnnotationKey, bool> {
    labels
        .iter()
        .map(|l| ((l.student_id.clone(), l.problem_id.clone(), l.kc_id.clone()), l.correct))
        .collect()
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub kc_set: String,
    pub mean_rmse: f64,
    pub mean_r2: f64,
    pub auc: Option<f64>,
    pub n_kcs: usize,
}

/// Per-KC means of fit quality.
pub fn summarize_fits(
    method: &str,
    kc_set: &str,
    fits: &BTreeMap<String, PowerLawFit>,
    auc: Option<f64>,
) -> Result<MethodSummary> {
    if fits.is_empty() {
        return Err(Error::Precondition(format!("no fits for {method}/{kc_set}")));
    }
    let n = fits.len() as f64;
    Ok(MethodSummary {
        method: method.to_string(),
        kc_set: kc_set.to_string(),
        mean_rmse: fits.values().map(|f| f.rmse).sum::<f64>() / n,
        mean_r2: fits.values().map(|f| f.r2).sum::<f64>() / n,
        auc,
        n_kcs: fits.len(),
    })
}

/// Published reference results: (method, KC set, RMSE, r², AUC).
pub const REFERENCE_RESULTS: [(&str, &str, f64, f64, f64); 12] = [
    ("Baseline", "Human", 0.110, 0.253, 0.529),
    ("Baseline", "Generated", 0.109, 0.269, 0.532),
    ("Baseline", "Selected", 0.083, 0.320, 0.538),
    ("GPT-4o", "Human", 0.077, 0.381, 0.616),
    ("GPT-4o", "Generated", 0.086, 0.291, 0.627),
    ("GPT-4o", "Selected", 0.069, 0.383, 0.631),
    ("Qwen3", "Human", 0.079, 0.386, 0.665),
    ("Qwen3", "Generated", 0.070, 0.417, 0.676),
    ("Qwen3", "Selected", 0.082, 0.362, 0.629),
    ("Qwen3 w/o CoT", "Human", 0.112, 0.243, 0.587),
    ("Qwen3 w/o CoT", "Generated", 0.090, 0.321, 0.601),
    ("Qwen3 w/o CoT", "Selected", 0.082, 0.340, 0.621),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    /// Sorted by (method, kc_set).
    pub rows: Vec<MethodSummary>,
}

pub fn compare_methods(mut rows: Vec<MethodSummary>) -> Result<ComparisonTable> {
    if rows.len() < 2 {
        return Err(Error::Precondition("a comparison needs at least two method runs".into()));
    }
    rows.sort_by(|a, b| (&a.method, &a.kc_set).cmp(&(&b.method, &b.kc_set)));
    Ok(ComparisonTable { rows })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

impl ComparisonTable {
    pub fn to_markdown(&self, with_reference: bool) -> String {
        let mut out = String::from("| Method | KC set | RMSE | r2 | AUC |\n|---|---|---:|---:|---:|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {} |\n",
                r.method,
                r.kc_set,
                r.mean_rmse,
                r.mean_r2,
                fmt_metric(r.auc)
            ));
        }
        if with_reference {
            out.push_str("\nReference results:\n\n| Method | KC set | RMSE | r2 | AUC |\n|---|---|---:|---:|---:|\n");
            for (m, k, rmse, r2, auc) in REFERENCE_RESULTS {
                out.push_str(&format!("| {m} | {k} | {rmse:.3} | {r2:.3} | {auc:.3} |\n"));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "kc_set", "mean_rmse", "mean_r2", "auc", "n_kcs"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.kc_set.clone(),
                format!("{:.6}", r.mean_rmse),
                format!("{:.6}", r.mean_r2),
                r.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
                r.n_kcs.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}
