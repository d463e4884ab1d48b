//! Dataset loading, validation and canonical serialization.
//!
//! A dataset directory holds `submissions.csv` and `problems.csv`, and
//! optionally `kcs.json`, `qmatrix.csv` and `code_kc_map.csv`. Leading `#`
//! lines are ignored in every file so stage artifacts can be fed back in.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::artifact::{strip_header, write_atomic};
use crate::error::{Error, Result};
use crate::model::{
    CodeKcMap, KcOrigin, KcSet, KcSetKind, KnowledgeComponent, Problem, QMatrix, Submission,
    DEFAULT_CORRECT_THRESHOLD,
};

pub const SUBMISSIONS_FILE: &str = "submissions.csv";
pub const PROBLEMS_FILE: &str = "problems.csv";
pub const KCS_FILE: &str = "kcs.json";
pub const QMATRIX_FILE: &str = "qmatrix.csv";
pub const CODE_KC_MAP_FILE: &str = "code_kc_map.csv";

/// KCs mapped to fewer problems than this are flagged as sparse.
pub const SPARSE_KC_THRESHOLD: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub problems: Vec<Problem>,
    pub submissions: Vec<Submission>,
    pub kc_sets: Vec<KcSet>,
    pub q_matrices: Vec<QMatrix>,
    pub code_kc_map: Option<CodeKcMap>,
}

impl DatasetBundle {
    pub fn problem(&self, problem_id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.problem_id == problem_id)
    }

    pub fn submission(&self, submission_id: &str) -> Option<&Submission> {
        self.submissions
            .iter()
            .find(|s| s.submission_id == submission_id)
    }

    pub fn student_ids(&self) -> BTreeSet<&str> {
        self.submissions
            .iter()
            .map(|s| s.student_id.as_str())
            .collect()
    }

    /// Submissions to `problem_id` scoring at least `threshold`, ordered by id.
    pub fn correct_solutions(&self, problem_id: &str, threshold: f64) -> Vec<&Submission> {
        let mut out: Vec<&Submission> = self
            .submissions
            .iter()
            .filter(|s| s.problem_id == problem_id && s.score >= threshold)
            .collect();
        out.sort_by(|a, b| a.submission_id.cmp(&b.submission_id));
        out
    }

    /// Recomputes each problem's `correct_solution_ids` under `threshold`.
    pub fn refresh_correct_solutions(&mut self, threshold: f64) {
        let mut by_problem: HashMap<&str, Vec<String>> = HashMap::new();
        for s in &self.submissions {
            if s.score >= threshold {
                by_problem
                    .entry(s.problem_id.as_str())
                    .or_default()
                    .push(s.submission_id.clone());
            }
        }
        for p in &mut self.problems {
            let mut ids = by_problem.remove(p.problem_id.as_str()).unwrap_or_default();
            ids.sort();
            p.correct_solution_ids = ids;
        }
    }
}

#[derive(Debug, Deserialize)]
struct SubmissionRow {
    submission_id: String,
    student_id: String,
    problem_id: String,
    #[serde(default)]
    attempt: Option<u32>,
    #[serde(default)]
    timestamp: Option<String>,
    score: f64,
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    code_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemRow {
    problem_id: String,
    statement: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QRow {
    problem_id: String,
    kc_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodeKcRow {
    student_id: String,
    problem_id: String,
    kc_id: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(body: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_reader(body.as_bytes())
}

/// Number of header lines dropped by `strip_header`, for line reporting.
fn skipped_lines(text: &str) -> u64 {
    let stripped = strip_header(text);
    text[..text.len() - stripped.len()].matches('\n').count() as u64
}

fn row_error(path: &Path, offset: u64, err: &csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0) + offset;
    Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    }
}

fn parse_rows<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<(u64, T)>> {
    let offset = skipped_lines(text);
    let mut reader = csv_reader(strip_header(text));
    let headers = reader.headers().map_err(|e| row_error(path, offset, &e))?.clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| row_error(path, offset, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0) + offset;
        let row = record
            .deserialize::<T>(Some(&headers))
            .map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        rows.push((line, row));
    }
    Ok(rows)
}

pub fn parse_problems_csv(path: &Path, text: &str) -> Result<Vec<Problem>> {
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    for (line, row) in parse_rows::<ProblemRow>(path, text)? {
        let malformed = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message,
        };
        if row.problem_id.trim().is_empty() {
            return Err(malformed("empty problem_id".into()));
        }
        if row.statement.trim().is_empty() {
            return Err(malformed(format!("empty statement for `{}`", row.problem_id)));
        }
        if !seen.insert(row.problem_id.clone()) {
            return Err(malformed(format!("duplicate problem_id `{}`", row.problem_id)));
        }
        problems.push(Problem {
            problem_id: row.problem_id,
            statement: row.statement,
            correct_solution_ids: Vec::new(),
        });
    }
    problems.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    Ok(problems)
}

pub fn parse_kcs_json(text: &str) -> Result<Vec<KnowledgeComponent>> {
    Ok(serde_json::from_str(strip_header(text))?)
}

pub fn kcs_to_json(kcs: &[KnowledgeComponent]) -> String {
    let mut out = serde_json::to_string_pretty(kcs).expect("KCs serialize");
    out.push('\n');
    out
}

/// Builds a KC set from a flat component list; the kind follows the origins.
pub fn kc_set_from_components(
    set_id: &str,
    components: Vec<KnowledgeComponent>,
) -> Result<KcSet> {
    let origins: BTreeSet<_> = components.iter().map(|kc| kc.origin as u8).collect();
    let kind = match components.first().map(|kc| kc.origin) {
        _ if origins.len() > 1 => {
            return Err(Error::Validation(format!(
                "KC set `{set_id}` mixes human and generated components"
            )))
        }
        Some(KcOrigin::Generated) => KcSetKind::Generated,
        _ => KcSetKind::Human,
    };
    KcSet::new(set_id, kind, components)
}

pub fn parse_qmatrix_csv(path: &Path, text: &str) -> Result<QMatrix> {
    let mut q = QMatrix::default();
    for (_, row) in parse_rows::<QRow>(path, text)? {
        q.insert(row.problem_id, row.kc_id);
    }
    Ok(q)
}

pub fn qmatrix_to_csv(q: &QMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["problem_id", "kc_id"]).expect("in-memory write");
    for (problem, kcs) in &q.entries {
        for kc in kcs {
            w.write_record([problem, kc]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn parse_code_kc_map_csv(path: &Path, text: &str) -> Result<CodeKcMap> {
    let mut grouped: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for (_, row) in parse_rows::<CodeKcRow>(path, text)? {
        grouped
            .entry((row.student_id, row.problem_id))
            .or_default()
            .insert(row.kc_id);
    }
    Ok(CodeKcMap { entries: grouped })
}

pub fn code_kc_map_to_csv(map: &CodeKcMap) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["student_id", "problem_id", "kc_id"])
        .expect("in-memory write");
    for ((student, problem), kcs) in &map.entries {
        for kc in kcs {
            w.write_record([student, problem, kc]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

struct PendingSubmission {
    line: u64,
    row_index: usize,
    submission_id: String,
    student_id: String,
    problem_id: String,
    attempt: Option<u32>,
    timestamp: Option<DateTime<Utc>>,
    score: f64,
    code: String,
}

fn parse_submissions(root: &Path, path: &Path, text: &str) -> Result<Vec<PendingSubmission>> {
    let mut out = Vec::new();
    for (row_index, (line, row)) in parse_rows::<SubmissionRow>(path, text)?
        .into_iter()
        .enumerate()
    {
        let malformed = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (name, value) in [
            ("submission_id", &row.submission_id),
            ("student_id", &row.student_id),
            ("problem_id", &row.problem_id),
        ] {
            if value.trim().is_empty() {
                return Err(malformed(format!("empty {name}")));
            }
        }
        if !(0.0..=1.0).contains(&row.score) {
            return Err(malformed(format!("score {} outside [0, 1]", row.score)));
        }
        if row.attempt == Some(0) {
            return Err(malformed("attempt must be >= 1".into()));
        }
        let code = match (row.code.filter(|c| !c.is_empty()), row.code_path.filter(|c| !c.is_empty())) {
            (Some(code), None) => code,
            (None, Some(rel)) => {
                let file = root.join(&rel);
                fs::read_to_string(&file).map_err(|e| malformed(format!("code_path {rel}: {e}")))?
            }
            _ => return Err(malformed("exactly one of code and code_path must be set".into())),
        };
        let timestamp = match row.timestamp.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(ts) => Some(
                DateTime::parse_from_rfc3339(ts)
                    .map_err(|e| malformed(format!("bad timestamp `{ts}`: {e}")))?
                    .with_timezone(&Utc),
            ),
        };
        out.push(PendingSubmission {
            line,
            row_index,
            submission_id: row.submission_id,
            student_id: row.student_id,
            problem_id: row.problem_id,
            attempt: row.attempt,
            timestamp,
            score: row.score,
            code,
        });
    }
    Ok(out)
}

/// Rows without a timestamp get a per-student synthetic clock that follows
/// file order of groups and attempt order within a group.
fn fill_synthetic_clock(rows: &mut [PendingSubmission]) {
    let mut group_first_row: HashMap<(String, String), usize> = HashMap::new();
    for r in rows.iter() {
        group_first_row
            .entry((r.student_id.clone(), r.problem_id.clone()))
            .or_insert(r.row_index);
    }
    let mut missing: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.timestamp.is_none() {
            missing.entry(r.student_id.clone()).or_default().push(i);
        }
    }
    for (_, mut idxs) in missing {
        idxs.sort_by_key(|&i| {
            let r = &rows[i];
            (
                group_first_row[&(r.student_id.clone(), r.problem_id.clone())],
                r.attempt.unwrap_or(u32::MAX),
                r.row_index,
            )
        });
        for (tick, i) in idxs.into_iter().enumerate() {
            rows[i].timestamp = Some(Utc.timestamp_opt(tick as i64, 0).unwrap());
        }
    }
}

fn normalize_submissions(path: &Path, mut rows: Vec<PendingSubmission>) -> Result<Vec<Submission>> {
    let mut ids = HashSet::new();
    let mut keys = HashSet::new();
    for r in &rows {
        if !ids.insert(r.submission_id.clone()) {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line: r.line,
                message: format!("duplicate submission_id `{}`", r.submission_id),
            });
        }
        if let Some(a) = r.attempt {
            if !keys.insert((r.student_id.clone(), r.problem_id.clone(), a)) {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: r.line,
                    message: format!(
                        "duplicate key (student `{}`, problem `{}`, attempt {a})",
                        r.student_id, r.problem_id
                    ),
                });
            }
        }
    }
    fill_synthetic_clock(&mut rows);

    let mut groups: BTreeMap<(String, String), Vec<PendingSubmission>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.student_id.clone(), r.problem_id.clone()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then(a.attempt.unwrap_or(u32::MAX).cmp(&b.attempt.unwrap_or(u32::MAX)))
                .then(a.row_index.cmp(&b.row_index))
        });
        for (index, r) in (1u32..).zip(group) {
            out.push(Submission {
                submission_id: r.submission_id,
                student_id: r.student_id,
                problem_id: r.problem_id,
                attempt_index: index,
                timestamp: r.timestamp.expect("clock filled"),
                score: r.score,
                code: r.code,
            });
        }
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<DatasetBundle> {
    let required = |name: &str| -> Result<PathBuf> {
        let p = root.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingFile(p))
        }
    };
    let sub_path = required(SUBMISSIONS_FILE)?;
    let prob_path = required(PROBLEMS_FILE)?;

    let problems = parse_problems_csv(&prob_path, &read_text(&prob_path)?)?;
    let pending = parse_submissions(root, &sub_path, &read_text(&sub_path)?)?;

    let known: HashSet<&str> = problems.iter().map(|p| p.problem_id.as_str()).collect();
    if let Some(bad) = pending.iter().find(|r| !known.contains(r.problem_id.as_str())) {
        return Err(Error::Validation(format!(
            "{}: line {}: submission `{}` references unknown problem `{}`",
            sub_path.display(),
            bad.line,
            bad.submission_id,
            bad.problem_id
        )));
    }
    let submissions = normalize_submissions(&sub_path, pending)?;

    let mut kc_sets = Vec::new();
    let kcs_path = root.join(KCS_FILE);
    if kcs_path.is_file() {
        let components = parse_kcs_json(&read_text(&kcs_path)?)?;
        kc_sets.push(kc_set_from_components("kcs", components)?);
    }
    let mut q_matrices = Vec::new();
    let q_path = root.join(QMATRIX_FILE);
    if q_path.is_file() {
        q_matrices.push(parse_qmatrix_csv(&q_path, &read_text(&q_path)?)?);
    }
    let map_path = root.join(CODE_KC_MAP_FILE);
    let code_kc_map = if map_path.is_file() {
        Some(parse_code_kc_map_csv(&map_path, &read_text(&map_path)?)?)
    } else {
        None
    };

    let mut bundle = DatasetBundle {
        problems,
        submissions,
        kc_sets,
        q_matrices,
        code_kc_map,
    };
    check_integrity(&bundle)?;
    bundle.refresh_correct_solutions(DEFAULT_CORRECT_THRESHOLD);
    Ok(bundle)
}

fn check_integrity(bundle: &DatasetBundle) -> Result<()> {
    let problems: HashSet<&str> = bundle.problems.iter().map(|p| p.problem_id.as_str()).collect();
    let kcs: HashSet<&str> = bundle
        .kc_sets
        .iter()
        .flat_map(|s| s.components.iter().map(|kc| kc.kc_id.as_str()))
        .collect();
    for q in &bundle.q_matrices {
        for (problem, mapped) in &q.entries {
            if !problems.contains(problem.as_str()) {
                return Err(Error::Validation(format!(
                    "Q-matrix references unknown problem `{problem}`"
                )));
            }
            if let Some(kc) = mapped.iter().find(|kc| !kcs.contains(kc.as_str())) {
                return Err(Error::Validation(format!(
                    "Q-matrix maps problem `{problem}` to unknown KC `{kc}`"
                )));
            }
        }
    }
    if let Some(map) = &bundle.code_kc_map {
        for ((student, problem), mapped) in &map.entries {
            if !problems.contains(problem.as_str()) {
                return Err(Error::Validation(format!(
                    "code KC map entry ({student}, {problem}) references unknown problem"
                )));
            }
            if let Some(kc) = mapped.iter().find(|kc| !kcs.contains(kc.as_str())) {
                return Err(Error::Validation(format!(
                    "code KC map entry ({student}, {problem}) references unknown KC `{kc}`"
                )));
            }
        }
    }
    Ok(())
}

/// Writes the bundle in canonical form (inline code, sorted rows).
pub fn write_dataset(bundle: &DatasetBundle, root: &Path) -> Result<()> {
    let mut subs: Vec<&Submission> = bundle.submissions.iter().collect();
    subs.sort_by(|a, b| {
        (&a.student_id, &a.problem_id, a.attempt_index).cmp(&(
            &b.student_id,
            &b.problem_id,
            b.attempt_index,
        ))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "submission_id",
        "student_id",
        "problem_id",
        "attempt",
        "timestamp",
        "score",
        "code",
        "code_path",
    ])?;
    for s in subs {
        w.write_record([
            s.submission_id.as_str(),
            &s.student_id,
            &s.problem_id,
            &s.attempt_index.to_string(),
            &s.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            &s.score.to_string(),
            &s.code,
            "",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(root, e.into_error()))?;
    write_atomic(&root.join(SUBMISSIONS_FILE), &bytes)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut problems: Vec<&Problem> = bundle.problems.iter().collect();
    problems.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    for p in problems {
        w.serialize(ProblemRow {
            problem_id: p.problem_id.clone(),
            statement: p.statement.clone(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(root, e.into_error()))?;
    write_atomic(&root.join(PROBLEMS_FILE), &bytes)?;

    if let Some(set) = bundle.kc_sets.first() {
        write_atomic(&root.join(KCS_FILE), kcs_to_json(&set.components).as_bytes())?;
    }
    if let Some(q) = bundle.q_matrices.first() {
        write_atomic(&root.join(QMATRIX_FILE), qmatrix_to_csv(q).as_bytes())?;
    }
    if let Some(map) = &bundle.code_kc_map {
        write_atomic(&root.join(CODE_KC_MAP_FILE), code_kc_map_to_csv(map).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcUsage {
    pub set_id: String,
    /// Problems each KC is mapped to (0 for KCs no problem uses).
    pub problems_per_kc: BTreeMap<String, usize>,
    pub sparse_kcs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub student_count: usize,
    pub problem_count: usize,
    pub submission_count: usize,
    pub kc_usage: Vec<KcUsage>,
    pub warnings: Vec<String>,
}

pub fn validate_dataset(bundle: &DatasetBundle) -> ValidationReport {
    let mut warnings = Vec::new();
    let mut kc_usage = Vec::new();
    for (i, set) in bundle.kc_sets.iter().enumerate() {
        let freq = bundle
            .q_matrices
            .get(i)
            .map(QMatrix::kc_frequencies)
            .unwrap_or_default();
        let problems_per_kc: BTreeMap<String, usize> = set
            .components
            .iter()
            .map(|kc| (kc.kc_id.clone(), freq.get(&kc.kc_id).copied().unwrap_or(0)))
            .collect();
        let sparse_kcs: Vec<String> = problems_per_kc
            .iter()
            .filter(|(_, &n)| n < SPARSE_KC_THRESHOLD)
            .map(|(kc, _)| kc.clone())
            .collect();
        if !sparse_kcs.is_empty() {
            warnings.push(format!(
                "KC set `{}`: {} KC(s) exercised by fewer than {SPARSE_KC_THRESHOLD} problems: {}",
                set.set_id,
                sparse_kcs.len(),
                sparse_kcs.join(", ")
            ));
        }
        kc_usage.push(KcUsage {
            set_id: set.set_id.clone(),
            problems_per_kc,
            sparse_kcs,
        });
    }
    let attempted: HashSet<&str> = bundle.submissions.iter().map(|s| s.problem_id.as_str()).collect();
    let unattempted = bundle
        .problems
        .iter()
        .filter(|p| !attempted.contains(p.problem_id.as_str()))
        .count();
    if unattempted > 0 {
        warnings.push(format!("{unattempted} problem(s) have no submissions"));
    }
    ValidationReport {
        student_count: bundle.student_ids().len(),
        problem_count: bundle.problems.len(),
        submission_count: bundle.submissions.len(),
        kc_usage,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    const PROBLEMS: &str = "problem_id,statement\np1,Return the sum.\np2,\"Count evens, then return.\"\n";

    fn three_row_fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), PROBLEMS_FILE, PROBLEMS);
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             a,s1,p1,1,2020-01-01T00:00:00Z,0.5,\"int f() {\n  return 0;\n}\",\n\
             b,s1,p1,2,2020-01-01T00:05:00Z,1.0,,b.java\n\
             c,s2,p2,1,2020-01-02T00:00:00Z,1,return 1;,\n",
        );
        write(dir.path(), "b.java", "int f() { return a + b; }");
        dir
    }

    #[test]
    fn loads_well_formed_fixture() {
        let dir = three_row_fixture();
        let bundle = load_dataset(dir.path()).unwrap();
        assert_eq!(bundle.submissions.len(), 3);
        let attempts: Vec<u32> = bundle.submissions.iter().map(|s| s.attempt_index).collect();
        assert_eq!(attempts, vec![1, 2, 1]);
        assert_eq!(bundle.submission("b").unwrap().code, "int f() { return a + b; }");
        assert!(bundle.submission("a").unwrap().code.contains('\n'));
        assert_eq!(bundle.problem("p1").unwrap().correct_solution_ids, vec!["b"]);
        assert_eq!(bundle.problem("p2").unwrap().statement, "Count evens, then return.");
    }

    #[test]
    fn unknown_problem_names_the_row() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             a,s1,p1,1,,1.0,x,\n\
             z,s1,p404,1,,1.0,x,\n",
        );
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("p404"), "{err}");
    }

    #[test]
    fn duplicate_attempt_key_is_rejected() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             a,s1,p1,1,,1.0,x,\n\
             b,s1,p1,1,,0.0,y,\n",
        );
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate key"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             a,s1,p1,1,,1.0,x,\n\
             b,s1,p1,2,,lots,y,\n",
        );
        match load_dataset(dir.path()) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             a,s1,p1,1,,1.0,x,also.java\n",
        );
        assert!(matches!(load_dataset(dir.path()), Err(Error::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn missing_required_file() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), PROBLEMS_FILE, PROBLEMS);
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn attempts_normalized_by_timestamp_and_synthetic_clock() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            SUBMISSIONS_FILE,
            "submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n\
             late,s1,p1,5,2020-01-01T00:09:00Z,1.0,x,\n\
             early,s1,p1,2,2020-01-01T00:01:00Z,0.0,y,\n\
             u2,s2,p2,2,,1.0,z,\n\
             u1,s2,p2,1,,0.0,w,\n",
        );
        let bundle = load_dataset(dir.path()).unwrap();
        let s = |id: &str| bundle.submission(id).unwrap().clone();
        assert_eq!(s("early").attempt_index, 1);
        assert_eq!(s("late").attempt_index, 2);
        assert_eq!(s("u1").attempt_index, 1);
        assert_eq!(s("u2").attempt_index, 2);
        assert!(s("u1").timestamp < s("u2").timestamp);
    }

    #[test]
    fn kc_files_and_integrity() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            KCS_FILE,
            r#"[{"kc_id":"loops","name":"Loops","description":"for/while","origin":"human"},
                {"kc_id":"ret","name":"Return","description":"return values","origin":"human"}]"#,
        );
        write(dir.path(), QMATRIX_FILE, "problem_id,kc_id\np1,loops\np1,ret\np2,ret\n");
        let bundle = load_dataset(dir.path()).unwrap();
        assert_eq!(bundle.kc_sets[0].kind, KcSetKind::Human);
        assert_eq!(bundle.q_matrices[0].get("p1").unwrap().len(), 2);

        write(dir.path(), QMATRIX_FILE, "problem_id,kc_id\np1,recursion\n");
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("recursion"), "{err}");
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            KCS_FILE,
            r#"[{"kc_id":"ret","name":"Return","description":"return values","origin":"human"}]"#,
        );
        write(dir.path(), QMATRIX_FILE, "problem_id,kc_id\np1,ret\np2,ret\n");
        write(dir.path(), CODE_KC_MAP_FILE, "student_id,problem_id,kc_id\ns1,p1,ret\n");
        let first = load_dataset(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_dataset(&first, out.path()).unwrap();
        let second = load_dataset(out.path()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn validation_flags_sparse_kcs() {
        let dir = three_row_fixture();
        write(
            dir.path(),
            KCS_FILE,
            r#"[{"kc_id":"NestedLoops","name":"Nested loops","description":"","origin":"human"}]"#,
        );
        write(dir.path(), QMATRIX_FILE, "problem_id,kc_id\np1,NestedLoops\np2,NestedLoops\n");
        let bundle = load_dataset(dir.path()).unwrap();
        let before = bundle.clone();
        let report = validate_dataset(&bundle);
        assert_eq!(bundle, before);
        assert_eq!(report.kc_usage[0].problems_per_kc["NestedLoops"], 2);
        assert_eq!(report.kc_usage[0].sparse_kcs, vec!["NestedLoops"]);
        assert!(report.warnings.iter().any(|w| w.contains("NestedLoops")));
        assert_eq!(report.student_count, 2);
    }

    #[test]
    fn validation_without_kcs_has_empty_section() {
        let bundle = load_dataset(three_row_fixture().path()).unwrap();
        let report = validate_dataset(&bundle);
        assert!(report.kc_usage.is_empty());
        assert_eq!(report.submission_count, 3);
    }

    #[test]
    fn student_count_matches_population() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), PROBLEMS_FILE, PROBLEMS);
        let mut body = String::from("submission_id,student_id,problem_id,attempt,timestamp,score,code,code_path\n");
        for s in 0..246 {
            body.push_str(&format!("x{s},stu{s},p1,1,,1.0,return 0;,\n"));
        }
        write(dir.path(), SUBMISSIONS_FILE, &body);
        let report = validate_dataset(&load_dataset(dir.path()).unwrap());
        assert_eq!(report.student_count, 246);
    }
}
