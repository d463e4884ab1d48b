//! Synthetic datasets and scripted providers shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kclab::config::RunConfig;
use kclab::gateway::{ChatRequest, MockProvider};

/// Shape of a simulated cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub students: usize,
    pub problems: usize,
    pub kcs: usize,
    pub kcs_per_problem: usize,
    /// Inclusive upper bound of the per-student mastery threshold.
    pub max_threshold: u32,
    /// Whether wrong first attempts get a correct second attempt.
    pub retries: bool,
    pub seed: u64,
}

/// Ground truth behind a written dataset.
#[derive(Debug, Clone)]
pub struct World {
    pub root: PathBuf,
    pub qmatrix: BTreeMap<String, Vec<String>>,
    pub thresholds: BTreeMap<String, u32>,
    /// Problems in the order each student attempted them.
    pub order: BTreeMap<String, Vec<String>>,
    pub first_attempts: usize,
}

fn sid(i: usize) -> String {
    format!("s{i:03}")
}
fn pid(j: usize) -> String {
    format!("p{j:02}")
}
fn kid(k: usize) -> String {
    format!("k{k}")
}

impl World {
    /// Prior opportunities of `student` on `kc` before `problem`.
    pub fn opportunity(&self, student: &str, problem: &str, kc: &str) -> u32 {
        let order = &self.order[student];
        let pos = order.iter().position(|p| p == problem).expect("attempted");
        order[..pos].iter().filter(|p| self.qmatrix[*p].iter().any(|k| k == kc)).count() as u32
    }

    /// Mastery oracle: a KC is applied correctly once the student has
    /// practised it more often than their threshold.
    pub fn kc_correct(&self, student: &str, problem: &str, kc: &str) -> bool {
        self.opportunity(student, problem, kc) > self.thresholds[student]
    }

    pub fn problem_correct(&self, student: &str, problem: &str) -> bool {
        self.qmatrix[problem].iter().all(|k| self.kc_correct(student, problem, k))
    }

    /// Scripted provider answering label prompts from the oracle. Unused
    /// KCs are sometimes reported as `used=false, correct=true` so the
    /// coercion rule is exercised; the coerced value agrees with the oracle.
    pub fn oracle_provider(self: &Arc<Self>) -> Arc<MockProvider> {
        let world = self.clone();
        Arc::new(MockProvider::new(HashMap::new()).with_responder(move |req| world.answer(req)))
    }

    fn answer(&self, req: &ChatRequest) -> Option<String> {
        let prompt = &req.messages.last()?.content;
        if prompt.contains("List the knowledge components") {
            let j: usize = marker(prompt, "Synthetic problem ")?.trim_end_matches(':').parse().ok()?;
            let items: Vec<_> = self.qmatrix[&pid(j)]
                .iter()
                .map(|k| serde_json::json!({"name": format!("Skill {}", &k[1..]), "description": format!("Synthetic skill number {}.", &k[1..])}))
                .collect();
            return Some(format!("```json\n{}\n```", serde_json::to_string(&items).ok()?));
        }
        if prompt.contains("Summarize the group") {
            let line = prompt.lines().find(|l| l.starts_with("- "))?;
            let (name, description) = line[2..].split_once(": ")?;
            return Some(serde_json::json!({"name": name, "description": description}).to_string());
        }
        if prompt.contains("Select the KCs") {
            let ids: Vec<&str> = prompt
                .lines()
                .filter_map(|l| l.strip_prefix("- ["))
                .filter_map(|r| r.split(']').next())
                .collect();
            return serde_json::to_string(&ids).ok();
        }
        let student = marker(prompt, "student=")?;
        let problem = marker(prompt, "problem=")?;
        let mut items = Vec::new();
        for line in prompt.lines() {
            let Some(rest) = line.strip_prefix("- [") else { continue };
            let kc = &rest[..rest.find(']')?];
            let correct = self.kc_correct(&student, &problem, kc);
            let hide = !correct && (student.len() + problem.len() + kc.len() + self.thresholds[&student] as usize).is_multiple_of(3);
            items.push(serde_json::json!({
                "kc_id": kc,
                "used": !hide,
                "correct": correct || hide,
                "reasoning": format!("{kc} practised {} time(s)", self.opportunity(&student, &problem, kc)),
            }));
        }
        Some(format!(
            "Checking each KC in turn.\n```json\n{}\n```",
            serde_json::to_string(&items).ok()?
        ))
    }
}

fn marker(text: &str, key: &str) -> Option<String> {
    let start = text.find(key)? + key.len();
    Some(text[start..].split_whitespace().next()?.to_string())
}

fn code(student: &str, problem: &str, correct: bool) -> String {
    let body = if correct { "return xs.length;" } else { "return 0;" };
    format!("// student={student} problem={problem} \nint solve(int[] xs) {{\n    {body}\n}}\n")
}

/// Writes the cohort under `dir/data` and returns its ground truth.
pub fn write_cohort(dir: &Path, c: &Cohort) -> Arc<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let root = dir.join("data");
    fs::create_dir_all(&root).unwrap();

    let mut qmatrix = BTreeMap::new();
    for j in 0..c.problems {
        let kcs: Vec<String> = (0..c.kcs_per_problem).map(|o| kid((j + o) % c.kcs)).collect();
        let mut kcs = kcs;
        kcs.sort();
        kcs.dedup();
        qmatrix.insert(pid(j), kcs);
    }
    let mut thresholds = BTreeMap::new();
    let mut order = BTreeMap::new();
    for i in 0..c.students {
        thresholds.insert(sid(i), rng.random_range(0..=c.max_threshold));
        let mut ps: Vec<String> = (0..c.problems).map(pid).collect();
        ps.shuffle(&mut rng);
        order.insert(sid(i), ps);
    }
    let world = World { root: root.clone(), qmatrix, thresholds, order, first_attempts: c.students * c.problems };

    let mut problems = csv::Writer::from_path(root.join("problems.csv")).unwrap();
    problems.write_record(["problem_id", "statement"]).unwrap();
    for j in 0..c.problems {
        problems.write_record([pid(j), format!("Synthetic problem {j}: compute a value from an array.")]).unwrap();
    }
    problems.flush().unwrap();

    let mut q = csv::Writer::from_path(root.join("qmatrix.csv")).unwrap();
    q.write_record(["problem_id", "kc_id"]).unwrap();
    for (p, kcs) in &world.qmatrix {
        for k in kcs {
            q.write_record([p, k]).unwrap();
        }
    }
    q.flush().unwrap();

    let kcs: Vec<_> = (0..c.kcs)
        .map(|k| serde_json::json!({"kc_id": kid(k), "name": format!("Skill {k}"), "description": format!("Synthetic skill number {k}."), "origin": "human"}))
        .collect();
    fs::write(root.join("kcs.json"), serde_json::to_string_pretty(&kcs).unwrap()).unwrap();

    let mut subs = csv::Writer::from_path(root.join("submissions.csv")).unwrap();
    subs.write_record(["submission_id", "student_id", "problem_id", "attempt", "timestamp", "score", "code"]).unwrap();
    let mut n = 0;
    for (s, ps) in &world.order {
        for (pos, p) in ps.iter().enumerate() {
            let ok = world.problem_correct(s, p);
            let ts = |h: usize| format!("2024-01-{:02}T{:02}:00:00Z", 1 + pos, h);
            n += 1;
            subs.write_record([format!("x{n:05}"), s.clone(), p.clone(), "1".into(), ts(9), if ok { "1" } else { "0" }.into(), code(s, p, ok)]).unwrap();
            if !ok && c.retries {
                n += 1;
                subs.write_record([format!("x{n:05}"), s.clone(), p.clone(), "2".into(), ts(10), "1".into(), code(s, p, true)]).unwrap();
            }
        }
    }
    subs.flush().unwrap();

    // One vector per submission: problem identity plus a correctness axis.
    let mut emb = String::new();
    let mut reader = csv::Reader::from_path(root.join("submissions.csv")).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let j: usize = rec[2][1..].parse().unwrap();
        let mut v = vec![0.05; c.problems + 2];
        v[j] = 1.0;
        v[c.problems] = rec[5].parse::<f64>().unwrap();
        v[c.problems + 1] = (rec[1][1..].parse::<f64>().unwrap() % 7.0) / 10.0;
        emb.push_str(&serde_json::json!({"id": &rec[0], "vector": v}).to_string());
        emb.push('\n');
    }
    fs::write(root.join("embeddings.jsonl"), emb).unwrap();
    Arc::new(world)
}

/// Configuration for a run rooted at `dir` with data written by
/// `write_cohort`. `extra` is appended verbatim.
pub fn config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "[dataset]\nroot = \"data\"\n[output]\ndir = \"runs\"\n[cache]\ndir = \"cache\"\n{extra}\n"
    );
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.resolve_paths(dir);
    cfg.validate().unwrap();
    cfg
}

/// Path of the fixture bundled with the crate.
pub fn smoke_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/smoke")
}

/// Copies a directory tree.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Every file below `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Random generator for test instances.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
