//! Per-KC correctness labels for first attempts: chain-of-thought and
//! direct LLM prompting, and the problem-level propagation baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayStats};
use crate::model::{is_problem_correct, AttemptPair, KcAssignment, KcSet, KnowledgeComponent, Problem};
use crate::prompts::{extract_json, format_kc_list, render, PromptTemplates};

const COERCION_NOTE: &str = "[coerced: correct=false because used=false]";

const FORMAT_REMINDER: &str = "Your previous answer could not be parsed. Respond again and end \
with a single fenced ```json block holding an array with exactly one object per KC id from the \
list, each with boolean \"used\" and \"correct\" fields.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMethod {
    #[serde(alias = "llm-cot")]
    LlmCot,
    #[serde(alias = "llm-direct")]
    LlmDirect,
    Baseline,
}

impl LabelMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMethod::LlmCot => "llm_cot",
            LabelMethod::LlmDirect => "llm_direct",
            LabelMethod::Baseline => "baseline",
        }
    }

    /// CLI spelling (`llm-cot`).
    pub fn flag(self) -> &'static str {
        match self {
            LabelMethod::LlmCot => "llm-cot",
            LabelMethod::LlmDirect => "llm-direct",
            LabelMethod::Baseline => "baseline",
        }
    }

    pub fn prompt_mode(self) -> Option<PromptMode> {
        match self {
            LabelMethod::LlmCot => Some(PromptMode::Cot),
            LabelMethod::LlmDirect => Some(PromptMode::Direct),
            LabelMethod::Baseline => None,
        }
    }
}

impl fmt::Display for LabelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "llm_cot" => Ok(LabelMethod::LlmCot),
            "llm_direct" => Ok(LabelMethod::LlmDirect),
            "baseline" => Ok(LabelMethod::Baseline),
            other => Err(Error::Config(format!("unknown labeling method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Cot,
    Direct,
}

impl PromptMode {
    pub fn method(self) -> LabelMethod {
        match self {
            PromptMode::Cot => LabelMethod::LlmCot,
            PromptMode::Direct => LabelMethod::LlmDirect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcLabel {
    pub student_id: String,
    pub problem_id: String,
    pub kc_id: String,
    pub used: bool,
    pub correct: bool,
    pub method: LabelMethod,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotKc {
    pub kc_id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub kc_id: String,
    pub used: bool,
    pub correct: bool,
    #[serde(default)]
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub problem_statement: String,
    pub code: String,
    pub kc_list: Vec<FewShotKc>,
    pub expected_output: Vec<Judgment>,
}

impl FewShotExample {
    pub fn validate(&self) -> Result<()> {
        let listed: BTreeSet<&str> = self.kc_list.iter().map(|k| k.kc_id.as_str()).collect();
        let judged: Vec<&str> = self.expected_output.iter().map(|j| j.kc_id.as_str()).collect();
        let judged_set: BTreeSet<&str> = judged.iter().copied().collect();
        if listed != judged_set || judged.len() != judged_set.len() {
            return Err(Error::Validation(
                "few-shot expected_output must cover exactly its kc_list".into(),
            ));
        }
        Ok(())
    }

    fn components(&self) -> Vec<KnowledgeComponent> {
        self.kc_list
            .iter()
            .map(|k| KnowledgeComponent {
                kc_id: k.kc_id.clone(),
                name: k.name.clone(),
                description: k.description.clone(),
                origin: crate::model::KcOrigin::Human,
            })
            .collect()
    }
}

/// The two shipped few-shot demonstrations.
pub fn default_fewshots() -> Vec<FewShotExample> {
    [
        include_str!("../fewshots/01_sum_evens.json"),
        include_str!("../fewshots/02_max_string.json"),
    ]
    .iter()
    .map(|text| serde_json::from_str(text).expect("bundled few-shot parses"))
    .collect()
}

/// Loads every `*.json` in `dir`, in file-name order.
pub fn load_fewshots(dir: &Path) -> Result<Vec<FewShotExample>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let ex: FewShotExample = serde_json::from_str(&text)?;
            ex.validate()?;
            Ok(ex)
        })
        .collect()
}

fn user_message(templates: &PromptTemplates, statement: &str, code: &str, kcs: &[KnowledgeComponent]) -> String {
    render(
        &templates.label_user,
        &[
            ("problem_statement", statement),
            ("code", code),
            ("kc_list", &format_kc_list(kcs)),
        ],
    )
}

/// Renders an answer in the format the model is asked to produce.
fn answer_text(judgments: &[Judgment], mode: PromptMode) -> String {
    let rows: Vec<Value> = judgments
        .iter()
        .map(|j| match mode {
            PromptMode::Cot => serde_json::json!({
                "kc_id": j.kc_id, "used": j.used, "correct": j.correct, "reasoning": j.reasoning
            }),
            PromptMode::Direct => serde_json::json!({
                "kc_id": j.kc_id, "used": j.used, "correct": j.correct
            }),
        })
        .collect();
    let block = format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&rows).expect("json")
    );
    match mode {
        PromptMode::Cot => {
            let reasoning: Vec<String> = judgments
                .iter()
                .map(|j| {
                    let usage = if j.used { "used" } else { "not used" };
                    let verdict = if j.correct { "correct" } else { "incorrect" };
                    format!("- {}: {}. {} → {}.", j.kc_id, j.reasoning, usage, verdict)
                })
                .collect();
            format!("Reasoning:\n{}\n\n{block}", reasoning.join("\n"))
        }
        PromptMode::Direct => block,
    }
}

pub fn build_label_prompt(
    model: &str,
    templates: &PromptTemplates,
    problem: &Problem,
    code: &str,
    kcs: &[KnowledgeComponent],
    fewshots: &[FewShotExample],
    mode: PromptMode,
) -> Result<ChatRequest> {
    if kcs.is_empty() {
        return Err(Error::Precondition("cannot label against an empty KC list".into()));
    }
    let system = match mode {
        PromptMode::Cot => &templates.label_system_cot,
        PromptMode::Direct => &templates.label_system_direct,
    };
    let mut messages = vec![ChatMessage::system(system.clone())];
    for ex in fewshots {
        messages.push(ChatMessage::user(user_message(
            templates,
            &ex.problem_statement,
            &ex.code,
            &ex.components(),
        )));
        messages.push(ChatMessage::assistant(answer_text(&ex.expected_output, mode)));
    }
    messages.push(ChatMessage::user(user_message(templates, &problem.statement, code, kcs)));
    Ok(ChatRequest::new(model, messages))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedJudgment {
    pub kc_id: String,
    pub used: bool,
    pub correct: bool,
    pub rationale: String,
}

fn field_bool(obj: &serde_json::Map<String, Value>, key: &str, kc: &str) -> Result<bool> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(other) => Err(Error::ResponseParse(format!(
            "`{key}` for KC `{kc}` is not a boolean: {other}"
        ))),
        None => Err(Error::ResponseParse(format!("`{key}` missing for KC `{kc}`"))),
    }
}

/// Parses the final JSON block of a labeling response. The block must cover
/// `expected_kcs` exactly; `used = false` forces `correct = false`.
pub fn parse_label_response(content: &str, expected_kcs: &[String]) -> Result<Vec<ParsedJudgment>> {
    let extracted = extract_json(content)
        .ok_or_else(|| Error::ResponseParse("no JSON block in response".into()))?;
    let Value::Array(items) = extracted.value else {
        return Err(Error::ResponseParse("answer block is not a JSON array".into()));
    };
    let expected: BTreeSet<&str> = expected_kcs.iter().map(String::as_str).collect();
    let mut parsed: BTreeMap<String, ParsedJudgment> = BTreeMap::new();
    for item in &items {
        let Value::Object(obj) = item else {
            return Err(Error::ResponseParse(format!("answer entry is not an object: {item}")));
        };
        let kc = obj
            .get("kc_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::ResponseParse(format!("entry without kc_id: {item}")))?;
        if !expected.contains(kc) {
            return Err(Error::ResponseParse(format!("unexpected kc_id `{kc}`")));
        }
        let used = field_bool(obj, "used", kc)?;
        let mut correct = field_bool(obj, "correct", kc)?;
        let reasoning = obj.get("reasoning").and_then(Value::as_str).unwrap_or("").trim();
        let mut rationale = [extracted.prose.as_str(), reasoning]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join("\n");
        if !used && correct {
            correct = false;
            if !rationale.is_empty() {
                rationale.push(' ');
            }
            rationale.push_str(COERCION_NOTE);
        }
        let judgment = ParsedJudgment { kc_id: kc.to_string(), used, correct, rationale };
        if parsed.insert(kc.to_string(), judgment).is_some() {
            return Err(Error::ResponseParse(format!("kc_id `{kc}` judged twice")));
        }
    }
    let missing: Vec<&str> = expected.iter().filter(|k| !parsed.contains_key(**k)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::ResponseParse(format!("no judgment for {}", missing.join(", "))));
    }
    Ok(expected_kcs
        .iter()
        .map(|k| parsed.remove(k).expect("coverage checked"))
        .collect())
}

/// Everything an LLM labeling run needs besides the data.
pub struct LabelContext<'a> {
    pub gateway: &'a Gateway,
    pub model: String,
    pub templates: PromptTemplates,
    pub fewshots: Vec<FewShotExample>,
}

/// Labels `pair.first` against `kcs` with one completion, plus at most one
/// reprompt if the answer does not parse.
pub fn label_submission(
    ctx: &LabelContext<'_>,
    problem: &Problem,
    pair: &AttemptPair,
    kcs: &[KnowledgeComponent],
    mode: PromptMode,
) -> Result<Vec<KcLabel>> {
    let request = build_label_prompt(
        &ctx.model,
        &ctx.templates,
        problem,
        &pair.first.code,
        kcs,
        &ctx.fewshots,
        mode,
    )?;
    let expected: Vec<String> = kcs.iter().map(|k| k.kc_id.clone()).collect();
    let first = ctx.gateway.complete(&request)?;
    let parsed = match parse_label_response(&first.content, &expected) {
        Ok(p) => p,
        Err(err) => {
            tracing::debug!(student = %pair.student_id, problem = %pair.problem_id, %err, "reprompting");
            let mut retry = request.clone();
            retry.messages.push(ChatMessage::assistant(first.content));
            retry.messages.push(ChatMessage::user(FORMAT_REMINDER));
            let second = ctx.gateway.complete(&retry)?;
            parse_label_response(&second.content, &expected)?
        }
    };
    Ok(parsed
        .into_iter()
        .map(|j| KcLabel {
            student_id: pair.student_id.clone(),
            problem_id: pair.problem_id.clone(),
            kc_id: j.kc_id,
            used: j.used,
            correct: j.correct,
            method: mode.method(),
            rationale: j.rationale,
        })
        .collect())
}

/// Propagates problem-level correctness of the first attempt to every KC.
pub fn baseline_labels(pair: &AttemptPair, kcs: &[KnowledgeComponent], threshold: f64) -> Vec<KcLabel> {
    let correct = is_problem_correct(&pair.first, threshold);
    kcs.iter()
        .map(|kc| KcLabel {
            student_id: pair.student_id.clone(),
            problem_id: pair.problem_id.clone(),
            kc_id: kc.kc_id.clone(),
            used: correct,
            correct,
            method: LabelMethod::Baseline,
            rationale: String::new(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub student_id: String,
    pub problem_id: String,
    pub submission_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: LabelMethod,
    pub kc_set: String,
    pub submissions_total: usize,
    pub submissions_labeled: usize,
    pub label_count: usize,
    pub failures: Vec<LabelFailure>,
    pub gateway: GatewayStats,
    pub cache_hit_ratio: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct LabelRun {
    /// Sorted by (student, problem, kc).
    pub labels: Vec<KcLabel>,
    pub report: RunReport,
}

/// What a batch run labels each pair against.
pub struct LabelTarget<'a> {
    pub kc_set: &'a KcSet,
    pub assignment: &'a (dyn KcAssignment + Sync),
}

fn kcs_for_pair(target: &LabelTarget<'_>, pair: &AttemptPair) -> Result<Vec<KnowledgeComponent>> {
    let ids = target
        .assignment
        .kcs_for(&pair.student_id, &pair.problem_id)
        .ok_or_else(|| {
            Error::Validation(format!(
                "no KC assignment for ({}, {})",
                pair.student_id, pair.problem_id
            ))
        })?;
    target.kc_set.select(ids)
}

/// Labels every pair. Failed submissions are recorded in the report and the
/// run continues; workers are bounded by `workers`.
pub fn label_all(
    ctx: Option<&LabelContext<'_>>,
    problems: &[Problem],
    pairs: &[AttemptPair],
    target: &LabelTarget<'_>,
    method: LabelMethod,
    threshold: f64,
    workers: usize,
) -> Result<LabelRun> {
    let started = Instant::now();
    let problem_by_id: BTreeMap<&str, &Problem> =
        problems.iter().map(|p| (p.problem_id.as_str(), p)).collect();

    let workers = if method == LabelMethod::Baseline { 1 } else { workers };
    let indices: Vec<usize> = (0..pairs.len()).collect();
    let results = crate::par::parallel_map(&indices, workers, |&i| {
        let pair = &pairs[i];
        let kcs = kcs_for_pair(target, pair).map_err(|e| e.to_string())?;
        match method.prompt_mode() {
            None => Ok(baseline_labels(pair, &kcs, threshold)),
            Some(mode) => {
                let ctx = ctx.ok_or("LLM labeling requires a gateway")?;
                let problem = problem_by_id
                    .get(pair.problem_id.as_str())
                    .ok_or_else(|| format!("unknown problem `{}`", pair.problem_id))?;
                label_submission(ctx, problem, pair, &kcs, mode).map_err(|e| e.to_string())
            }
        }
    });

    let mut labels = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut l) => labels.append(&mut l),
            Err(error) => {
                let pair = &pairs[i];
                tracing::warn!(student = %pair.student_id, problem = %pair.problem_id, %error, "labeling failed");
                failures.push(LabelFailure {
                    student_id: pair.student_id.clone(),
                    problem_id: pair.problem_id.clone(),
                    submission_id: pair.first.submission_id.clone(),
                    error,
                });
            }
        }
    }
    labels.sort_by(|a, b| {
        (&a.student_id, &a.problem_id, &a.kc_id).cmp(&(&b.student_id, &b.problem_id, &b.kc_id))
    });
    let gateway = ctx.map(|c| c.gateway.stats()).unwrap_or_default();
    let report = RunReport {
        method,
        kc_set: target.kc_set.kind.to_string(),
        submissions_total: pairs.len(),
        submissions_labeled: pairs.len() - failures.len(),
        label_count: labels.len(),
        failures,
        gateway,
        cache_hit_ratio: gateway.cache_hit_ratio(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(LabelRun { labels, report })
}

pub const LABELS_HEADER: [&str; 7] = [
    "student_id",
    "problem_id",
    "kc_id",
    "used",
    "correct",
    "method",
    "rationale",
];

pub fn labels_to_csv(labels: &[KcLabel]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABELS_HEADER).expect("in-memory write");
    for l in labels {
        w.write_record([
            l.student_id.as_str(),
            &l.problem_id,
            &l.kc_id,
            if l.used { "true" } else { "false" },
            if l.correct { "true" } else { "false" },
            l.method.as_str(),
            &l.rationale,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn labels_from_csv(text: &str) -> Result<Vec<KcLabel>> {
    let mut reader = csv::Reader::from_reader(crate::artifact::strip_header(text).as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<KcLabel>() {
        let label = row?;
        if !label.used && label.correct {
            return Err(Error::Validation(format!(
                "label ({}, {}, {}) is correct but unused",
                label.student_id, label.problem_id, label.kc_id
            )));
        }
        out.push(label);
    }
    Ok(out)
}
