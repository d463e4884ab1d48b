//! Generated KC sets: exemplar selection over correct-solution embeddings,
//! candidate generation, consolidation by clustering and summarization,
//! per-exemplar KC profiles and nearest-exemplar mapping of students.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{cosine_distance, kmeans, squared_euclidean, Embedding, EmbeddingStore, TextEmbedder};
use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::ingest::DatasetBundle;
use crate::model::{
    AttemptPair, CodeKcMap, KcOrigin, KcSet, KcSetKind, KnowledgeComponent, Problem, QMatrix, Submission,
};
use crate::prompts::{extract_json, format_kc_list, render, PromptTemplates};

pub const DEFAULT_EXEMPLARS_PER_PROBLEM: usize = 5;
pub const DEFAULT_TARGET_KCS: usize = 20;

const FORMAT_REMINDER: &str = "Your previous answer could not be parsed. Respond again and end \
with a single fenced ```json block in exactly the format requested.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub problem_id: String,
    /// Embedding ids are submission ids; ordered by submission id.
    pub exemplars: Vec<Embedding>,
    pub k: usize,
}

impl ExemplarSet {
    pub fn submission_ids(&self) -> Vec<&str> {
        self.exemplars.iter().map(|e| e.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarKcProfile {
    pub problem_id: String,
    pub submission_id: String,
    pub kc_subset: BTreeSet<String>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateKc {
    pub name: String,
    pub description: String,
}

/// Picks up to `k` diverse correct solutions: all of them when there are at
/// most `k`, otherwise the member nearest each k-means centroid.
pub fn select_exemplars(
    problem: &Problem,
    correct_solutions: &[&Submission],
    store: &EmbeddingStore,
    k: usize,
    seed: u64,
) -> Result<ExemplarSet> {
    if k == 0 {
        return Err(Error::Precondition("exemplar count k must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    let mut solutions: Vec<&Submission> = correct_solutions
        .iter()
        .copied()
        .filter(|s| seen.insert(s.submission_id.as_str()))
        .collect();
    if solutions.is_empty() {
        return Err(Error::Precondition(format!(
            "problem `{}` has no correct solutions",
            problem.problem_id
        )));
    }
    if let Some(s) = solutions.iter().find(|s| s.problem_id != problem.problem_id) {
        return Err(Error::Precondition(format!(
            "submission `{}` belongs to `{}`, not `{}`",
            s.submission_id, s.problem_id, problem.problem_id
        )));
    }
    solutions.sort_by(|a, b| a.submission_id.cmp(&b.submission_id));
    let embeddings = solutions
        .iter()
        .map(|s| store.get_or_embed(&s.submission_id, &s.code))
        .collect::<Result<Vec<_>>>()?;

    let mut exemplars = if embeddings.len() <= k {
        embeddings
    } else {
        let clusters = kmeans(&embeddings, k, seed)?;
        let mut picked = Vec::with_capacity(k);
        for (c, members) in clusters.members().iter().enumerate() {
            let centroid = &clusters.centroids[c];
            // Members are in ascending id order, so `<` keeps the smallest id on ties.
            let mut best: Option<(f64, usize)> = None;
            for &m in members {
                let d = squared_euclidean(&embeddings[m].vector, centroid);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, m));
                }
            }
            if let Some((_, m)) = best {
                picked.push(embeddings[m].clone());
            }
        }
        picked
    };
    exemplars.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ExemplarSet {
        problem_id: problem.problem_id.clone(),
        exemplars,
        k,
    })
}

/// Nearest profile by cosine distance to the last attempt; ties go to the
/// smallest submission id.
pub fn nearest_profile<'a>(
    last_embedding: &Embedding,
    profiles: &'a [ExemplarKcProfile],
) -> Result<&'a ExemplarKcProfile> {
    let mut best: Option<(f64, &ExemplarKcProfile)> = None;
    for p in profiles {
        let d = cosine_distance(&last_embedding.vector, &p.embedding.vector)?;
        let better = match best {
            None => true,
            Some((bd, bp)) => d < bd || (d == bd && p.submission_id < bp.submission_id),
        };
        if better {
            best = Some((d, p));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Precondition("no exemplar profiles to map against".into()))
}

/// KCs of the exemplar closest to the pair's last attempt.
pub fn map_student_to_kcs(
    pair: &AttemptPair,
    profiles: &[ExemplarKcProfile],
    store: &EmbeddingStore,
) -> Result<BTreeSet<String>> {
    if profiles.is_empty() {
        return Err(Error::Precondition(format!(
            "no exemplar profiles for problem `{}`",
            pair.problem_id
        )));
    }
    let last = store.get_or_embed(&pair.last.submission_id, &pair.last.code)?;
    Ok(nearest_profile(&last, profiles)?.kc_subset.clone())
}

/// Consolidated KC set plus, for each candidate, the index of the KC it was
/// folded into.
#[derive(Debug, Clone, PartialEq)]
pub struct Consolidation {
    pub kc_set: KcSet,
    pub assignments: Vec<usize>,
}

/// Generated KC id for cluster `index` (zero-based).
pub fn generated_kc_id(index: usize) -> String {
    format!("gen{:02}", index + 1)
}

/// LLM-backed steps of the generation pipeline.
pub struct KcGenerator<'a> {
    pub gateway: &'a Gateway,
    pub model: String,
    pub templates: PromptTemplates,
}

impl KcGenerator<'_> {
    /// Sends `prompt`, parses with `parse`, and retries once with a format
    /// reminder on a parse failure.
    fn ask<T>(&self, prompt: String, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        let mut request = ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]);
        let first = self.gateway.complete(&request)?;
        match parse(&first.content) {
            Ok(v) => Ok(v),
            Err(err) => {
                tracing::debug!(%err, "reprompting after unparseable response");
                request.messages.push(ChatMessage::assistant(first.content));
                request.messages.push(ChatMessage::user(FORMAT_REMINDER));
                let second = self.gateway.complete(&request)?;
                parse(&second.content)
            }
        }
    }

    pub fn generate_candidate_kcs(&self, problem: &Problem, exemplar_code: &str) -> Result<Vec<CandidateKc>> {
        let prompt = render(
            &self.templates.generate_kcs,
            &[("problem_statement", &problem.statement), ("code", exemplar_code)],
        );
        self.ask(prompt, parse_candidates)
    }

    /// Clusters candidates into exactly `target_n` groups and summarizes each
    /// group with one LLM call.
    pub fn consolidate_kcs(
        &self,
        candidates: &[CandidateKc],
        target_n: usize,
        seed: u64,
        embedder: &dyn TextEmbedder,
    ) -> Result<Consolidation> {
        if target_n == 0 || candidates.len() < target_n {
            return Err(Error::Precondition(format!(
                "cannot consolidate {} candidates into {target_n} KCs",
                candidates.len()
            )));
        }
        let points = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let v = embedder.embed_text(&format!("{}: {}", c.name, c.description))?;
                Embedding::new(format!("cand{i:06}"), v)
            })
            .collect::<Result<Vec<_>>>()?;
        let clusters = kmeans(&points, target_n, seed)?;
        let mut groups = clusters.members();
        // Stable KC numbering: clusters ordered by their first candidate.
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&c| groups[c].first().copied().unwrap_or(usize::MAX));
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::Numerical("k-means produced an empty cluster".into()));
        }

        let mut assignments = vec![0; candidates.len()];
        let mut components = Vec::with_capacity(target_n);
        for (kc_index, &c) in order.iter().enumerate() {
            let members = std::mem::take(&mut groups[c]);
            let listing = members
                .iter()
                .map(|&m| format!("- {}: {}", candidates[m].name, candidates[m].description))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = render(&self.templates.summarize_kcs, &[("kc_list", &listing)]);
            let summary = self.ask(prompt, parse_summary)?;
            for &m in &members {
                assignments[m] = kc_index;
            }
            components.push(KnowledgeComponent {
                kc_id: generated_kc_id(kc_index),
                name: summary.name,
                description: summary.description,
                origin: KcOrigin::Generated,
            });
        }
        Ok(Consolidation {
            kc_set: KcSet::new("generated", KcSetKind::Generated, components)?,
            assignments,
        })
    }

    /// Asks which of the problem's KCs the exemplar uses.
    pub fn profile_exemplar(
        &self,
        problem: &Problem,
        exemplar: &Submission,
        embedding: &Embedding,
        problem_kcs: &[KnowledgeComponent],
    ) -> Result<ExemplarKcProfile> {
        if problem_kcs.is_empty() {
            return Err(Error::Precondition(format!(
                "problem `{}` has no KCs to select from",
                problem.problem_id
            )));
        }
        let allowed: BTreeSet<&str> = problem_kcs.iter().map(|k| k.kc_id.as_str()).collect();
        let prompt = render(
            &self.templates.select_kcs,
            &[
                ("problem_statement", &problem.statement),
                ("code", &exemplar.code),
                ("kc_list", &format_kc_list(problem_kcs)),
            ],
        );
        let kc_subset = self.ask(prompt, |content| parse_selection(content, &allowed))?;
        Ok(ExemplarKcProfile {
            problem_id: problem.problem_id.clone(),
            submission_id: exemplar.submission_id.clone(),
            kc_subset,
            embedding: embedding.clone(),
        })
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String> {
    match obj.get(key).and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(Error::ResponseParse(format!("missing or empty `{key}`"))),
    }
}

pub fn parse_candidates(content: &str) -> Result<Vec<CandidateKc>> {
    let value = extract_json(content)
        .ok_or_else(|| Error::ResponseParse("no JSON block in response".into()))?
        .value;
    let Value::Array(items) = value else {
        return Err(Error::ResponseParse("candidate block is not a JSON array".into()));
    };
    items
        .iter()
        .map(|item| match item {
            Value::Object(obj) => Ok(CandidateKc {
                name: string_field(obj, "name")?,
                description: string_field(obj, "description")?,
            }),
            other => Err(Error::ResponseParse(format!("candidate is not an object: {other}"))),
        })
        .collect()
}

pub fn parse_summary(content: &str) -> Result<CandidateKc> {
    let value = extract_json(content)
        .ok_or_else(|| Error::ResponseParse("no JSON block in response".into()))?
        .value;
    let obj = match value {
        Value::Object(obj) => obj,
        Value::Array(mut items) if items.len() == 1 => match items.remove(0) {
            Value::Object(obj) => obj,
            _ => return Err(Error::ResponseParse("summary is not an object".into())),
        },
        _ => return Err(Error::ResponseParse("summary is not an object".into())),
    };
    Ok(CandidateKc {
        name: string_field(&obj, "name")?,
        description: string_field(&obj, "description")?,
    })
}

/// Parses a JSON array of kc_id strings; every id must be in `allowed` and
/// the selection must be non-empty.
pub fn parse_selection(content: &str, allowed: &BTreeSet<&str>) -> Result<BTreeSet<String>> {
    let value = extract_json(content)
        .ok_or_else(|| Error::ResponseParse("no JSON block in response".into()))?
        .value;
    let Value::Array(items) = value else {
        return Err(Error::ResponseParse("selection is not a JSON array".into()));
    };
    let mut out = BTreeSet::new();
    for item in items {
        let id = match &item {
            Value::String(s) => s.as_str(),
            Value::Object(obj) => obj
                .get("kc_id")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::ResponseParse(format!("selection entry without kc_id: {item}")))?,
            other => return Err(Error::ResponseParse(format!("selection entry is not a string: {other}"))),
        };
        if !allowed.contains(id) {
            return Err(Error::ResponseParse(format!("selected kc_id `{id}` is not offered")));
        }
        out.insert(id.to_string());
    }
    if out.is_empty() {
        return Err(Error::ResponseParse("empty KC selection".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub exemplars_per_problem: usize,
    pub target_kcs: usize,
    pub seed: u64,
    pub correct_threshold: f64,
    pub workers: usize,
}

/// Output of the generation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedKcs {
    pub kc_set: KcSet,
    /// Problem to the consolidated KCs that absorbed its candidates.
    pub qmatrix: QMatrix,
    pub exemplars: Vec<ExemplarSet>,
    pub candidates: Vec<SourcedCandidate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcedCandidate {
    pub problem_id: String,
    pub submission_id: String,
    pub name: String,
    pub description: String,
    /// Consolidated KC the candidate was folded into.
    pub kc_id: String,
}

/// Exemplar selection, candidate generation and consolidation over every
/// problem with at least one correct solution.
pub fn generate_kc_set(
    generator: &KcGenerator<'_>,
    bundle: &DatasetBundle,
    store: &EmbeddingStore,
    embedder: &dyn TextEmbedder,
    config: &GenerationConfig,
) -> Result<GeneratedKcs> {
    let mut warnings = Vec::new();
    let mut exemplars = Vec::new();
    let mut problems: Vec<&Problem> = bundle.problems.iter().collect();
    problems.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    for problem in problems {
        let solutions = bundle.correct_solutions(&problem.problem_id, config.correct_threshold);
        if solutions.is_empty() {
            let msg = format!("problem `{}` has no correct solutions; no KCs generated", problem.problem_id);
            tracing::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        exemplars.push(select_exemplars(
            problem,
            &solutions,
            store,
            config.exemplars_per_problem,
            config.seed,
        )?);
    }

    let jobs: Vec<(&str, &str)> = exemplars
        .iter()
        .flat_map(|set| set.exemplars.iter().map(move |e| (set.problem_id.as_str(), e.id.as_str())))
        .collect();
    let generated = crate::par::parallel_map(&jobs, config.workers, |&(pid, sid)| {
        let problem = bundle.problem(pid).expect("exemplar problem exists");
        let submission = bundle.submission(sid).expect("exemplar submission exists");
        generator.generate_candidate_kcs(problem, &submission.code)
    });
    let mut sourced = Vec::new();
    let mut flat = Vec::new();
    for ((pid, sid), result) in jobs.iter().zip(generated) {
        for c in result? {
            sourced.push((pid.to_string(), sid.to_string()));
            flat.push(c);
        }
    }

    let consolidation = generator.consolidate_kcs(&flat, config.target_kcs, config.seed, embedder)?;
    let mut qmatrix = QMatrix::default();
    let mut candidates = Vec::with_capacity(flat.len());
    for (((pid, sid), c), &kc) in sourced.into_iter().zip(flat).zip(&consolidation.assignments) {
        let kc_id = consolidation.kc_set.components[kc].kc_id.clone();
        qmatrix.insert(pid.clone(), kc_id.clone());
        candidates.push(SourcedCandidate {
            problem_id: pid,
            submission_id: sid,
            name: c.name,
            description: c.description,
            kc_id,
        });
    }
    Ok(GeneratedKcs {
        kc_set: consolidation.kc_set,
        qmatrix,
        exemplars,
        candidates,
        warnings,
    })
}

/// Output of the mapping stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub profiles: Vec<ExemplarKcProfile>,
    pub code_kc_map: CodeKcMap,
    /// (student, problem, error) for pairs that could not be mapped.
    pub failures: Vec<(String, String, String)>,
}

/// Profiles every exemplar against its problem's generated KCs, then maps
/// each attempt pair to its nearest exemplar's subset.
#[allow(clippy::too_many_arguments)]
pub fn map_students(
    generator: &KcGenerator<'_>,
    bundle: &DatasetBundle,
    generated_kcs: &KcSet,
    qmatrix: &QMatrix,
    exemplars: &[ExemplarSet],
    pairs: &[AttemptPair],
    store: &EmbeddingStore,
    workers: usize,
) -> Result<Mapping> {
    let jobs: Vec<(&ExemplarSet, &Embedding)> = exemplars
        .iter()
        .flat_map(|set| set.exemplars.iter().map(move |e| (set, e)))
        .collect();
    let results = crate::par::parallel_map(&jobs, workers, |&(set, emb)| {
        let problem = bundle
            .problem(&set.problem_id)
            .ok_or_else(|| Error::Validation(format!("unknown problem `{}`", set.problem_id)))?;
        let submission = bundle
            .submission(&emb.id)
            .ok_or_else(|| Error::Validation(format!("unknown submission `{}`", emb.id)))?;
        let ids = qmatrix.get(&set.problem_id).cloned().unwrap_or_default();
        let kcs = generated_kcs.select(&ids)?;
        generator.profile_exemplar(problem, submission, emb, &kcs)
    });
    let profiles = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut by_problem: BTreeMap<&str, Vec<ExemplarKcProfile>> = BTreeMap::new();
    for p in &profiles {
        by_problem.entry(p.problem_id.as_str()).or_default().push(p.clone());
    }
    let mut code_kc_map = CodeKcMap::default();
    let mut failures = Vec::new();
    for pair in pairs {
        let profiles = by_problem.get(pair.problem_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        match map_student_to_kcs(pair, profiles, store) {
            Ok(kcs) => code_kc_map.insert(&pair.student_id, &pair.problem_id, kcs),
            Err(e) => {
                tracing::warn!(student = %pair.student_id, problem = %pair.problem_id, error = %e, "mapping failed");
                failures.push((pair.student_id.clone(), pair.problem_id.clone(), e.to_string()));
            }
        }
    }
    Ok(Mapping {
        profiles,
        code_kc_map,
        failures,
    })
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    problem_id: String,
    submission_id: String,
    kc_subset: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct ExemplarRecord {
    problem_id: String,
    k: usize,
    submission_ids: Vec<String>,
}

/// JSON listing of exemplar ids per problem (embeddings live in the store).
pub fn exemplars_to_json(sets: &[ExemplarSet]) -> String {
    let records: Vec<ExemplarRecord> = sets
        .iter()
        .map(|s| ExemplarRecord {
            problem_id: s.problem_id.clone(),
            k: s.k,
            submission_ids: s.exemplars.iter().map(|e| e.id.clone()).collect(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("serializable") + "\n"
}

pub fn exemplars_from_json(text: &str, store: &EmbeddingStore) -> Result<Vec<ExemplarSet>> {
    let records: Vec<ExemplarRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .map(|r| {
            Ok(ExemplarSet {
                problem_id: r.problem_id,
                k: r.k,
                exemplars: r
                    .submission_ids
                    .iter()
                    .map(|id| store.get_embedding(id))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn profiles_to_json(profiles: &[ExemplarKcProfile]) -> String {
    let records: Vec<ProfileRecord> = profiles
        .iter()
        .map(|p| ProfileRecord {
            problem_id: p.problem_id.clone(),
            submission_id: p.submission_id.clone(),
            kc_subset: p.kc_subset.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("serializable") + "\n"
}

pub fn candidates_to_json(candidates: &[SourcedCandidate]) -> String {
    serde_json::to_string_pretty(candidates).expect("serializable") + "\n"
}
