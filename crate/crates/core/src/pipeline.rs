//! Stage orchestration over a run directory. Each stage reads the artifacts
//! of earlier stages (checking their config hash) and writes its own
//! atomically, each with a metadata header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analytics::{
    afm_error_curve, empirical_curves, evaluate_afm, fit_points, fit_power_law, aggregate_curves,
    CurvePoint, LearningCurve, PowerLawFit,
};
use crate::artifact::{read_checked, write_artifact, ArtifactMeta};
use crate::config::{EmbeddingMode, ProviderKind, RunConfig, TextEmbedderKind};
use crate::embedding::{EmbeddingStore, HashingEmbedder, HttpEmbeddingBackend, TextEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::{
    agreement, compare_methods, labels_as_judgments, parse_annotations, sample_for_human_eval, summarize_fits,
    worksheet_to_csv, AgreementReport, ComparisonTable, MethodSummary,
};
use crate::gateway::{Gateway, GatewayConfig, HttpProvider, MockProvider, Provider, ResponseCache};
use crate::ingest::{
    code_kc_map_to_csv, kc_set_from_components, kcs_to_json, load_dataset, parse_code_kc_map_csv, parse_kcs_json,
    parse_qmatrix_csv, qmatrix_to_csv, validate_dataset, DatasetBundle, CODE_KC_MAP_FILE, KCS_FILE, QMATRIX_FILE,
};
use crate::kc_pipeline::{
    candidates_to_json, exemplars_from_json, exemplars_to_json, generate_kc_set, map_students, profiles_to_json,
    GenerationConfig, KcGenerator,
};
use crate::labeling::{default_fewshots, label_all, labels_from_csv, labels_to_csv, load_fewshots, KcLabel, LabelContext, LabelMethod, LabelTarget};
use crate::model::{build_attempt_pairs, opportunity_counts, AttemptPair, KcAssignment, KcSet, KcSetKind, OpportunityTable};
use crate::plot::{emit_plot, AfmCurves, PlotKind};
use crate::prompts::PromptTemplates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    GenKcs,
    Map,
    Label,
    Curves,
    Afm,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::GenKcs,
        Stage::Map,
        Stage::Label,
        Stage::Curves,
        Stage::Afm,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::GenKcs => "gen-kcs",
            Stage::Map => "map",
            Stage::Label => "label",
            Stage::Curves => "curves",
            Stage::Afm => "afm",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s || st.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Where every artifact lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn validation(&self) -> PathBuf {
        self.root.join("ingest/validation.json")
    }
    pub fn attempt_pairs(&self) -> PathBuf {
        self.root.join("ingest/attempt_pairs.csv")
    }
    pub fn generated_dir(&self) -> PathBuf {
        self.root.join("kcs/generated")
    }
    pub fn selected_dir(&self) -> PathBuf {
        self.root.join("kcs/selected")
    }
    pub fn run_dir(&self, kc_set: KcSetKind, method: LabelMethod) -> PathBuf {
        self.root.join(kc_set.as_str()).join(method.as_str())
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    /// Append-only JSON lines with timings and gateway statistics; not an
    /// artifact, so reruns may change it.
    pub fn run_log(&self) -> PathBuf {
        self.root.join("run_log.jsonl")
    }
}

/// Outcome of one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Labels assigned to a KC set plus the mapping from pairs to KCs.
pub struct KcSource {
    pub kc_set: KcSet,
    pub assignment: Box<dyn KcAssignment + Sync + Send>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub config_hash: String,
    pub method: LabelMethod,
    pub kc_set: KcSetKind,
    pub layout: Layout,
    provider: Option<Arc<dyn Provider>>,
    gateway: OnceLock<Arc<Gateway>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let config_hash = config.config_hash();
        Pipeline {
            method: config.labeling.method,
            kc_set: config.labeling.kc_set,
            layout: Layout { root: config.output.dir.clone() },
            config,
            config_hash,
            provider: None,
            gateway: OnceLock::new(),
        }
    }

    /// Uses `provider` instead of the configured one.
    pub fn with_provider(mut self, provider: Arc<dyn Provider>) -> Self {
        self.provider = Some(provider);
        self
    }

    fn meta(&self, stage: Stage) -> ArtifactMeta {
        ArtifactMeta::new(&self.config_hash, stage.as_str())
    }

    fn write(&self, stage: Stage, path: PathBuf, body: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
        write_artifact(&path, &self.meta(stage), body)?;
        outputs.push(path);
        Ok(())
    }

    fn read(&self, path: &Path, producer: Stage) -> Result<String> {
        read_checked(path, &self.config_hash, producer.as_str())
    }

    pub fn gateway(&self) -> Result<Arc<Gateway>> {
        if let Some(g) = self.gateway.get() {
            return Ok(g.clone());
        }
        let gw = &self.config.gateway;
        let provider: Arc<dyn Provider> = match (&self.provider, gw.provider) {
            (Some(p), _) => p.clone(),
            (None, ProviderKind::Http) => Arc::new(HttpProvider::from_env(&gw.endpoint, Duration::from_secs(gw.timeout_secs))),
            (None, ProviderKind::Mock) => {
                let path = gw.mock_fixture.as_ref().ok_or_else(|| Error::Config("mock provider without fixture".into()))?;
                Arc::new(MockProvider::from_fixture(path)?)
            }
        };
        let cache = ResponseCache::new(self.config.cache.dir.clone())?;
        let gateway = Arc::new(Gateway::new(
            provider,
            Some(cache),
            GatewayConfig {
                retries: gw.retries,
                concurrency: gw.concurrency,
                ..GatewayConfig::default()
            },
        ));
        Ok(self.gateway.get_or_init(|| gateway).clone())
    }

    fn templates(&self) -> Result<PromptTemplates> {
        match &self.config.labeling.prompts_dir {
            Some(dir) => PromptTemplates::load_dir(dir),
            None => Ok(PromptTemplates::default()),
        }
    }

    fn embedding_store(&self) -> Result<EmbeddingStore> {
        let e = &self.config.embeddings;
        match e.mode {
            EmbeddingMode::File => {
                let path = e.path.as_ref().ok_or_else(|| {
                    Error::Config("embeddings.path is required for stages that use code embeddings".into())
                })?;
                EmbeddingStore::load_jsonl(path)
            }
            EmbeddingMode::Remote => {
                let (Some(path), Some(url)) = (&e.path, &e.url) else {
                    return Err(Error::Config("remote embeddings need url and path".into()));
                };
                let backend = HttpEmbeddingBackend::new(
                    url,
                    self.config.gateway.retries,
                    Duration::from_secs(self.config.gateway.timeout_secs),
                );
                EmbeddingStore::remote(path, Box::new(backend))
            }
        }
    }

    /// Dataset plus attempt pairs, after confirming that ingest ran under
    /// this configuration.
    fn inputs(&self) -> Result<(DatasetBundle, Vec<AttemptPair>)> {
        self.read(&self.layout.validation(), Stage::Ingest)?;
        let mut bundle = load_dataset(&self.config.dataset.root)?;
        bundle.refresh_correct_solutions(self.config.analytics.correct_threshold);
        let pairs = build_attempt_pairs(&bundle.submissions)?;
        Ok((bundle, pairs))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let started = Instant::now();
        tracing::info!(
            stage = %stage,
            version = env!("CARGO_PKG_VERSION"),
            config_hash = %self.config_hash,
            method = %self.method,
            kc_set = %self.kc_set,
            seeds = ?self.config.seeds,
            "stage started"
        );
        let result = match stage {
            Stage::Ingest => self.ingest(),
            Stage::GenKcs => self.gen_kcs(),
            Stage::Map => self.map(),
            Stage::Label => self.label(),
            Stage::Curves => self.curves(),
            Stage::Afm => self.afm(),
            Stage::Report => self.report(),
        };
        let secs = started.elapsed().as_secs_f64();
        let status = match &result {
            Ok(outcome) => {
                tracing::info!(stage = %stage, seconds = secs, summary = %outcome.summary, "stage completed");
                json!({"status": "ok", "summary": outcome.summary})
            }
            Err(e) => {
                tracing::error!(stage = %stage, error = %e, "stage failed");
                json!({"status": "failed", "error": e.to_string()})
            }
        };
        let mut line = json!({
            "stage": stage.as_str(),
            "config_hash": self.config_hash,
            "method": self.method.as_str(),
            "kc_set": self.kc_set.as_str(),
            "version": env!("CARGO_PKG_VERSION"),
            "seconds": secs,
        });
        line.as_object_mut().expect("object").extend(status.as_object().expect("object").clone());
        if let Some(g) = self.gateway.get() {
            line["gateway"] = serde_json::to_value(g.stats()).expect("serializable");
        }
        self.append_log(&line)?;
        result
    }

    fn append_log(&self, line: &serde_json::Value) -> Result<()> {
        let path = self.layout.run_log();
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn ingest(&self) -> Result<StageOutcome> {
        let mut bundle = load_dataset(&self.config.dataset.root)?;
        bundle.refresh_correct_solutions(self.config.analytics.correct_threshold);
        let report = validate_dataset(&bundle);
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        let pairs = build_attempt_pairs(&bundle.submissions)?;
        let mut outputs = Vec::new();
        self.write(Stage::Ingest, self.layout.validation(), &to_json(&report), &mut outputs)?;
        self.write(Stage::Ingest, self.layout.attempt_pairs(), &pairs_to_csv(&pairs), &mut outputs)?;
        Ok(StageOutcome {
            stage: Stage::Ingest.to_string(),
            outputs,
            summary: json!({
                "students": report.student_count,
                "problems": report.problem_count,
                "submissions": report.submission_count,
                "attempt_pairs": pairs.len(),
                "warnings": report.warnings.len(),
            }),
        })
    }

    fn generator<'a>(&self, gateway: &'a Gateway) -> Result<KcGenerator<'a>> {
        Ok(KcGenerator {
            gateway,
            model: self.config.gateway.model.clone(),
            templates: self.templates()?,
        })
    }

    fn gen_kcs(&self) -> Result<StageOutcome> {
        let (bundle, _) = self.inputs()?;
        let store = self.embedding_store()?;
        let gateway = self.gateway()?;
        let generator = self.generator(&gateway)?;
        let hashing = HashingEmbedder::default();
        let embedder: &dyn TextEmbedder = match self.config.generation.text_embedder {
            TextEmbedderKind::Hashing => &hashing,
            TextEmbedderKind::Store => &store,
        };
        let g = &self.config.generation;
        let generated = generate_kc_set(
            &generator,
            &bundle,
            &store,
            embedder,
            &GenerationConfig {
                exemplars_per_problem: g.exemplars_per_problem,
                target_kcs: g.target_kcs,
                seed: self.config.seeds.clustering,
                correct_threshold: self.config.analytics.correct_threshold,
                workers: self.config.gateway.concurrency,
            },
        )?;
        let dir = self.layout.generated_dir();
        let mut outputs = Vec::new();
        self.write(Stage::GenKcs, dir.join(KCS_FILE), &kcs_to_json(&generated.kc_set.components), &mut outputs)?;
        self.write(Stage::GenKcs, dir.join(QMATRIX_FILE), &qmatrix_to_csv(&generated.qmatrix), &mut outputs)?;
        self.write(Stage::GenKcs, dir.join("exemplars.json"), &exemplars_to_json(&generated.exemplars), &mut outputs)?;
        self.write(Stage::GenKcs, dir.join("candidates.json"), &candidates_to_json(&generated.candidates), &mut outputs)?;
        Ok(StageOutcome {
            stage: Stage::GenKcs.to_string(),
            outputs,
            summary: json!({
                "kcs": generated.kc_set.components.len(),
                "candidates": generated.candidates.len(),
                "exemplars": generated.exemplars.iter().map(|e| e.exemplars.len()).sum::<usize>(),
                "warnings": generated.warnings,
            }),
        })
    }

    fn generated_kcs(&self) -> Result<(KcSet, crate::model::QMatrix)> {
        let dir = self.layout.generated_dir();
        let kcs = parse_kcs_json(&self.read(&dir.join(KCS_FILE), Stage::GenKcs)?)?;
        let q_path = dir.join(QMATRIX_FILE);
        let q = parse_qmatrix_csv(&q_path, &self.read(&q_path, Stage::GenKcs)?)?;
        Ok((kc_set_from_components("generated", kcs)?, q))
    }

    fn map(&self) -> Result<StageOutcome> {
        let (bundle, pairs) = self.inputs()?;
        let (kc_set, qmatrix) = self.generated_kcs()?;
        let store = self.embedding_store()?;
        let exemplars = exemplars_from_json(
            &self.read(&self.layout.generated_dir().join("exemplars.json"), Stage::GenKcs)?,
            &store,
        )?;
        let gateway = self.gateway()?;
        let generator = self.generator(&gateway)?;
        let mapping = map_students(
            &generator,
            &bundle,
            &kc_set,
            &qmatrix,
            &exemplars,
            &pairs,
            &store,
            self.config.gateway.concurrency,
        )?;
        let dir = self.layout.selected_dir();
        let mut outputs = Vec::new();
        self.write(Stage::Map, dir.join("profiles.json"), &profiles_to_json(&mapping.profiles), &mut outputs)?;
        self.write(Stage::Map, dir.join(CODE_KC_MAP_FILE), &code_kc_map_to_csv(&mapping.code_kc_map), &mut outputs)?;
        let mut failures = String::from("student_id,problem_id,error\n");
        for (s, p, e) in &mapping.failures {
            failures.push_str(&csv_line(&[s, p, e]));
        }
        self.write(Stage::Map, dir.join("map_failures.csv"), &failures, &mut outputs)?;
        Ok(StageOutcome {
            stage: Stage::Map.to_string(),
            outputs,
            summary: json!({
                "profiles": mapping.profiles.len(),
                "mapped_pairs": mapping.code_kc_map.entries.len(),
                "failures": mapping.failures.len(),
            }),
        })
    }

    /// The KC set and assignment selected by `--kc-set`.
    pub fn kc_source(&self, bundle: &DatasetBundle) -> Result<KcSource> {
        let dataset_set = |kind: KcSetKind| bundle.kc_sets.iter().position(|s| s.kind == kind);
        let relabel = |set: &KcSet, kind: KcSetKind| KcSet { kind, ..set.clone() };
        match self.kc_set {
            KcSetKind::Human => {
                let missing = || Error::MissingPrerequisite {
                    path: self.config.dataset.root.join(KCS_FILE),
                    stage: "ingest (a human kcs.json and qmatrix.csv in the dataset)".into(),
                };
                let i = dataset_set(KcSetKind::Human).ok_or_else(missing)?;
                let q = bundle.q_matrices.get(i).ok_or_else(missing)?;
                Ok(KcSource {
                    kc_set: bundle.kc_sets[i].clone(),
                    assignment: Box::new(q.clone()),
                })
            }
            KcSetKind::Generated => {
                if self.layout.generated_dir().join(KCS_FILE).exists() {
                    let (set, q) = self.generated_kcs()?;
                    return Ok(KcSource { kc_set: set, assignment: Box::new(q) });
                }
                match dataset_set(KcSetKind::Generated).and_then(|i| Some((i, bundle.q_matrices.get(i)?))) {
                    Some((i, q)) => Ok(KcSource {
                        kc_set: bundle.kc_sets[i].clone(),
                        assignment: Box::new(q.clone()),
                    }),
                    None => Err(Error::MissingPrerequisite {
                        path: self.layout.generated_dir().join(KCS_FILE),
                        stage: Stage::GenKcs.to_string(),
                    }),
                }
            }
            KcSetKind::Selected => {
                let map_path = self.layout.selected_dir().join(CODE_KC_MAP_FILE);
                if map_path.exists() {
                    let map = parse_code_kc_map_csv(&map_path, &self.read(&map_path, Stage::Map)?)?;
                    let (set, _) = self.generated_kcs()?;
                    return Ok(KcSource {
                        kc_set: relabel(&set, KcSetKind::Selected),
                        assignment: Box::new(map),
                    });
                }
                match (&bundle.code_kc_map, bundle.kc_sets.first()) {
                    (Some(map), Some(set)) => Ok(KcSource {
                        kc_set: relabel(set, KcSetKind::Selected),
                        assignment: Box::new(map.clone()),
                    }),
                    _ => Err(Error::MissingPrerequisite {
                        path: map_path,
                        stage: Stage::Map.to_string(),
                    }),
                }
            }
        }
    }

    fn run_dir(&self) -> PathBuf {
        self.layout.run_dir(self.kc_set, self.method)
    }

    fn label(&self) -> Result<StageOutcome> {
        let (bundle, pairs) = self.inputs()?;
        let source = self.kc_source(&bundle)?;
        let target = LabelTarget {
            kc_set: &source.kc_set,
            assignment: source.assignment.as_ref(),
        };
        let threshold = self.config.analytics.correct_threshold;
        let run = if self.method == LabelMethod::Baseline {
            label_all(None, &bundle.problems, &pairs, &target, self.method, threshold, 1)?
        } else {
            let gateway = self.gateway()?;
            let fewshots = match &self.config.labeling.fewshots_dir {
                Some(dir) => load_fewshots(dir)?,
                None => default_fewshots(),
            };
            let ctx = LabelContext {
                gateway: &gateway,
                model: self.config.gateway.model.clone(),
                templates: self.templates()?,
                fewshots,
            };
            label_all(
                Some(&ctx),
                &bundle.problems,
                &pairs,
                &target,
                self.method,
                threshold,
                self.config.labeling.workers,
            )?
        };
        if run.labels.is_empty() && !pairs.is_empty() {
            return Err(Error::Validation(format!(
                "no submission could be labeled ({} failures; first: {})",
                run.report.failures.len(),
                run.report.failures.first().map(|f| f.error.as_str()).unwrap_or("none")
            )));
        }
        let dir = self.run_dir();
        let mut outputs = Vec::new();
        self.write(Stage::Label, dir.join("labels.csv"), &labels_to_csv(&run.labels), &mut outputs)?;
        let mut failures = String::from("student_id,problem_id,submission_id,error\n");
        for f in &run.report.failures {
            failures.push_str(&csv_line(&[&f.student_id, &f.problem_id, &f.submission_id, &f.error]));
        }
        self.write(Stage::Label, dir.join("label_failures.csv"), &failures, &mut outputs)?;
        self.append_log(&json!({"stage": "label", "report": run.report}))?;
        Ok(StageOutcome {
            stage: Stage::Label.to_string(),
            outputs,
            summary: json!({
                "submissions": run.report.submissions_total,
                "labeled": run.report.submissions_labeled,
                "labels": run.report.label_count,
                "failures": run.report.failures.len(),
                "cache_hit_ratio": run.report.cache_hit_ratio,
            }),
        })
    }

    /// Labels of the current (method, KC set) and their opportunity counts.
    fn labels_and_opportunities(&self) -> Result<(DatasetBundle, Vec<KcLabel>, OpportunityTable)> {
        let (bundle, pairs) = self.inputs()?;
        let labels = labels_from_csv(&self.read(&self.run_dir().join("labels.csv"), Stage::Label)?)?;
        let source = self.kc_source(&bundle)?;
        let mapped: Vec<AttemptPair> = pairs
            .into_iter()
            .filter(|p| source.assignment.kcs_for(&p.student_id, &p.problem_id).is_some())
            .collect();
        let opportunities = opportunity_counts(&mapped, source.assignment.as_ref())?;
        Ok((bundle, labels, opportunities))
    }

    fn curves(&self) -> Result<StageOutcome> {
        let (_, labels, opportunities) = self.labels_and_opportunities()?;
        let curves = empirical_curves(&labels, &opportunities, self.config.analytics.min_support)?;
        let mut fits = BTreeMap::new();
        for c in curves.iter().filter(|c| c.points.len() >= 2) {
            fits.insert(c.kc_id.clone(), fit_power_law(c)?);
        }
        let aggregate = aggregate_curves(&curves, &fits);
        let pooled_points: Vec<(f64, f64)> =
            aggregate.iter().map(|p| (f64::from(p.opportunity), p.error_rate)).collect();
        let pooled = fit_points(&pooled_points).ok();
        let n = fits.len();
        let per_kc_mean = (n > 0).then(|| {
            json!({
                "rmse": fits.values().map(|f: &PowerLawFit| f.rmse).sum::<f64>() / n as f64,
                "r2": fits.values().map(|f: &PowerLawFit| f.r2).sum::<f64>() / n as f64,
                "n_kcs": n,
            })
        });

        let dir = self.run_dir();
        let mut outputs = Vec::new();
        self.write(Stage::Curves, dir.join("curves.csv"), &curves_to_csv(&curves, &fits), &mut outputs)?;
        self.write(Stage::Curves, dir.join("fits.csv"), &fits_to_csv(&fits), &mut outputs)?;
        let mut agg = String::from("opportunity,error_rate,n_kcs,fitted_error\n");
        for p in &aggregate {
            agg.push_str(&format!(
                "{},{},{},{}\n",
                p.opportunity,
                p.error_rate,
                p.n_kcs,
                p.fitted_error.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        self.write(Stage::Curves, dir.join("aggregate.csv"), &agg, &mut outputs)?;
        self.write(
            Stage::Curves,
            dir.join("aggregate_fit.json"),
            &to_json(&json!({"per_kc_mean": per_kc_mean, "pooled": pooled})),
            &mut outputs,
        )?;
        Ok(StageOutcome {
            stage: Stage::Curves.to_string(),
            outputs,
            summary: json!({
                "curves": curves.len(),
                "fitted_kcs": n,
                "per_kc_mean": per_kc_mean,
            }),
        })
    }

    fn afm(&self) -> Result<StageOutcome> {
        let (_, labels, opportunities) = self.labels_and_opportunities()?;
        let a = &self.config.analytics;
        let eval = evaluate_afm(&labels, &opportunities, a.lambda, a.max_iter, a.test_fraction, self.config.seeds.split)?;
        if !eval.fit.converged {
            tracing::warn!(iterations = eval.fit.iterations, gradient = eval.fit.gradient_norm, "AFM stopped at max_iter");
        }
        let test: BTreeSet<&str> = eval.test_students.iter().map(String::as_str).collect();
        let train: Vec<KcLabel> = labels.iter().filter(|l| !test.contains(l.student_id.as_str())).cloned().collect();
        let kcs: BTreeSet<&str> = train.iter().map(|l| l.kc_id.as_str()).collect();
        let mut afm_curve = String::from("kc_id,opportunity,predicted_error\n");
        for kc in kcs {
            for (n, e) in afm_error_curve(&eval.fit.params, &train, &opportunities, kc)? {
                afm_curve.push_str(&format!("{},{n},{e}\n", csv_field(kc)));
            }
        }

        let dir = self.run_dir();
        let mut outputs = Vec::new();
        let params = json!({
            "params": eval.fit.params,
            "iterations": eval.fit.iterations,
            "converged": eval.fit.converged,
            "gradient_norm": eval.fit.gradient_norm,
            "final_objective": eval.fit.objective_trace.last(),
        });
        self.write(Stage::Afm, dir.join("afm_params.json"), &to_json(&params), &mut outputs)?;
        let summary = json!({
            "auc": eval.auc,
            "n_test_observations": eval.n_test_observations,
            "split_seed": eval.split_seed,
            "n_train_observations": eval.n_train_observations,
            "test_students": eval.test_students,
            "note": eval.note,
        });
        self.write(Stage::Afm, dir.join("afm_eval.json"), &to_json(&summary), &mut outputs)?;
        self.write(Stage::Afm, dir.join("afm_curve.csv"), &afm_curve, &mut outputs)?;
        Ok(StageOutcome {
            stage: Stage::Afm.to_string(),
            outputs,
            summary,
        })
    }

    /// Curves, fits and AFM predictions of one run directory.
    pub fn load_plot_inputs(&self, dir: &Path) -> Result<(Vec<LearningCurve>, BTreeMap<String, PowerLawFit>, AfmCurves)> {
        let curves = curves_from_csv(&self.read(&dir.join("curves.csv"), Stage::Curves)?)?;
        let fits = fits_from_csv(&self.read(&dir.join("fits.csv"), Stage::Curves)?)?;
        let afm_path = dir.join("afm_curve.csv");
        let afm = if afm_path.exists() {
            afm_curves_from_csv(&self.read(&afm_path, Stage::Afm)?)?
        } else {
            AfmCurves::new()
        };
        Ok((curves, fits, afm))
    }

    /// Writes plots for the current run into `<run>/plots`.
    pub fn plot(&self, kind: PlotKind, max_opportunity: Option<u32>) -> Result<Vec<PathBuf>> {
        let dir = self.run_dir();
        let (curves, fits, afm) = self.load_plot_inputs(&dir)?;
        let meta = ArtifactMeta::new(&self.config_hash, "plot");
        let title = format!("{} / {}", self.method, self.kc_set);
        emit_plot(&curves, &fits, &afm, kind, max_opportunity, &dir.join("plots"), &meta, &title)
    }

    fn report(&self) -> Result<StageOutcome> {
        self.read(&self.layout.validation(), Stage::Ingest)?;
        let mut rows: Vec<MethodSummary> = Vec::new();
        let mut outputs = Vec::new();
        for kind in [KcSetKind::Human, KcSetKind::Generated, KcSetKind::Selected] {
            for method in [LabelMethod::Baseline, LabelMethod::LlmCot, LabelMethod::LlmDirect] {
                let dir = self.layout.run_dir(kind, method);
                if !dir.join("fits.csv").exists() {
                    continue;
                }
                let fits = fits_from_csv(&self.read(&dir.join("fits.csv"), Stage::Curves)?)?;
                let eval_path = dir.join("afm_eval.json");
                let auc = if eval_path.exists() {
                    let v: serde_json::Value = serde_json::from_str(&self.read(&eval_path, Stage::Afm)?)?;
                    v["auc"].as_f64()
                } else {
                    None
                };
                match summarize_fits(method.as_str(), kind.as_str(), &fits, auc) {
                    Ok(summary) => rows.push(summary),
                    Err(e) => tracing::warn!(method = %method, kc_set = %kind, error = %e, "run skipped in report"),
                }
                let (curves, fits, afm) = self.load_plot_inputs(&dir)?;
                if curves.iter().any(|c| !c.points.is_empty()) {
                    let meta = ArtifactMeta::new(&self.config_hash, Stage::Report.as_str());
                    outputs.extend(emit_plot(
                        &curves,
                        &fits,
                        &afm,
                        PlotKind::Aggregated,
                        None,
                        &dir.join("plots"),
                        &meta,
                        &format!("{method} / {kind}"),
                    )?);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::MissingPrerequisite {
                path: self.layout.run_dir(self.kc_set, self.method).join("fits.csv"),
                stage: Stage::Curves.to_string(),
            });
        }
        let n_rows = rows.len();
        let table = if rows.len() >= 2 {
            compare_methods(rows)?
        } else {
            ComparisonTable { rows }
        };
        let dir = self.layout.report_dir();
        self.write(
            Stage::Report,
            dir.join("comparison.md"),
            &table.to_markdown(self.config.report.include_reference),
            &mut outputs,
        )?;
        self.write(Stage::Report, dir.join("comparison.csv"), &table.to_csv(), &mut outputs)?;
        Ok(StageOutcome {
            stage: Stage::Report.to_string(),
            outputs,
            summary: json!({"runs": n_rows}),
        })
    }

    /// Human-evaluation worksheet for the current run.
    pub fn sample(&self, n: Option<usize>) -> Result<PathBuf> {
        let (bundle, pairs) = self.inputs()?;
        let dir = self.run_dir();
        let labels = labels_from_csv(&self.read(&dir.join("labels.csv"), Stage::Label)?)?;
        let source = self.kc_source(&bundle)?;
        let rows = sample_for_human_eval(
            &labels,
            &bundle.problems,
            &pairs,
            &source.kc_set,
            n.unwrap_or(self.config.report.sample_size),
            self.config.seeds.sample,
        )?;
        let path = dir.join("worksheet.csv");
        write_artifact(&path, &ArtifactMeta::new(&self.config_hash, "sample"), &worksheet_to_csv(&rows))?;
        Ok(path)
    }

    /// Kappa between an annotation file and either a second annotation file
    /// or the current run's labels.
    pub fn agreement(&self, annotations: &Path, other: Option<&Path>) -> Result<(AgreementReport, PathBuf)> {
        let a = parse_annotations(&read_text(annotations)?)?;
        let b = match other {
            Some(p) => parse_annotations(&read_text(p)?)?,
            None => labels_as_judgments(&labels_from_csv(
                &self.read(&self.run_dir().join("labels.csv"), Stage::Label)?,
            )?),
        };
        let report = agreement(&a, &b)?;
        let path = self.run_dir().join("agreement.json");
        write_artifact(&path, &ArtifactMeta::new(&self.config_hash, "agreement"), &to_json(&report))?;
        Ok((report, path))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[&str]) -> String {
    let mut line = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

pub fn pairs_to_csv(pairs: &[AttemptPair]) -> String {
    let mut out = String::from("student_id,problem_id,first_submission_id,last_submission_id,first_score,attempts\n");
    for p in pairs {
        out.push_str(&csv_line(&[
            &p.student_id,
            &p.problem_id,
            &p.first.submission_id,
            &p.last.submission_id,
            &p.first.score.to_string(),
            &p.last.attempt_index.to_string(),
        ]));
    }
    out
}

pub fn curves_to_csv(curves: &[LearningCurve], fits: &BTreeMap<String, PowerLawFit>) -> String {
    let mut out = String::from("kc_id,opportunity,error_rate,support,fitted_error\n");
    for c in curves {
        let fit = fits.get(&c.kc_id);
        for p in &c.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&c.kc_id),
                p.opportunity,
                p.error_rate,
                p.support,
                fit.map(|f| f.predict(f64::from(p.opportunity)).to_string()).unwrap_or_default()
            ));
        }
    }
    out
}

pub fn fits_to_csv(fits: &BTreeMap<String, PowerLawFit>) -> String {
    let mut out = String::from("kc_id,a,b,rmse,r2,n_points\n");
    for (kc, f) in fits {
        out.push_str(&format!("{},{},{},{},{},{}\n", csv_field(kc), f.a, f.b, f.rmse, f.r2, f.n_points));
    }
    out
}

#[derive(Deserialize)]
struct CurveRow {
    kc_id: String,
    opportunity: u32,
    error_rate: f64,
    support: usize,
}

#[derive(Deserialize)]
struct FitRow {
    kc_id: String,
    a: f64,
    b: f64,
    rmse: f64,
    r2: f64,
    n_points: usize,
}

#[derive(Deserialize)]
struct AfmCurveRow {
    kc_id: String,
    opportunity: u32,
    predicted_error: f64,
}

fn rows<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn curves_from_csv(text: &str) -> Result<Vec<LearningCurve>> {
    let mut by_kc: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for r in rows::<CurveRow>(text)? {
        by_kc.entry(r.kc_id).or_default().push(CurvePoint {
            opportunity: r.opportunity,
            error_rate: r.error_rate,
            support: r.support,
        });
    }
    Ok(by_kc
        .into_iter()
        .map(|(kc_id, points)| LearningCurve { kc_id, points })
        .collect())
}

pub fn fits_from_csv(text: &str) -> Result<BTreeMap<String, PowerLawFit>> {
    Ok(rows::<FitRow>(text)?
        .into_iter()
        .map(|r| {
            (
                r.kc_id,
                PowerLawFit {
                    a: r.a,
                    b: r.b,
                    rmse: r.rmse,
                    r2: r.r2,
                    n_points: r.n_points,
                },
            )
        })
        .collect())
}

pub fn afm_curves_from_csv(text: &str) -> Result<AfmCurves> {
    let mut out = AfmCurves::new();
    for r in rows::<AfmCurveRow>(text)? {
        out.entry(r.kc_id).or_default().push((r.opportunity, r.predicted_error));
    }
    Ok(out)
}

/// Runs `stages` in order, stopping at the first failure. Returns each
/// stage's result; stages after a failure are absent.
pub fn run_pipeline(pipeline: &Pipeline, stages: &[Stage]) -> Vec<(Stage, Result<StageOutcome>)> {
    let mut results = Vec::new();
    for &stage in stages {
        let r = pipeline.run_stage(stage);
        let failed = r.is_err();
        results.push((stage, r));
        if failed {
            break;
        }
    }
    results
}
