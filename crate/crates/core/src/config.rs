//! `run.toml`: dataset and output locations, gateway and embedding access,
//! seeds and analysis knobs. Relative paths resolve against the config
//! file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_MIN_SUPPORT, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::gateway::{DEFAULT_CONCURRENCY, DEFAULT_RETRIES};
use crate::kc_pipeline::{DEFAULT_EXEMPLARS_PER_PROBLEM, DEFAULT_TARGET_KCS};
use crate::labeling::LabelMethod;
use crate::model::{KcSetKind, DEFAULT_CORRECT_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub embeddings: EmbeddingSection,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub labeling: LabelingSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub analytics: AnalyticsSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheSection {
    pub dir: PathBuf,
}

impl Default for CacheSection {
    fn default() -> Self {
        CacheSection { dir: ".kclab-cache".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySection {
    pub provider: ProviderKind,
    /// OpenAI-compatible base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub concurrency: usize,
    pub retries: u32,
    pub timeout_secs: u64,
    /// Digest-to-response JSON map for `provider = "mock"`.
    pub mock_fixture: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            provider: ProviderKind::Http,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            concurrency: DEFAULT_CONCURRENCY,
            retries: DEFAULT_RETRIES,
            timeout_secs: 120,
            mock_fixture: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    File,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEmbedderKind {
    /// Deterministic local feature hashing.
    Hashing,
    /// The configured embedding store (remote mode).
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub mode: EmbeddingMode,
    /// JSONL of `{id, vector}`; in remote mode, the fill-in cache file.
    pub path: Option<PathBuf>,
    pub url: Option<String>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection { mode: EmbeddingMode::File, path: None, url: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub split: u64,
    pub clustering: u64,
    pub sample: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { split: 42, clustering: 7, sample: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingSection {
    pub method: LabelMethod,
    pub kc_set: KcSetKind,
    pub workers: usize,
    pub prompts_dir: Option<PathBuf>,
    pub fewshots_dir: Option<PathBuf>,
}

impl Default for LabelingSection {
    fn default() -> Self {
        LabelingSection {
            method: LabelMethod::LlmCot,
            kc_set: KcSetKind::Human,
            workers: DEFAULT_CONCURRENCY,
            prompts_dir: None,
            fewshots_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub exemplars_per_problem: usize,
    pub target_kcs: usize,
    pub text_embedder: TextEmbedderKind,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            exemplars_per_problem: DEFAULT_EXEMPLARS_PER_PROBLEM,
            target_kcs: DEFAULT_TARGET_KCS,
            text_embedder: TextEmbedderKind::Hashing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsSection {
    pub lambda: f64,
    pub min_support: usize,
    pub test_fraction: f64,
    pub correct_threshold: f64,
    pub max_iter: usize,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        AnalyticsSection {
            lambda: DEFAULT_LAMBDA,
            min_support: DEFAULT_MIN_SUPPORT,
            test_fraction: DEFAULT_TEST_FRACTION,
            correct_threshold: DEFAULT_CORRECT_THRESHOLD,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub sample_size: usize,
    /// Append the published reference rows to comparison.md.
    pub include_reference: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { sample_size: 80, include_reference: true }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.dataset.root = resolve(base, &self.dataset.root);
        self.output.dir = resolve(base, &self.output.dir);
        self.cache.dir = resolve(base, &self.cache.dir);
        for p in [
            &mut self.gateway.mock_fixture,
            &mut self.embeddings.path,
            &mut self.labeling.prompts_dir,
            &mut self.labeling.fewshots_dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let must_exist = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        must_exist("dataset root", &self.dataset.root)?;
        if let Some(p) = &self.gateway.mock_fixture {
            must_exist("mock fixture", p)?;
        }
        if self.gateway.provider == ProviderKind::Mock && self.gateway.mock_fixture.is_none() {
            return Err(Error::Config("provider = \"mock\" needs gateway.mock_fixture".into()));
        }
        if let Some(p) = &self.labeling.prompts_dir {
            must_exist("prompts directory", p)?;
        }
        if let Some(p) = &self.labeling.fewshots_dir {
            must_exist("few-shot directory", p)?;
        }
        match self.embeddings.mode {
            EmbeddingMode::File => {
                if let Some(p) = &self.embeddings.path {
                    must_exist("embeddings file", p)?;
                }
            }
            EmbeddingMode::Remote => {
                if self.embeddings.url.is_none() || self.embeddings.path.is_none() {
                    return Err(Error::Config("remote embeddings need both url and path".into()));
                }
            }
        }
        if self.generation.text_embedder == TextEmbedderKind::Store && self.embeddings.mode != EmbeddingMode::Remote {
            return Err(Error::Config("text_embedder = \"store\" requires remote embeddings".into()));
        }
        let a = &self.analytics;
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return Err(Error::Config(format!("analytics.lambda must be >= 0, got {}", a.lambda)));
        }
        if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
            return Err(Error::Config(format!("analytics.test_fraction must be in (0, 1), got {}", a.test_fraction)));
        }
        if !(0.0..=1.0).contains(&a.correct_threshold) {
            return Err(Error::Config(format!("analytics.correct_threshold must be in [0, 1], got {}", a.correct_threshold)));
        }
        if self.gateway.concurrency == 0 || self.labeling.workers == 0 {
            return Err(Error::Config("concurrency and workers must be positive".into()));
        }
        if self.generation.exemplars_per_problem == 0 || self.generation.target_kcs == 0 {
            return Err(Error::Config("exemplars_per_problem and target_kcs must be positive".into()));
        }
        Ok(())
    }

    /// Sets every seed to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = SeedSection { split: seed, clustering: seed, sample: seed };
    }

    /// SHA-256 over the settings that shape artifact contents. Method and
    /// KC set are excluded because they select the output directory;
    /// locations and throughput settings are excluded as well.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        for section in ["output", "cache"] {
            obj.remove(section);
        }
        if let Some(d) = obj.get_mut("dataset").and_then(|d| d.as_object_mut()) {
            d.remove("root");
        }
        if let Some(g) = obj.get_mut("gateway").and_then(|g| g.as_object_mut()) {
            for k in ["concurrency", "retries", "timeout_secs", "mock_fixture", "endpoint"] {
                g.remove(k);
            }
        }
        if let Some(e) = obj.get_mut("embeddings").and_then(|e| e.as_object_mut()) {
            e.remove("path");
            e.remove("url");
        }
        if let Some(l) = obj.get_mut("labeling").and_then(|l| l.as_object_mut()) {
            for k in ["method", "kc_set", "workers", "prompts_dir", "fewshots_dir"] {
                l.remove(k);
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}
