//! Code embeddings: a JSONL-backed store with optional remote fill-in,
//! cosine geometry, k-means and nearest-neighbour search.

mod geometry;
mod kmeans;
mod text;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifact::strip_header;
use crate::error::{Error, Result};

pub use geometry::{cosine_distance, dot, nearest, norm, squared_euclidean};
pub use kmeans::{kmeans, kmeans_with_max_iter, ClusterResult, DEFAULT_MAX_ITER};
pub use text::{HashingEmbedder, TextEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    /// Rejects non-finite components and zero vectors.
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Geometry(format!("embedding `{id}` is empty or non-finite")));
        }
        if norm(&vector) == 0.0 {
            return Err(Error::Geometry(format!("embedding `{id}` has zero norm")));
        }
        Ok(Embedding { id, vector })
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }
}

/// Remote embedding service.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// `POST <url>` with `{"input": text}`, expecting `{"vector": [...]}`.
pub struct HttpEmbeddingBackend {
    url: String,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpEmbeddingBackend {
    pub fn new(url: &str, retries: u32, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpEmbeddingBackend { url: url.to_string(), retries, agent }
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        #[derive(Deserialize)]
        struct Reply {
            vector: Vec<f64>,
        }
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt.min(8)));
            }
            match self
                .agent
                .post(&self.url)
                .send_json(serde_json::json!({ "input": text }))
            {
                Ok(mut resp) => {
                    let reply: Reply = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| Error::Geometry(format!("embedding service payload: {e}")))?;
                    return Ok(reply.vector);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Geometry(format!(
            "embedding service failed after {} attempt(s): {last}",
            self.retries + 1
        )))
    }
}

/// Embedding lookup keyed by code id, backed by `embeddings.jsonl`.
///
/// In remote mode, misses are fetched from the backend and appended to the
/// same JSONL file.
pub struct EmbeddingStore {
    path: Option<PathBuf>,
    vectors: RwLock<HashMap<String, Vec<f64>>>,
    dimension: RwLock<Option<usize>>,
    backend: Option<Box<dyn EmbeddingBackend>>,
    remote_calls: AtomicUsize,
    append: Mutex<()>,
}

impl std::fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("path", &self.path)
            .field("len", &self.len())
            .field("remote", &self.backend.is_some())
            .finish()
    }
}

impl EmbeddingStore {
    pub fn in_memory(embeddings: Vec<Embedding>) -> Result<Self> {
        let store = Self::empty(None, None);
        for e in embeddings {
            store.insert_checked(e)?;
        }
        Ok(store)
    }

    /// File mode: every vector comes from the JSONL fixture.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let store = Self::empty(Some(path.to_path_buf()), None);
        store.read_file(path)?;
        Ok(store)
    }

    /// Remote mode: `cache_path` is read if present and extended on misses.
    pub fn remote(cache_path: &Path, backend: Box<dyn EmbeddingBackend>) -> Result<Self> {
        let store = Self::empty(Some(cache_path.to_path_buf()), Some(backend));
        if cache_path.is_file() {
            store.read_file(cache_path)?;
        }
        Ok(store)
    }

    fn empty(path: Option<PathBuf>, backend: Option<Box<dyn EmbeddingBackend>>) -> Self {
        EmbeddingStore {
            path,
            vectors: RwLock::new(HashMap::new()),
            dimension: RwLock::new(None),
            backend,
            remote_calls: AtomicUsize::new(0),
            append: Mutex::new(()),
        }
    }

    fn read_file(&self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let offset = text.lines().count() - strip_header(&text).lines().count();
        for (i, line) in strip_header(&text).lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::MalformedRow {
                path: path.to_path_buf(),
                line: (offset + i + 1) as u64,
                message,
            };
            let e: Embedding = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let e = Embedding::new(e.id, e.vector).map_err(|e| malformed(e.to_string()))?;
            self.insert_checked(e).map_err(|e| malformed(e.to_string()))?;
        }
        Ok(())
    }

    fn insert_checked(&self, e: Embedding) -> Result<()> {
        let mut dim = self.dimension.write().unwrap();
        match *dim {
            Some(d) if d != e.dimension() => {
                return Err(Error::Geometry(format!(
                    "embedding `{}` has dimension {}, store uses {d}",
                    e.id,
                    e.dimension()
                )))
            }
            _ => *dim = Some(e.dimension()),
        }
        self.vectors.write().unwrap().insert(e.id, e.vector);
        Ok(())
    }

    pub fn dimension(&self) -> Option<usize> {
        *self.dimension.read().unwrap()
    }

    pub fn len(&self) -> usize {
        self.vectors.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remote_calls(&self) -> usize {
        self.remote_calls.load(Ordering::SeqCst)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.read().unwrap().contains_key(id)
    }

    pub fn get_embedding(&self, code_id: &str) -> Result<Embedding> {
        self.vectors
            .read()
            .unwrap()
            .get(code_id)
            .map(|v| Embedding { id: code_id.to_string(), vector: v.clone() })
            .ok_or_else(|| Error::MissingEmbedding(code_id.to_string()))
    }

    /// Looks up `code_id`, fetching `text` from the remote backend on a miss.
    pub fn get_or_embed(&self, code_id: &str, text: &str) -> Result<Embedding> {
        if let Ok(e) = self.get_embedding(code_id) {
            return Ok(e);
        }
        let Some(backend) = &self.backend else {
            return Err(Error::MissingEmbedding(code_id.to_string()));
        };
        let _guard = self.append.lock().unwrap();
        if let Ok(e) = self.get_embedding(code_id) {
            return Ok(e);
        }
        self.remote_calls.fetch_add(1, Ordering::SeqCst);
        let e = Embedding::new(code_id, backend.embed(text)?)?;
        self.insert_checked(e.clone())?;
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|err| Error::io(path, err))?;
            let line = serde_json::to_string(&e)?;
            writeln!(file, "{line}").map_err(|err| Error::io(path, err))?;
        }
        Ok(e)
    }
}

pub fn write_jsonl(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut out = String::new();
    for e in embeddings {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    crate::artifact::write_atomic(path, out.as_bytes())
}
