use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError};
use crate::artifact::write_atomic;

/// One cached completion: `<dir>/<digest>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: ChatRequest,
    pub provider_id: String,
    pub content: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        Ok(Some(entry))
    }

    /// Entries are written once via temp-file rename; the encoding is a pure
    /// function of its inputs, so racing writers produce identical bytes.
    pub fn put(
        &self,
        key: &str,
        request: &ChatRequest,
        provider_id: &str,
        content: &str,
    ) -> Result<(), GatewayError> {
        let path = self.path_for(key);
        if path.exists() {
            return Ok(());
        }
        let entry = CacheEntry {
            key: key.to_string(),
            request: request.clone(),
            provider_id: provider_id.to_string(),
            content: content.to_string(),
        };
        let mut bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache(e.to_string()))
    }
}
