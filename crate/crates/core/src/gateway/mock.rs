use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{cache_key, ChatRequest, Provider, ProviderError};
use crate::artifact::strip_header;
use crate::error::{Error, Result};

type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

/// Offline provider answering from a digest → response table, optionally
/// falling back to a responder function for unscripted requests.
pub struct MockProvider {
    responses: HashMap<String, String>,
    responder: Option<Responder>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(responses: HashMap<String, String>) -> Self {
        MockProvider { responses, responder: None, calls: AtomicUsize::new(0) }
    }

    /// Loads a JSON object mapping request digest to response text.
    pub fn from_fixture(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses: HashMap<String, String> = serde_json::from_str(strip_header(&text))?;
        Ok(Self::new(responses))
    }

    pub fn with_responder(
        mut self,
        responder: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        "mock"
    }

    fn send(&self, request: &ChatRequest) -> std::result::Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = cache_key(request);
        if let Some(text) = self.responses.get(&key) {
            return Ok(text.clone());
        }
        self.responder
            .as_ref()
            .and_then(|f| f(request))
            .ok_or_else(|| ProviderError::Fatal(format!("mock has no response for digest {key}")))
    }
}
