//! Stage artifact files: a one-line metadata header naming the config hash
//! that produced the file, followed by the payload (CSV or JSON).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MARKER: &str = "kclab";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub stage: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: impl Into<String>, stage: impl Into<String>) -> Self {
        ArtifactMeta {
            config_hash: config_hash.into(),
            stage: stage.into(),
        }
    }

    fn fields(&self) -> String {
        format!(
            "{MARKER} config_hash={} stage={} version={}",
            self.config_hash,
            self.stage,
            env!("CARGO_PKG_VERSION")
        )
    }

    /// `# kclab config_hash=<hex> stage=<name> version=<semver>`
    pub fn header_line(&self) -> String {
        format!("# {}", self.fields())
    }

    /// Same metadata as an XML comment, for SVG output.
    pub fn xml_comment(&self) -> String {
        format!("<!-- {} -->", self.fields())
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line
            .trim()
            .strip_prefix('#')
            .or_else(|| {
                line.trim()
                    .strip_prefix("<!--")
                    .and_then(|s| s.strip_suffix("-->"))
            })?
            .trim();
        let mut words = rest.split_whitespace();
        if words.next()? != MARKER {
            return None;
        }
        let mut hash = None;
        let mut stage = None;
        for w in words {
            if let Some(v) = w.strip_prefix("config_hash=") {
                hash = Some(v.to_string());
            } else if let Some(v) = w.strip_prefix("stage=") {
                stage = Some(v.to_string());
            }
        }
        Some(ArtifactMeta {
            config_hash: hash?,
            stage: stage?,
        })
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_artifact(path: &Path, meta: &ArtifactMeta, body: &str) -> Result<()> {
    let mut text = meta.header_line();
    text.push('\n');
    text.push_str(body);
    write_atomic(path, text.as_bytes())
}

/// Drops leading `#` comment lines.
pub fn strip_header(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with('#') {
        rest = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => "",
        };
    }
    rest
}

pub fn read_artifact(path: &Path) -> Result<(Option<ArtifactMeta>, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta = text.lines().next().and_then(ArtifactMeta::parse);
    Ok((meta, strip_header(&text).to_string()))
}

/// Reads an upstream artifact, failing if it is absent or was produced under
/// a different configuration.
pub fn read_checked(path: &Path, config_hash: &str, producer: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            stage: producer.to_string(),
        });
    }
    let (meta, body) = read_artifact(path)?;
    let found = meta.map(|m| m.config_hash).unwrap_or_else(|| "<none>".into());
    if found != config_hash {
        return Err(Error::ConfigHashMismatch {
            path: path.to_path_buf(),
            found,
            expected: config_hash.to_string(),
        });
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let meta = ArtifactMeta::new("abc123", "curves");
        assert_eq!(ArtifactMeta::parse(&meta.header_line()), Some(meta.clone()));
        assert_eq!(ArtifactMeta::parse(&meta.xml_comment()), Some(meta));
        assert_eq!(ArtifactMeta::parse("# something else"), None);
    }

    #[test]
    fn checked_read_rejects_foreign_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_artifact(&path, &ArtifactMeta::new("h1", "label"), "a,b\n1,2\n").unwrap();
        assert_eq!(read_checked(&path, "h1", "label").unwrap(), "a,b\n1,2\n");
        assert!(matches!(
            read_checked(&path, "h2", "label"),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(matches!(
            read_checked(&dir.path().join("nope.csv"), "h1", "label"),
            Err(Error::MissingPrerequisite { .. })
        ));
    }
}
