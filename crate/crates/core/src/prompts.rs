//! Plain-text prompt templates with `{problem_statement}`, `{code}` and
//! `{kc_list}` placeholders, plus extraction of fenced JSON answers.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::KnowledgeComponent;

pub const PLACEHOLDERS: [&str; 3] = ["problem_statement", "code", "kc_list"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub label_system_cot: String,
    pub label_system_direct: String,
    pub label_user: String,
    pub generate_kcs: String,
    pub select_kcs: String,
    pub summarize_kcs: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            label_system_cot: include_str!("../prompts/label_system_cot.txt").to_string(),
            label_system_direct: include_str!("../prompts/label_system_direct.txt").to_string(),
            label_user: include_str!("../prompts/label_user.txt").to_string(),
            generate_kcs: include_str!("../prompts/generate_kcs.txt").to_string(),
            select_kcs: include_str!("../prompts/select_kcs.txt").to_string(),
            summarize_kcs: include_str!("../prompts/summarize_kcs.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates, overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("label_system_cot", &mut t.label_system_cot),
            ("label_system_direct", &mut t.label_system_direct),
            ("label_user", &mut t.label_user),
            ("generate_kcs", &mut t.generate_kcs),
            ("select_kcs", &mut t.select_kcs),
            ("summarize_kcs", &mut t.summarize_kcs),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                *slot = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }
}

/// Substitutes `{name}` placeholders in one pass, so values containing
/// braces are never re-expanded.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = values.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail[1 + name.len()..].starts_with('}')
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// One line per KC: `- [kc_id] name: description`.
pub fn format_kc_list(kcs: &[KnowledgeComponent]) -> String {
    kcs.iter()
        .map(|kc| format!("- [{}] {}: {}", kc.kc_id, kc.name, kc.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A JSON value found in a model response and the prose preceding it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedJson {
    pub value: Value,
    pub prose: String,
}

/// Finds the last fenced code block that parses as JSON; failing that, the
/// outermost JSON array or object ending at the last closing bracket.
pub fn extract_json(content: &str) -> Option<ExtractedJson> {
    let mut fenced = None;
    let mut search = 0;
    while let Some(start) = content[search..].find("```") {
        let open = search + start;
        let after = &content[open + 3..];
        let Some(nl) = after.find('\n') else {
            break;
        };
        let body_start = open + 3 + nl + 1;
        let Some(close) = content[body_start..].find("```") else {
            break;
        };
        let body = &content[body_start..body_start + close];
        if let Ok(v) = serde_json::from_str::<Value>(body.trim()) {
            fenced = Some(ExtractedJson {
                value: v,
                prose: content[..open].trim().to_string(),
            });
        }
        search = body_start + close + 3;
    }
    if fenced.is_some() {
        return fenced;
    }
    for (open_ch, close_ch) in [('[', ']'), ('{', '}')] {
        let Some(end) = content.rfind(close_ch) else {
            continue;
        };
        for (i, _) in content[..end].match_indices(open_ch) {
            if let Ok(v) = serde_json::from_str::<Value>(&content[i..=end]) {
                return Some(ExtractedJson {
                    value: v,
                    prose: content[..i].trim().to_string(),
                });
            }
        }
    }
    None
}
