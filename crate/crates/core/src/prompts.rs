//! Prompt dataset ingestion.
//!
//! Prompt files are user-supplied: plain text (one prompt per line) or CSV
//! with a named prompt column and an optional tag column. Pools are
//! deduplicated preserving first occurrence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PromptContext, PromptTag};
use crate::synthetic::TokenEmbedder;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("failed to read {path}: {message}")]
    Read { path: String, message: String },
    #[error("prompt file {path} is empty after deduplication")]
    Empty { path: String },
    #[error("csv file {path} has no column named {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("csv parse failure in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("unknown prompt tag {tag:?} in {path} (expected benign/unsafe/unknown)")]
    BadTag { path: String, tag: String },
}

/// Prompt file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum PromptFormat {
    #[default]
    Lines,
    Csv {
        column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag_column: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub text: String,
    pub tag: PromptTag,
}

/// Deduplicated prompt list with per-prompt tags and its source path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub prompts: Vec<PromptEntry>,
    pub source: PathBuf,
}

impl PromptPool {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.prompts.iter().map(|p| p.text.clone()).collect()
    }

    /// Embeds every prompt into a ready-to-sample context pool.
    pub fn contexts(&self, embedder: &TokenEmbedder) -> Vec<PromptContext> {
        self.prompts
            .iter()
            .map(|p| embedder.context(&p.text, p.tag))
            .collect()
    }
}

fn parse_tag(raw: &str, path: &Path) -> Result<PromptTag, PromptError> {
    match raw.trim().to_lowercase().as_str() {
        "" | "unknown" => Ok(PromptTag::Unknown),
        "benign" | "safe" => Ok(PromptTag::Benign),
        "unsafe" | "nsfw" => Ok(PromptTag::Unsafe),
        other => Err(PromptError::BadTag {
            path: path.display().to_string(),
            tag: other.to_string(),
        }),
    }
}

fn dedup(entries: Vec<PromptEntry>) -> Vec<PromptEntry> {
    let mut seen = std::collections::HashSet::new();
    entries
        .into_iter()
        .filter(|e| seen.insert(e.text.clone()))
        .collect()
}

/// Loads a prompt pool. Lines format tags every prompt `unknown`; CSV may
/// carry a tag column (missing values default to `unknown`).
pub fn load_prompts(path: &Path, format: &PromptFormat) -> Result<PromptPool, PromptError> {
    let entries = match format {
        PromptFormat::Lines => {
            let text = std::fs::read_to_string(path).map_err(|e| PromptError::Read {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| PromptEntry {
                    text: l.to_string(),
                    tag: PromptTag::Unknown,
                })
                .collect()
        }
        PromptFormat::Csv { column, tag_column } => {
            let mut reader =
                csv::Reader::from_path(path).map_err(|e| PromptError::Read {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            let headers = reader
                .headers()
                .map_err(|e| PromptError::Csv {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
                .clone();
            let col_idx = headers.iter().position(|h| h == column).ok_or_else(|| {
                PromptError::MissingColumn {
                    path: path.display().to_string(),
                    column: column.clone(),
                }
            })?;
            let tag_idx = match tag_column {
                Some(tc) => Some(headers.iter().position(|h| h == tc).ok_or_else(|| {
                    PromptError::MissingColumn {
                        path: path.display().to_string(),
                        column: tc.clone(),
                    }
                })?),
                None => None,
            };
            let mut entries = Vec::new();
            for record in reader.records() {
                let record = record.map_err(|e| PromptError::Csv {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                let text = record.get(col_idx).unwrap_or("").trim().to_string();
                if text.is_empty() {
                    continue;
                }
                let tag = match tag_idx {
                    Some(i) => parse_tag(record.get(i).unwrap_or(""), path)?,
                    None => PromptTag::Unknown,
                };
                entries.push(PromptEntry { text, tag });
            }
            entries
        }
    };
    let prompts = dedup(entries);
    if prompts.is_empty() {
        return Err(PromptError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok(PromptPool {
        prompts,
        source: path.to_path_buf(),
    })
}
