//! Per-run record of inputs, settings and stage counters.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, Strategy};
use crate::continuity::ChainStats;
use crate::corpus::Document;
use crate::prompts;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub documents: u64,
    /// Files the continuity chain ran over (CHOP only).
    pub files: u64,
    pub chunks: u64,
    pub extractions: u64,
    pub decisions: u64,
    pub false_decisions: u64,
    pub defaulted_decisions: u64,
    pub fallbacks: u64,
    pub embeddings: u64,
}

impl Counters {
    pub fn add_chain(&mut self, stats: &ChainStats) {
        self.extractions += stats.extractions;
        self.decisions += stats.decisions;
        self.false_decisions += stats.false_decisions;
        self.defaulted_decisions += stats.defaulted_decisions;
        self.fallbacks += stats.fallbacks;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub strategy: Strategy,
    pub config: PipelineConfig,
    pub corpus_sha256: String,
    /// RFC 3339, UTC.
    pub started_at: String,
    pub finished_at: String,
    pub counters: Counters,
    pub templates: Vec<String>,
    pub tokenizer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_checksum: Option<String>,
}

impl RunManifest {
    /// Writes pretty JSON through a temp file and rename.
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut body = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        body.push('\n');
        write_atomic(path, body.as_bytes())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let raw = fs::read(path)?;
        serde_json::from_slice(&raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn template_tags() -> Vec<String> {
    prompts::ALL.iter().map(|t| t.tag()).collect()
}

/// SHA-256 over each document's id and text, in order.
pub fn corpus_digest(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        for part in [d.doc_id.as_bytes(), d.text.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex::encode(h.finalize())
}

/// `index.chop` → `index.manifest.json`.
pub fn manifest_path(index: &Path) -> PathBuf {
    index.with_extension("manifest.json")
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_ids_and_order() {
        let a = Document::new("a", "x");
        let b = Document::new("b", "y");
        let d1 = corpus_digest(&[a.clone(), b.clone()]);
        assert_eq!(d1, corpus_digest(&[a.clone(), b.clone()]));
        assert_ne!(d1, corpus_digest(&[b.clone(), a.clone()]));
        assert_ne!(corpus_digest(&[Document::new("ab", "")]), corpus_digest(&[Document::new("a", "b")]));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(&dir.path().join("i.chop"));
        assert!(path.ends_with("i.manifest.json"));
        let m = RunManifest {
            command: "ingest".into(),
            strategy: Strategy::Chop,
            config: PipelineConfig::default(),
            corpus_sha256: "00".into(),
            started_at: now_rfc3339(),
            finished_at: now_rfc3339(),
            counters: Counters::default(),
            templates: template_tags(),
            tokenizer: "t".into(),
            store_checksum: None,
        };
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert!(m.templates.contains(&"cnm_extract/v1".to_string()));
    }
}
