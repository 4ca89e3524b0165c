//! In-process vector store with exact and HNSW search.

mod hnsw;
mod persist;

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnm::Cnm;
use crate::composer::{EmbedderDescriptor, EmbeddingVector, PREFIX_FORMAT};
use crate::corpus::Span;

pub use hnsw::{Hnsw, HnswParams, VectorSource};
pub use persist::{STORE_MAGIC, STORE_VERSION};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("dimension mismatch: store has {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("store is empty")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("approximate index not built")]
    AnnNotBuilt,
    #[error("store file {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported store version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("corrupt store file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMetadata {
    pub doc_id: String,
    pub seq_index: usize,
    pub cnm: Option<Cnm>,
    pub strategy: String,
    /// Byte length of the prefix and separator in front of the chunk body.
    pub prefix_len: usize,
    pub char_span: Span,
    pub token_span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedChunk {
    pub id: String,
    pub x_text: String,
    pub vector: EmbeddingVector,
    pub metadata: ChunkMetadata,
}

impl IndexedChunk {
    /// Chunk text without its prefix.
    pub fn body(&self) -> &str {
        &self.x_text[self.metadata.prefix_len.min(self.x_text.len())..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
    pub rank: usize,
}

/// Store-level metadata persisted in the file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub dimension: usize,
    pub embedder: EmbedderDescriptor,
    pub prefix_format: String,
}

/// Chunks and vectors in insertion order, with an optional HNSW graph.
///
/// Mutation needs `&mut self`, search only `&self`, so a store shared
/// behind a lock gets many-readers-or-one-writer for free. Inserting after
/// the graph is built discards the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    header: StoreHeader,
    items: Vec<IndexedChunk>,
    by_id: HashMap<String, usize>,
    ann: Option<Hnsw>,
}

impl VectorSource for [IndexedChunk] {
    fn vector(&self, i: usize) -> &[f64] {
        self[i].vector.values()
    }

    fn count(&self) -> usize {
        self.len()
    }
}

impl VectorStore {
    pub fn new(embedder: EmbedderDescriptor) -> Self {
        Self {
            header: StoreHeader {
                dimension: embedder.dimension,
                embedder,
                prefix_format: PREFIX_FORMAT.to_string(),
            },
            items: Vec::new(),
            by_id: HashMap::new(),
            ann: None,
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn dimension(&self) -> usize {
        self.header.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[IndexedChunk] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&IndexedChunk> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn insert(&mut self, item: IndexedChunk) -> Result<(), StoreError> {
        if item.vector.dim() != self.header.dimension {
            return Err(StoreError::Dimension {
                expected: self.header.dimension,
                actual: item.vector.dim(),
            });
        }
        if self.by_id.contains_key(&item.id) {
            return Err(StoreError::DuplicateId(item.id));
        }
        self.by_id.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        self.ann = None;
        Ok(())
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<(), StoreError> {
        if k < 1 {
            return Err(StoreError::InvalidK);
        }
        if query.dim() != self.header.dimension {
            return Err(StoreError::Dimension {
                expected: self.header.dimension,
                actual: query.dim(),
            });
        }
        if self.items.is_empty() {
            return Err(StoreError::Empty);
        }
        Ok(())
    }

    fn hits(&self, ranked: impl IntoIterator<Item = (usize, f64)>) -> Vec<SearchHit> {
        ranked
            .into_iter()
            .enumerate()
            .map(|(r, (i, score))| SearchHit {
                id: self.items[i].id.clone(),
                score,
                rank: r + 1,
            })
            .collect()
    }

    /// Exhaustive top-`k` by cosine; equal scores keep insertion order.
    pub fn search_exact(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        self.check_query(query, k)?;
        let mut scored: Vec<(usize, f64)> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| (i, query.dot(&item.vector)))
            .collect();
        let k = k.min(scored.len());
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(self.hits(scored))
    }

    pub fn build_ann(&mut self, params: HnswParams) {
        self.ann = Some(Hnsw::build(self.items.as_slice(), params));
    }

    pub fn ann(&self) -> Option<&Hnsw> {
        self.ann.as_ref()
    }

    pub fn search_ann(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        let ann = self.ann.as_ref().ok_or(StoreError::AnnNotBuilt)?;
        self.check_query(query, k)?;
        let ef = ann.params().ef_search;
        let found = ann.search(self.items.as_slice(), query.values(), k.min(self.items.len()), ef);
        Ok(self.hits(found))
    }

    /// Warnings for every way the store's embedder differs from `expected`.
    pub fn embedder_warnings(&self, expected: &EmbedderDescriptor) -> Vec<String> {
        self.header.embedder.differences(expected)
    }
}

/// Writes one `{id, score}` JSON line per hit.
pub fn export_hits(out: &mut impl Write, hits: &[SearchHit]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        score: f64,
    }
    for hit in hits {
        serde_json::to_writer(
            &mut *out,
            &Line {
                id: &hit.id,
                score: hit.score,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn item(id: &str, values: Vec<f64>) -> IndexedChunk {
        IndexedChunk {
            id: id.into(),
            x_text: format!("text of {id}"),
            vector: EmbeddingVector::from_raw(values).unwrap(),
            metadata: ChunkMetadata {
                doc_id: "d".into(),
                seq_index: 0,
                cnm: None,
                strategy: "TEST".into(),
                prefix_len: 0,
                char_span: Span::new(0, 1),
                token_span: Span::new(0, 1),
            },
        }
    }

    pub(crate) fn random_store(n: usize, d: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = VectorStore::new(EmbedderDescriptor::local_hash(d, 0));
        for i in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.insert(item(&format!("v{i}"), v)).unwrap();
        }
        store
    }

    /// Full sort with explicit norms, independent of the store's scan.
    fn oracle(store: &VectorStore, q: &[f64], k: usize) -> Vec<String> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(usize, f64)> = store
            .items()
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let v = it.vector.values();
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                (i, d / (norm(v) * norm(q)))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.iter().take(k).map(|(i, _)| store.items()[*i].id.clone()).collect()
    }

    #[test]
    fn insert_get_and_guards() {
        let mut s = VectorStore::new(EmbedderDescriptor::local_hash(3, 0));
        s.insert(item("a", vec![1.0, 0.0, 0.0])).unwrap();
        let got = s.get("a").unwrap();
        assert_eq!(got.x_text, "text of a");
        assert_eq!(got.vector.values(), [1.0, 0.0, 0.0]);
        assert!(matches!(s.insert(item("a", vec![0.0, 1.0, 0.0])), Err(StoreError::DuplicateId(id)) if id == "a"));
        assert!(matches!(
            s.insert(item("b", vec![1.0; 4])),
            Err(StoreError::Dimension { expected: 3, actual: 4 })
        ));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn self_match_and_orthogonal_ties() {
        let mut s = VectorStore::new(EmbedderDescriptor::local_hash(3, 0));
        s.insert(item("x", vec![1.0, 0.0, 0.0])).unwrap();
        s.insert(item("y", vec![0.0, 1.0, 0.0])).unwrap();
        s.insert(item("z", vec![0.0, 0.0, 1.0])).unwrap();
        let q = EmbeddingVector::from_raw(vec![1.0, 0.0, 0.0]).unwrap();
        let hits = s.search_exact(&q, 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["x", "y", "z"]);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert_eq!(hits[1].score, 0.0);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(s.search_exact(&q, 10).unwrap().len(), 3);
        assert!(matches!(s.search_exact(&q, 0), Err(StoreError::InvalidK)));
    }

    #[test]
    fn empty_store_and_bad_dimension() {
        let s = VectorStore::new(EmbedderDescriptor::local_hash(2, 0));
        let q = EmbeddingVector::from_raw(vec![1.0, 0.0]).unwrap();
        assert!(matches!(s.search_exact(&q, 1), Err(StoreError::Empty)));
        let s = random_store(5, 4, 1);
        assert!(matches!(s.search_exact(&q, 1), Err(StoreError::Dimension { .. })));
    }

    #[test]
    fn exact_matches_full_sort_oracle() {
        let s = random_store(50, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qv = EmbeddingVector::from_raw(q.clone()).unwrap();
        let got: Vec<String> = s.search_exact(&qv, 10).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(got, oracle(&s, &q, 10));
    }

    #[test]
    fn ann_requires_build_and_clamps_k() {
        let mut s = random_store(100, 16, 4);
        let q = s.items()[0].vector.clone();
        assert!(matches!(s.search_ann(&q, 5), Err(StoreError::AnnNotBuilt)));
        s.build_ann(HnswParams::default());
        assert_eq!(s.search_ann(&q, 500).unwrap().len(), 100);
        let wrong = EmbeddingVector::from_raw(vec![1.0; 3]).unwrap();
        assert!(matches!(s.search_ann(&wrong, 5), Err(StoreError::Dimension { .. })));
        s.insert(item("late", vec![1.0; 16])).unwrap();
        assert!(s.ann().is_none());
    }

    #[test]
    fn ann_recall_on_small_store() {
        let mut s = random_store(100, 16, 5);
        s.build_ann(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = EmbeddingVector::from_raw((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let exact: Vec<String> = s.search_exact(&q, 10).unwrap().into_iter().map(|h| h.id).collect();
            let approx: Vec<String> = s.search_ann(&q, 10).unwrap().into_iter().map(|h| h.id).collect();
            let overlap = approx.iter().filter(|id| exact.contains(id)).count();
            assert!(overlap >= 9, "overlap {overlap}");
        }
    }

    #[test]
    fn export_lines() {
        let hits = vec![SearchHit {
            id: "a".into(),
            score: 0.5,
            rank: 1,
        }];
        let mut out = Vec::new();
        export_hits(&mut out, &hits).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"id\":\"a\",\"score\":0.5}\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_search_equals_oracle(n in 1usize..1000, d in 1usize..8, k in 1usize..20, seed in any::<u64>()) {
            let s = random_store(n, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let Ok(qv) = EmbeddingVector::from_raw(q.clone()) else { return Ok(()) };
            let hits = s.search_exact(&qv, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            for h in &hits {
                prop_assert!(h.score >= -1.0 - 1e-9 && h.score <= 1.0 + 1e-9);
            }
            let got: Vec<String> = hits.into_iter().map(|h| h.id).collect();
            prop_assert_eq!(got, oracle(&s, &q, k));
        }

        #[test]
        fn ties_follow_insertion_order(n in 2usize..40) {
            let mut s = VectorStore::new(EmbedderDescriptor::local_hash(2, 0));
            for i in 0..n {
                s.insert(item(&format!("t{i}"), vec![1.0, 1.0])).unwrap();
            }
            let q = EmbeddingVector::from_raw(vec![1.0, 1.0]).unwrap();
            let ids: Vec<String> = s.search_exact(&q, n).unwrap().into_iter().map(|h| h.id).collect();
            let expected: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            prop_assert_eq!(ids, expected);
        }
    }
}
