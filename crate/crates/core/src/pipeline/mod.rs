//! End-to-end runs: ingest a corpus into an index, query it, generate
//! answers from retrieved evidence, and compare the three chunking
//! strategies over a query set.
//!
//! Every strategy in a comparison shares one embedder, one store layout and
//! one similarity function; only the chunk composition differs.

mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::slice;

use thiserror::Error;
use tracing::{info, warn};

use crate::cnm::{build_cnm_prompt, Cnm, CnmExtractor};
use crate::composer::{compose, Embedder, EmbedError, EmbeddingVector, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig, REMOTE_BATCH};
use crate::continuity::{build_cd_prompt, run_chain_with, Anchor, ContinuityError};
use crate::corpus::{
    chunk_cosine, chunk_fixed, load_corpus, stitch_with_map, Chunk, CorpusError, Document, Span, Stitched,
    DEFAULT_JOINER,
};
use crate::evalkit::{
    hit_at_k, load_queries, mrr_at_k, ndcg_at_k, rouge_l, sem_score, token_f1, EvalError, GoldSpan, MetricReport,
    QueryRecord, QueryScores, ReportBuilder, RetrievalRun, RetrievedHit,
};
use crate::llm_gateway::{ChatRequest, Gateway, GatewayError, RecordingBackend, RemoteBackend, RemoteConfig, ScriptedBackend,
    Transcript,
};
use crate::prompts;
use crate::tokenize::{SimpleTokenizer, Tokenizer};
use crate::vecstore::{ChunkMetadata, IndexedChunk, StoreError, VectorStore};

pub use config::{
    ConfigError, EmbedderBackend, EmbedderConfig, GatewayConfig, GatewayMode, Paths, PipelineConfig, SearchMode,
    Strategy, WindowParams, DEFAULT_API_KEY_ENV,
};
pub use manifest::{corpus_digest, manifest_path, now_rfc3339, template_tags, Counters, RunManifest};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Load,
    Stitch,
    Chunk,
    Continuity,
    Embed,
    Index,
    Persist,
    Search,
    Generate,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Setup => "setup",
            Stage::Load => "load",
            Stage::Stitch => "stitch",
            Stage::Chunk => "chunk",
            Stage::Continuity => "continuity",
            Stage::Embed => "embed",
            Stage::Index => "index",
            Stage::Persist => "persist",
            Stage::Search => "search",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Continuity(#[from] ContinuityError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StageError {
    fn exit_code(&self) -> u8 {
        match self {
            StageError::Gateway(_)
            | StageError::Continuity(ContinuityError::Gateway(_))
            | StageError::Embed(EmbedError::Backend(_))
            | StageError::Corpus(CorpusError::Embed(EmbedError::Backend(_))) => 3,
            StageError::Corpus(CorpusError::InvalidParams(_))
            | StageError::Store(StoreError::InvalidK | StoreError::AnnNotBuilt)
            | StageError::Eval(EvalError::InvalidK | EvalError::KExceedsDepth { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} failed{}: {source}", .item.as_ref().map(|i| format!(" at {i}")).unwrap_or_default())]
    Stage {
        stage: Stage,
        item: Option<String>,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// 0 success, 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 1,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn at<E: Into<StageError>>(stage: Stage, item: impl Into<Option<String>>) -> impl FnOnce(E) -> PipelineError {
    let item = item.into();
    move |e| PipelineError::Stage {
        stage,
        item,
        source: e.into(),
    }
}

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, PipelineError> {
    value
        .as_ref()
        .ok_or_else(|| PipelineError::Usage(format!("`{key}` is not configured")))
}

pub fn build_embedder(config: &EmbedderConfig) -> Result<Box<dyn Embedder>, PipelineError> {
    match config.backend {
        EmbedderBackend::Hash => Ok(Box::new(HashEmbedder::new(config.dimension, config.seed))),
        EmbedderBackend::Remote => {
            let mut remote = RemoteEmbedderConfig::new(
                required(&config.endpoint, "embedder.endpoint")?,
                required(&config.model, "embedder.model")?,
                config.dimension,
            );
            remote.api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
            let embedder = RemoteEmbedder::new(remote).map_err(at(Stage::Setup, None))?;
            Ok(Box::new(embedder))
        }
    }
}

pub fn build_gateway(config: &GatewayConfig) -> Result<Gateway, PipelineError> {
    let remote = || -> Result<RemoteBackend, PipelineError> {
        let mut rc = RemoteConfig::new(
            required(&config.endpoint, "gateway.endpoint")?,
            required(&config.model, "gateway.model")?,
        )
        .with_api_key_from_env(&config.api_key_env);
        rc.max_in_flight = config.max_in_flight;
        RemoteBackend::new(rc).map_err(at(Stage::Setup, None))
    };
    match config.backend {
        GatewayMode::Scripted => {
            let path = required(&config.transcript, "gateway.transcript")?;
            let backend = ScriptedBackend::from_file(path).map_err(at(Stage::Setup, path.display().to_string()))?;
            Ok(Gateway::new(backend))
        }
        GatewayMode::Remote => Ok(Gateway::new(remote()?)),
        GatewayMode::Record => {
            let path = required(&config.transcript, "gateway.transcript")?;
            let backend = RecordingBackend::new(remote()?, path).map_err(at(Stage::Setup, path.display().to_string()))?;
            Ok(Gateway::new(backend))
        }
    }
}

/// The files the continuity chain runs over: one stitched file, or every
/// corpus record on its own when stitching is off.
pub fn stitch_files(docs: &[Document], config: &PipelineConfig) -> Result<Vec<Stitched>, PipelineError> {
    if config.stitch {
        Ok(vec![stitch_with_map(docs, DEFAULT_JOINER).map_err(at(Stage::Stitch, None))?])
    } else {
        docs.iter()
            .map(|d| stitch_with_map(slice::from_ref(d), DEFAULT_JOINER))
            .collect::<Result<_, _>>()
            .map_err(at(Stage::Stitch, None))
    }
}

/// CHOP's fixed-window chunks of one stitched file.
pub fn chop_chunks(doc: &Document, config: &PipelineConfig) -> Result<Vec<Chunk>, PipelineError> {
    chunk_fixed(doc, config.chop.size, config.chop.overlap, &SimpleTokenizer).map_err(at(Stage::Chunk, doc.doc_id.clone()))
}

/// Replay transcript answering every CHOP prompt from known labels:
/// `signature` gives each chunk's signature and `same` each boundary's
/// continuity verdict. Covers extraction prompts for every chunk, so any
/// verdict sequence replays.
pub fn label_transcript(
    files: &[Vec<Chunk>],
    anchor_cap: usize,
    signature: impl Fn(&Chunk) -> Cnm,
    same: impl Fn(&Chunk, &Chunk) -> bool,
) -> Transcript {
    let mut t = Transcript::new();
    for chunks in files {
        for (i, c) in chunks.iter().enumerate() {
            let cnm = serde_json::to_string(&signature(c)).expect("signature serializes");
            t.insert(&build_cnm_prompt(&c.text), cnm);
            if i > 0 {
                let prev = &chunks[i - 1];
                let prompt = build_cd_prompt(&Anchor::from_chunk(prev, anchor_cap), &c.text, anchor_cap);
                t.insert(&prompt, serde_json::json!({ "same": same(prev, c) }).to_string());
            }
        }
    }
    t
}

/// An in-memory index together with how it was produced.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub strategy: Strategy,
    pub store: VectorStore,
    pub counters: Counters,
    /// Stitched files and their segment maps (CHOP only).
    pub stitched: Vec<Stitched>,
}

impl Ingested {
    /// Moves gold spans into the coordinates this index's chunks use.
    /// Spans whose document is not part of any stitched file are kept as
    /// they are.
    pub fn translate_gold(&self, gold: &[GoldSpan]) -> Vec<GoldSpan> {
        gold.iter()
            .map(|g| {
                self.stitched
                    .iter()
                    .find_map(|s| {
                        s.translate(&g.doc_id, g.span()).map(|span| GoldSpan {
                            doc_id: s.document.doc_id.clone(),
                            start: span.start,
                            end: span.end,
                        })
                    })
                    .unwrap_or_else(|| g.clone())
            })
            .collect()
    }
}

struct Pending {
    chunk: Chunk,
    x_text: String,
    metadata: ChunkMetadata,
}

fn pending(strategy: Strategy, chunk: Chunk, x_text: String, cnm: Option<Cnm>, prefix_len: usize) -> Pending {
    let metadata = ChunkMetadata {
        doc_id: chunk.doc_id.clone(),
        seq_index: chunk.seq_index,
        cnm,
        strategy: strategy.as_str().to_string(),
        prefix_len,
        char_span: chunk.char_span,
        token_span: chunk.token_span,
    };
    Pending { chunk, x_text, metadata }
}

fn embed_into(store: &mut VectorStore, items: Vec<Pending>, embedder: &dyn Embedder) -> Result<u64, PipelineError> {
    let mut embedded = 0;
    let mut items = items.into_iter().peekable();
    while items.peek().is_some() {
        let batch: Vec<Pending> = items.by_ref().take(REMOTE_BATCH).collect();
        let first = batch[0].chunk.chunk_id.clone();
        let texts: Vec<&str> = batch.iter().map(|p| p.x_text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts).map_err(at(Stage::Embed, first))?;
        embedded += vectors.len() as u64;
        for (p, vector) in batch.into_iter().zip(vectors) {
            let id = p.chunk.chunk_id;
            store
                .insert(IndexedChunk {
                    id: id.clone(),
                    x_text: p.x_text,
                    vector,
                    metadata: p.metadata,
                })
                .map_err(at(Stage::Index, id))?;
        }
    }
    Ok(embedded)
}

/// Builds an index for one strategy. `gateway` is only consulted by CHOP.
pub fn ingest(
    docs: &[Document],
    strategy: Strategy,
    config: &PipelineConfig,
    embedder: &dyn Embedder,
    gateway: Option<&Gateway>,
) -> Result<Ingested, PipelineError> {
    if docs.is_empty() {
        return Err(at(Stage::Load, None)(CorpusError::EmptyInput));
    }
    let tokenizer = SimpleTokenizer;
    let mut counters = Counters {
        documents: docs.len() as u64,
        ..Counters::default()
    };
    let mut store = VectorStore::new(embedder.descriptor());
    let mut stitched = Vec::new();
    let mut items = Vec::new();

    match strategy {
        Strategy::Chop => {
            let gateway = gateway.ok_or_else(|| PipelineError::Usage("CHOP needs an LLM gateway".into()))?;
            let extractor = CnmExtractor::new(gateway.clone());
            stitched = stitch_files(docs, config)?;
            for file in &stitched {
                let doc = &file.document;
                let chunks = chop_chunks(doc, config)?;
                let mut done = 0usize;
                let (chain, stats) =
                    run_chain_with(&chunks, gateway, &extractor, config.anchor_cap, |_| done += 1).map_err(|e| {
                        at(Stage::Continuity, chunks.get(done).map(|c| c.chunk_id.clone()))(e)
                    })?;
                info!(file = %doc.doc_id, chunks = chunks.len(), extractions = stats.extractions, "continuity chain done");
                counters.files += 1;
                counters.add_chain(&stats);
                for annotated in chain {
                    let composed = compose(&annotated.cnm, &annotated.chunk);
                    let prefix_len = composed.prefix_len();
                    items.push(pending(strategy, annotated.chunk, composed.x_text, Some(annotated.cnm), prefix_len));
                }
            }
        }
        Strategy::Naive500T => {
            for doc in docs {
                let chunks = chunk_fixed(doc, config.naive.size, config.naive.overlap, &tokenizer)
                    .map_err(at(Stage::Chunk, doc.doc_id.clone()))?;
                items.extend(chunks.into_iter().map(|c| {
                    let text = c.text.clone();
                    pending(strategy, c, text, None, 0)
                }));
            }
        }
        Strategy::CosineChunking => {
            for doc in docs {
                let chunks = chunk_cosine(doc, config.cosine_threshold, embedder, &tokenizer)
                    .map_err(at(Stage::Chunk, doc.doc_id.clone()))?;
                items.extend(chunks.into_iter().map(|c| {
                    let text = c.text.clone();
                    pending(strategy, c, text, None, 0)
                }));
            }
        }
    }

    counters.chunks = items.len() as u64;
    counters.embeddings = embed_into(&mut store, items, embedder)?;
    if config.build_ann {
        store.build_ann(config.ann);
    }
    info!(%strategy, chunks = counters.chunks, "index built");
    Ok(Ingested {
        strategy,
        store,
        counters,
        stitched,
    })
}

fn load_documents(config: &PipelineConfig) -> Result<(Vec<Document>, String), PipelineError> {
    let path = required(&config.paths.corpus, "corpus")?;
    let docs = load_corpus(path).map_err(at(Stage::Load, path.display().to_string()))?;
    let digest = corpus_digest(&docs);
    Ok((docs, digest))
}

fn needs_gateway(strategy: Strategy) -> bool {
    strategy == Strategy::Chop
}

/// Ingests the configured corpus and persists the index and its manifest.
/// Nothing is written unless every stage succeeds.
pub fn cmd_ingest(config: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let started_at = now_rfc3339();
    let index = required(&config.paths.index, "index")?.clone();
    let (docs, digest) = load_documents(config)?;
    let embedder = build_embedder(&config.embedder)?;
    let gateway = if needs_gateway(config.strategy) {
        Some(build_gateway(&config.gateway)?)
    } else {
        None
    };
    let ingested = ingest(&docs, config.strategy, config, embedder.as_ref(), gateway.as_ref())?;
    ingested.store.persist(&index).map_err(at(Stage::Persist, index.display().to_string()))?;
    let manifest = RunManifest {
        command: "ingest".into(),
        strategy: config.strategy,
        config: config.clone(),
        corpus_sha256: digest,
        started_at,
        finished_at: now_rfc3339(),
        counters: ingested.counters,
        templates: template_tags(),
        tokenizer: SimpleTokenizer.name().to_string(),
        store_checksum: Some(ingested.store.checksum()),
    };
    let mpath = manifest_path(&index);
    manifest.write(&mpath).map_err(at(Stage::Persist, mpath.display().to_string()))?;
    Ok(manifest)
}

pub fn load_index(config: &PipelineConfig) -> Result<VectorStore, PipelineError> {
    let path = required(&config.paths.index, "index")?;
    let store = VectorStore::load(path).map_err(at(Stage::Load, path.display().to_string()))?;
    for w in store.embedder_warnings(&config.embedder.descriptor()) {
        warn!("index {}: {w}", path.display());
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QueryHit {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub doc_id: String,
    pub char_span: Span,
    pub x_text: String,
}

fn embed_query(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector, PipelineError> {
    embedder.embed(text).map_err(at(Stage::Embed, "query".to_string()))
}

fn search_vector(store: &VectorStore, vector: &EmbeddingVector, k: usize, mode: SearchMode) -> Result<Vec<QueryHit>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Usage("k must be at least 1".into()));
    }
    let hits = match mode {
        SearchMode::Exact => store.search_exact(vector, k),
        SearchMode::Ann => store.search_ann(vector, k),
    }
    .map_err(at(Stage::Search, None))?;
    Ok(hits
        .into_iter()
        .map(|h| {
            let item = store.get(&h.id).expect("search returns stored ids");
            QueryHit {
                rank: h.rank,
                score: h.score,
                doc_id: item.metadata.doc_id.clone(),
                char_span: item.metadata.char_span,
                x_text: item.x_text.clone(),
                id: h.id,
            }
        })
        .collect())
}

/// Embeds the raw query (never prefixed) and returns the top `k` chunks.
pub fn cmd_query(
    store: &VectorStore,
    embedder: &dyn Embedder,
    text: &str,
    k: usize,
    mode: SearchMode,
) -> Result<Vec<QueryHit>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Usage("k must be at least 1".into()));
    }
    if store.is_empty() {
        return Err(at(Stage::Search, None)(StoreError::Empty));
    }
    let vector = embed_query(embedder, text)?;
    search_vector(store, &vector, k, mode)
}

/// Numbered-evidence answer prompt.
pub fn answer_prompt(question: &str, evidence: &[&str]) -> String {
    let blocks: String = evidence
        .iter()
        .enumerate()
        .map(|(i, e)| format!("[{}] {}\n\n", i + 1, e.trim_end()))
        .collect();
    prompts::ANSWER.fill(&[("question", question), ("evidence", &blocks)])
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Generated {
    pub answer: String,
    pub evidence: Vec<QueryHit>,
    pub prompt: String,
}

fn generate_from(gateway: &Gateway, question: &str, evidence: Vec<QueryHit>) -> Result<Generated, PipelineError> {
    if evidence.is_empty() {
        return Err(at(Stage::Generate, None)(StoreError::Empty));
    }
    let texts: Vec<&str> = evidence.iter().map(|h| h.x_text.as_str()).collect();
    let prompt = answer_prompt(question, &texts);
    let response = gateway
        .complete(&ChatRequest::new(prompt.clone()))
        .map_err(at(Stage::Generate, None))?;
    let answer = response.text.trim().to_string();
    info!(evidence = evidence.len(), "answer generated");
    Ok(Generated {
        answer,
        evidence,
        prompt,
    })
}

/// Retrieves `k` chunks and asks the gateway to answer from them. The
/// gateway is not called when retrieval comes back empty.
pub fn cmd_generate(
    store: &VectorStore,
    embedder: &dyn Embedder,
    gateway: &Gateway,
    question: &str,
    k: usize,
    mode: SearchMode,
) -> Result<Generated, PipelineError> {
    let evidence = cmd_query(store, embedder, question, k, mode)?;
    generate_from(gateway, question, evidence)
}

/// Result of scoring one strategy.
#[derive(Debug)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub result: Result<(Ingested, Vec<(usize, QueryScores)>), PipelineError>,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub report: MetricReport,
    pub strategies: Vec<StrategyOutcome>,
}

impl CompareOutcome {
    pub fn failures(&self) -> impl Iterator<Item = (Strategy, &PipelineError)> {
        self.strategies
            .iter()
            .filter_map(|s| s.result.as_ref().err().map(|e| (s.strategy, e)))
    }
}

fn evaluate(
    ingested: &Ingested,
    queries: &[QueryRecord],
    query_vectors: &[EmbeddingVector],
    config: &PipelineConfig,
    embedder: &dyn Embedder,
    gateway: Option<&Gateway>,
) -> Result<Vec<(usize, QueryScores)>, PipelineError> {
    let depth = config.max_k();
    let mut run = RetrievalRun::new(ingested.strategy.as_str(), depth);
    run.min_overlap = config.min_overlap;
    let mut scored = Vec::with_capacity(queries.len() * config.k_list.len());
    for (query, vector) in queries.iter().zip(query_vectors) {
        let hits = search_vector(&ingested.store, vector, depth, config.search)?;
        run.record(
            query.query_id.clone(),
            hits.iter()
                .map(|h| RetrievedHit {
                    id: h.id.clone(),
                    doc_id: h.doc_id.clone(),
                    char_span: h.char_span,
                    score: h.score,
                    rank: h.rank,
                })
                .collect(),
        );
        let local = QueryRecord {
            gold_spans: ingested.translate_gold(&query.gold_spans),
            ..query.clone()
        };
        let item = || query.query_id.clone();
        for &k in &config.k_list {
            let mut s = QueryScores {
                hit: hit_at_k(&run, &local, k).map_err(at(Stage::Evaluate, item()))?,
                mrr: mrr_at_k(&run, &local, k).map_err(at(Stage::Evaluate, item()))?,
                ndcg: ndcg_at_k(&run, &local, k).map_err(at(Stage::Evaluate, item()))?,
                ..QueryScores::default()
            };
            if let (true, Some(reference), Some(gateway)) = (config.generate, &query.reference_answer, gateway) {
                let evidence = hits.iter().take(k).cloned().collect();
                let generated = generate_from(gateway, &query.text, evidence)
                    .map_err(|e| with_item(e, item()))?;
                s.f1 = Some(token_f1(&generated.answer, reference));
                s.rouge_l = Some(rouge_l(&generated.answer, reference));
                s.sem_score = Some(sem_score(&generated.answer, reference, embedder).map_err(at(Stage::Evaluate, item()))?);
            }
            scored.push((k, s));
        }
    }
    Ok(scored)
}

fn with_item(e: PipelineError, item: String) -> PipelineError {
    match e {
        PipelineError::Stage { stage, item: None, source } => PipelineError::Stage {
            stage,
            item: Some(item),
            source,
        },
        other => other,
    }
}

/// Runs every strategy over the same corpus and queries. Strategies run
/// concurrently; a failing strategy is recorded and the others continue.
pub fn compare(
    docs: &[Document],
    queries: &[QueryRecord],
    config: &PipelineConfig,
    embedder: &dyn Embedder,
    gateway: Option<&Gateway>,
) -> Result<CompareOutcome, PipelineError> {
    if queries.is_empty() {
        return Err(at(Stage::Evaluate, None)(EvalError::EmptyQuerySet));
    }
    if let Some(q) = queries.iter().find(|q| q.gold_spans.is_empty()) {
        return Err(at(Stage::Evaluate, q.query_id.clone())(EvalError::NoGold(q.query_id.clone())));
    }
    if config.generate && gateway.is_none() {
        return Err(PipelineError::Usage("answer generation needs an LLM gateway".into()));
    }
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let query_vectors = embedder
        .embed_batch(&texts)
        .map_err(at(Stage::Embed, "queries".to_string()))?;

    let strategies: Vec<StrategyOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = Strategy::ALL
            .iter()
            .map(|&strategy| {
                let query_vectors = &query_vectors;
                let handle = scope.spawn(move || {
                    let ingested = ingest(docs, strategy, config, embedder, gateway)?;
                    let scores = evaluate(&ingested, queries, query_vectors, config, embedder, gateway)?;
                    Ok((ingested, scores))
                });
                (strategy, handle)
            })
            .collect();
        handles
            .into_iter()
            .map(|(strategy, handle)| StrategyOutcome {
                strategy,
                result: handle.join().expect("strategy worker panicked"),
            })
            .collect()
    });

    let mut builder = ReportBuilder::new();
    for outcome in &strategies {
        match &outcome.result {
            Ok((_, scores)) => {
                for (k, s) in scores {
                    builder.add(outcome.strategy.as_str(), *k, *s);
                }
            }
            Err(e) => {
                warn!(strategy = %outcome.strategy, "strategy failed: {e}");
                builder.fail(outcome.strategy.as_str(), e);
            }
        }
    }
    let report = builder.finish().map_err(at(Stage::Report, None))?;
    Ok(CompareOutcome { report, strategies })
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<(PathBuf, PathBuf), PipelineError> {
    fs::create_dir_all(dir).map_err(at(Stage::Report, dir.display().to_string()))?;
    let csv = dir.join(REPORT_CSV);
    let text = dir.join(REPORT_TEXT);
    for (path, body) in [(&csv, report.to_csv()), (&text, report.to_text_table())] {
        manifest::write_atomic(path, body.as_bytes()).map_err(at(Stage::Report, path.display().to_string()))?;
    }
    Ok((csv, text))
}

/// Loads corpus and queries from the configured paths, compares the
/// strategies, and writes the report plus one manifest per strategy into
/// the report directory.
pub fn cmd_compare(config: &PipelineConfig) -> Result<CompareOutcome, PipelineError> {
    let started_at = now_rfc3339();
    let dir = required(&config.paths.report_dir, "report_dir")?.clone();
    let qpath = required(&config.paths.queries, "queries")?;
    let (docs, digest) = load_documents(config)?;
    let queries = load_queries(qpath).map_err(at(Stage::Load, qpath.display().to_string()))?;
    let embedder = build_embedder(&config.embedder)?;
    let gateway = build_gateway(&config.gateway)?;
    let outcome = compare(&docs, &queries, config, embedder.as_ref(), Some(&gateway))?;
    write_report(&dir, &outcome.report)?;
    for s in &outcome.strategies {
        if let Ok((ingested, _)) = &s.result {
            let manifest = RunManifest {
                command: "compare".into(),
                strategy: s.strategy,
                config: PipelineConfig {
                    strategy: s.strategy,
                    ..config.clone()
                },
                corpus_sha256: digest.clone(),
                started_at: started_at.clone(),
                finished_at: now_rfc3339(),
                counters: ingested.counters,
                templates: template_tags(),
                tokenizer: SimpleTokenizer.name().to_string(),
                store_checksum: Some(ingested.store.checksum()),
            };
            let path = dir.join(format!("manifest-{}.json", s.strategy));
            manifest.write(&path).map_err(at(Stage::Report, path.display().to_string()))?;
        }
    }
    Ok(outcome)
}
