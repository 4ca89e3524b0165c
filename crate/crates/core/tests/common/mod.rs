//! Shared fixtures: a blocking stub HTTP server and a synthetic corpus of
//! near-duplicate manuals.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde_json::{json, Value};

use chop_core::cnm::Cnm;
use chop_core::corpus::{stitch_with_map, Chunk, Document, DEFAULT_JOINER};
use chop_core::evalkit::{GoldSpan, QueryRecord};
use chop_core::llm_gateway::Transcript;
use chop_core::pipeline::{chop_chunks, label_transcript, PipelineConfig};

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// Serves one request per connection on 127.0.0.1. The handler gets the
/// zero-based request number and the JSON body.
pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let worker = {
            let (hits, bodies, stop) = (hits.clone(), bodies.clone(), stop.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    serve(stream, n, handler.as_ref(), &bodies);
                }
            })
        };
        Self {
            url,
            hits,
            bodies,
            stop,
            worker: Some(worker),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let addr = self.url.trim_start_matches("http://").trim_end_matches("/v1").to_string();
        let _ = TcpStream::connect(addr);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn serve(stream: TcpStream, n: usize, handler: &Handler, bodies: &Mutex<Vec<Value>>) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    bodies.lock().unwrap().push(value.clone());
    let (status, payload) = handler(n, &value);
    let reply = format!(
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let mut stream = stream;
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

/// Wraps text as a chat-completions response body.
pub fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// The user message of a chat-completions request body.
pub fn user_prompt(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

/// A deterministic stand-in model: continuity prompts get a verdict derived
/// from the prompt bytes, everything else a signature naming the first token
/// that mixes letters and digits.
pub fn stand_in_model(prompt: &str) -> String {
    if prompt.contains("Previous anchor:") {
        let h = prompt.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(u32::from(b)));
        return json!({ "same": h % 3 != 0 }).to_string();
    }
    let model = prompt
        .split_whitespace()
        .find(|w| w.chars().any(|c| c.is_ascii_digit()) && w.chars().any(|c| c.is_ascii_alphabetic()))
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_uppercase());
    json!({"category": "appliance", "nouns": ["appliance manual"], "model": model, "confidence": 0.8}).to_string()
}

pub const MANUALS: usize = 10;
pub const CHUNKS_PER_MANUAL: usize = 5;
pub const CHUNK_TOKENS: usize = 500;
const NOUN_REPEATS: usize = 8;

pub const PART_NOUNS: [&str; 5] = ["filter", "nozzle", "gasket", "impeller", "thermostat"];

pub fn model_name(m: usize) -> String {
    format!("K{}{}", 210 + 7 * m, ["A", "B", "C", "D", "E", "F", "G", "H", "J", "L"][m])
}

/// Noun discussed in section `j` (1-based) of manual `m`. Drawn from a small
/// shared pool, so every noun recurs across several manuals.
pub fn part_noun(m: usize, j: usize) -> &'static str {
    PART_NOUNS[(m + j) % PART_NOUNS.len()]
}

/// Boilerplate shared by every manual at section `j`: `n` tokens of plain
/// words cycling through a section-specific vocabulary.
fn boilerplate(j: usize, n: usize) -> Vec<String> {
    const WORDS: [&str; 40] = [
        "safety", "instructions", "read", "carefully", "before", "use", "keep", "this", "guide", "for", "future",
        "reference", "the", "unit", "must", "be", "installed", "by", "qualified", "personnel", "disconnect",
        "power", "supply", "prior", "to", "cleaning", "check", "all", "connections", "regularly", "warranty",
        "covers", "defects", "in", "materials", "and", "workmanship", "under", "normal", "conditions",
    ];
    (0..n)
        .map(|i| format!("{}{}", WORDS[(i * 7 + j * 3) % WORDS.len()], if i % 11 == 0 { "s" } else { "" }))
        .collect()
}

/// Section `j` of manual `m`: exactly `CHUNK_TOKENS` alphanumeric words.
/// Section 0 introduces the model; later sections repeat their part noun.
pub fn section(m: usize, j: usize) -> String {
    let specific: Vec<String> = if j == 0 {
        vec![model_name(m)]
    } else {
        vec![part_noun(m, j).to_string(); NOUN_REPEATS]
    };
    let mut words = boilerplate(j, CHUNK_TOKENS - specific.len());
    let at = 3.min(words.len());
    words.splice(at..at, specific);
    words.join(" ")
}

pub fn manuals() -> Vec<Document> {
    (0..MANUALS)
        .map(|m| {
            let text = (0..CHUNKS_PER_MANUAL).map(|j| section(m, j)).collect::<Vec<_>>().join(" ");
            Document::new(format!("manual-{m:02}"), text)
        })
        .collect()
}

/// Fraction of each section's tokens that are shared boilerplate.
pub fn boilerplate_fraction() -> f64 {
    let specific_max = NOUN_REPEATS.max(1);
    (CHUNK_TOKENS - specific_max) as f64 / CHUNK_TOKENS as f64
}

/// The manuals stitched into one file, as the only corpus document.
pub fn stitched_corpus() -> Document {
    stitch_with_map(&manuals(), DEFAULT_JOINER).unwrap().document
}

/// Two queries per manual, each naming the model and a part noun; gold is
/// the section discussing that noun.
pub fn collision_queries(doc: &Document, config: &PipelineConfig) -> Vec<QueryRecord> {
    let chunks = chop_chunks(doc, config).unwrap();
    assert_eq!(chunks.len(), MANUALS * CHUNKS_PER_MANUAL, "sections must align with windows");
    let mut out = Vec::new();
    for m in 0..MANUALS {
        for j in [1, 3] {
            let c = &chunks[m * CHUNKS_PER_MANUAL + j];
            out.push(QueryRecord {
                query_id: format!("q{m:02}-{j}"),
                text: format!("how to service the {} on the {}", part_noun(m, j), model_name(m)),
                gold_spans: vec![GoldSpan {
                    doc_id: doc.doc_id.clone(),
                    start: c.char_span.start,
                    end: c.char_span.end,
                }],
                reference_answer: None,
            });
        }
    }
    out
}

/// Ground-truth replay: every section of manual `m` carries manual `m`'s
/// signature, and only manual boundaries are discontinuities.
pub fn collision_transcript(doc: &Document, config: &PipelineConfig) -> Transcript {
    let chunks = chop_chunks(doc, config).unwrap();
    label_transcript(
        &[chunks],
        config.anchor_cap,
        |c: &Chunk| Cnm {
            category: Some("appliance".into()),
            nouns: vec!["appliance manual".into()],
            model: Some(model_name(c.seq_index / CHUNKS_PER_MANUAL)),
            confidence: 0.95,
        },
        |_, cur| cur.seq_index % CHUNKS_PER_MANUAL != 0,
    )
}
