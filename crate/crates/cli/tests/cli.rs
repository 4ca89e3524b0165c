use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use chop_core::cnm::Cnm;
use chop_core::corpus::Document;
use chop_core::pipeline::{chop_chunks, label_transcript, stitch_files, PipelineConfig};

const DOCS: [(&str, &str); 2] = [
    (
        "washer",
        "The WM200 washer drains through a rear hose. Clean the lint filter every month. \
         Check the door gasket for mould and wipe it dry after each cycle. \
         If the drum does not spin, inspect the drive belt and the motor brushes. \
         Use only low foam detergent in this machine.",
    ),
    (
        "heater",
        "The HX9 heater mounts on a flat wall. Keep curtains away from the grille. \
         Reset the thermostat by holding both buttons for five seconds. \
         Descale the element yearly in hard water areas. \
         Replace the fuse with the same rating only.",
    ),
];

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Corpus, queries, a CHOP replay transcript and a config file that
    /// points at all of them.
    fn new(extra_config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let docs: Vec<Document> = DOCS.iter().map(|(id, text)| Document::new(*id, *text)).collect();
        let corpus: String = docs
            .iter()
            .map(|d| json!({"doc_id": d.doc_id, "text": d.text}).to_string() + "\n")
            .collect();
        fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();

        let gold = |doc: &str, needle: &str| {
            let text = DOCS.iter().find(|(id, _)| *id == doc).unwrap().1;
            let start = text[..text.find(needle).unwrap()].chars().count();
            json!([{"doc_id": doc, "start": start, "end": start + needle.chars().count()}])
        };
        let queries = [
            json!({"query_id": "q1", "text": "how do I reset the thermostat", "gold": gold("heater", "Reset the thermostat")}),
            json!({"query_id": "q2", "text": "the drum does not spin", "gold": gold("washer", "If the drum")}),
        ];
        let lines: String = queries.iter().map(|q| q.to_string() + "\n").collect();
        fs::write(dir.path().join("queries.jsonl"), lines).unwrap();

        let mut config = PipelineConfig::default();
        config.chop.size = 20;
        let files: Vec<_> = stitch_files(&docs, &config)
            .unwrap()
            .iter()
            .map(|s| chop_chunks(&s.document, &config).unwrap())
            .collect();
        let transcript = label_transcript(
            &files,
            config.anchor_cap,
            |c| Cnm {
                category: Some("appliance".into()),
                nouns: vec!["appliance manual".into()],
                model: Some(if c.text.contains("HX9") { "HX9" } else { "WM200" }.into()),
                confidence: 0.9,
            },
            |_, cur| !cur.text.contains("HX9"),
        );
        transcript.save(&dir.path().join("transcript.jsonl")).unwrap();

        let conf = format!(
            "corpus = corpus.jsonl\nqueries = queries.jsonl\nindex = store.chop\nreport_dir = reports\n\
             gateway.transcript = transcript.jsonl\nchop.chunk_size = 20\nembedder.dimension = 256\nk = 1, 3\n{extra_config}"
        );
        fs::write(dir.path().join("run.conf"), conf).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn chop(&self, args: &[&str]) -> Output {
        let config = self.path("run.conf");
        let mut full = vec!["--config", config.to_str().unwrap()];
        full.extend_from_slice(args);
        run(&full)
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chop"))
        .args(args)
        .env_remove("CHOP_LOG")
        .output()
        .expect("run chop")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ingest(f: &Fixture, strategy: &str) {
    let out = f.chop(&["--strategy", strategy, "ingest"]);
    assert_eq!(code(&out), 0, "ingest failed: {}", stderr(&out));
}

#[test]
fn ingest_writes_index_and_manifest() {
    let f = Fixture::new("");
    let out = f.chop(&["ingest"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("store checksum"), "{text}");
    assert!(f.path("store.chop").is_file());

    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.path("store.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["strategy"], "CHOP");
    assert_eq!(manifest["counters"]["documents"], 2);
    // one extraction for the washer, one after the boundary into the heater
    assert_eq!(manifest["counters"]["extractions"], 2);
}

#[test]
fn query_ranks_and_exports() {
    let f = Fixture::new("");
    ingest(&f, "CHOP");
    let export = f.path("hits.jsonl");
    let out = f.chop(&["query", "reset the thermostat", "--k", "2", "--export", export.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].trim_start().starts_with("1 "));
    assert!(lines[0].contains("[model: HX9]"), "{}", lines[0]);

    let exported: Vec<Value> = fs::read_to_string(&export)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(exported.len(), 2);
    assert!(exported.iter().all(|e| e["id"].is_string() && e["score"].is_number()));
    assert!(exported[0]["score"].as_f64() >= exported[1]["score"].as_f64());
}

#[test]
fn exact_and_ann_agree_on_a_small_index() {
    let f = Fixture::new("");
    ingest(&f, "NAIVE_500T");
    let ids = |flag: &str| {
        let out = f.chop(&["query", "washer drive belt", "--k", "2", flag]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout(&out)
    };
    assert_eq!(ids("--exact"), ids("--ann"));
}

#[test]
fn inspect_lists_chunks() {
    let f = Fixture::new("");
    ingest(&f, "CHOP");
    let out = f.chop(&["inspect", "--chunks"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let json_end = text.find("\n}\n").expect("summary object") + 3;
    let summary: Value = serde_json::from_str(&text[..json_end]).unwrap();
    assert_eq!(summary["dimension"], 256);
    let n = summary["chunks"].as_u64().unwrap() as usize;
    assert!(n >= 4);
    let chunk_lines: Vec<Value> = text[json_end..].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(chunk_lines.len(), n);
    assert!(chunk_lines[0]["metadata"]["cnm"]["model"] == "WM200");
    assert!(chunk_lines[n - 1]["metadata"]["cnm"]["model"] == "HX9");
}

#[test]
fn compare_writes_reports() {
    let f = Fixture::new("");
    let out = f.chop(&["compare"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("NAIVE_500T"));

    let csv = fs::read_to_string(f.path("reports/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("strategy,K,hit_rate,mrr,ndcg"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 2);
    for s in ["CHOP", "NAIVE_500T", "COSINE_CHUNKING"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{s},"))).count(), 2);
    }
    assert!(f.path("reports/report.txt").is_file());
    assert!(f.path("reports/manifest-CHOP.json").is_file());
}

#[test]
fn report_dir_flag_overrides_config() {
    let f = Fixture::new("");
    let dir = f.path("elsewhere");
    let out = f.chop(&["compare", "--report-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.join("report.csv").is_file());
    assert!(!f.path("reports").exists());
}

#[test]
fn set_overrides_apply_last() {
    let f = Fixture::new("");
    let out = f.chop(&["--set", "embedder.dimension=64", "--strategy", "naive", "ingest"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = f.chop(&["--set", "embedder.dimension=64", "inspect"]);
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["dimension"], 64);
}

#[test]
fn usage_errors_exit_1() {
    let f = Fixture::new("");
    ingest(&f, "NAIVE_500T");
    assert_eq!(code(&f.chop(&["query", "belt", "--k", "0"])), 1);
    assert_eq!(code(&f.chop(&["query", "belt", "--exact", "--ann"])), 1);
    assert_eq!(code(&f.chop(&["--set", "nonsense", "ingest"])), 1);
    assert_eq!(code(&f.chop(&["--set", "k=0", "ingest"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["ingest"])), 1, "no index configured");
}

#[test]
fn ann_search_without_graph_exits_1() {
    let f = Fixture::new("build_ann = false\n");
    ingest(&f, "NAIVE_500T");
    let out = f.chop(&["query", "belt", "--ann"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(code(&f.chop(&["query", "belt"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let f = Fixture::new("");
    fs::remove_file(f.path("corpus.jsonl")).unwrap();
    let out = f.chop(&["--strategy", "naive", "ingest"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    fs::write(f.path("corpus.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&f.chop(&["--strategy", "naive", "ingest"])), 2);
    assert_eq!(code(&f.chop(&["query", "anything"])), 2, "missing index file");
}

#[test]
fn replay_gaps_exit_3_and_keep_other_strategies() {
    let f = Fixture::new("");
    fs::write(f.path("transcript.jsonl"), "").unwrap();
    let out = f.chop(&["ingest"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!f.path("store.chop").exists());

    let out = f.chop(&["compare"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let csv = fs::read_to_string(f.path("reports/report.csv")).unwrap();
    assert!(!csv.contains("\nCHOP,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(fs::read_to_string(f.path("reports/report.txt")).unwrap().contains("CHOP failed"));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    let out = run(&["query", "--help"]);
    assert!(stdout(&out).contains("--export"));
}
