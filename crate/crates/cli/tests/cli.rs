use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reinvoke"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(m: u32) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let tools = [
            ("book_flight", "book airline flight tickets airport departure boarding"),
            ("find_restaurant", "restaurant reviews cuisine dinner reservation menu"),
            ("weather_forecast", "forecast temperature rain wind humidity"),
        ];
        let corpus: String = tools
            .iter()
            .map(|(id, d)| format!("{{\"doc_id\":\"{id}\",\"name\":\"{id}\",\"description\":\"{d}\"}}\n"))
            .collect();
        fs::write(dir.path().join("tools.jsonl"), corpus).unwrap();
        fs::write(
            dir.path().join("queries.jsonl"),
            concat!(
                "{\"query_id\":\"q1\",\"query\":\"My trip is soon. [[book an airline flight]] and [[dinner reservation at a restaurant]]\",\"relevant_ids\":[\"book_flight\",\"find_restaurant\"]}\n",
                "{\"query_id\":\"q2\",\"query\":\"[[rain forecast]]\",\"relevant_ids\":[\"weather_forecast\"]}\n",
                "{\"query_id\":\"q3\",\"query\":\"[[something else]]\",\"relevant_ids\":[\"not_a_tool\"]}\n",
            ),
        )
        .unwrap();
        let config = dir.path().join("reinvoke.toml");
        fs::write(
            &config,
            format!(
                "corpus = \"tools.jsonl\"\ndataset = \"queries.jsonl\"\nwork_dir = \"work\"\nm = {m}\n\n[generation]\nprovider = \"mock\"\n"
            ),
        )
        .unwrap();
        Self { dir, config }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        bin().arg("--config").arg(&self.config).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn find_file(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == name) {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

#[test]
fn normalize_writes_canonical_jsonl() {
    let ws = Workspace::new(2);
    let out = ws.ok(&["normalize"]);
    assert!(out.contains("wrote 3 documents"));
    assert!(out.contains("corpus hash:"));
    let text = fs::read_to_string(ws.path().join("work/corpus.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    // Normalizing the normalized corpus is a fixed point.
    let again = ws.path().join("again.jsonl");
    ws.ok(&["normalize", "--corpus", ws.path().join("work/corpus.jsonl").to_str().unwrap(), "-o", again.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(again).unwrap(), text);
}

#[test]
fn expand_is_idempotent_and_incremental() {
    let ws = Workspace::new(2);
    let out = ws.ok(&["expand"]);
    assert!(out.contains("6 generated, 0 already present"), "{out}");
    let files = find_file(&ws.path().join("work"), "expansions.jsonl");
    assert_eq!(files.len(), 1);
    assert_eq!(fs::read_to_string(&files[0]).unwrap().lines().count(), 6);

    let out = ws.ok(&["expand"]);
    assert!(out.contains("0 generated, 6 already present"), "{out}");

    let out = ws.ok(&["expand", "-m", "3"]);
    assert!(out.contains("3 generated, 6 already present"), "{out}");
    assert_eq!(fs::read_to_string(&files[0]).unwrap().lines().count(), 9);
}

#[test]
fn full_pipeline_and_explain() {
    let ws = Workspace::new(2);
    ws.ok(&["expand"]);
    let out = ws.ok(&["index"]);
    assert!(out.contains("reinvoke:") && out.contains("raw-bm25:"), "{out}");
    assert!(out.contains("aggregation mean"));
    assert!(out.contains("corpus hash:"));

    let out = ws.ok(&["retrieve"]);
    assert!(out.contains("retrieved 2 queries (1 excluded"), "{out}");
    assert!(out.contains("reinvoke.run") && out.contains("bm25.run"));

    let out = ws.ok(&["evaluate"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].contains("excluded: 1"), "{out}");
    assert!(lines[1].starts_with("method") && lines[1].contains("ndcg@5"));

    let out = ws.ok(&["retrieve", "--query", "hello [[book an airline flight]] [[restaurant dinner]]", "--explain"]);
    assert!(out.contains("intent 1: book an airline flight"), "{out}");
    assert!(out.contains("intent 2: restaurant dinner"), "{out}");
    let ranking: Vec<&str> = out.lines().skip_while(|l| *l != "ranking:").skip(1).take(2).collect();
    assert!(ranking.iter().any(|l| l.contains("book_flight")));
    assert!(ranking.iter().any(|l| l.contains("find_restaurant")));

    let out = ws.ok(&["roundtrip"]);
    assert!(out.contains("roundtrip_recall@1"), "{out}");
}

#[test]
fn method_flag_produces_separate_run_files() {
    let ws = Workspace::new(0);
    ws.ok(&["index", "--methods", "reinvoke,bm25"]);
    let out = ws.ok(&["retrieve", "--methods", "reinvoke,bm25"]);
    let runs: Vec<PathBuf> = out
        .lines()
        .filter_map(|l| l.split_once(": ").map(|(_, p)| PathBuf::from(p)))
        .filter(|p| p.extension().is_some_and(|e| e == "run"))
        .collect();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        assert!(r.exists());
    }
    let out = ws.ok(&["evaluate", runs[0].to_str().unwrap(), runs[1].to_str().unwrap()]);
    assert!(out.contains("reinvoke") && out.contains("bm25"));
}

#[test]
fn k_larger_than_corpus_is_clamped_with_warning() {
    let ws = Workspace::new(0);
    ws.ok(&["index"]);
    let out = ws.run(&["retrieve", "--query", "rain", "-k", "50", "--methods", "bm25"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("exceeds"), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count(), 3);
}

#[test]
fn missing_run_file_fails_clearly() {
    let ws = Workspace::new(0);
    let out = ws.run(&["evaluate", "missing.run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run file not found: missing.run"));
}

#[test]
fn roundtrip_without_expansion_fails() {
    let ws = Workspace::new(2);
    let out = ws.run(&["roundtrip"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `expand` first"));
}

#[test]
fn corrupted_index_fails() {
    let ws = Workspace::new(0);
    ws.ok(&["index", "--methods", "bm25"]);
    let vectors = find_file(&ws.path().join("work"), "vectors.bin");
    assert_eq!(vectors.len(), 1);
    let mut bytes = fs::read(&vectors[0]).unwrap();
    bytes[20] ^= 0x55;
    fs::write(&vectors[0], bytes).unwrap();
    let out = ws.run(&["retrieve", "--methods", "bm25"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn generation_failure_exits_nonzero() {
    let ws = Workspace::new(2);
    fs::write(
        &ws.config,
        "corpus = \"tools.jsonl\"\nwork_dir = \"work\"\nm = 2\nmax_retries = 0\n\n[generation]\nprovider = \"http\"\nbase_url = \"http://127.0.0.1:9\"\nmodel = \"none\"\ntimeout_secs = 2\n",
    )
    .unwrap();
    let out = ws.run(&["expand"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("book_flight"), "{}", stderr(&out));
}

#[test]
fn bad_config_is_reported() {
    let ws = Workspace::new(2);
    fs::write(&ws.config, "corpus = \"tools.jsonl\"\nunknown_key = 1\n").unwrap();
    let out = ws.run(&["normalize"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown_key"), "{}", stderr(&out));
}
