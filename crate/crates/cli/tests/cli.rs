use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use scbm_core::encoder::ConceptMatrix;
use serde_json::Value;

fn scbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scbm"))
        .args(args)
        .env_remove("SCBM_API_KEY")
        .env_remove("SCBM_BASE_URL")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2_and_domain_errors_exit_1() {
    assert_eq!(scbm(&["train"]).status.code(), Some(2));
    assert_eq!(scbm(&["no-such-command"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = scbm(&["data", "inspect", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"a\", \"label\": \"x\"}\n").unwrap();
    let out = scbm(&["data", "inspect", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[training]\nlamda = 1.0\n").unwrap();
    let m = dir.path().join("m.scbm");
    let out = scbm(&[
        "train",
        "--train",
        s(&m),
        "--labels",
        s(&m),
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn demo_is_reproducible_and_artifacts_chain() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = scbm(&["demo", "--seed", "7", "--samples", "300", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ma, mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["manifest_hash"], mb["manifest_hash"]);
    assert!(ma["outputs"].as_object().unwrap().len() >= 10);

    // The demo's artifacts feed the standalone commands.
    let ckpt = a.join("model.ckpt");
    let matrix = a.join("matrix.scbm");
    let preds = dir.path().join("preds.jsonl");
    let o = scbm(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--matrix",
        s(&matrix),
        "-k",
        "3",
        "--out",
        s(&preds),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&preds).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 300);
    for l in &lines {
        let probs: Vec<f64> = l["probs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_f64().unwrap())
            .collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(l["top"].as_array().unwrap().len(), 3);
        let idx = l["label_index"].as_u64().unwrap() as usize;
        assert_eq!(l["label"], ["hateful", "counter", "neutral"][idx]);
    }
    assert!(dir.path().join("preds.jsonl.manifest.json").exists());

    let local = scbm(&[
        "explain",
        "local",
        "--checkpoint",
        s(&ckpt),
        "--matrix",
        s(&matrix),
        "--sample-id",
        "kw-0000",
        "-k",
        "2",
    ]);
    assert!(local.status.success());
    let ex: Value = serde_json::from_slice(&local.stdout).unwrap();
    assert_eq!(ex["ranked"].as_array().unwrap().len(), 2);

    let heat = dir.path().join("g.csv");
    let labels = a.join("dataset.jsonl");
    let o = scbm(&[
        "explain",
        "global",
        "--checkpoint",
        s(&ckpt),
        "--matrix",
        s(&matrix),
        "--labels",
        s(&labels),
        "--out",
        s(&heat),
        "--top-confident",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&heat).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("g.local.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );
}

#[test]
fn predict_rejects_a_matrix_from_another_lexicon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert!(scbm(&["demo", "--samples", "60", "--out", s(&out)]).status.success());
    let m = ConceptMatrix::load(&out.join("matrix.scbm")).unwrap();
    let other = ConceptMatrix::new(
        m.values().to_vec(),
        m.adjectives().to_vec(),
        m.sample_ids().to_vec(),
        "different-lexicon",
        m.template_fingerprint(),
        m.model_id(),
    )
    .unwrap();
    let op = dir.path().join("other.scbm");
    other.save(&op).unwrap();
    let o = scbm(&[
        "predict",
        "--checkpoint",
        s(&out.join("model.ckpt")),
        "--matrix",
        s(&op),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different lexicon"));
}

#[test]
fn mock_encode_train_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(scbm(&["demo", "--samples", "150", "--seed", "2", "--out", s(&demo)])
        .status
        .success());
    let data = demo.join("dataset.jsonl");
    let lex = demo.join("lexicon.txt");
    let rules = demo.join("rules.json");
    let train_m = dir.path().join("train.scbm");
    let o = scbm(&[
        "encode",
        "--data",
        s(&data),
        "--lexicon",
        s(&lex),
        "--backend",
        "mock",
        "--rules",
        s(&rules),
        "--split",
        "train",
        "--out",
        s(&train_m),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = ConceptMatrix::load(&train_m).unwrap();
    assert_eq!(m.cols(), 30);
    assert!(m.sample_ids().len() > 90 && m.sample_ids().len() < 120);
    let manifest = read_json(&dir.path().join("train.scbm.manifest.json"));
    assert_eq!(m.manifest(), manifest["manifest_hash"].as_str());
    let cov = read_json(&dir.path().join("train.scbm.coverage.json"));
    assert_eq!(cov["cells"].as_u64(), Some((m.rows() * 30) as u64));
    assert_eq!(cov["below_threshold"], 0);

    let run = dir.path().join("run");
    let o = scbm(&[
        "train",
        "--train",
        s(&train_m),
        "--labels",
        s(&data),
        "--repeats",
        "2",
        "--epochs",
        "40",
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "model.ckpt",
        "training_log.json",
        "metrics.json",
        "repeats.json",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let flagged = read_json(&run.join("training_log.json"))["non_paper_choices"].clone();
    assert!(flagged.as_array().unwrap().iter().any(|v| v == "batch_size"));
    assert!(flagged.as_array().unwrap().iter().any(|v| v == "epochs"));
    let rep = read_json(&run.join("repeats.json"));
    assert_eq!(rep["runs"].as_array().unwrap().len(), 2);
    assert_eq!(rep["runs"][1]["seed"], 1);
}

/// Minimal HTTP/1.1 server answering chat completions with a fixed
/// distribution: "Yes" gets 0.7 when the prompt mentions "angry", else 0.2.
fn stub_server() -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (h, a) = (hits.clone(), auth.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let (h, a) = (h.clone(), a.clone());
            std::thread::spawn(move || serve(stream, &h, &a));
        }
    });
    (format!("http://{addr}/v1"), hits, auth)
}

fn serve(stream: TcpStream, hits: &AtomicUsize, auth: &Mutex<Vec<String>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if lower.starts_with("authorization:") {
                auth.lock().unwrap().push(line.to_string());
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        hits.fetch_add(1, Ordering::SeqCst);
        let req: Value = serde_json::from_slice(&body).unwrap();
        assert!(request_line.starts_with("POST /v1/chat/completions"));
        assert_eq!(req["max_tokens"], 1);
        let user = req["messages"].as_array().unwrap().last().unwrap()["content"]
            .as_str()
            .unwrap()
            .to_string();
        let p: f64 = if user.contains("\"angry\"") { 0.7 } else { 0.2 };
        let resp = serde_json::json!({
            "choices": [{"logprobs": {"content": [{"token": "Yes", "logprob": p.ln(), "top_logprobs": [
                {"token": "Yes", "logprob": p.ln()},
                {"token": "No", "logprob": (1.0 - p).ln()}
            ]}]}}]
        })
        .to_string();
        write!(
            writer,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{resp}",
            resp.len()
        )
        .unwrap();
    }
}

#[test]
fn http_backend_against_local_stub() {
    let (base, hits, auth) = stub_server();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(
        &data,
        "{\"id\":\"a\",\"text\":\"first text\",\"label\":\"x\"}\n{\"id\":\"b\",\"text\":\"second text\",\"label\":\"y\"}\n",
    )
    .unwrap();
    let lex = dir.path().join("lex.txt");
    std::fs::write(&lex, "angry\ncalm\n").unwrap();
    let out = dir.path().join("m.scbm");
    let o = Command::new(env!("CARGO_BIN_EXE_scbm"))
        .args([
            "encode",
            "--data",
            s(&data),
            "--lexicon",
            s(&lex),
            "--backend",
            "http",
            "--model",
            "llama-3.1-8b",
        ])
        .args(["--out", s(&out), "--max-attempts", "1"])
        .env("SCBM_BASE_URL", &base)
        .env("SCBM_API_KEY", "test-key")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    assert!(auth.lock().unwrap().iter().all(|h| h.ends_with("Bearer test-key")));
    let m = ConceptMatrix::load(&out).unwrap();
    assert_eq!(m.model_id(), "llama-3.1-8b");
    for r in 0..2 {
        assert!((m.get(r, 0) - 0.7).abs() < 1e-6);
        assert!((m.get(r, 1) - 0.2).abs() < 1e-6);
    }
    // The key never reaches the manifest.
    let manifest = std::fs::read_to_string(dir.path().join("m.scbm.manifest.json")).unwrap();
    assert!(!manifest.contains("test-key"));
    let cov = read_json(&dir.path().join("m.scbm.coverage.json"));
    assert!((cov["min"].as_f64().unwrap() - 1.0).abs() < 1e-6);

    // A second run is served from the cache.
    let o = Command::new(env!("CARGO_BIN_EXE_scbm"))
        .args([
            "encode",
            "--data",
            s(&data),
            "--lexicon",
            s(&lex),
            "--backend",
            "http",
            "--model",
            "llama-3.1-8b",
        ])
        .args(["--out", s(&out), "--base-url", &base])
        .env_remove("SCBM_API_KEY")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn prompt_render_shows_prefix_and_suffix() {
    let o = scbm(&[
        "prompt",
        "render",
        "--adjective",
        "calm",
        "--text",
        "It rains.",
        "--chat",
        "llama2",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[INST]"));
    assert!(text.contains("--- suffix ---\ncalm\""));
    assert_eq!(
        scbm(&["prompt", "render", "--adjective", "a", "--text", "b", "--chat", "gpt"])
            .status
            .code(),
        Some(1)
    );
}
