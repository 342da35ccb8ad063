#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

pub const EPOCH: &str = "1700000000";
pub const GOLDEN_FILES: &[&str] = &[
    "model.json",
    "report.jsonl",
    "datasheet.md",
    "datasheet.json",
    "cloud_annotations.svg",
    "cloud_captions.svg",
    "cloud_chi2.svg",
];

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens").join(name)
}

pub fn embeddings() -> PathBuf {
    fixture("fixture.meta.json")
}

pub fn q16(args: &[&str]) -> Output {
    q16_env(args, &[])
}

pub fn q16_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_q16"));
    cmd.args(args).env_remove("Q16_SEED").env("SOURCE_DATE_EPOCH", EPOCH);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn q16")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn check(out: &Output) {
    assert!(
        out.status.success(),
        "q16 failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// train → scan → document on the bundled fixture into `out`.
pub fn pipeline(out: &Path) {
    let o = p(out);
    let emb = embeddings();
    check(&q16(&[
        "train",
        "--embeddings",
        p(&emb),
        "--ratings",
        p(&fixture("ratings.jsonl")),
        "--out-dir",
        o,
    ]));
    let model = out.join("model.json");
    check(&q16(&[
        "scan",
        "--embeddings",
        p(&emb),
        "--model",
        p(&model),
        "--dataset-name",
        "fixture",
        "--out-dir",
        o,
    ]));
    let report = out.join("report.jsonl");
    check(&q16(&[
        "document",
        "--report",
        p(&report),
        "--annotations",
        p(&fixture("annotations.jsonl")),
        "--captions",
        p(&fixture("captions.jsonl")),
        "--out-dir",
        o,
    ]));
}

/// Compares pipeline outputs in `out` against the goldens; with
/// `Q16_BLESS=1` the goldens are rewritten instead. Returns mismatching files.
pub fn compare_goldens(out: &Path) -> Vec<String> {
    let bless = std::env::var("Q16_BLESS").is_ok_and(|v| v == "1");
    let mut bad = Vec::new();
    for name in GOLDEN_FILES {
        let actual = std::fs::read(out.join(name)).unwrap_or_default();
        if bless {
            std::fs::write(golden(name), &actual).expect("bless golden");
            continue;
        }
        if std::fs::read(golden(name)).ok().as_deref() != Some(actual.as_slice()) {
            bad.push(name.to_string());
        }
    }
    bad
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .new_agent()
}

pub fn get_json(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut resp = agent.get(url).call().expect("GET");
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap_or(Value::Null))
}

pub fn post_json(agent: &ureq::Agent, url: &str, body: &Value) -> (u16, Value) {
    let mut resp = agent.post(url).send_json(body).expect("POST");
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap_or(Value::Null))
}

/// A `q16 serve` child process bound to an ephemeral port.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn spawn(report: &Path, decisions: &Path) -> Server {
        let mut child = Command::new(env!("CARGO_BIN_EXE_q16"))
            .args([
                "serve",
                "--report",
                p(report),
                "--decisions",
                p(decisions),
                "--annotations",
                p(&fixture("annotations.jsonl")),
                "--captions",
                p(&fixture("captions.jsonl")),
                "--bind",
                "127.0.0.1:0",
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn q16 serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .expect("read bound address");
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected serve output {line:?}"))
            .to_string();
        Server { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// SIGKILL, no graceful shutdown.
    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
