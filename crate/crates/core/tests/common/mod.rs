#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// What the fake chat endpoint does with one connection.
#[derive(Clone, Debug)]
pub enum Behavior {
    Reply { status: u16, body: String },
    /// Reads the request, then says nothing for this long.
    Hang(Duration),
    /// Closes the socket without answering.
    Close,
}

/// Ollama-shaped success body.
pub fn chat_reply(content: &str) -> Behavior {
    let body = serde_json::json!({"model": "fake", "message": {"role": "assistant", "content": content}, "done": true});
    Behavior::Reply { status: 200, body: body.to_string() }
}

/// Local HTTP server that replays a script of behaviors, one per
/// connection, cycling when it runs out.
pub struct FakeEndpoint {
    pub url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

impl FakeEndpoint {
    pub fn start(script: Vec<Behavior>) -> Self {
        assert!(!script.is_empty());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/api/chat", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = h.fetch_add(1, Ordering::SeqCst);
                let behavior = script[n % script.len()].clone();
                let b = b.clone();
                std::thread::spawn(move || serve(stream, behavior, &b));
            }
        });
        Self { url, hits, bodies }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn request_bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, behavior: Behavior, bodies: &Mutex<Vec<String>>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    bodies.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
    let mut stream = stream;
    match behavior {
        Behavior::Reply { status, body } => {
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(body.as_bytes());
            let _ = stream.flush();
        }
        Behavior::Hang(d) => std::thread::sleep(d),
        Behavior::Close => {}
    }
}

/// Small model and data sizes so CLI runs take seconds.
pub const SMALL_CONFIG: &str = r#"
[synth]
n_low = 100
n_high = 20
length_range = [40, 80]
noise_std = 1.0
non_preston_gain = 5.0
seed = 1

[data]
pretrain_frac = 0.5

[model]
seq_len = 32
patch_len = 8
stride = 4
d_model = 8
n_heads = 2
n_layers = 2
ffn_dim = 16
head_dims = [16]

[train]
max_epochs = 5
"#;

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{SMALL_CONFIG}\n{extra}")).unwrap();
    path
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI binary with no endpoint overrides inherited from the caller.
pub fn cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_patchhint"))
        .args(args)
        .env_remove("PATCHHINT_LLM_URL")
        .env_remove("PATCHHINT_LLM_MODEL")
        .output()
        .unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn cli_ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert_eq!(out.code, 0, "{args:?} failed: {}", out.stderr);
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth + pretrain into `dir/data` and `dir/pre`; returns (runs.csv, model.ckpt).
pub fn prepared(dir: &Path, config: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let pre = dir.join("pre");
    cli_ok(&["synth", "--config", s(config), "--out", s(&data)]);
    let runs = data.join("runs.csv");
    cli_ok(&["pretrain", "--config", s(config), "--data", s(&runs), "--out", s(&pre)]);
    (runs, pre.join("model.ckpt"))
}
