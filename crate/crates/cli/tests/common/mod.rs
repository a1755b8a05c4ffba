//! Shared helpers for driving the `apc` binary.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn apc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apc"))
        .args(args)
        .env_remove("APC_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Deterministic stand-in for a chat-completion server.
///
/// Judgments follow keyword rules so expected scores can be worked out by
/// hand: statements mentioning "biologist" are relevant to every query and
/// entail responses that mention "biologist" or "coral"; statements
/// mentioning "car" are contradicted by responses mentioning "car".
/// Everything else is irrelevant and neutral.
pub struct MockChat {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl MockChat {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let counter = counter.clone();
                thread::spawn(move || serve(stream, &counter));
            }
        });
        Self { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, hits: &AtomicUsize) {
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
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        hits.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = if request_line.contains("/v1/chat/completions") {
            let request: Value = serde_json::from_slice(&body).unwrap();
            ("200 OK", respond(&request).to_string())
        } else {
            ("404 Not Found", "{}".to_owned())
        };
        let head = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        );
        if writer.write_all(head.as_bytes()).is_err()
            || writer.write_all(payload.as_bytes()).is_err()
        {
            return;
        }
    }
}

fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    prompt
        .split_once(header)
        .map(|(_, rest)| rest.trim_start().lines().next().unwrap_or(""))
        .unwrap_or("")
}

fn respond(request: &Value) -> Value {
    let prompt = request["messages"][0]["content"].as_str().unwrap();
    let n = request["n"].as_u64().unwrap_or(1) as usize;
    let contents: Vec<String> = (0..n).map(|i| complete(prompt, i)).collect();
    json!({
        "choices": contents
            .iter()
            .enumerate()
            .map(|(i, c)| json!({"index": i, "message": {"role": "assistant", "content": c}}))
            .collect::<Vec<_>>()
    })
}

fn complete(prompt: &str, i: usize) -> String {
    if prompt.starts_with("You are checking a role-play character sheet") {
        let statement = section(prompt, "Persona statement:");
        let label = if statement.contains("biologist") {
            "Relevant"
        } else {
            "irrelevant"
        };
        format!("Verdict follows. {{\"label\": \"{label}\"}}")
    } else if prompt.starts_with("You are checking a role-play response") {
        let statement = section(prompt, "Persona statement:");
        let response = prompt
            .split_once("Response given as")
            .and_then(|(_, r)| r.lines().nth(1))
            .unwrap_or("");
        let label = if statement.contains("biologist")
            && (response.contains("biologist") || response.contains("coral"))
        {
            "ENTAILED"
        } else if statement.contains("car") && response.contains(" car") {
            "contradicted"
        } else {
            "neutral"
        };
        format!("{{\"label\": \"{label}\"}}")
    } else if prompt.starts_with("Here is one fact about the character") {
        let statement = section(prompt, ":");
        format!("Question {i} about \"{statement}\"?")
    } else if prompt.starts_with("You are role-playing as") {
        let query = section(prompt, "User:");
        match (query.contains("work"), i) {
            (true, 0) => "I am a biologist who studies coral reefs.".into(),
            (true, _) => "I drive my car to the office.".into(),
            (false, 0) => "I read novels.".into(),
            (false, _) => "I go hiking.".into(),
        }
    } else if prompt.starts_with("You are ") {
        let query = section(prompt, "Question:");
        let kind = if prompt.contains("contradicts the fact") {
            "contradicting"
        } else if prompt.contains("follows from the fact") {
            "following"
        } else {
            "sidestepping"
        };
        format!("A reply {kind} the fact, for: {query}")
    } else {
        String::new()
    }
}
