//! Recorded chat exchanges, for deterministic replay of a live backend.
//!
//! A recording is a JSONL file of [`Exchange`] lines. Replay matches each
//! incoming request against the recorded requests in file order; once every
//! matching exchange has been served, the last one is served again.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::chat::{ChatRequest, ChatResponse, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Response(ChatResponse),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: ChatRequest,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl Exchange {
    pub fn ok(request: ChatRequest, response: ChatResponse) -> Self {
        Self {
            request,
            outcome: Outcome::Response(response),
        }
    }
}

struct ReplayState {
    served: Vec<bool>,
    requests: Vec<ChatRequest>,
}

pub struct ReplayTransport {
    exchanges: Vec<Exchange>,
    state: Mutex<ReplayState>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        let served = vec![false; exchanges.len()];
        Self {
            exchanges,
            state: Mutex::new(ReplayState {
                served,
                requests: Vec::new(),
            }),
        }
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut exchanges = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            exchanges.push(ex);
        }
        Ok(Self::new(exchanges))
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        let matching: Vec<usize> = self
            .exchanges
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.request == *request)
            .map(|(i, _)| i)
            .collect();
        let Some(&last) = matching.last() else {
            return Err(TransportError(format!(
                "no recorded exchange for request to model {:?} (n={})",
                request.model, request.n
            )));
        };
        let pick = matching
            .iter()
            .copied()
            .find(|i| !state.served[*i])
            .unwrap_or(last);
        state.served[pick] = true;
        match &self.exchanges[pick].outcome {
            Outcome::Response(r) => Ok(r.clone()),
            Outcome::Error(e) => Err(TransportError(e.clone())),
        }
    }
}

/// Wraps a live transport and appends every exchange to a JSONL file.
pub struct RecordingTransport<T> {
    inner: T,
    sink: Mutex<File>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, path: &Path) -> std::io::Result<Self> {
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            sink: Mutex::new(sink),
        })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let result = self.inner.send(request);
        let outcome = match &result {
            Ok(r) => Outcome::Response(r.clone()),
            Err(e) => Outcome::Error(e.0.clone()),
        };
        let line = serde_json::to_string(&Exchange {
            request: request.clone(),
            outcome,
        })
        .expect("exchange serializes");
        let mut sink = self.sink.lock().unwrap();
        writeln!(sink, "{line}").map_err(|e| TransportError(format!("recording: {e}")))?;
        result
    }
}
