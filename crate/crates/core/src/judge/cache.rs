//! Digest-keyed, append-only judgment cache.
//!
//! Records live in `cache.jsonl` inside the cache directory, one per line:
//! `{"key": <sha256 hex>, "task": "relevance"|"nli"|"generate", "value": ...}`.
//! The key is the digest of the canonical JSON of the full input tuple
//! (backend identity, task, inputs, vote count). When two writers race on the
//! same key the first persisted record wins and both callers get its value.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{GenerationRequest, Generator, Judge, JudgeError};
use crate::types::{NliDist, PersonaStatement, RelevanceDist};

pub const CACHE_FILE_NAME: &str = "cache.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Task {
    Relevance,
    Nli,
    Generate,
}

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    task: Task,
    value: Value,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    character: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    statement: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    votes: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    generation: Option<&'a GenerationRequest>,
}

impl KeyMaterial<'_> {
    fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("key material serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn decode_value(task: Task, value: &Value) -> Result<(), String> {
    match task {
        Task::Relevance => decode_relevance(value).map(drop),
        Task::Nli => decode_nli(value).map(drop),
        Task::Generate => decode_generation(value).map(drop),
    }
}

fn decode_relevance(value: &Value) -> Result<RelevanceDist, String> {
    let p = value.as_f64().ok_or("relevance value is not a number")?;
    RelevanceDist::new(p).map_err(|e| e.to_string())
}

fn decode_nli(value: &Value) -> Result<NliDist, String> {
    let p: [f64; 3] =
        serde_json::from_value(value.clone()).map_err(|_| "nli value is not [e, n, c]")?;
    NliDist::new(p[0], p[1], p[2]).map_err(|e| e.to_string())
}

fn decode_generation(value: &Value) -> Result<Vec<String>, String> {
    serde_json::from_value(value.clone())
        .map_err(|_| "generate value is not a list of strings".into())
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    /// Lookups that went through to the inner backend.
    pub misses: u64,
}

struct Store {
    entries: HashMap<String, (Task, Value, usize)>,
    file: File,
    lines: usize,
}

/// Caching wrapper around a [`Judge`] and/or [`Generator`].
pub struct Cached<B> {
    inner: B,
    path: PathBuf,
    store: Mutex<Store>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B> Cached<B> {
    /// Opens (or creates) the cache in `cache_dir`, validating every existing
    /// record.
    pub fn open(inner: B, cache_dir: &Path) -> Result<Self, JudgeError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| JudgeError::CacheIo { path, source }
        };
        fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
        let path = cache_dir.join(CACHE_FILE_NAME);
        let mut entries = HashMap::new();
        let mut lines = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                lines = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| JudgeError::CacheCorrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason,
                };
                let record: Record =
                    serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                if record.key.len() != 64 || !record.key.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(corrupt(format!("malformed key {:?}", record.key)));
                }
                decode_value(record.task, &record.value)
                    .map_err(|reason| corrupt(format!("record {}: {reason}", record.key)))?;
                entries
                    .entry(record.key)
                    .or_insert((record.task, record.value, i + 1));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            inner,
            path,
            store: Mutex::new(Store {
                entries,
                file,
                lines,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.store.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, key: &str, task: Task) -> Result<Option<Value>, JudgeError> {
        let store = self.store.lock().unwrap();
        match store.entries.get(key) {
            Some((stored, value, _)) if *stored == task => Ok(Some(value.clone())),
            Some((stored, _, line)) => Err(JudgeError::CacheCorrupt {
                path: self.path.display().to_string(),
                line: *line,
                reason: format!("record {key} has task {stored:?}, expected {task:?}"),
            }),
            None => Ok(None),
        }
    }

    /// Persists `value` unless another writer got there first; returns the
    /// value that is now on disk.
    fn persist(&self, key: String, task: Task, value: Value) -> Result<Value, JudgeError> {
        let mut store = self.store.lock().unwrap();
        if let Some((_, existing, _)) = store.entries.get(&key) {
            return Ok(existing.clone());
        }
        let line = serde_json::to_string(&Record {
            key: key.clone(),
            task,
            value: value.clone(),
        })
        .expect("record serializes");
        let io_err = |source| JudgeError::CacheIo {
            path: self.path.display().to_string(),
            source,
        };
        writeln!(store.file, "{line}").map_err(io_err)?;
        store.file.flush().map_err(io_err)?;
        store.lines += 1;
        let line_no = store.lines;
        store.entries.insert(key, (task, value.clone(), line_no));
        Ok(value)
    }

    fn through<T>(
        &self,
        material: KeyMaterial<'_>,
        compute: impl FnOnce() -> Result<T, JudgeError>,
        encode: impl FnOnce(&T) -> Value,
        decode: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<T, JudgeError> {
        let task = material.task;
        let key = material.digest();
        let corrupt = |key: &str, reason: String| JudgeError::CacheCorrupt {
            path: self.path.display().to_string(),
            line: 0,
            reason: format!("record {key}: {reason}"),
        };
        if let Some(value) = self.lookup(&key, task)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return decode(&value).map_err(|r| corrupt(&key, r));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let fresh = compute()?;
        let stored = self.persist(key.clone(), task, encode(&fresh))?;
        decode(&stored).map_err(|r| corrupt(&key, r))
    }
}

impl<B: Judge> Judge for Cached<B> {
    fn identity(&self) -> String {
        format!("cached({})", self.inner.identity())
    }

    fn votes_per_judgment(&self) -> u32 {
        self.inner.votes_per_judgment()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn judge_relevance(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        let backend = self.inner.identity();
        let material = KeyMaterial {
            backend: &backend,
            task: Task::Relevance,
            character: Some(character),
            statement: Some(statement.text()),
            query: Some(query),
            response: None,
            votes: self.inner.votes_per_judgment(),
            generation: None,
        };
        self.through(
            material,
            || self.inner.judge_relevance(character, statement, query),
            |d| Value::from(d.p_relevant()),
            decode_relevance,
        )
    }

    fn judge_nli(
        &self,
        character: &str,
        statement: &PersonaStatement,
        query: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        let backend = self.inner.identity();
        let material = KeyMaterial {
            backend: &backend,
            task: Task::Nli,
            character: Some(character),
            statement: Some(statement.text()),
            query: Some(query),
            response: Some(response),
            votes: self.inner.votes_per_judgment(),
            generation: None,
        };
        self.through(
            material,
            || self.inner.judge_nli(character, statement, query, response),
            |d| serde_json::to_value(d.as_array()).expect("array serializes"),
            decode_nli,
        )
    }
}

impl<B: Generator> Generator for Cached<B> {
    fn identity(&self) -> String {
        format!("cached({})", self.inner.identity())
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
        let backend = self.inner.identity();
        let material = KeyMaterial {
            backend: &backend,
            task: Task::Generate,
            character: None,
            statement: None,
            query: None,
            response: None,
            votes: 1,
            generation: Some(request),
        };
        self.through(
            material,
            || self.inner.generate_text(request),
            |v| serde_json::to_value(v).expect("strings serialize"),
            decode_generation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{OracleJudge, OracleTable};
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    /// Counts inner calls; relevance depends on the query length so
    /// different inputs give different values.
    #[derive(Default)]
    struct Counting {
        calls: AtomicUsize,
    }

    impl Judge for Counting {
        fn identity(&self) -> String {
            "counting".into()
        }
        fn judge_relevance(
            &self,
            _: &str,
            _: &PersonaStatement,
            query: &str,
        ) -> Result<RelevanceDist, JudgeError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            Ok(RelevanceDist::new(1.0 / (1 + query.len()) as f64)?)
        }
        fn judge_nli(
            &self,
            _: &str,
            _: &PersonaStatement,
            _: &str,
            response: &str,
        ) -> Result<NliDist, JudgeError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let e = 1.0 / (2 + response.len()) as f64;
            Ok(NliDist::new(e, 1.0 - e, 0.0)?)
        }
    }

    impl Generator for Counting {
        fn identity(&self) -> String {
            "counting".into()
        }
        fn generate_text(&self, request: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
            let c = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok((0..request.n).map(|i| format!("{c}-{i}")).collect())
        }
    }

    fn stmt() -> PersonaStatement {
        PersonaStatement::new(0, "s").unwrap()
    }

    #[test]
    fn hit_skips_inner_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Cached::open(Counting::default(), dir.path()).unwrap();
        let a = cached.judge_nli("c", &stmt(), "q", "r").unwrap();
        let b = cached.judge_nli("c", &stmt(), "q", "r").unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 1);
        assert_eq!(cached.stats(), CacheStats { hits: 1, misses: 1 });
    }

    #[test]
    fn changed_response_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Cached::open(Counting::default(), dir.path()).unwrap();
        cached.judge_nli("c", &stmt(), "q", "r").unwrap();
        cached.judge_nli("c", &stmt(), "q", "r2").unwrap();
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn survives_reopen_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let first = {
            let cached = Cached::open(Counting::default(), dir.path()).unwrap();
            cached.judge_relevance("c", &stmt(), "abc").unwrap()
        };
        let cached = Cached::open(Counting::default(), dir.path()).unwrap();
        let again = cached.judge_relevance("c", &stmt(), "abc").unwrap();
        assert_eq!(first.p_relevant().to_bits(), again.p_relevant().to_bits());
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn concurrent_identical_calls_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Arc::new(Cached::open(Counting::default(), dir.path()).unwrap());
        let req = GenerationRequest::new("p", 1.0, 2);
        let results: Vec<Vec<String>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..2)
                .map(|_| {
                    let cached = cached.clone();
                    let req = req.clone();
                    s.spawn(move || cached.generate_text(&req).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results[0], results[1]);
        assert!(cached.inner().calls.load(Ordering::SeqCst) <= 2);
        assert_eq!(cached.len(), 1);
    }

    #[test]
    fn draw_index_separates_samples() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Cached::open(Counting::default(), dir.path()).unwrap();
        let a = cached
            .generate_text(&GenerationRequest::new("p", 1.0, 1))
            .unwrap();
        let b = cached
            .generate_text(&GenerationRequest::new("p", 1.0, 1).with_draw(1))
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn corrupt_record_is_named() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cached = Cached::open(Counting::default(), dir.path()).unwrap();
            cached.judge_relevance("c", &stmt(), "q").unwrap();
        }
        let path = dir.path().join(CACHE_FILE_NAME);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str(&format!(
            "{{\"key\": \"{}\", \"task\": \"nli\", \"value\": [0.5, 0.9, 0.0]}}\n",
            "ab".repeat(32)
        ));
        fs::write(&path, text).unwrap();
        let err = Cached::open(Counting::default(), dir.path()).err().unwrap();
        match err {
            JudgeError::CacheCorrupt { line, reason, .. } => {
                assert_eq!(line, 2);
                assert!(reason.contains(&"ab".repeat(32)), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            Cached::open(Counting::default(), dir.path()),
            Err(JudgeError::CacheCorrupt { line: 1, .. })
        ));
    }

    #[test]
    fn oracle_errors_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Cached::open(OracleJudge::new(OracleTable::new()), dir.path()).unwrap();
        assert!(cached.judge_relevance("c", &stmt(), "q").is_err());
        assert!(cached.is_empty());
    }

    #[test]
    fn records_follow_the_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cached = Cached::open(Counting::default(), dir.path()).unwrap();
        cached.judge_nli("c", &stmt(), "q", "rr").unwrap();
        let text = fs::read_to_string(dir.path().join(CACHE_FILE_NAME)).unwrap();
        let v: Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["task"], "nli");
        assert_eq!(v["key"].as_str().unwrap().len(), 64);
        assert_eq!(v["value"], serde_json::json!([0.25, 0.75, 0.0]));
    }
}
