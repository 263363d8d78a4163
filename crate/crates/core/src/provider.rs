//! Caption embedding sources.
//!
//! [`FileEmbedder`] looks captions up in a precomputed [`EmbeddingTable`];
//! [`HttpEmbedder`] calls a remote service speaking
//!
//! ```text
//! POST {endpoint}/embed   {"texts": [..]}  ->  {"dim": D, "embeddings": [[..], ..]}
//! ```
//!
//! and keeps every vector it receives in a cache keyed by the SHA-256 of the
//! caption. Both return raw, unnormalized vectors in request order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::EmbeddingTable;

/// Cache and table key for a caption: lowercase hex SHA-256 of its UTF-8 bytes.
pub fn caption_key(text: &str) -> String {
    io::sha256_hex(text)
}

pub trait TextEmbedder: Send {
    /// One vector per input text, in input order.
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>>;

    /// Persists cached vectors, if the embedder keeps any.
    fn cache_flush(&mut self) -> Result<()> {
        Ok(())
    }
}

fn check_texts(texts: &[String]) -> Result<()> {
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(Error::InvalidParams("cannot embed an empty caption".into()));
    }
    Ok(())
}

/// Serves vectors from a table whose rows are keyed by [`caption_key`] or,
/// failing that, by the caption text itself.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    table: EmbeddingTable,
}

impl FileEmbedder {
    pub fn new(table: EmbeddingTable) -> Self {
        Self { table }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(io::load_embeddings(path)?))
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

impl TextEmbedder for FileEmbedder {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        check_texts(texts)?;
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(&caption_key(t))
                    .or_else(|| self.table.get(t))
                    .map(<[f32]>::to_vec)
                    .ok_or_else(|| Error::MissingEmbedding(t.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL; `/embed` is appended.
    pub endpoint: String,
    pub batch_size: usize,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Extra attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            batch_size: 64,
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

/// HTTP-backed embedder with a write-through cache.
pub struct HttpEmbedder {
    config: HttpConfig,
    agent: ureq::Agent,
    dim: Option<usize>,
    cache: HashMap<String, Vec<f32>>,
    cache_path: Option<PathBuf>,
    requests: AtomicUsize,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig, cache_path: Option<PathBuf>) -> Result<Self> {
        if config.batch_size == 0 || config.max_in_flight == 0 {
            return Err(Error::InvalidParams(
                "batch_size and max_in_flight must be positive".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut embedder = Self {
            config,
            agent,
            dim: None,
            cache: HashMap::new(),
            cache_path,
            requests: AtomicUsize::new(0),
        };
        if let Some(path) = embedder.cache_path.as_ref().filter(|p| p.exists()) {
            let table = io::load_embeddings(path)?;
            if !table.is_empty() {
                embedder.dim = Some(table.dim());
            }
            for (id, v) in table.iter() {
                embedder.cache.insert(id.to_string(), v.to_vec());
            }
        }
        Ok(embedder)
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    fn url(&self) -> String {
        format!("{}/embed", self.config.endpoint.trim_end_matches('/'))
    }

    fn request_once(
        &self,
        url: &str,
        texts: &[&str],
    ) -> std::result::Result<Vec<Vec<f32>>, Attempt> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut response = self
            .agent
            .post(url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        match status {
            200 => {}
            400..=499 => {
                let message = response.body_mut().read_to_string().unwrap_or_default();
                return Err(Attempt::Fatal(Error::ServiceRejected { status, message }));
            }
            500..=599 => return Err(Attempt::Retry(format!("status {status}"))),
            _ => {
                return Err(Attempt::Fatal(Error::ServiceUnavailable(format!(
                    "unexpected status {status}"
                ))))
            }
        }
        let parsed: EmbedResponse = response
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_json()
            .map_err(|e| {
                Attempt::Fatal(Error::ServiceUnavailable(format!(
                    "malformed response: {e}"
                )))
            })?;
        if parsed.embeddings.len() != texts.len() {
            return Err(Attempt::Fatal(Error::ServiceUnavailable(format!(
                "{} embeddings returned for {} texts",
                parsed.embeddings.len(),
                texts.len()
            ))));
        }
        if let Some(row) = parsed.embeddings.iter().find(|r| r.len() != parsed.dim) {
            return Err(Attempt::Fatal(Error::DimensionMismatch {
                expected: parsed.dim,
                found: row.len(),
            }));
        }
        Ok(parsed.embeddings)
    }

    fn request_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let url = self.url();
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.request_once(&url, texts) {
                Ok(rows) => return Ok(rows),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    if attempt >= self.config.retries {
                        return Err(Error::ServiceUnavailable(format!(
                            "{url}: {reason} after {} attempts",
                            attempt + 1
                        )));
                    }
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    /// Fetches `batches` with at most `max_in_flight` requests outstanding.
    /// Results are indexed by batch, not by completion order. After the
    /// first failure no new batch is started; those slots stay `None`.
    fn fetch_all(&self, batches: &[Vec<&str>]) -> Vec<Option<BatchResult>> {
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let slots: Mutex<Vec<Option<BatchResult>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let workers = self.config.max_in_flight.min(batches.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= batches.len() {
                        break;
                    }
                    let result = self.request_batch(&batches[i]);
                    if result.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    slots.lock().expect("results lock")[i] = Some(result);
                });
            }
        });
        slots.into_inner().expect("results lock")
    }
}

type BatchResult = Result<Vec<Vec<f32>>>;

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl TextEmbedder for HttpEmbedder {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        check_texts(texts)?;
        let keys: Vec<String> = texts.iter().map(|t| caption_key(t)).collect();

        let mut pending: Vec<(&str, &str)> = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (text, key) in texts.iter().zip(&keys) {
            if !self.cache.contains_key(key) && queued.insert(key.as_str()) {
                pending.push((text, key));
            }
        }

        if !pending.is_empty() {
            let batches: Vec<Vec<&str>> = pending
                .chunks(self.config.batch_size)
                .map(|chunk| chunk.iter().map(|(t, _)| *t).collect())
                .collect();
            // completed batches are cached even when a later one fails
            let mut first_error = None;
            let mut fetched = Vec::new();
            for (chunk, slot) in pending
                .chunks(self.config.batch_size)
                .zip(self.fetch_all(&batches))
            {
                match slot {
                    Some(Ok(rows)) => fetched.extend(chunk.iter().zip(rows)),
                    Some(Err(e)) => {
                        first_error.get_or_insert(e);
                    }
                    None => {}
                }
            }
            for ((_, key), vector) in fetched {
                let expected = *self.dim.get_or_insert(vector.len());
                if vector.len() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        found: vector.len(),
                    });
                }
                if vector.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite((*key).to_string()));
                }
                self.cache.insert((*key).to_string(), vector);
            }
            if let Some(e) = first_error {
                return Err(e);
            }
        }

        Ok(keys.iter().map(|k| self.cache[k].clone()).collect())
    }

    fn cache_flush(&mut self) -> Result<()> {
        let path = self.cache_path.as_ref().ok_or(Error::CacheNotConfigured)?;
        let mut keys: Vec<&String> = self.cache.keys().collect();
        keys.sort();
        let mut table = EmbeddingTable::new(self.dim.unwrap_or(0));
        for key in keys {
            table.insert(key.clone(), &self.cache[key])?;
        }
        io::save_embeddings(path, &table)
    }
}

/// Where embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderConfig {
    File {
        table_path: PathBuf,
    },
    Http {
        config: HttpConfig,
        cache_path: Option<PathBuf>,
    },
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        Ok(match self {
            ProviderConfig::File { table_path } => Box::new(FileEmbedder::open(table_path)?),
            ProviderConfig::Http { config, cache_path } => {
                Box::new(HttpEmbedder::new(config.clone(), cache_path.clone())?)
            }
        })
    }
}
