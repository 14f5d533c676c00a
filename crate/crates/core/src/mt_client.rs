//! Blocking client for an HTTP machine-translation service with retries and
//! a content-addressed on-disk cache.
//!
//! Wire format: `POST` a JSON [`TranslationRequest`] with
//! `Authorization: Bearer <key>`, expect `200` with a [`TranslationResponse`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree};

pub const API_KEY_ENV: &str = "MT_API_KEY";
pub const MAX_TEXT_BYTES: usize = 4096;

/// A secret that never prints.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    fn expose(&self) -> &str {
        &self.0
    }

    fn scrub(&self, text: &str) -> String {
        if self.0.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.0, "[redacted]")
        }
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey([redacted])")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MtDecodeMode {
    Nucleus { p: f64 },
    Beam { width: usize },
}

impl Default for MtDecodeMode {
    fn default() -> Self {
        MtDecodeMode::Nucleus { p: 0.9 }
    }
}

impl fmt::Display for MtDecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MtDecodeMode::Nucleus { p } => write!(f, "nucleus({p})"),
            MtDecodeMode::Beam { width } => write!(f, "beam({width})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// source language to pivot
    Forward,
    /// pivot back to source language
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub forward_url: String,
    pub backward_url: String,
    pub source_lang: String,
    pub pivot_lang: String,
    pub api_key: ApiKey,
    pub decode_mode: MtDecodeMode,
    pub batch_size: usize,
    pub retry: RetryPolicy,
    pub cache_dir: PathBuf,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub seed: u64,
}

impl ClientConfig {
    /// Both directions served by `endpoint`; English to German and back.
    pub fn new(endpoint: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        let url = endpoint.into();
        Self {
            forward_url: url.clone(),
            backward_url: url,
            source_lang: "en".into(),
            pivot_lang: "de".into(),
            api_key: ApiKey::default(),
            decode_mode: MtDecodeMode::default(),
            batch_size: 32,
            retry: RetryPolicy::default(),
            cache_dir: cache_dir.into(),
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        match self.decode_mode {
            MtDecodeMode::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("nucleus p must be in (0, 1], got {p}")))
            }
            MtDecodeMode::Beam { width: 0 } => Err(Error::Config("beam width must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub texts: Vec<String>,
    pub source_lang: String,
    pub target_lang: String,
    pub decode_mode: MtDecodeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationResponse {
    pub translations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable across threads; at most `max_in_flight` requests run at once.
pub struct TranslationClient {
    config: ClientConfig,
    agent: ureq::Agent,
    slots: Slots,
    requests: AtomicU64,
    jitter: Mutex<Rng>,
}

impl fmt::Debug for TranslationClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TranslationClient").field("config", &self.config).finish_non_exhaustive()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl TranslationClient {
    /// Builds a client; a non-empty `MT_API_KEY` environment variable replaces the configured key.
    pub fn new(mut config: ClientConfig) -> Result<Self> {
        config.validate()?;
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                config.api_key = ApiKey::new(key);
            }
        }
        fs::create_dir_all(&config.cache_dir).map_err(|e| Error::io(&config.cache_dir, e))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let jitter = Mutex::new(SeedTree::new(config.seed).child("mt-backoff").rng());
        let slots = Slots {
            used: Mutex::new(0),
            freed: Condvar::new(),
            limit: config.max_in_flight,
        };
        Ok(Self {
            config,
            agent,
            slots,
            requests: AtomicU64::new(0),
            jitter,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Cache key: lowercase hex SHA-256 over direction, decode mode and text.
    pub fn cache_key(&self, text: &str, direction: Direction) -> String {
        let (src, tgt) = self.langs(direction);
        let mut h = Sha256::new();
        for part in [src, tgt, &self.config.decode_mode.to_string(), text] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn langs(&self, direction: Direction) -> (&str, &str) {
        let c = &self.config;
        match direction {
            Direction::Forward => (&c.source_lang, &c.pivot_lang),
            Direction::Backward => (&c.pivot_lang, &c.source_lang),
        }
    }

    /// Translations aligned with `texts`. Cached entries are reused; misses
    /// are sent in chunks of `batch_size` and cached before returning.
    pub fn translate_batch(&self, texts: &[String], direction: Direction) -> Result<Vec<String>> {
        if texts.is_empty() {
            return Err(Error::Data("translate_batch needs at least one text".into()));
        }
        if let Some((i, t)) = texts.iter().enumerate().find(|(_, t)| t.len() > MAX_TEXT_BYTES) {
            return Err(Error::Data(format!("text {i} is {} bytes (limit {MAX_TEXT_BYTES})", t.len())));
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t, direction)).collect();
        let mut out: Vec<Option<String>> = keys.iter().map(|k| self.cache_get(k)).collect::<Result<_>>()?;
        let mut missing: Vec<usize> = Vec::new();
        for i in 0..texts.len() {
            if out[i].is_none() && !missing.iter().any(|&j| keys[j] == keys[i]) {
                missing.push(i);
            }
        }
        for chunk in missing.chunks(self.config.batch_size) {
            let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let translated = self.send(&batch, direction)?;
            for (&i, t) in chunk.iter().zip(translated) {
                self.cache_put(&keys[i], &t)?;
                out[i] = Some(t);
            }
        }
        for i in 0..texts.len() {
            if out[i].is_none() {
                let j = missing.iter().copied().find(|&j| keys[j] == keys[i]).expect("duplicate of a translated text");
                out[i] = out[j].clone();
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every text translated")).collect())
    }

    fn send(&self, texts: &[String], direction: Direction) -> Result<Vec<String>> {
        let (src, tgt) = self.langs(direction);
        let url = match direction {
            Direction::Forward => &self.config.forward_url,
            Direction::Backward => &self.config.backward_url,
        };
        let body = serde_json::to_vec(&TranslationRequest {
            texts: texts.to_vec(),
            source_lang: src.to_string(),
            target_lang: tgt.to_string(),
            decode_mode: self.config.decode_mode,
        })
        .map_err(|e| Error::Protocol(e.to_string()))?;
        let policy = self.config.retry;
        let mut last = String::new();
        for attempt in 0..policy.max_attempts {
            if attempt > 0 {
                let cap = policy.base_backoff.as_secs_f64() * 2f64.powi(attempt as i32 - 1);
                let wait = self.jitter.lock().unwrap_or_else(|e| e.into_inner()).random::<f64>() * cap;
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
            match self.attempt(url, &body, texts.len()) {
                Ok(t) => return Ok(t),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(detail)) => {
                    log::warn!("translation request to {url} failed (attempt {}): {detail}", attempt + 1);
                    last = detail;
                }
            }
        }
        Err(Error::Transport {
            attempts: policy.max_attempts,
            detail: last,
        })
    }

    fn attempt(&self, url: &str, body: &[u8], expected: usize) -> std::result::Result<Vec<String>, Attempt> {
        let key = &self.config.api_key;
        let _slot = self.slots.acquire();
        self.requests.fetch_add(1, Ordering::SeqCst);
        log::debug!("POST {url} with {expected} texts");
        let mut req = self.agent.post(url).content_type("application/json");
        if !key.expose().is_empty() {
            req = req.header("Authorization", format!("Bearer {}", key.expose()));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retry(key.scrub(&e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if status == 429 || (500..600).contains(&status) {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status != 200 {
            let detail: String = key.scrub(&text).chars().take(200).collect();
            return Err(Attempt::Fatal(Error::Client { status, detail }));
        }
        let parsed: TranslationResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("bad response body: {e}"))))?;
        if parsed.translations.len() != expected {
            return Err(Attempt::Fatal(Error::Protocol(format!(
                "sent {expected} texts, received {} translations",
                parsed.translations.len()
            ))));
        }
        Ok(parsed.translations)
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.config.cache_dir.join(key)
    }

    fn cache_get(&self, key: &str) -> Result<Option<String>> {
        let path = self.cache_path(key);
        match fs::read_to_string(&path) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn cache_put(&self, key: &str, text: &str) -> Result<()> {
        let path = self.cache_path(key);
        let tmp = self.config.cache_dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::io(&path, e))
    }

    pub fn cache_stats(&self) -> Result<CacheStats> {
        cache_stats(&self.config.cache_dir)
    }
}

/// Counts cache entries (hex-named files) and their total size.
pub fn cache_stats(dir: &Path) -> Result<CacheStats> {
    let mut stats = CacheStats::default();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let is_key = name.to_str().is_some_and(|n| n.len() == 64 && n.bytes().all(|b| b.is_ascii_hexdigit()));
        let meta = entry.metadata().map_err(|e| Error::io(entry.path(), e))?;
        if is_key && meta.is_file() {
            stats.entries += 1;
            stats.bytes += meta.len();
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_is_redacted_in_debug_output() {
        let mut cfg = ClientConfig::new("http://127.0.0.1:9", "/tmp/unused");
        cfg.api_key = ApiKey::new("sk-very-secret");
        let shown = format!("{cfg:?}");
        assert!(!shown.contains("sk-very-secret"));
        assert_eq!(cfg.api_key.scrub("x sk-very-secret y"), "x [redacted] y");
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let base = ClientConfig::new("http://127.0.0.1:9", dir.path());
        base.validate().unwrap();
        assert!(ClientConfig { batch_size: 0, ..base.clone() }.validate().is_err());
        let mut bad = base.clone();
        bad.retry.max_attempts = 0;
        assert!(bad.validate().is_err());
        let bad = ClientConfig { decode_mode: MtDecodeMode::Nucleus { p: 0.0 }, ..base.clone() };
        assert!(bad.validate().is_err());
        let bad = ClientConfig { decode_mode: MtDecodeMode::Beam { width: 0 }, ..base };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cache_keys_depend_on_direction_and_mode() {
        let dir = tempfile::tempdir().unwrap();
        let c = TranslationClient::new(ClientConfig::new("http://127.0.0.1:9", dir.path())).unwrap();
        let k = c.cache_key("hello", Direction::Forward);
        assert_eq!(k.len(), 64);
        assert!(k.chars().all(|ch| ch.is_ascii_hexdigit() && !ch.is_ascii_uppercase()));
        assert_ne!(k, c.cache_key("hello", Direction::Backward));
        let mut cfg = c.config().clone();
        cfg.decode_mode = MtDecodeMode::Beam { width: 4 };
        let beam = TranslationClient::new(cfg).unwrap();
        assert_ne!(k, beam.cache_key("hello", Direction::Forward));
    }

    #[test]
    fn oversized_and_empty_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = TranslationClient::new(ClientConfig::new("http://127.0.0.1:9", dir.path())).unwrap();
        assert!(matches!(c.translate_batch(&[], Direction::Forward), Err(Error::Data(_))));
        let big = "a".repeat(MAX_TEXT_BYTES + 1);
        assert!(matches!(c.translate_batch(&[big], Direction::Forward), Err(Error::Data(_))));
        assert_eq!(c.requests_sent(), 0);
        assert_eq!(c.cache_stats().unwrap(), CacheStats::default());
    }
}
