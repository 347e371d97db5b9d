//! Downloads catalog resources into a local cache.
//!
//! Layout: `<cache_root>/<relative_cache_path>` for every file plus
//! `<cache_root>/manifest.jsonl`. A file is written as `<name>.part` and only
//! renamed into place once complete and verified, so readers never see a
//! partial download. Interrupted transfers keep their `.part` file and resume
//! with an HTTP `Range` request when the server supports it.

pub mod clock;
mod manifest;
pub mod transport;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{CatalogConfig, ChecksumMode, ResourceDescriptor};
use crate::model::DatasetVersion;

pub use clock::{Clock, FixedClock, SystemClock};
pub use manifest::MANIFEST_FILE;
pub use transport::{HttpResponse, OfflineTransport, Transport, TransportError, UreqTransport};

pub const CACHE_ENV: &str = "SPAINMOB_CACHE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchPolicy {
    pub max_concurrent: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub publication_delay_days: u32,
    pub offline_mode: bool,
    /// Revalidate cache hits with `If-None-Match` / `If-Modified-Since`.
    pub revalidate: bool,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            max_concurrent: 4,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_cap_ms: 60_000,
            publication_delay_days: 4,
            offline_mode: false,
            revalidate: false,
        }
    }
}

impl FetchPolicy {
    /// Full-jitter exponential backoff for the given retry number (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let exp = self
            .backoff_base_ms
            .saturating_mul(1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX));
        let ceiling = exp.min(self.backoff_cap_ms);
        Duration::from_millis(rand::random_range(0..=ceiling))
    }

    /// Latest day the portal is expected to have published.
    pub fn last_published_day(&self, today: NaiveDate) -> NaiveDate {
        today - chrono::Duration::days(self.publication_delay_days as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Validator {
    ETag(String),
    LastModified(String),
}

impl Validator {
    fn from_response(resp: &HttpResponse) -> Option<Self> {
        if let Some(tag) = resp.header("etag") {
            return Some(Validator::ETag(tag.to_string()));
        }
        resp.header("last-modified")
            .map(|v| Validator::LastModified(v.to_string()))
    }

    fn value(&self) -> &str {
        match self {
            Validator::ETag(v) | Validator::LastModified(v) => v,
        }
    }

    fn conditional_header(&self) -> (String, String) {
        match self {
            Validator::ETag(v) => ("If-None-Match".into(), v.clone()),
            Validator::LastModified(v) => ("If-Modified-Since".into(), v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub descriptor: ResourceDescriptor,
    pub local_path: PathBuf,
    pub size_bytes: u64,
    pub digest: Option<String>,
    pub fetched_at: DateTime<Utc>,
    pub validator: Option<Validator>,
}

impl CacheEntry {
    /// Re-checks size (and digest, when recorded) against the file on disk.
    pub fn verify(&self) -> Result<(), FetchError> {
        let meta =
            fs::metadata(&self.local_path).map_err(|e| FetchError::io(&self.local_path, e))?;
        if meta.len() != self.size_bytes {
            return Err(FetchError::IntegrityError {
                url: self.descriptor.url.clone(),
                expected: self.size_bytes.to_string(),
                actual: meta.len().to_string(),
            });
        }
        if let Some(expected) = &self.digest {
            let actual = sha256_file(&self.local_path)?;
            if &actual != expected {
                return Err(FetchError::IntegrityError {
                    url: self.descriptor.url.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("data for {day} is not published yet (the portal lags {delay_days} days)")]
    NotYetPublished { day: NaiveDate, delay_days: u32 },
    #[error("{}", http_message(*.status, .url, .message))]
    HttpError {
        status: Option<u16>,
        url: String,
        message: String,
    },
    #[error("integrity check failed for {url}: expected {expected}, got {actual}")]
    IntegrityError {
        url: String,
        expected: String,
        actual: String,
    },
    #[error("offline mode: {} is not cached", .0.relative_cache_path)]
    OfflineMiss(Box<ResourceDescriptor>),
    #[error("{} of {} downloads failed; first failure: {}", .failed.len(), .failed.len() + .succeeded.len(), first_failure(.failed))]
    PartialFailure {
        succeeded: Vec<CacheEntry>,
        failed: Vec<(ResourceDescriptor, FetchError)>,
    },
    #[error("cache manifest {} is corrupt: {message}", .path.display())]
    ManifestCorrupt { path: PathBuf, message: String },
    #[error("i/o error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

fn http_message(status: Option<u16>, url: &str, message: &str) -> String {
    match status {
        Some(code) => format!("HTTP {code} for {url}"),
        None => format!("request to {url} failed: {message}"),
    }
}

fn first_failure(failed: &[(ResourceDescriptor, FetchError)]) -> String {
    failed
        .first()
        .map(|(d, e)| match d.day {
            Some(day) => format!("{day}: {e}"),
            None => e.to_string(),
        })
        .unwrap_or_default()
}

impl FetchError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FetchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when the failure came from the network side.
    pub fn is_network(&self) -> bool {
        match self {
            FetchError::HttpError { .. }
            | FetchError::NotYetPublished { .. }
            | FetchError::OfflineMiss(_) => true,
            FetchError::PartialFailure { failed, .. } => failed.iter().all(|(_, e)| e.is_network()),
            _ => false,
        }
    }
}

/// Handle on one cache root. All writers in this process share the manifest
/// through it; other processes are serialized by a lock file.
pub struct Cache {
    root: PathBuf,
    entries: Mutex<BTreeMap<String, CacheEntry>>,
    path_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Cache {
    /// Opens (creating if needed) a cache root and reconciles it with its
    /// manifest: entries whose file is gone or has the wrong size are
    /// dropped, completed files without an entry are deleted.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, FetchError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| FetchError::io(&root, e))?;
        let _lock = manifest::ManifestLock::acquire(&root)?;
        let mut entries = manifest::read(&root)?;
        let before = entries.len();
        entries.retain(|rel, entry| {
            let ok = fs::metadata(root.join(rel)).is_ok_and(|m| m.len() == entry.size_bytes);
            if !ok {
                warn!("dropping stale cache entry {rel}");
            }
            ok
        });
        let mut changed = entries.len() != before;
        for rel in manifest::owned_files(&root)? {
            let path = root.join(&rel);
            if !entries.contains_key(&rel) && !manifest::is_partial(&path) {
                warn!("removing unrecorded cache file {rel}");
                fs::remove_file(&path).map_err(|e| FetchError::io(&path, e))?;
                changed = true;
            }
        }
        if changed {
            manifest::rewrite(&root, &entries)?;
        }
        Ok(Cache {
            root,
            entries: Mutex::new(entries),
            path_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, relative_path: &str) -> Option<CacheEntry> {
        self.entries.lock().unwrap().get(relative_path).cloned()
    }

    pub fn entries(&self) -> Vec<CacheEntry> {
        self.entries.lock().unwrap().values().cloned().collect()
    }

    fn path_lock(&self, relative_path: &str) -> Arc<Mutex<()>> {
        self.path_locks
            .lock()
            .unwrap()
            .entry(relative_path.to_string())
            .or_default()
            .clone()
    }

    fn record(&self, entry: CacheEntry) -> Result<(), FetchError> {
        let mut entries = self.entries.lock().unwrap();
        let _lock = manifest::ManifestLock::acquire(&self.root)?;
        manifest::append_put(&self.root, &entry)?;
        entries.insert(entry.descriptor.relative_cache_path.clone(), entry);
        Ok(())
    }

    fn forget(&self, relative_path: &str) -> Result<(), FetchError> {
        let mut entries = self.entries.lock().unwrap();
        if entries.remove(relative_path).is_some() {
            let _lock = manifest::ManifestLock::acquire(&self.root)?;
            manifest::rewrite(&self.root, &entries)?;
        }
        Ok(())
    }

    /// Removes matching entries: the manifest is rewritten first, then the
    /// files are deleted.
    pub fn purge(
        &self,
        now: DateTime<Utc>,
        older_than: Option<chrono::Duration>,
        version: Option<DatasetVersion>,
    ) -> Result<usize, FetchError> {
        let mut entries = self.entries.lock().unwrap();
        let _lock = manifest::ManifestLock::acquire(&self.root)?;
        let matches = |e: &CacheEntry| {
            older_than.is_none_or(|age| e.fetched_at <= now - age)
                && version.is_none_or(|v| e.descriptor.version == Some(v))
        };
        let removed: Vec<CacheEntry> = entries.values().filter(|e| matches(e)).cloned().collect();
        if removed.is_empty() {
            return Ok(0);
        }
        let kept: BTreeMap<String, CacheEntry> = entries
            .iter()
            .filter(|(_, e)| !matches(e))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        manifest::rewrite(&self.root, &kept)?;
        *entries = kept;
        for entry in &removed {
            match fs::remove_file(&entry.local_path) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(FetchError::io(&entry.local_path, e)),
            }
        }
        Ok(removed.len())
    }
}

/// Bookkeeping stored next to a `.part` file so a later run can resume it.
#[derive(Debug, Serialize, Deserialize)]
struct PartialMeta {
    url: String,
    validator: Validator,
}

enum AttemptOutcome {
    Completed {
        size: u64,
        validator: Option<Validator>,
    },
    NotModified,
}

enum AttemptError {
    Retryable(FetchError),
    Fatal(FetchError),
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn sha256_file(path: &Path) -> Result<String, FetchError> {
    let mut file = File::open(path).map_err(|e| FetchError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| FetchError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn remove_if_exists(path: &Path) {
    if let Err(e) = fs::remove_file(path) {
        if e.kind() != io::ErrorKind::NotFound {
            warn!("could not remove {}: {e}", path.display());
        }
    }
}

pub struct Fetcher {
    policy: FetchPolicy,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    checksum_mode: ChecksumMode,
    pinned_digests: BTreeMap<String, String>,
}

impl Fetcher {
    pub fn new(policy: FetchPolicy) -> Self {
        let transport: Arc<dyn Transport> = if policy.offline_mode {
            Arc::new(OfflineTransport)
        } else {
            Arc::new(UreqTransport::new())
        };
        Fetcher {
            policy,
            transport,
            clock: Arc::new(SystemClock),
            checksum_mode: ChecksumMode::SizeOnly,
            pinned_digests: BTreeMap::new(),
        }
    }

    /// Fetcher using the catalog's integrity settings.
    pub fn for_catalog(policy: FetchPolicy, catalog: &CatalogConfig) -> Self {
        Fetcher::new(policy).with_integrity(catalog.checksum_mode, catalog.pinned_digests.clone())
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_integrity(mut self, mode: ChecksumMode, pinned: BTreeMap<String, String>) -> Self {
        self.checksum_mode = mode;
        self.pinned_digests = pinned;
        self
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    /// Makes `descriptor` available in the cache and returns its entry.
    pub fn fetch(
        &self,
        cache: &Cache,
        descriptor: &ResourceDescriptor,
    ) -> Result<CacheEntry, FetchError> {
        if let Some(day) = descriptor.day {
            if day > self.policy.last_published_day(self.clock.today()) {
                return Err(FetchError::NotYetPublished {
                    day,
                    delay_days: self.policy.publication_delay_days,
                });
            }
        }
        let rel = &descriptor.relative_cache_path;
        let path_lock = cache.path_lock(rel);
        let _guard = path_lock.lock().unwrap();

        let cached = cache
            .get(rel)
            .filter(|e| e.descriptor.url == descriptor.url);
        if let Some(entry) = &cached {
            if !self.policy.revalidate || self.policy.offline_mode || entry.validator.is_none() {
                debug!("cache hit {rel}");
                return Ok(entry.clone());
            }
        }
        if self.policy.offline_mode {
            return Err(FetchError::OfflineMiss(Box::new(descriptor.clone())));
        }
        self.download(cache, descriptor, cached)
    }

    /// Fetches every descriptor with at most `max_concurrent` transfers in
    /// flight. Entries come back in input order. All descriptors are
    /// attempted; failures are collected into [`FetchError::PartialFailure`].
    pub fn fetch_all(
        &self,
        cache: &Cache,
        descriptors: &[ResourceDescriptor],
    ) -> Result<Vec<CacheEntry>, FetchError> {
        let slots: Vec<Mutex<Option<Result<CacheEntry, FetchError>>>> =
            descriptors.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.policy.max_concurrent.max(1).min(descriptors.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(descriptor) = descriptors.get(i) else {
                        break;
                    };
                    let result = self.fetch(cache, descriptor);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        let mut succeeded = Vec::new();
        let mut failed = Vec::new();
        for (descriptor, slot) in descriptors.iter().zip(slots) {
            match slot.into_inner().unwrap().expect("every slot is filled") {
                Ok(entry) => succeeded.push(entry),
                Err(e) => failed.push((descriptor.clone(), e)),
            }
        }
        if failed.is_empty() {
            Ok(succeeded)
        } else {
            Err(FetchError::PartialFailure { succeeded, failed })
        }
    }

    fn download(
        &self,
        cache: &Cache,
        descriptor: &ResourceDescriptor,
        cached: Option<CacheEntry>,
    ) -> Result<CacheEntry, FetchError> {
        let final_path = cache.root().join(&descriptor.relative_cache_path);
        if let Some(parent) = final_path.parent() {
            fs::create_dir_all(parent).map_err(|e| FetchError::io(parent, e))?;
        }
        let part = with_suffix(&final_path, ".part");
        let meta = with_suffix(&final_path, ".part.json");
        let mut conditional = cached
            .as_ref()
            .and_then(|e| e.validator.as_ref())
            .map(Validator::conditional_header);

        let mut retry = 0;
        let (size, validator) = loop {
            match self.attempt(descriptor, &part, &meta, conditional.take()) {
                Ok(AttemptOutcome::NotModified) => {
                    let entry = cached.expect("conditional requests only happen on cache hits");
                    debug!("{} not modified", descriptor.relative_cache_path);
                    return Ok(entry);
                }
                Ok(AttemptOutcome::Completed { size, validator }) => break (size, validator),
                Err(AttemptError::Fatal(e)) => {
                    remove_if_exists(&part);
                    remove_if_exists(&meta);
                    return Err(e);
                }
                Err(AttemptError::Retryable(e)) => {
                    if retry >= self.policy.max_retries {
                        return Err(e);
                    }
                    let wait = self.policy.backoff(retry);
                    warn!("{e}; retrying in {} ms", wait.as_millis());
                    std::thread::sleep(wait);
                    retry += 1;
                }
            }
        };

        let digest = if self.checksum_mode == ChecksumMode::Digest {
            let actual = sha256_file(&part)?;
            if let Some(expected) = self.pinned_digests.get(&descriptor.url) {
                if !expected.eq_ignore_ascii_case(&actual) {
                    remove_if_exists(&part);
                    remove_if_exists(&meta);
                    return Err(FetchError::IntegrityError {
                        url: descriptor.url.clone(),
                        expected: expected.clone(),
                        actual,
                    });
                }
            }
            Some(actual)
        } else {
            None
        };

        if cached.is_some() {
            cache.forget(&descriptor.relative_cache_path)?;
        }
        fs::rename(&part, &final_path).map_err(|e| FetchError::io(&final_path, e))?;
        remove_if_exists(&meta);
        let entry = CacheEntry {
            descriptor: descriptor.clone(),
            local_path: final_path,
            size_bytes: size,
            digest,
            fetched_at: self.clock.now(),
            validator,
        };
        cache.record(entry.clone())?;
        info!(
            "fetched {} ({} bytes)",
            descriptor.relative_cache_path, size
        );
        Ok(entry)
    }

    fn attempt(
        &self,
        descriptor: &ResourceDescriptor,
        part: &Path,
        meta: &Path,
        conditional: Option<(String, String)>,
    ) -> Result<AttemptOutcome, AttemptError> {
        let url = &descriptor.url;
        let existing = fs::metadata(part).map(|m| m.len()).unwrap_or(0);
        let resume = if existing > 0 && conditional.is_none() {
            fs::read(meta)
                .ok()
                .and_then(|b| serde_json::from_slice::<PartialMeta>(&b).ok())
                .filter(|m| &m.url == url)
        } else {
            None
        };
        let mut headers = Vec::new();
        if let Some(m) = &resume {
            headers.push(("Range".to_string(), format!("bytes={existing}-")));
            headers.push(("If-Range".to_string(), m.validator.value().to_string()));
        }
        headers.extend(conditional.clone());

        let resp = self.transport.get(url, &headers).map_err(|e| {
            AttemptError::Retryable(FetchError::HttpError {
                status: None,
                url: url.clone(),
                message: e.message,
            })
        })?;
        let http_error = |status: u16| FetchError::HttpError {
            status: Some(status),
            url: url.clone(),
            message: String::new(),
        };

        let (offset, expected_total) = match resp.status {
            304 if conditional.is_some() => return Ok(AttemptOutcome::NotModified),
            200 => (0, resp.content_length()),
            206 if resume.is_some() => match resp.content_range() {
                Some((first, _, total)) if first == existing => (existing, total),
                _ => {
                    remove_if_exists(part);
                    remove_if_exists(meta);
                    return Err(AttemptError::Retryable(http_error(206)));
                }
            },
            416 => {
                remove_if_exists(part);
                remove_if_exists(meta);
                return Err(AttemptError::Retryable(http_error(416)));
            }
            s @ (408 | 429 | 500..=599) => return Err(AttemptError::Retryable(http_error(s))),
            s => return Err(AttemptError::Fatal(http_error(s))),
        };

        let validator = Validator::from_response(&resp);
        let ranges = resp
            .header("accept-ranges")
            .is_some_and(|v| v.to_ascii_lowercase().contains("bytes"));
        match (&validator, ranges) {
            (Some(v), true) => {
                let record = PartialMeta {
                    url: url.clone(),
                    validator: v.clone(),
                };
                fs::write(meta, serde_json::to_vec(&record).unwrap())
                    .map_err(|e| AttemptError::Fatal(FetchError::io(meta, e)))?;
            }
            _ => remove_if_exists(meta),
        }

        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(offset > 0)
            .truncate(offset == 0)
            .open(part)
            .map_err(|e| AttemptError::Fatal(FetchError::io(part, e)))?;
        let mut writer = BufWriter::new(file);
        let mut body = resp.body;
        let copied = io::copy(&mut body, &mut writer);
        let flushed = writer
            .into_inner()
            .map_err(|e| e.into_error())
            .and_then(|f| f.sync_data());
        if let Err(e) = flushed {
            return Err(AttemptError::Fatal(FetchError::io(part, e)));
        }
        if let Err(e) = copied {
            return Err(AttemptError::Retryable(FetchError::HttpError {
                status: None,
                url: url.clone(),
                message: format!("body interrupted: {e}"),
            }));
        }

        let size = fs::metadata(part)
            .map_err(|e| AttemptError::Fatal(FetchError::io(part, e)))?
            .len();
        if self.checksum_mode != ChecksumMode::None {
            if let Some(expected) = expected_total {
                if size != expected {
                    let err = FetchError::IntegrityError {
                        url: url.clone(),
                        expected: format!("{expected} bytes"),
                        actual: format!("{size} bytes"),
                    };
                    return Err(if size < expected {
                        AttemptError::Retryable(err)
                    } else {
                        AttemptError::Fatal(err)
                    });
                }
            }
        }
        Ok(AttemptOutcome::Completed { size, validator })
    }
}

/// Fetches one descriptor with the default transport and system clock.
pub fn fetch(
    descriptor: &ResourceDescriptor,
    policy: &FetchPolicy,
    cache_root: &Path,
) -> Result<CacheEntry, FetchError> {
    let cache = Cache::open(cache_root)?;
    Fetcher::new(policy.clone()).fetch(&cache, descriptor)
}

pub fn fetch_all(
    descriptors: &[ResourceDescriptor],
    policy: &FetchPolicy,
    cache_root: &Path,
) -> Result<Vec<CacheEntry>, FetchError> {
    let cache = Cache::open(cache_root)?;
    Fetcher::new(policy.clone()).fetch_all(&cache, descriptors)
}

/// Removes cache entries fetched at least `older_than` ago (all when `None`),
/// optionally restricted to one dataset version.
pub fn purge(
    cache_root: &Path,
    older_than: Option<chrono::Duration>,
    version: Option<DatasetVersion>,
) -> Result<usize, FetchError> {
    Cache::open(cache_root)?.purge(Utc::now(), older_than, version)
}
