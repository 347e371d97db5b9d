//! Append-only JSON-lines manifest of the cache contents.
//!
//! Each line is either a `put` carrying a full [`CacheEntry`] or a `remove`
//! naming a relative path; replaying the lines in order yields the current
//! state. A torn final line (crash during append) is ignored, anything else
//! unparseable is corruption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CacheEntry, FetchError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const LOCK_FILE: &str = "manifest.lock";

/// Top-level directories whose files are owned by the cache.
pub(crate) const OWNED_DIRS: &[&str] = &["v1", "v2", "geometry", "relations"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Line {
    Put { entry: CacheEntry },
    Remove { path: String },
}

pub(crate) fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}

fn corrupt(root: &Path, message: impl std::fmt::Display) -> FetchError {
    FetchError::ManifestCorrupt {
        path: manifest_path(root),
        message: message.to_string(),
    }
}

/// Exclusive advisory lock on the manifest, held while writing.
pub(crate) struct ManifestLock(File);

impl ManifestLock {
    pub(crate) fn acquire(root: &Path) -> Result<Self, FetchError> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join(LOCK_FILE))
            .map_err(|e| FetchError::io(root, e))?;
        file.lock().map_err(|e| FetchError::io(root, e))?;
        Ok(ManifestLock(file))
    }
}

impl Drop for ManifestLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

pub(crate) fn read(root: &Path) -> Result<BTreeMap<String, CacheEntry>, FetchError> {
    let path = manifest_path(root);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(FetchError::io(&path, e)),
    };
    let mut entries = BTreeMap::new();
    let mut lines = BufReader::new(file).split(b'\n').peekable();
    let mut number = 0usize;
    while let Some(line) = lines.next() {
        number += 1;
        let bytes = line.map_err(|e| FetchError::io(&path, e))?;
        let is_last = lines.peek().is_none();
        if bytes.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let parsed: Line = match serde_json::from_slice(&bytes) {
            Ok(l) => l,
            // torn write from an interrupted append
            Err(_) if is_last => break,
            Err(e) => return Err(corrupt(root, format!("line {number}: {e}"))),
        };
        match parsed {
            Line::Put { mut entry } => {
                entry.local_path = root.join(&entry.descriptor.relative_cache_path);
                entries.insert(entry.descriptor.relative_cache_path.clone(), entry);
            }
            Line::Remove { path } => {
                entries.remove(&path);
            }
        }
    }
    Ok(entries)
}

fn write_line(file: &mut File, line: &Line) -> std::io::Result<()> {
    let mut buf = serde_json::to_vec(line).map_err(std::io::Error::other)?;
    buf.push(b'\n');
    file.write_all(&buf)?;
    file.sync_data()
}

pub(crate) fn append_put(root: &Path, entry: &CacheEntry) -> Result<(), FetchError> {
    let path = manifest_path(root);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| FetchError::io(&path, e))?;
    // A torn line left by a crash would glue onto ours; start fresh.
    let len = file.metadata().map_err(|e| FetchError::io(&path, e))?.len();
    if len > 0 && !ends_with_newline(&path)? {
        file.write_all(b"\n")
            .map_err(|e| FetchError::io(&path, e))?;
    }
    write_line(
        &mut file,
        &Line::Put {
            entry: entry.clone(),
        },
    )
    .map_err(|e| FetchError::io(&path, e))
}

fn ends_with_newline(path: &Path) -> Result<bool, FetchError> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path).map_err(|e| FetchError::io(path, e))?;
    f.seek(SeekFrom::End(-1))
        .map_err(|e| FetchError::io(path, e))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)
        .map_err(|e| FetchError::io(path, e))?;
    Ok(last[0] == b'\n')
}

/// Atomically replaces the manifest with exactly `entries`.
pub(crate) fn rewrite(
    root: &Path,
    entries: &BTreeMap<String, CacheEntry>,
) -> Result<(), FetchError> {
    let path = manifest_path(root);
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    let mut file = File::create(&tmp).map_err(|e| FetchError::io(&tmp, e))?;
    for entry in entries.values() {
        write_line(
            &mut file,
            &Line::Put {
                entry: entry.clone(),
            },
        )
        .map_err(|e| FetchError::io(&tmp, e))?;
    }
    file.sync_all().map_err(|e| FetchError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| FetchError::io(&path, e))?;
    Ok(())
}

pub(crate) fn is_partial(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".part") || name.ends_with(".part.json")
}

/// Files under the owned directories, relative to `root`, `/`-separated.
pub(crate) fn owned_files(root: &Path) -> Result<Vec<String>, FetchError> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for item in fs::read_dir(dir)? {
            let item = item?;
            let path = item.path();
            if item.file_type()?.is_dir() {
                walk(&path, root, out)?;
            } else if let Ok(rel) = path.strip_prefix(root) {
                let rel: Vec<_> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect();
                out.push(rel.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for dir in OWNED_DIRS {
        let d = root.join(dir);
        if d.is_dir() {
            walk(&d, root, &mut out).map_err(|e| FetchError::io(&d, e))?;
        }
    }
    out.sort();
    Ok(out)
}
