//! A small HTTP/1.1 file server for tests, standing in for the open-data
//! portal. Serves an in-memory file tree and records what clients did.
//!
//! Supported behaviours: per-path failure injection (`503` N times),
//! truncated bodies, stalls after a byte count, fixed latency, `ETag`,
//! `Last-Modified` and single `Range: bytes=N-` requests with `If-Range`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

const LAST_MODIFIED: &str = "Mon, 21 Mar 2022 06:00:00 GMT";

#[derive(Default)]
struct Faults {
    fail: HashMap<String, u32>,
    truncate: HashMap<String, (usize, u32)>,
    stall: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestLog {
    pub path: String,
    pub range: Option<String>,
    pub status: u16,
}

#[derive(Default)]
struct State {
    files: Mutex<BTreeMap<String, Vec<u8>>>,
    faults: Mutex<Faults>,
    log: Mutex<Vec<RequestLog>>,
    latency_ms: AtomicUsize,
    active: AtomicUsize,
    max_active: AtomicUsize,
    shutdown: AtomicBool,
    ranges_enabled: AtomicBool,
}

pub struct MockPortal {
    addr: SocketAddr,
    state: Arc<State>,
    accept: Option<JoinHandle<()>>,
}

fn etag_of(body: &[u8]) -> String {
    // FNV-1a; stable and cheap, only needs to change when content changes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in body {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("\"{h:016x}-{}\"", body.len())
}

impl MockPortal {
    /// Starts serving on an ephemeral localhost port.
    pub fn start() -> MockPortal {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock portal");
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(State::default());
        state.ranges_enabled.store(true, Ordering::SeqCst);
        let accept_state = state.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let st = accept_state.clone();
                std::thread::spawn(move || {
                    let _ = handle(stream, &st);
                });
            }
        });
        MockPortal {
            addr,
            state,
            accept: Some(accept),
        }
    }

    /// `http://127.0.0.1:<port>`, no trailing slash.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url(), path.trim_start_matches('/'))
    }

    pub fn add_file(&self, path: &str, body: impl Into<Vec<u8>>) {
        self.state
            .files
            .lock()
            .unwrap()
            .insert(normalize(path), body.into());
    }

    pub fn remove_file(&self, path: &str) {
        self.state.files.lock().unwrap().remove(&normalize(path));
    }

    /// Answers the next `times` requests for `path` with `503`.
    pub fn fail_next(&self, path: &str, times: u32) {
        self.state
            .faults
            .lock()
            .unwrap()
            .fail
            .insert(normalize(path), times);
    }

    /// Closes the connection after `bytes` body bytes, `times` times.
    pub fn truncate_next(&self, path: &str, bytes: usize, times: u32) {
        self.state
            .faults
            .lock()
            .unwrap()
            .truncate
            .insert(normalize(path), (bytes, times));
    }

    /// Sends `bytes` body bytes and then hangs until shutdown.
    pub fn stall_after(&self, path: &str, bytes: usize) {
        self.state
            .faults
            .lock()
            .unwrap()
            .stall
            .insert(normalize(path), bytes);
    }

    pub fn set_latency(&self, latency: Duration) {
        self.state
            .latency_ms
            .store(latency.as_millis() as usize, Ordering::SeqCst);
    }

    /// Disables `Accept-Ranges` and ignores `Range` headers.
    pub fn disable_ranges(&self) {
        self.state.ranges_enabled.store(false, Ordering::SeqCst);
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().unwrap().len()
    }

    pub fn requests_for(&self, path: &str) -> usize {
        let p = normalize(path);
        self.state
            .log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.path == p)
            .count()
    }

    pub fn log(&self) -> Vec<RequestLog> {
        self.state.log.lock().unwrap().clone()
    }

    /// Highest number of requests being served at the same time.
    pub fn max_concurrent(&self) -> usize {
        self.state.max_active.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.state.log.lock().unwrap().clear();
        self.state.max_active.store(0, Ordering::SeqCst);
    }
}

impl Drop for MockPortal {
    fn drop(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Hosts used by the bundled catalog.
pub const PORTAL_HOSTS: [&str; 2] = [
    "https://movilidad-opendata.mitma.es",
    "https://opendata-movilidad.mitma.es",
];

impl MockPortal {
    /// Points every portal URL of a catalog document at this server.
    pub fn rewrite_hosts(&self, catalog_json: &str) -> String {
        PORTAL_HOSTS
            .iter()
            .fold(catalog_json.to_string(), |acc, host| {
                acc.replace(host, &self.base_url())
            })
    }

    /// Path component of a portal URL, for registering files.
    pub fn path_of(url: &str) -> String {
        let rest = PORTAL_HOSTS
            .iter()
            .find_map(|h| url.strip_prefix(h))
            .or_else(|| {
                url.split_once("://")
                    .map(|(_, r)| r.find('/').map_or("/", |i| &r[i..]))
            })
            .unwrap_or(url);
        normalize(rest)
    }
}

/// Gzip-compresses `data`.
pub fn gzip(data: &[u8]) -> Vec<u8> {
    let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(data).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

fn normalize(path: &str) -> String {
    format!("/{}", path.trim_start_matches('/'))
}

struct ActiveGuard<'a>(&'a State);

impl<'a> ActiveGuard<'a> {
    fn enter(state: &'a State) -> Self {
        let now = state.active.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_active.fetch_max(now, Ordering::SeqCst);
        ActiveGuard(state)
    }
}

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn handle(mut stream: TcpStream, state: &State) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let target = parts.next().unwrap_or("/").to_string();
    let mut headers: HashMap<String, String> = HashMap::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    if state.shutdown.load(Ordering::SeqCst) || method.is_empty() {
        return Ok(());
    }
    let _guard = ActiveGuard::enter(state);
    let path = target.split('?').next().unwrap_or("/").to_string();
    let range = headers.get("range").cloned();
    let latency = state.latency_ms.load(Ordering::SeqCst);
    if latency > 0 {
        std::thread::sleep(Duration::from_millis(latency as u64));
    }

    let log = |status: u16| {
        state.log.lock().unwrap().push(RequestLog {
            path: path.clone(),
            range: range.clone(),
            status,
        });
    };

    let (fail, truncate, stall) = {
        let mut f = state.faults.lock().unwrap();
        let fail = match f.fail.get_mut(&path) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        };
        let truncate = match f.truncate.get_mut(&path) {
            Some((bytes, n)) if *n > 0 && !fail => {
                *n -= 1;
                Some(*bytes)
            }
            _ => None,
        };
        (fail, truncate, f.stall.get(&path).copied())
    };

    if method != "GET" && method != "HEAD" {
        log(405);
        return respond(&mut stream, 405, &[], b"method not allowed");
    }
    if fail {
        log(503);
        return respond(&mut stream, 503, &[], b"service unavailable");
    }
    let body = state.files.lock().unwrap().get(&path).cloned();
    let Some(body) = body else {
        log(404);
        return respond(&mut stream, 404, &[], b"not found");
    };
    let etag = etag_of(&body);
    let ranges = state.ranges_enabled.load(Ordering::SeqCst);
    let mut status = 200;
    let mut start = 0usize;
    if ranges {
        if let Some(r) = &range {
            let if_range_ok = headers.get("if-range").is_none_or(|v| v == &etag);
            let first = r
                .strip_prefix("bytes=")
                .and_then(|s| s.strip_suffix('-'))
                .and_then(|s| s.parse::<usize>().ok());
            match first {
                Some(n) if if_range_ok && n < body.len() => {
                    status = 206;
                    start = n;
                }
                Some(n) if if_range_ok && n >= body.len() => {
                    log(416);
                    let cr = format!("bytes */{}", body.len());
                    return respond(&mut stream, 416, &[("Content-Range", &cr)], b"");
                }
                _ => {}
            }
        }
    }
    log(status);
    let slice = &body[start..];
    let mut extra: Vec<(&str, String)> = vec![
        ("ETag", etag.clone()),
        ("Last-Modified", LAST_MODIFIED.to_string()),
        ("Content-Type", "application/octet-stream".to_string()),
    ];
    if ranges {
        extra.push(("Accept-Ranges", "bytes".into()));
    }
    if status == 206 {
        extra.push((
            "Content-Range",
            format!("bytes {}-{}/{}", start, body.len() - 1, body.len()),
        ));
    }
    let head: Vec<(&str, &str)> = extra.iter().map(|(k, v)| (*k, v.as_str())).collect();
    write_head(&mut stream, status, &head, slice.len())?;
    if method == "HEAD" {
        return Ok(());
    }
    if let Some(n) = stall {
        stream.write_all(&slice[..n.min(slice.len())])?;
        stream.flush()?;
        while !state.shutdown.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(20));
        }
        return Ok(());
    }
    if let Some(n) = truncate {
        stream.write_all(&slice[..n.min(slice.len())])?;
        stream.flush()?;
        return stream.shutdown(Shutdown::Both);
    }
    stream.write_all(slice)?;
    stream.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        206 => "Partial Content",
        404 => "Not Found",
        405 => "Method Not Allowed",
        416 => "Range Not Satisfiable",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn write_head(
    stream: &mut TcpStream,
    status: u16,
    headers: &[(&str, &str)],
    len: usize,
) -> std::io::Result<()> {
    let mut head = format!("HTTP/1.1 {status} {}\r\n", reason(status));
    for (k, v) in headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str(&format!(
        "Content-Length: {len}\r\nConnection: close\r\n\r\n"
    ));
    stream.write_all(head.as_bytes())
}

fn respond(
    stream: &mut TcpStream,
    status: u16,
    headers: &[(&str, &str)],
    body: &[u8],
) -> std::io::Result<()> {
    write_head(stream, status, headers, body.len())?;
    stream.write_all(body)?;
    stream.flush()
}
