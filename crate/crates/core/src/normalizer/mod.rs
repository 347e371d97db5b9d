//! Turns cached raw files into normalized, schema-stable tables and exports
//! them.

pub mod export;
pub mod parse;
pub mod records;
pub mod schema;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use thiserror::Error;

use crate::catalog::{resolve_resources, CatalogConfig, CatalogError};
use crate::fetcher::{Cache, CacheEntry, FetchError, FetchPolicy, Fetcher, CACHE_ENV};
use crate::model::{DatasetKind, DatasetRequest};

pub use export::{ExportedTable, OutputFormat};
pub use parse::{
    parse_od_file, parse_overnight_file, parse_trips_file, FromRow, ParseMode, ParseReport,
    RecordReader,
};
pub use records::{
    OdRecord, OdTable, OvernightStayRecord, OvernightTable, Record, Table, TripsPerPersonRecord,
    TripsTable,
};
pub use schema::SchemaMap;

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("corrupt gzip stream: {0}")]
    GzipCorrupt(String),
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<NormalizeError>,
    },
    #[error("no rows parsed for {kind} {what}; the raw layout may have changed")]
    EmptyResult { kind: DatasetKind, what: String },
    #[error("request is for {got} data, not {expected}")]
    WrongKind {
        expected: DatasetKind,
        got: DatasetKind,
    },
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("export error on {}: {message}", .path.display())]
    Export { path: PathBuf, message: String },
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl NormalizeError {
    /// The innermost error, past file context.
    pub fn root(&self) -> &NormalizeError {
        match self {
            NormalizeError::InFile { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Default cache root for a request: `$SPAINMOB_CACHE`, else `<out>/cache`.
pub fn default_cache_root(output_directory: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => output_directory.join("cache"),
    }
}

/// Parses each cached file, in parallel across files, keeping input order.
type Parsed<T> = Result<(Vec<T>, ParseReport), NormalizeError>;

fn parse_entries<T: FromRow>(
    entries: &[CacheEntry],
    catalog: &CatalogConfig,
    mode: ParseMode,
) -> Result<(Vec<T>, ParseReport), NormalizeError> {
    let slots: Vec<Mutex<Option<Parsed<T>>>> = entries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2)
        .min(entries.len())
        .max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(entry) = entries.get(i) else { break };
                let result = catalog
                    .schema(&entry.descriptor.schema_id)
                    .map_err(NormalizeError::from)
                    .and_then(|schema| parse::collect(parse::open_file::<T>(entry, schema, mode)?))
                    .map_err(|e| NormalizeError::InFile {
                        file: entry.descriptor.relative_cache_path.clone(),
                        source: Box::new(e),
                    });
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let mut rows = Vec::new();
    let mut report = ParseReport::default();
    for (entry, slot) in entries.iter().zip(slots) {
        let (part, part_report) = slot.into_inner().unwrap().expect("slot filled")?;
        if part_report.rows_skipped > 0 {
            warn!(
                "{}: skipped {} malformed rows",
                entry.descriptor.relative_cache_path, part_report.rows_skipped
            );
        }
        report.merge(&part_report);
        rows.extend(part);
    }
    Ok((rows, report))
}

/// Acquisition and normalization for one validated request.
pub struct Mobility<'a> {
    request: DatasetRequest,
    catalog: &'a CatalogConfig,
    fetcher: &'a Fetcher,
    cache: &'a Cache,
    mode: ParseMode,
    format: OutputFormat,
}

impl<'a> Mobility<'a> {
    pub fn new(
        request: DatasetRequest,
        catalog: &'a CatalogConfig,
        fetcher: &'a Fetcher,
        cache: &'a Cache,
    ) -> Self {
        Mobility {
            request,
            catalog,
            fetcher,
            cache,
            mode: ParseMode::Strict,
            format: OutputFormat::Parquet,
        }
    }

    pub fn with_mode(mut self, mode: ParseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_format(mut self, format: OutputFormat) -> Self {
        self.format = format;
        self
    }

    pub fn request(&self) -> &DatasetRequest {
        &self.request
    }

    /// Base name of exported files, e.g. `od_v2_municipalities_2022-03-20_2022-03-24`.
    pub fn output_stem(&self) -> String {
        let r = &self.request;
        format!(
            "{}_{}_{}_{}_{}",
            r.kind(),
            r.version(),
            r.level(),
            r.range().start(),
            r.range().end()
        )
    }

    fn load<T: FromRow>(
        &self,
        expected: DatasetKind,
    ) -> Result<(Table<T>, ParseReport), NormalizeError> {
        if self.request.kind() != expected {
            return Err(NormalizeError::WrongKind {
                expected,
                got: self.request.kind(),
            });
        }
        let descriptors = resolve_resources(&self.request, self.catalog)?;
        info!("fetching {} daily files", descriptors.len());
        let entries = self.fetcher.fetch_all(self.cache, &descriptors)?;
        let (records, report) = parse_entries::<T>(&entries, self.catalog, self.mode)?;
        if records.is_empty() {
            return Err(NormalizeError::EmptyResult {
                kind: expected,
                what: format!(
                    "{} .. {}",
                    self.request.range().start(),
                    self.request.range().end()
                ),
            });
        }
        let mut table = Table {
            level: self.request.level(),
            version: Some(self.request.version()),
            activity: expected == DatasetKind::OriginDestination,
            records,
        };
        table.sort();
        Ok((table, report))
    }

    /// Fetches and parses the OD files; rows in canonical order.
    pub fn load_od(&self, keep_activity: bool) -> Result<(OdTable, ParseReport), NormalizeError> {
        let (table, report) = self.load::<OdRecord>(DatasetKind::OriginDestination)?;
        let table = if keep_activity {
            table
        } else {
            table.collapse_activity()
        };
        Ok((table, report))
    }

    pub fn load_trips(&self) -> Result<(TripsTable, ParseReport), NormalizeError> {
        self.load(DatasetKind::TripsPerPerson)
    }

    pub fn load_overnight(&self) -> Result<(OvernightTable, ParseReport), NormalizeError> {
        self.load(DatasetKind::OvernightStays)
    }

    pub fn get_od_data(&self, keep_activity: bool) -> Result<ExportedTable, NormalizeError> {
        let (table, _) = self.load_od(keep_activity)?;
        export::export(
            &table,
            self.request.output_directory(),
            &self.output_stem(),
            self.format,
        )
    }

    pub fn get_number_of_trips_data(&self) -> Result<ExportedTable, NormalizeError> {
        let (table, _) = self.load_trips()?;
        export::export(
            &table,
            self.request.output_directory(),
            &self.output_stem(),
            self.format,
        )
    }

    pub fn get_overnight_stays_data(&self) -> Result<ExportedTable, NormalizeError> {
        let (table, _) = self.load_overnight()?;
        export::export(
            &table,
            self.request.output_directory(),
            &self.output_stem(),
            self.format,
        )
    }
}

fn with_session<T>(
    request: &DatasetRequest,
    catalog: &CatalogConfig,
    policy: &FetchPolicy,
    f: impl FnOnce(&Mobility<'_>) -> Result<T, NormalizeError>,
) -> Result<T, NormalizeError> {
    let cache = Cache::open(default_cache_root(request.output_directory()))?;
    let fetcher = Fetcher::for_catalog(policy.clone(), catalog);
    let mobility = Mobility::new(request.clone(), catalog, &fetcher, &cache);
    f(&mobility)
}

/// Downloads, normalizes and exports the OD matrices of `request` as Parquet.
pub fn get_od_data(
    request: &DatasetRequest,
    keep_activity: bool,
    catalog: &CatalogConfig,
    policy: &FetchPolicy,
) -> Result<ExportedTable, NormalizeError> {
    with_session(request, catalog, policy, |m| m.get_od_data(keep_activity))
}

pub fn get_number_of_trips_data(
    request: &DatasetRequest,
    catalog: &CatalogConfig,
    policy: &FetchPolicy,
) -> Result<ExportedTable, NormalizeError> {
    with_session(request, catalog, policy, |m| m.get_number_of_trips_data())
}

pub fn get_overnight_stays_data(
    request: &DatasetRequest,
    catalog: &CatalogConfig,
    policy: &FetchPolicy,
) -> Result<ExportedTable, NormalizeError> {
    with_session(request, catalog, policy, |m| m.get_overnight_stays_data())
}
