//! Error classification into exit codes.

use spainmob::analytics::AnalyticsError;
use spainmob::catalog::CatalogError;
use spainmob::fetcher::FetchError;
use spainmob::model::ModelError;
use spainmob::normalizer::NormalizeError;
use spainmob::zones::ZoneError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NETWORK: u8 = 4;
pub const EXIT_PARSE: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError::new(EXIT_VALIDATION, "validation", message)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "exit_code": self.code,
                "message": self.message,
            }
        })
    }
}

fn fetch_class(e: &FetchError) -> (u8, &'static str) {
    match e {
        FetchError::NotYetPublished { .. } => (EXIT_VALIDATION, "not_yet_published"),
        FetchError::HttpError { .. } => (EXIT_NETWORK, "http"),
        FetchError::OfflineMiss(_) => (EXIT_NETWORK, "offline_miss"),
        FetchError::IntegrityError { .. } => (EXIT_PARSE, "integrity"),
        FetchError::ManifestCorrupt { .. } => (EXIT_PARSE, "manifest_corrupt"),
        FetchError::Io { .. } => (EXIT_OTHER, "io"),
        FetchError::PartialFailure { failed, .. } => failed
            .iter()
            .map(|(_, e)| fetch_class(e))
            .max_by_key(|(code, _)| match *code {
                EXIT_VALIDATION => 3,
                EXIT_PARSE => 2,
                EXIT_NETWORK => 1,
                _ => 0,
            })
            .unwrap_or((EXIT_NETWORK, "partial_failure")),
    }
}

fn catalog_class(e: &CatalogError) -> (u8, &'static str) {
    match e {
        CatalogError::Model(_) => (EXIT_VALIDATION, "validation"),
        CatalogError::Io { .. } => (EXIT_OTHER, "io"),
        _ => (EXIT_PARSE, "catalog"),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<FetchError> for CliError {
    fn from(e: FetchError) -> Self {
        let (code, kind) = fetch_class(&e);
        CliError::new(code, kind, e.to_string())
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        let (code, kind) = catalog_class(&e);
        CliError::new(code, kind, e.to_string())
    }
}

impl From<NormalizeError> for CliError {
    fn from(e: NormalizeError) -> Self {
        let (code, kind) = match e.root() {
            NormalizeError::Fetch(f) => fetch_class(f),
            NormalizeError::Catalog(c) => catalog_class(c),
            NormalizeError::WrongKind { .. } => (EXIT_VALIDATION, "validation"),
            NormalizeError::Io { .. } | NormalizeError::Export { .. } => (EXIT_OTHER, "io"),
            _ => (EXIT_PARSE, "parse"),
        };
        CliError::new(code, kind, e.to_string())
    }
}

impl From<ZoneError> for CliError {
    fn from(e: ZoneError) -> Self {
        let (code, kind) = match &e {
            ZoneError::Fetch(f) => fetch_class(f),
            ZoneError::Catalog(c) => catalog_class(c),
            ZoneError::Model(_)
            | ZoneError::UnmappedZone(_)
            | ZoneError::LevelNotFiner { .. }
            | ZoneError::EmptyCollection
            | ZoneError::MixedLevels(..) => (EXIT_VALIDATION, "validation"),
            ZoneError::Io { .. } => (EXIT_OTHER, "io"),
            _ => (EXIT_PARSE, "geometry"),
        };
        CliError::new(code, kind, e.to_string())
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        let (code, kind) = match &e {
            AnalyticsError::Io { .. } => (EXIT_OTHER, "io"),
            _ => (EXIT_VALIDATION, "validation"),
        };
        CliError::new(code, kind, e.to_string())
    }
}
