//! Declarative source catalog: where every daily file, geometry layer and the
//! relation table live on the portal, and how each raw layout is parsed.
//!
//! Nothing here touches the network. The bundled default catalog mirrors the
//! portal layout observed when it was written; override it with
//! `--catalog <path>` or the `SPAINMOB_CATALOG` environment variable when the
//! portal moves things around.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    enumerate_days, parse_zone_level, Availability, DatasetKind, DatasetRequest, DatasetVersion,
    ModelError, Window, ZoneLevel,
};
use crate::normalizer::schema::{SchemaError, SchemaMap};
use crate::zones::relations::RelationSchema;

pub const CATALOG_ENV: &str = "SPAINMOB_CATALOG";

/// The catalog shipped with the library.
pub const DEFAULT_CATALOG: &str = include_str!("../catalog/default.json");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog parse error at {position}: {message}")]
    ConfigParseError { position: String, message: String },
    #[error("catalog has no url template for version {version}, kind {kind}, level {level}")]
    MissingTemplate {
        version: DatasetVersion,
        kind: DatasetKind,
        level: ZoneLevel,
    },
    #[error("catalog has no geometry source for version {version}, level {level}")]
    MissingGeometry {
        version: DatasetVersion,
        level: ZoneLevel,
    },
    #[error("catalog entry {entry}: {message}")]
    InvalidEntry { entry: String, message: String },
    #[error("catalog references unknown schema `{0}`")]
    UnknownSchema(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChecksumMode {
    None,
    #[default]
    SizeOnly,
    Digest,
}

/// A URL pattern with `{date:YYYY}`, `{date:MM}`, `{date:DD}` and
/// `{date:YYYYMMDD}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UrlTemplate {
    raw: String,
    parts: Vec<TemplatePart>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplatePart {
    Literal(String),
    Year,
    Month,
    Day,
    Compact,
}

impl UrlTemplate {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let mut parts = Vec::new();
        let mut rest = raw;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(TemplatePart::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| format!("unterminated placeholder in `{raw}`"))?
                + open;
            let token = &rest[open + 1..close];
            parts.push(match token {
                "date:YYYY" => TemplatePart::Year,
                "date:MM" => TemplatePart::Month,
                "date:DD" => TemplatePart::Day,
                "date:YYYYMMDD" => TemplatePart::Compact,
                other => return Err(format!("unsupported placeholder `{{{other}}}`")),
            });
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(format!("stray `}}` in `{raw}`"));
        }
        if !rest.is_empty() {
            parts.push(TemplatePart::Literal(rest.to_string()));
        }
        Ok(UrlTemplate {
            raw: raw.to_string(),
            parts,
        })
    }

    pub fn expand(&self, day: NaiveDate) -> String {
        let mut out = String::with_capacity(self.raw.len());
        for part in &self.parts {
            match part {
                TemplatePart::Literal(s) => out.push_str(s),
                TemplatePart::Year => out.push_str(&format!("{:04}", day.year())),
                TemplatePart::Month => out.push_str(&format!("{:02}", day.month())),
                TemplatePart::Day => out.push_str(&format!("{:02}", day.day())),
                TemplatePart::Compact => out.push_str(&format!(
                    "{:04}{:02}{:02}",
                    day.year(),
                    day.month(),
                    day.day()
                )),
            }
        }
        out
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSource {
    pub template: UrlTemplate,
    pub schema_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometrySource {
    pub url: String,
    /// Source coordinate reference system, e.g. `EPSG:4326` or `EPSG:25830`.
    #[serde(default = "default_crs")]
    pub crs: String,
    pub id_property: String,
    #[serde(default)]
    pub name_property: Option<String>,
}

fn default_crs() -> String {
    "EPSG:4326".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationsSource {
    pub url: String,
    #[serde(flatten)]
    pub schema: RelationSchema,
}

/// What a descriptor points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Dataset(DatasetKind),
    Geometry,
    Relations,
}

/// One remote file and where it lands in the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub url: String,
    pub kind: ResourceKind,
    pub version: Option<DatasetVersion>,
    pub level: Option<ZoneLevel>,
    pub day: Option<NaiveDate>,
    pub relative_cache_path: String,
    pub schema_id: String,
}

impl fmt::Display for ResourceDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.relative_cache_path)
    }
}

pub type DatasetKey = (DatasetVersion, DatasetKind, ZoneLevel);

#[derive(Debug, Clone)]
pub struct CatalogConfig {
    pub availability: Availability,
    pub checksum_mode: ChecksumMode,
    pub datasets: BTreeMap<DatasetKey, DatasetSource>,
    pub geometry: BTreeMap<(DatasetVersion, ZoneLevel), GeometrySource>,
    pub relations: RelationsSource,
    pub schemas: BTreeMap<String, SchemaMap>,
    /// Expected SHA-256 digests by URL, used when `checksum_mode` is `digest`.
    pub pinned_digests: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    #[serde(default)]
    availability: RawAvailability,
    #[serde(default)]
    checksum_mode: ChecksumMode,
    datasets: Vec<RawDataset>,
    geometry: Vec<RawGeometry>,
    relations: RelationsSource,
    schemas: BTreeMap<String, SchemaMap>,
    #[serde(default)]
    pinned_digests: BTreeMap<String, String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAvailability {
    v1: Option<Window>,
    v2: Option<Window>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    version: DatasetVersion,
    kind: DatasetKind,
    level: String,
    url: String,
    schema_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    version: DatasetVersion,
    level: String,
    #[serde(flatten)]
    source: GeometrySource,
}

fn check_url(entry: &str, url: &str) -> Result<(), CatalogError> {
    let invalid = |message: String| CatalogError::InvalidEntry {
        entry: entry.to_string(),
        message,
    };
    let parsed = url::Url::parse(url).map_err(|e| invalid(format!("bad url `{url}`: {e}")))?;
    match parsed.scheme() {
        "http" | "https" => Ok(()),
        other => Err(invalid(format!("unsupported url scheme `{other}`"))),
    }
}

/// Final path segment's extension chain, e.g. `.csv.gz`.
fn extension_of(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let base = path.rsplit('/').next().unwrap_or("");
    match base.find('.') {
        Some(i) => base[i..]
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '.')
            .collect(),
        None => String::new(),
    }
}

impl CatalogConfig {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let raw: RawCatalog =
            serde_json::from_str(text).map_err(|e| CatalogError::ConfigParseError {
                position: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawCatalog) -> Result<Self, CatalogError> {
        let defaults = Availability::default();
        let availability = Availability {
            v1: raw.availability.v1.unwrap_or(defaults.v1),
            v2: raw.availability.v2.unwrap_or(defaults.v2),
        };
        let mut schemas = raw.schemas;
        for (id, schema) in schemas.iter_mut() {
            schema.schema_id = id.clone();
            schema.validate()?;
        }

        let mut datasets = BTreeMap::new();
        for entry in raw.datasets {
            let level = parse_zone_level(&entry.level)?;
            let label = format!("{}/{}/{}", entry.version, entry.kind, level);
            if !entry.version.supports(level) {
                return Err(CatalogError::InvalidEntry {
                    entry: label,
                    message: "version 1 has no greater urban areas".into(),
                });
            }
            let template =
                UrlTemplate::parse(&entry.url).map_err(|message| CatalogError::InvalidEntry {
                    entry: label.clone(),
                    message,
                })?;
            check_url(
                &label,
                &template.expand(availability.window(entry.version).start),
            )?;
            let schema = schemas
                .get(&entry.schema_id)
                .ok_or_else(|| CatalogError::UnknownSchema(entry.schema_id.clone()))?;
            if schema.target != entry.kind {
                return Err(CatalogError::InvalidEntry {
                    entry: label,
                    message: format!(
                        "schema `{}` parses {} files",
                        entry.schema_id, schema.target
                    ),
                });
            }
            let key = (entry.version, entry.kind, level);
            let source = DatasetSource {
                template,
                schema_id: entry.schema_id,
            };
            if datasets.insert(key, source).is_some() {
                return Err(CatalogError::InvalidEntry {
                    entry: label,
                    message: "duplicate template".into(),
                });
            }
        }
        for version in DatasetVersion::ALL {
            for kind in DatasetKind::ALL {
                for &level in version.levels() {
                    if !datasets.contains_key(&(version, kind, level)) {
                        return Err(CatalogError::MissingTemplate {
                            version,
                            kind,
                            level,
                        });
                    }
                }
            }
        }

        let mut geometry = BTreeMap::new();
        for entry in raw.geometry {
            let level = parse_zone_level(&entry.level)?;
            let label = format!("geometry {}/{}", entry.version, level);
            if !entry.version.supports(level) {
                return Err(CatalogError::InvalidEntry {
                    entry: label,
                    message: "version 1 has no greater urban areas".into(),
                });
            }
            check_url(&label, &entry.source.url)?;
            crate::zones::crs::Crs::parse(&entry.source.crs).map_err(|e| {
                CatalogError::InvalidEntry {
                    entry: label.clone(),
                    message: e.to_string(),
                }
            })?;
            geometry.insert((entry.version, level), entry.source);
        }
        check_url("relations", &raw.relations.url)?;

        Ok(CatalogConfig {
            availability,
            checksum_mode: raw.checksum_mode,
            datasets,
            geometry,
            relations: raw.relations,
            schemas,
            pinned_digests: raw.pinned_digests,
        })
    }

    /// The catalog bundled with the library.
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn schema(&self, schema_id: &str) -> Result<&SchemaMap, CatalogError> {
        self.schemas
            .get(schema_id)
            .ok_or_else(|| CatalogError::UnknownSchema(schema_id.to_string()))
    }

    pub fn template_count(&self) -> usize {
        self.datasets.len()
    }

    /// Rewrites the host part of every URL, keeping paths. Used to point the
    /// bundled catalog at a mirror.
    pub fn with_base_url(mut self, from: &str, to: &str) -> Self {
        let swap = |u: &str| match u.strip_prefix(from) {
            Some(rest) => format!("{to}{rest}"),
            None => u.to_string(),
        };
        for source in self.datasets.values_mut() {
            source.template = UrlTemplate::parse(&swap(source.template.as_str())).unwrap();
        }
        for g in self.geometry.values_mut() {
            g.url = swap(&g.url);
        }
        self.relations.url = swap(&self.relations.url);
        self
    }
}

/// Reads and validates a catalog file.
pub fn load_catalog(config_path: &Path) -> Result<CatalogConfig, CatalogError> {
    let text = std::fs::read_to_string(config_path).map_err(|source| CatalogError::Io {
        path: config_path.to_path_buf(),
        source,
    })?;
    CatalogConfig::from_json(&text)
}

/// Where a catalog came from, for audit logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CatalogOrigin {
    Flag(PathBuf),
    Environment(PathBuf),
    Bundled,
}

impl fmt::Display for CatalogOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CatalogOrigin::Flag(p) => write!(f, "--catalog {}", p.display()),
            CatalogOrigin::Environment(p) => write!(f, "${CATALOG_ENV}={}", p.display()),
            CatalogOrigin::Bundled => f.write_str("bundled default"),
        }
    }
}

/// Flag beats environment beats the bundled default.
pub fn discover_catalog(
    flag: Option<&Path>,
    env_value: Option<&str>,
) -> Result<(CatalogConfig, CatalogOrigin), CatalogError> {
    if let Some(path) = flag {
        return Ok((load_catalog(path)?, CatalogOrigin::Flag(path.to_path_buf())));
    }
    if let Some(value) = env_value.filter(|v| !v.is_empty()) {
        let path = PathBuf::from(value);
        return Ok((load_catalog(&path)?, CatalogOrigin::Environment(path)));
    }
    Ok((CatalogConfig::bundled(), CatalogOrigin::Bundled))
}

pub fn dataset_cache_path(
    version: DatasetVersion,
    kind: DatasetKind,
    level: ZoneLevel,
    day: NaiveDate,
    ext: &str,
) -> String {
    format!(
        "{version}/{kind}/{level}/{:04}-{:02}/{}{ext}",
        day.year(),
        day.month(),
        day.format("%Y%m%d")
    )
}

/// One descriptor per requested day, ascending.
pub fn resolve_resources(
    request: &DatasetRequest,
    catalog: &CatalogConfig,
) -> Result<Vec<ResourceDescriptor>, CatalogError> {
    let (version, kind, level) = (request.version(), request.kind(), request.level());
    let source =
        catalog
            .datasets
            .get(&(version, kind, level))
            .ok_or(CatalogError::MissingTemplate {
                version,
                kind,
                level,
            })?;
    Ok(enumerate_days(&request.range())
        .into_iter()
        .map(|day| {
            let url = source.template.expand(day);
            let ext = extension_of(&url);
            ResourceDescriptor {
                relative_cache_path: dataset_cache_path(version, kind, level, day, &ext),
                url,
                kind: ResourceKind::Dataset(kind),
                version: Some(version),
                level: Some(level),
                day: Some(day),
                schema_id: source.schema_id.clone(),
            }
        })
        .collect())
}

pub const GEOJSON_SCHEMA: &str = "geojson";

pub fn resolve_geometry(
    level: ZoneLevel,
    version: DatasetVersion,
    catalog: &CatalogConfig,
) -> Result<ResourceDescriptor, CatalogError> {
    if !version.supports(level) {
        return Err(ModelError::VersionZoneConflict.into());
    }
    let source = catalog
        .geometry
        .get(&(version, level))
        .ok_or(CatalogError::MissingGeometry { version, level })?;
    Ok(ResourceDescriptor {
        relative_cache_path: format!("geometry/{version}/{level}{}", extension_of(&source.url)),
        url: source.url.clone(),
        kind: ResourceKind::Geometry,
        version: Some(version),
        level: Some(level),
        day: None,
        schema_id: format!("{GEOJSON_SCHEMA}:{}", source.crs),
    })
}

pub fn resolve_relations(catalog: &CatalogConfig) -> ResourceDescriptor {
    let url = &catalog.relations.url;
    ResourceDescriptor {
        relative_cache_path: format!("relations/zone_relations{}", extension_of(url)),
        url: url.clone(),
        kind: ResourceKind::Relations,
        version: None,
        level: None,
        day: None,
        schema_id: "relations".to_string(),
    }
}
