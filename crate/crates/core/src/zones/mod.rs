//! Study-area tessellations: geometry, areas, the cross-level relation table
//! and level-to-level aggregation.

pub mod aggregate;
pub mod area;
pub mod crs;
pub mod geometry;
pub mod relations;

use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::catalog::{resolve_geometry, resolve_relations, CatalogConfig, CatalogError};
use crate::fetcher::{Cache, CacheEntry, FetchError, Fetcher};
use crate::model::{DatasetVersion, ModelError, ZoneLevel};

pub use aggregate::{aggregate_to_level, map_zone, Rezone, NON_GAU, UNMAPPED};
pub use area::{compute_area_km2, mean_area_by_level};
pub use crs::Crs;
pub use geometry::{
    parse_geojson, read_geojson, to_geojson, write_geojson, GeoJsonLayout, ZoneGeometry, ZoneShape,
};
pub use relations::{RelationSchema, ZoneRelation, ZoneRelations};

#[derive(Debug, Error)]
pub enum ZoneError {
    #[error("geometry parse error in feature {index}: {message}")]
    GeometryParse { index: usize, message: String },
    #[error("degenerate geometry: zero area after repair")]
    DegenerateGeometry,
    #[error("empty geometry collection")]
    EmptyCollection,
    #[error("collection mixes {0} and {1} zones")]
    MixedLevels(ZoneLevel, ZoneLevel),
    #[error("relation integrity error for district {district_id}: {message}")]
    RelationIntegrity {
        district_id: String,
        message: String,
    },
    #[error("relation file line {line}: {message}")]
    RelationParse { line: u64, message: String },
    #[error("zone {0} has no image in the relation table")]
    UnmappedZone(String),
    #[error("cannot aggregate {from} to {to}: target must be strictly coarser")]
    LevelNotFiner { from: ZoneLevel, to: ZoneLevel },
    #[error("{0}")]
    Crs(String),
    #[error("invalid GeoJSON: {0}")]
    Json(String),
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
}

fn read_text(entry: &CacheEntry) -> Result<String, ZoneError> {
    let path = &entry.local_path;
    let io = |source| ZoneError::Io {
        path: path.clone(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut text = String::new();
    if path.extension().is_some_and(|e| e == "gz") {
        flate2::read::MultiGzDecoder::new(file)
            .read_to_string(&mut text)
            .map_err(io)?;
    } else {
        std::io::BufReader::new(file)
            .read_to_string(&mut text)
            .map_err(io)?;
    }
    Ok(text)
}

/// Fetches (or reads from cache) and loads every zone of one tessellation,
/// reprojected to WGS84 and sorted by id.
pub fn get_zone_geodataframe(
    level: ZoneLevel,
    version: DatasetVersion,
    catalog: &CatalogConfig,
    fetcher: &Fetcher,
    cache: &Cache,
) -> Result<Vec<ZoneGeometry>, ZoneError> {
    if !version.supports(level) {
        return Err(ModelError::VersionZoneConflict.into());
    }
    let descriptor = resolve_geometry(level, version, catalog)?;
    let source = &catalog.geometry[&(version, level)];
    let layout = GeoJsonLayout::from_source(source)?;
    let entry = fetcher.fetch(cache, &descriptor)?;
    parse_geojson(&read_text(&entry)?, level, &layout)
}

/// Fetches (or reads from cache) and validates the relation table.
pub fn get_zone_relations(
    catalog: &CatalogConfig,
    fetcher: &Fetcher,
    cache: &Cache,
) -> Result<ZoneRelations, ZoneError> {
    let descriptor = resolve_relations(catalog);
    let entry = fetcher.fetch(cache, &descriptor)?;
    ZoneRelations::read_path(&entry.local_path, &catalog.relations.schema)
}

/// Output file name for a tessellation, e.g. `zones_v2_municipalities.geojson`.
pub fn geojson_file_name(level: ZoneLevel, version: DatasetVersion) -> String {
    format!("zones_{version}_{level}.geojson")
}

/// Writes the collection as GeoJSON under `output_directory`.
pub fn export_zones(
    zones: &[ZoneGeometry],
    level: ZoneLevel,
    version: DatasetVersion,
    output_directory: &Path,
) -> Result<PathBuf, ZoneError> {
    let path = output_directory.join(geojson_file_name(level, version));
    write_geojson(zones, &path)?;
    Ok(path)
}
