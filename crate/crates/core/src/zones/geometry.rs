//! Zone polygons: GeoJSON read/write and load-time repair.
//!
//! Repair covers ring closure, consecutive duplicate vertices and ring
//! orientation (exterior counter-clockwise, holes clockwise). Rings with
//! fewer than four positions after repair, or whose edges cross, are
//! rejected with the index of the offending feature.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::area::compute_area_km2;
use super::crs::Crs;
use super::ZoneError;
use crate::catalog::GeometrySource;
use crate::model::{ZoneId, ZoneLevel};

/// A ring of `[lon, lat]` positions, closed (first == last).
pub type Ring = Vec<[f64; 2]>;
/// Exterior ring followed by holes.
pub type Polygon = Vec<Ring>;

#[derive(Debug, Clone, PartialEq)]
pub enum ZoneShape {
    Polygon(Polygon),
    MultiPolygon(Vec<Polygon>),
}

impl ZoneShape {
    pub fn polygons(&self) -> &[Polygon] {
        match self {
            ZoneShape::Polygon(p) => std::slice::from_ref(p),
            ZoneShape::MultiPolygon(ps) => ps,
        }
    }

    fn polygons_mut(&mut self) -> &mut [Polygon] {
        match self {
            ZoneShape::Polygon(p) => std::slice::from_mut(p),
            ZoneShape::MultiPolygon(ps) => ps,
        }
    }

    pub fn to_geojson(&self) -> Value {
        match self {
            ZoneShape::Polygon(p) => json!({"type": "Polygon", "coordinates": p}),
            ZoneShape::MultiPolygon(ps) => json!({"type": "MultiPolygon", "coordinates": ps}),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneGeometry {
    pub zone_id: ZoneId,
    pub name: String,
    pub level: ZoneLevel,
    /// WGS84 longitude/latitude.
    pub shape: ZoneShape,
    pub area_km2: f64,
}

/// How to read a GeoJSON source.
#[derive(Debug, Clone)]
pub struct GeoJsonLayout {
    pub crs: Crs,
    pub id_property: String,
    pub name_property: Option<String>,
}

impl GeoJsonLayout {
    pub fn from_source(source: &GeometrySource) -> Result<Self, ZoneError> {
        Ok(GeoJsonLayout {
            crs: Crs::parse(&source.crs).map_err(|e| ZoneError::Crs(e.to_string()))?,
            id_property: source.id_property.clone(),
            name_property: source.name_property.clone(),
        })
    }

    /// The layout written by [`write_geojson`].
    pub fn normalized() -> Self {
        GeoJsonLayout {
            crs: Crs::Geographic,
            id_property: "zone_id".into(),
            name_property: Some("name".into()),
        }
    }
}

fn bad(index: usize, message: impl Into<String>) -> ZoneError {
    ZoneError::GeometryParse {
        index,
        message: message.into(),
    }
}

fn position(v: &Value, crs: Crs) -> Option<[f64; 2]> {
    let arr = v.as_array()?;
    if arr.len() < 2 {
        return None;
    }
    let p = [arr[0].as_f64()?, arr[1].as_f64()?];
    let out = crs.to_lon_lat(p);
    (out[0].is_finite() && out[1].is_finite()).then_some(out)
}

fn ring(v: &Value, crs: Crs) -> Option<Ring> {
    v.as_array()?.iter().map(|p| position(p, crs)).collect()
}

fn polygon(v: &Value, crs: Crs) -> Option<Polygon> {
    v.as_array()?.iter().map(|r| ring(r, crs)).collect()
}

fn shape_from_value(geometry: &Value, crs: Crs) -> Result<ZoneShape, String> {
    let kind = geometry
        .get("type")
        .and_then(Value::as_str)
        .ok_or("geometry has no type")?;
    let coords = geometry
        .get("coordinates")
        .ok_or("geometry has no coordinates")?;
    match kind {
        "Polygon" => polygon(coords, crs)
            .map(ZoneShape::Polygon)
            .ok_or_else(|| "malformed Polygon coordinates".into()),
        "MultiPolygon" => coords
            .as_array()
            .and_then(|ps| {
                ps.iter()
                    .map(|p| polygon(p, crs))
                    .collect::<Option<Vec<_>>>()
            })
            .map(ZoneShape::MultiPolygon)
            .ok_or_else(|| "malformed MultiPolygon coordinates".into()),
        other => Err(format!("unsupported geometry type {other}")),
    }
}

fn signed_area(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        / 2.0
}

/// Closes the ring, drops consecutive duplicates and sets orientation.
fn repair_ring(mut ring: Ring, exterior: bool) -> Result<Ring, String> {
    ring.dedup();
    if ring.first() != ring.last() {
        let first = ring[0];
        ring.push(first);
    }
    if ring.len() < 4 {
        return Err(format!(
            "ring has {} positions, at least 4 required",
            ring.len()
        ));
    }
    let ccw = signed_area(&ring) > 0.0;
    if ccw != exterior {
        ring.reverse();
    }
    if let Some((i, j)) = find_crossing(&ring) {
        return Err(format!("ring edges {i} and {j} intersect"));
    }
    Ok(ring)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Collinear segments overlapping over a positive length.
fn collinear_overlap(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    if orient(a, b, c) != 0.0 || orient(a, b, d) != 0.0 {
        return false;
    }
    let axis = if (a[0] - b[0]).abs() >= (a[1] - b[1]).abs() {
        0
    } else {
        1
    };
    let (lo1, hi1) = (a[axis].min(b[axis]), a[axis].max(b[axis]));
    let (lo2, hi2) = (c[axis].min(d[axis]), c[axis].max(d[axis]));
    lo1.max(lo2) < hi1.min(hi2)
}

/// Proper crossings and collinear overlaps. Touching at a single vertex is
/// tolerated.
fn segments_conflict(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    collinear_overlap(a, b, c, d)
}

/// Sweep over edges sorted by minimum x; returns the first crossing pair.
fn find_crossing(ring: &[[f64; 2]]) -> Option<(usize, usize)> {
    let n = ring.len() - 1;
    let mut order: Vec<usize> = (0..n).collect();
    let min_x = |i: usize| ring[i][0].min(ring[i + 1][0]);
    let max_x = |i: usize| ring[i][0].max(ring[i + 1][0]);
    order.sort_by(|&a, &b| min_x(a).total_cmp(&min_x(b)));
    let mut active: Vec<usize> = Vec::new();
    for &i in &order {
        let x = min_x(i);
        active.retain(|&j| max_x(j) >= x);
        for &j in &active {
            let adjacent = i.abs_diff(j) == 1 || i.abs_diff(j) == n - 1;
            if adjacent {
                // Neighbouring edges share a vertex; only a fold-back conflicts.
                if collinear_overlap(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                    return Some((i.min(j), i.max(j)));
                }
                continue;
            }
            if segments_conflict(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return Some((i.min(j), i.max(j)));
            }
        }
        active.push(i);
    }
    None
}

fn repair(shape: &mut ZoneShape) -> Result<(), String> {
    for polygon in shape.polygons_mut() {
        if polygon.is_empty() {
            return Err("polygon without rings".into());
        }
        let rings = std::mem::take(polygon);
        for (k, r) in rings.into_iter().enumerate() {
            polygon.push(repair_ring(r, k == 0)?);
        }
    }
    if shape.polygons().is_empty() {
        return Err("empty multipolygon".into());
    }
    Ok(())
}

fn property_text(props: &Map<String, Value>, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses a GeoJSON FeatureCollection into zones sorted by id.
pub fn parse_geojson(
    text: &str,
    level: ZoneLevel,
    layout: &GeoJsonLayout,
) -> Result<Vec<ZoneGeometry>, ZoneError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ZoneError::Json(e.to_string()))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| ZoneError::Json("not a FeatureCollection".into()))?;
    let mut zones = Vec::with_capacity(features.len());
    let mut seen = BTreeSet::new();
    for (index, feature) in features.iter().enumerate() {
        let empty = Map::new();
        let props = feature
            .get("properties")
            .and_then(Value::as_object)
            .unwrap_or(&empty);
        let raw_id = property_text(props, &layout.id_property)
            .ok_or_else(|| bad(index, format!("missing property {}", layout.id_property)))?;
        let zone_id = ZoneId::new(&raw_id).map_err(|e| bad(index, e.to_string()))?;
        if !seen.insert(zone_id.clone()) {
            return Err(bad(index, format!("duplicate zone id {zone_id}")));
        }
        let name = layout
            .name_property
            .as_deref()
            .and_then(|k| property_text(props, k))
            .unwrap_or_default();
        let geometry = feature
            .get("geometry")
            .filter(|g| !g.is_null())
            .ok_or_else(|| bad(index, "feature has no geometry"))?;
        let mut shape = shape_from_value(geometry, layout.crs).map_err(|m| bad(index, m))?;
        repair(&mut shape).map_err(|m| bad(index, m))?;
        let area_km2 = compute_area_km2(&shape).map_err(|_| bad(index, "zero area"))?;
        zones.push(ZoneGeometry {
            zone_id,
            name,
            level,
            shape,
            area_km2,
        });
    }
    zones.sort_by(|a, b| a.zone_id.cmp(&b.zone_id));
    Ok(zones)
}

pub fn read_geojson(
    path: &Path,
    level: ZoneLevel,
    layout: &GeoJsonLayout,
) -> Result<Vec<ZoneGeometry>, ZoneError> {
    let text = std::fs::read_to_string(path).map_err(|source| ZoneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_geojson(&text, level, layout)
}

/// RFC 7946 FeatureCollection with `zone_id`, `name`, `level` and `area_km2`.
pub fn to_geojson(zones: &[ZoneGeometry]) -> Value {
    let features: Vec<Value> = zones
        .iter()
        .map(|z| {
            json!({
                "type": "Feature",
                "properties": {
                    "zone_id": z.zone_id.as_str(),
                    "name": z.name,
                    "level": z.level.as_str(),
                    "area_km2": z.area_km2,
                },
                "geometry": z.shape.to_geojson(),
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Writes a JSON value atomically (temporary file, then rename).
pub(crate) fn write_json_atomic(path: &Path, value: &Value) -> Result<(), ZoneError> {
    let io = |source| ZoneError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("geojson.tmp");
    let text = serde_json::to_string(value).map_err(|e| ZoneError::Json(e.to_string()))?;
    std::fs::write(&tmp, text).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn write_geojson(zones: &[ZoneGeometry], path: &Path) -> Result<(), ZoneError> {
    write_json_atomic(path, &to_geojson(zones))
}
