use std::sync::OnceLock;

use geographiclib_rs::{Geodesic, PolygonArea, Winding};

use super::geometry::{Polygon, ZoneGeometry, ZoneShape};
use super::ZoneError;

fn wgs84() -> &'static Geodesic {
    static G: OnceLock<Geodesic> = OnceLock::new();
    G.get_or_init(Geodesic::wgs84)
}

/// Unsigned geodesic area of one closed ring, in square metres.
fn ring_area_m2(ring: &[[f64; 2]]) -> f64 {
    let mut pa = PolygonArea::new(wgs84(), Winding::CounterClockwise);
    let open = match (ring.first(), ring.last()) {
        (Some(a), Some(b)) if ring.len() > 1 && a == b => &ring[..ring.len() - 1],
        _ => ring,
    };
    for p in open {
        pa.add_point(p[1], p[0]);
    }
    let (_, area, _) = pa.compute(true);
    area.abs()
}

fn polygon_area_m2(polygon: &Polygon) -> f64 {
    let mut rings = polygon.iter();
    let Some(exterior) = rings.next() else {
        return 0.0;
    };
    let holes: f64 = rings.map(|r| ring_area_m2(r)).sum();
    (ring_area_m2(exterior) - holes).max(0.0)
}

/// Geodesic area on the WGS84 ellipsoid in km²: holes subtracted,
/// multipolygon parts summed.
pub fn compute_area_km2(shape: &ZoneShape) -> Result<f64, ZoneError> {
    let m2: f64 = shape.polygons().iter().map(polygon_area_m2).sum();
    let km2 = m2 / 1e6;
    if km2 > 0.0 && km2.is_finite() {
        Ok(km2)
    } else {
        Err(ZoneError::DegenerateGeometry)
    }
}

/// Arithmetic mean of `area_km2` over a single-level collection.
pub fn mean_area_by_level(geometries: &[ZoneGeometry]) -> Result<f64, ZoneError> {
    let first = geometries.first().ok_or(ZoneError::EmptyCollection)?;
    if let Some(other) = geometries.iter().find(|g| g.level != first.level) {
        return Err(ZoneError::MixedLevels(first.level, other.level));
    }
    let total: f64 = geometries.iter().map(|g| g.area_km2).sum();
    Ok(total / geometries.len() as f64)
}
