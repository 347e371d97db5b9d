//! Source coordinate systems for zone geometry and conversion to WGS84
//! longitude/latitude.
//!
//! Projected sources are UTM north zones on the GRS80/WGS84 ellipsoid
//! (`EPSG:258NN` for ETRS89, `EPSG:326NN` for WGS84). ETRS89 and WGS84 differ
//! by well under a metre in Spain, which is below anything the area
//! statistics can resolve, so no datum shift is applied.

use std::fmt;

use thiserror::Error;

const A: f64 = 6_378_137.0;
const F: f64 = 1.0 / 298.257_223_563;
const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unsupported coordinate reference system {0:?}; expected EPSG:4326, EPSG:4258, EPSG:258NN or EPSG:326NN")]
pub struct CrsError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crs {
    /// Longitude/latitude degrees, passed through unchanged.
    Geographic,
    /// Universal Transverse Mercator, northern hemisphere.
    UtmNorth { zone: u8 },
}

impl Crs {
    /// Accepts `EPSG:<code>`, `urn:ogc:def:crs:EPSG::<code>` and `CRS84`.
    pub fn parse(raw: &str) -> Result<Crs, CrsError> {
        let err = || CrsError(raw.to_string());
        let trimmed = raw.trim();
        let upper = trimmed.to_ascii_uppercase();
        if upper.ends_with("CRS84") {
            return Ok(Crs::Geographic);
        }
        let code = upper
            .strip_prefix("EPSG:")
            .or_else(|| upper.strip_prefix("URN:OGC:DEF:CRS:EPSG::"))
            .ok_or_else(err)?;
        let code: u32 = code.parse().map_err(|_| err())?;
        match code {
            4326 | 4258 => Ok(Crs::Geographic),
            25828..=25838 => Ok(Crs::UtmNorth {
                zone: (code - 25800) as u8,
            }),
            32601..=32660 => Ok(Crs::UtmNorth {
                zone: (code - 32600) as u8,
            }),
            _ => Err(err()),
        }
    }

    /// Converts one source position to `[lon, lat]` degrees.
    pub fn to_lon_lat(&self, position: [f64; 2]) -> [f64; 2] {
        match self {
            Crs::Geographic => position,
            Crs::UtmNorth { zone } => utm_inverse(*zone, position[0], position[1]),
        }
    }

    pub fn is_geographic(&self) -> bool {
        matches!(self, Crs::Geographic)
    }
}

impl fmt::Display for Crs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Crs::Geographic => f.write_str("EPSG:4326"),
            Crs::UtmNorth { zone } => write!(f, "EPSG:326{zone:02}"),
        }
    }
}

struct Series {
    n: f64,
    rect: f64,
    alpha: [f64; 3],
    beta: [f64; 3],
    delta: [f64; 3],
}

fn series() -> Series {
    let n = F / (2.0 - F);
    let n2 = n * n;
    let n3 = n2 * n;
    Series {
        n,
        rect: A / (1.0 + n) * (1.0 + n2 / 4.0 + n2 * n2 / 64.0),
        alpha: [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0,
            61.0 * n3 / 240.0,
        ],
        beta: [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0,
            n2 / 48.0 + n3 / 15.0,
            17.0 * n3 / 480.0,
        ],
        delta: [
            2.0 * n - 2.0 * n2 / 3.0 - 2.0 * n3,
            7.0 * n2 / 3.0 - 8.0 * n3 / 5.0,
            56.0 * n3 / 15.0,
        ],
    }
}

fn central_meridian(zone: u8) -> f64 {
    (zone as f64 * 6.0 - 183.0).to_radians()
}

/// Krüger series inverse: easting/northing in metres to `[lon, lat]` degrees.
pub fn utm_inverse(zone: u8, easting: f64, northing: f64) -> [f64; 2] {
    let s = series();
    let xi = northing / (K0 * s.rect);
    let eta = (easting - FALSE_EASTING) / (K0 * s.rect);
    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }
    let chi = (xi_p.sin() / eta_p.cosh()).asin();
    let mut lat = chi;
    for (j, d) in s.delta.iter().enumerate() {
        lat += d * (2.0 * (j + 1) as f64 * chi).sin();
    }
    let lon = central_meridian(zone) + eta_p.sinh().atan2(xi_p.cos());
    [lon.to_degrees(), lat.to_degrees()]
}

/// Krüger series forward: `[lon, lat]` degrees to easting/northing in metres.
pub fn utm_forward(zone: u8, lon: f64, lat: f64) -> [f64; 2] {
    let s = series();
    let phi = lat.to_radians();
    let dl = lon.to_radians() - central_meridian(zone);
    let c = 2.0 * s.n.sqrt() / (1.0 + s.n);
    let t = (phi.sin().atanh() - c * (c * phi.sin()).atanh()).sinh();
    let xi_p = t.atan2(dl.cos());
    let eta_p = (dl.sin() / (1.0 + t * t).sqrt()).atanh();
    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }
    [FALSE_EASTING + K0 * s.rect * eta, K0 * s.rect * xi]
}
