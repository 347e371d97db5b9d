//! Shared helpers: a mock portal loaded with fixtures, a catalog pointing at
//! it, and a runner for the built binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spainmob::catalog::DEFAULT_CATALOG;
use spainmob::zones::crs::utm_forward;
use spainmob_mockportal::{gzip, MockPortal};

pub const FIXTURE_DAYS: [&str; 5] = ["20220320", "20220321", "20220322", "20220323", "20220324"];
pub const FIXTURE_ZONES: [&str; 5] = ["08019", "28006", "28065", "28079", "46250"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/od_v2_municipalities")
}

pub struct Env {
    pub portal: MockPortal,
    pub dir: tempfile::TempDir,
    pub catalog: PathBuf,
}

impl Env {
    pub fn out(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    /// Runs the binary with `--catalog` and `--out` pointing into this env.
    pub fn run<S: AsRef<str>>(&self, args: &[S]) -> Output {
        let mut full: Vec<String> = args.iter().map(|s| s.as_ref().to_string()).collect();
        full.push("--catalog".into());
        full.push(self.catalog.display().to_string());
        full.push("--out".into());
        full.push(self.out().display().to_string());
        run_raw(&full)
    }
}

pub fn run_raw<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spainmob"))
        .args(args)
        .env_remove("SPAINMOB_CACHE")
        .env_remove("SPAINMOB_CATALOG")
        .env_remove("SPAINMOB_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Portal path of a daily V2 municipality file, as the bundled catalog lays it out.
pub fn od_path(day: &str) -> String {
    format!(
        "/estudios_basicos/por-municipios/viajes/ficheros-diarios/{}-{}/{day}_Viajes_municipios.csv.gz",
        &day[..4],
        &day[4..6]
    )
}

pub fn overnight_path(day: &str) -> String {
    format!(
        "/estudios_basicos/por-municipios/pernoctaciones/ficheros-diarios/{}-{}/{day}_Pernoctaciones_municipios.csv.gz",
        &day[..4],
        &day[4..6]
    )
}

pub const MUNICIPALITY_GEOMETRY: &str =
    "/zonificacion/zonificacion_municipios/zonificacion_municipios.geojson";
pub const RELATIONS: &str = "/zonificacion/relacion_ine_zonificacionMitma.csv";

/// A portal serving the five authored OD days, a municipality layer, a
/// relation table and five days of overnight stays.
pub fn fixture_env() -> Env {
    let portal = MockPortal::start();
    for day in FIXTURE_DAYS {
        let raw =
            std::fs::read(fixture_dir().join(format!("{day}_Viajes_municipios.csv"))).unwrap();
        portal.add_file(&od_path(day), gzip(&raw));
        portal.add_file(&overnight_path(day), gzip(overnight_csv(day).as_bytes()));
    }
    portal.add_file(MUNICIPALITY_GEOMETRY, municipality_geojson());
    portal.add_file(RELATIONS, relations_csv());
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.json");
    std::fs::write(&catalog, portal.rewrite_hosts(DEFAULT_CATALOG)).unwrap();
    Env {
        portal,
        dir,
        catalog,
    }
}

/// Overnight stays of every zone's residents in the first four zones.
pub fn overnight_csv(day: &str) -> String {
    let mut s = String::from("fecha|zona_residencia|zona_pernoctacion|personas\n");
    for (i, res) in FIXTURE_ZONES.iter().enumerate() {
        // The last zone never hosts anyone, so it has no data on the map.
        for (j, night) in FIXTURE_ZONES[..4].iter().enumerate() {
            let persons = (i + 1) * 10 + j * 3;
            s.push_str(&format!("{day}|{res}|{night}|{persons}\n"));
        }
    }
    s
}

/// Approximate centres of the fixture municipalities.
const CENTRES: [(f64, f64); 5] = [
    (2.17, 41.39),
    (-3.56, 40.44),
    (-3.80, 40.30),
    (-3.70, 40.42),
    (-0.38, 39.47),
];

/// Square 0.05° zones, written in UTM 30N as the real portal does.
pub fn municipality_geojson() -> String {
    let features: Vec<serde_json::Value> = FIXTURE_ZONES
        .iter()
        .zip(CENTRES)
        .map(|(id, (lon, lat))| {
            let d = 0.025;
            let ring: Vec<[f64; 2]> = [
                (lon - d, lat - d),
                (lon + d, lat - d),
                (lon + d, lat + d),
                (lon - d, lat + d),
                (lon - d, lat - d),
            ]
            .iter()
            .map(|&(x, y)| utm_forward(30, x, y))
            .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {"ID": id, "name": format!("zone {id}")},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features}).to_string()
}

/// Two districts per municipality; Madrid-area municipalities share a GAU.
pub fn relations_csv() -> String {
    let mut s = String::from(
        "seccion_ine|distrito_ine|municipio_ine|distrito_mitma|municipio_mitma|gau_mitma\n",
    );
    for m in FIXTURE_ZONES {
        let gau = if m.starts_with("28") {
            "GAU_MADRID"
        } else {
            "NA"
        };
        for k in 1..=2 {
            s.push_str(&format!("{m}0{k}001|{m}0{k}|{m}|{m}0{k}|{m}|{gau}\n"));
        }
    }
    s
}

/// Reads a CSV file into a header and rows of fields.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

/// Field-wise comparison where numeric fields compare by value.
pub fn same_logical_rows(a: &[Vec<String>], b: &[Vec<String>]) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} rows vs {} rows", a.len(), b.len()));
    }
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.len() != rb.len() {
            return Err(format!("row {i}: {} fields vs {}", ra.len(), rb.len()));
        }
        for (fa, fb) in ra.iter().zip(rb) {
            let equal = fa == fb
                || match (numeric(fa), numeric(fb)) {
                    (Some(x), Some(y)) => x == y,
                    _ => false,
                };
            if !equal {
                return Err(format!("row {i}: {ra:?} vs {rb:?}"));
            }
        }
    }
    Ok(())
}

/// Numbers without leading zeros; zone codes such as `08019` stay text.
fn numeric(field: &str) -> Option<f64> {
    let digits = field.trim_start_matches('-');
    if digits.len() > 1 && digits.starts_with('0') && !digits.starts_with("0.") {
        return None;
    }
    field.parse().ok()
}
