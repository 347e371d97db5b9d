//! Columnar export of normalized tables.
//!
//! A dataset is a directory holding one Parquet file per day under
//! `day=YYYY-MM-DD/part-00000.parquet`. Every file also carries the `day`
//! column and key-value metadata naming the dataset kind, version and zone
//! level, so single files are self-describing. Column names and types are
//! documented in `docs/schema.md`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arrow_array::{ArrayRef, Date32Array, Float64Array, RecordBatch, StringArray, UInt8Array};
use arrow_schema::{DataType, Field as ArrowField, Schema, SchemaRef};
use chrono::NaiveDate;
use parquet::arrow::arrow_reader::ParquetRecordBatchReaderBuilder;
use parquet::arrow::ArrowWriter;
use parquet::basic::Compression;
use parquet::file::metadata::KeyValue;
use parquet::file::properties::WriterProperties;

use super::records::{OdRecord, OvernightStayRecord, Record, Table, TripsPerPersonRecord};
use super::NormalizeError;
use crate::model::{
    parse_zone_level, ActivityKind, AgeBand, DatasetKind, DatasetVersion, Gender, IncomeBand,
    TripsBand, ZoneId, ZoneLevel,
};

const META_KIND: &str = "spainmob.kind";
const META_LEVEL: &str = "spainmob.level";
const META_VERSION: &str = "spainmob.version";
const META_ACTIVITY: &str = "spainmob.activity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Parquet,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "parquet" => Ok(OutputFormat::Parquet),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(format!(
                "unknown format `{other}` (expected parquet or csv)"
            )),
        }
    }
}

/// Where an exported table landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedTable {
    /// Dataset directory (Parquet) or file (CSV).
    pub root: PathBuf,
    /// Every file written, in day order.
    pub files: Vec<PathBuf>,
    pub rows: usize,
}

const EPOCH: NaiveDate = match NaiveDate::from_ymd_opt(1970, 1, 1) {
    Some(d) => d,
    None => unreachable!(),
};

fn to_days(d: NaiveDate) -> i32 {
    (d - EPOCH).num_days() as i32
}

fn from_days(n: i32) -> NaiveDate {
    EPOCH + chrono::Duration::days(n as i64)
}

fn col(name: &str, dt: DataType) -> ArrowField {
    ArrowField::new(name, dt, false)
}

/// Record types with a fixed columnar layout.
pub trait Columnar: Record + Sized {
    fn schema(activity: bool) -> SchemaRef;
    fn to_columns(rows: &[Self], activity: bool) -> Vec<ArrayRef>;
    fn from_batch(batch: &RecordBatch) -> Result<Vec<Self>, String>;
    fn csv_row(&self, activity: bool) -> Vec<String>;
}

fn strings<'a, T: 'a>(rows: &'a [T], f: impl Fn(&'a T) -> &'a str) -> ArrayRef {
    Arc::new(StringArray::from_iter_values(rows.iter().map(f)))
}

fn floats<T>(rows: &[T], f: impl Fn(&T) -> f64) -> ArrayRef {
    Arc::new(Float64Array::from_iter_values(rows.iter().map(f)))
}

fn days<T>(rows: &[T], f: impl Fn(&T) -> NaiveDate) -> ArrayRef {
    Arc::new(Date32Array::from_iter_values(
        rows.iter().map(|r| to_days(f(r))),
    ))
}

struct BatchView<'a>(&'a RecordBatch);

impl<'a> BatchView<'a> {
    fn column<T: 'static>(&self, name: &str) -> Result<&'a T, String> {
        self.0
            .column_by_name(name)
            .ok_or_else(|| format!("missing column `{name}`"))?
            .as_any()
            .downcast_ref::<T>()
            .ok_or_else(|| format!("column `{name}` has an unexpected type"))
    }

    fn has(&self, name: &str) -> bool {
        self.0.column_by_name(name).is_some()
    }

    fn strs(&self, name: &str) -> Result<&'a StringArray, String> {
        self.column::<StringArray>(name)
    }

    fn f64s(&self, name: &str) -> Result<&'a Float64Array, String> {
        self.column::<Float64Array>(name)
    }

    fn dates(&self, name: &str) -> Result<&'a Date32Array, String> {
        self.column::<Date32Array>(name)
    }
}

fn zone(s: &str) -> Result<ZoneId, String> {
    ZoneId::new(s).map_err(|e| e.to_string())
}

fn num(v: f64) -> String {
    format!("{v}")
}

impl Columnar for OdRecord {
    fn schema(activity: bool) -> SchemaRef {
        let mut fields = vec![
            col("day", DataType::Date32),
            col("hour", DataType::UInt8),
            col("origin", DataType::Utf8),
            col("destination", DataType::Utf8),
        ];
        if activity {
            fields.push(col("activity_origin", DataType::Utf8));
            fields.push(col("activity_destination", DataType::Utf8));
        }
        fields.extend([
            col("age", DataType::Utf8),
            col("gender", DataType::Utf8),
            col("income", DataType::Utf8),
            col("distance_band", DataType::Utf8),
            col("trips", DataType::Float64),
            col("trips_km", DataType::Float64),
        ]);
        Arc::new(Schema::new(fields))
    }

    fn to_columns(rows: &[Self], activity: bool) -> Vec<ArrayRef> {
        let mut cols = vec![
            days(rows, |r| r.day),
            Arc::new(UInt8Array::from_iter_values(rows.iter().map(|r| r.hour))) as ArrayRef,
            strings(rows, |r| r.origin.as_str()),
            strings(rows, |r| r.destination.as_str()),
        ];
        if activity {
            cols.push(strings(rows, |r| r.activity_origin.label()));
            cols.push(strings(rows, |r| r.activity_destination.label()));
        }
        cols.extend([
            strings(rows, |r| r.age.label()),
            strings(rows, |r| r.gender.label()),
            strings(rows, |r| r.income.label()),
            strings(rows, |r| r.distance_band.as_str()),
            floats(rows, |r| r.trips),
            floats(rows, |r| r.trips_km),
        ]);
        cols
    }

    fn from_batch(batch: &RecordBatch) -> Result<Vec<Self>, String> {
        let v = BatchView(batch);
        let day = v.dates("day")?;
        let hour = v.column::<UInt8Array>("hour")?;
        let origin = v.strs("origin")?;
        let destination = v.strs("destination")?;
        let activity = if v.has("activity_origin") {
            Some((v.strs("activity_origin")?, v.strs("activity_destination")?))
        } else {
            None
        };
        let age = v.strs("age")?;
        let gender = v.strs("gender")?;
        let income = v.strs("income")?;
        let distance = v.strs("distance_band")?;
        let trips = v.f64s("trips")?;
        let trips_km = v.f64s("trips_km")?;
        (0..batch.num_rows())
            .map(|i| {
                let (ao, ad) = match activity {
                    Some((o, d)) => (
                        ActivityKind::from_label(o.value(i)).map_err(|e| e.to_string())?,
                        ActivityKind::from_label(d.value(i)).map_err(|e| e.to_string())?,
                    ),
                    None => (
                        ActivityKind::NotDisaggregated,
                        ActivityKind::NotDisaggregated,
                    ),
                };
                Ok(OdRecord {
                    day: from_days(day.value(i)),
                    hour: hour.value(i),
                    origin: zone(origin.value(i))?,
                    destination: zone(destination.value(i))?,
                    activity_origin: ao,
                    activity_destination: ad,
                    age: AgeBand::from_label(age.value(i)).map_err(|e| e.to_string())?,
                    gender: Gender::from_label(gender.value(i)).map_err(|e| e.to_string())?,
                    income: IncomeBand::from_label(income.value(i)).map_err(|e| e.to_string())?,
                    distance_band: distance.value(i).to_string(),
                    trips: trips.value(i),
                    trips_km: trips_km.value(i),
                })
            })
            .collect()
    }

    fn csv_row(&self, activity: bool) -> Vec<String> {
        let mut row = vec![
            self.day.to_string(),
            self.hour.to_string(),
            self.origin.to_string(),
            self.destination.to_string(),
        ];
        if activity {
            row.push(self.activity_origin.label().into());
            row.push(self.activity_destination.label().into());
        }
        row.extend([
            self.age.label().into(),
            self.gender.label().into(),
            self.income.label().into(),
            self.distance_band.clone(),
            num(self.trips),
            num(self.trips_km),
        ]);
        row
    }
}

impl Columnar for TripsPerPersonRecord {
    fn schema(_activity: bool) -> SchemaRef {
        Arc::new(Schema::new(vec![
            col("day", DataType::Date32),
            col("zone", DataType::Utf8),
            col("age", DataType::Utf8),
            col("gender", DataType::Utf8),
            col("trips_band", DataType::Utf8),
            col("persons", DataType::Float64),
        ]))
    }

    fn to_columns(rows: &[Self], _activity: bool) -> Vec<ArrayRef> {
        vec![
            days(rows, |r| r.day),
            strings(rows, |r| r.zone.as_str()),
            strings(rows, |r| r.age.label()),
            strings(rows, |r| r.gender.label()),
            strings(rows, |r| r.trips_band.label()),
            floats(rows, |r| r.persons),
        ]
    }

    fn from_batch(batch: &RecordBatch) -> Result<Vec<Self>, String> {
        let v = BatchView(batch);
        let (day, z, age, gender, band, persons) = (
            v.dates("day")?,
            v.strs("zone")?,
            v.strs("age")?,
            v.strs("gender")?,
            v.strs("trips_band")?,
            v.f64s("persons")?,
        );
        (0..batch.num_rows())
            .map(|i| {
                Ok(TripsPerPersonRecord {
                    day: from_days(day.value(i)),
                    zone: zone(z.value(i))?,
                    age: AgeBand::from_label(age.value(i)).map_err(|e| e.to_string())?,
                    gender: Gender::from_label(gender.value(i)).map_err(|e| e.to_string())?,
                    trips_band: TripsBand::from_label(band.value(i)).map_err(|e| e.to_string())?,
                    persons: persons.value(i),
                })
            })
            .collect()
    }

    fn csv_row(&self, _activity: bool) -> Vec<String> {
        vec![
            self.day.to_string(),
            self.zone.to_string(),
            self.age.label().into(),
            self.gender.label().into(),
            self.trips_band.label().into(),
            num(self.persons),
        ]
    }
}

impl Columnar for OvernightStayRecord {
    fn schema(_activity: bool) -> SchemaRef {
        Arc::new(Schema::new(vec![
            col("day", DataType::Date32),
            col("residence_zone", DataType::Utf8),
            col("overnight_zone", DataType::Utf8),
            col("persons", DataType::Float64),
        ]))
    }

    fn to_columns(rows: &[Self], _activity: bool) -> Vec<ArrayRef> {
        vec![
            days(rows, |r| r.day),
            strings(rows, |r| r.residence_zone.as_str()),
            strings(rows, |r| r.overnight_zone.as_str()),
            floats(rows, |r| r.persons),
        ]
    }

    fn from_batch(batch: &RecordBatch) -> Result<Vec<Self>, String> {
        let v = BatchView(batch);
        let (day, res, over, persons) = (
            v.dates("day")?,
            v.strs("residence_zone")?,
            v.strs("overnight_zone")?,
            v.f64s("persons")?,
        );
        (0..batch.num_rows())
            .map(|i| {
                Ok(OvernightStayRecord {
                    day: from_days(day.value(i)),
                    residence_zone: zone(res.value(i))?,
                    overnight_zone: zone(over.value(i))?,
                    persons: persons.value(i),
                })
            })
            .collect()
    }

    fn csv_row(&self, _activity: bool) -> Vec<String> {
        vec![
            self.day.to_string(),
            self.residence_zone.to_string(),
            self.overnight_zone.to_string(),
            num(self.persons),
        ]
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NormalizeError + '_ {
    move |source| NormalizeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parquet_err(path: &Path, e: impl std::fmt::Display) -> NormalizeError {
    NormalizeError::Export {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn metadata<T: Columnar>(table: &Table<T>) -> Vec<KeyValue> {
    let mut kv = vec![
        KeyValue::new(META_KIND.to_string(), T::KIND.as_str().to_string()),
        KeyValue::new(META_LEVEL.to_string(), table.level.as_str().to_string()),
        KeyValue::new(META_ACTIVITY.to_string(), table.activity.to_string()),
    ];
    if let Some(v) = table.version {
        kv.push(KeyValue::new(
            META_VERSION.to_string(),
            v.number().to_string(),
        ));
    }
    kv
}

fn activity_of<T: Columnar>(table: &Table<T>) -> bool {
    T::KIND == DatasetKind::OriginDestination && table.activity
}

fn write_parquet_file<T: Columnar>(
    path: &Path,
    table: &Table<T>,
    rows: &[T],
) -> Result<(), NormalizeError> {
    let activity = activity_of(table);
    let schema = T::schema(activity);
    let batch = RecordBatch::try_new(schema.clone(), T::to_columns(rows, activity))
        .map_err(|e| parquet_err(path, e))?;
    let props = WriterProperties::builder()
        .set_compression(Compression::SNAPPY)
        .set_created_by(concat!("spainmob ", env!("CARGO_PKG_VERSION")).to_string())
        .set_key_value_metadata(Some(metadata(table)))
        .build();
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer =
        ArrowWriter::try_new(file, schema, Some(props)).map_err(|e| parquet_err(path, e))?;
    writer.write(&batch).map_err(|e| parquet_err(path, e))?;
    writer.close().map_err(|e| parquet_err(path, e))?;
    Ok(())
}

/// Writes a table as a day-partitioned Parquet dataset at `root`, replacing
/// any previous dataset there. Files are staged in a sibling directory and
/// moved into place once all of them are written.
pub fn write_parquet_dataset<T: Columnar>(
    table: &Table<T>,
    root: &Path,
) -> Result<ExportedTable, NormalizeError> {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let parent = root.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let mut relative = Vec::new();
    let mut start = 0;
    while start < table.records.len() {
        let day = table.records[start].day();
        let end = start
            + table.records[start..]
                .iter()
                .take_while(|r| r.day() == day)
                .count();
        let rel = PathBuf::from(format!("day={day}")).join("part-00000.parquet");
        let path = staging.join(&rel);
        fs::create_dir_all(path.parent().unwrap()).map_err(io_err(&staging))?;
        write_parquet_file(&path, table, &table.records[start..end])?;
        relative.push(rel);
        start = end;
    }
    if relative.is_empty() {
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    }
    if root.exists() {
        fs::remove_dir_all(root).map_err(io_err(root))?;
    }
    fs::rename(&staging, root).map_err(io_err(root))?;
    Ok(ExportedTable {
        root: root.to_path_buf(),
        files: relative.into_iter().map(|r| root.join(r)).collect(),
        rows: table.records.len(),
    })
}

/// Writes an RFC 4180 CSV file (UTF-8, LF line endings, header row).
pub fn write_csv<T: Columnar>(
    table: &Table<T>,
    path: &Path,
) -> Result<ExportedTable, NormalizeError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let activity = activity_of(table);
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&tmp)
            .map_err(|e| parquet_err(&tmp, e))?;
        let schema = T::schema(activity);
        w.write_record(schema.fields().iter().map(|f| f.name().as_str()))
            .map_err(|e| parquet_err(&tmp, e))?;
        for r in &table.records {
            w.write_record(r.csv_row(activity))
                .map_err(|e| parquet_err(&tmp, e))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(ExportedTable {
        root: path.to_path_buf(),
        files: vec![path.to_path_buf()],
        rows: table.records.len(),
    })
}

/// Exports `table` under `dir` as `<stem>` (Parquet dataset) or `<stem>.csv`.
pub fn export<T: Columnar>(
    table: &Table<T>,
    dir: &Path,
    stem: &str,
    format: OutputFormat,
) -> Result<ExportedTable, NormalizeError> {
    match format {
        OutputFormat::Parquet => write_parquet_dataset(table, &dir.join(stem)),
        OutputFormat::Csv => write_csv(table, &dir.join(format!("{stem}.csv"))),
    }
}

fn parquet_files(path: &Path) -> Result<Vec<PathBuf>, NormalizeError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for item in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let item = item.map_err(io_err(&dir))?;
            let p = item.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "parquet") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a dataset written by [`write_parquet_dataset`] (or one of its files).
pub fn read_parquet<T: Columnar>(path: &Path) -> Result<Table<T>, NormalizeError> {
    let files = parquet_files(path)?;
    let mut level: Option<ZoneLevel> = None;
    let mut version = None;
    let mut activity = T::KIND == DatasetKind::OriginDestination;
    let mut records = Vec::new();
    for file_path in &files {
        let file = File::open(file_path).map_err(io_err(file_path))?;
        let builder = ParquetRecordBatchReaderBuilder::try_new(file)
            .map_err(|e| parquet_err(file_path, e))?;
        let kv: Vec<(String, String)> = builder
            .metadata()
            .file_metadata()
            .key_value_metadata()
            .map(|kv| {
                kv.iter()
                    .filter_map(|e| Some((e.key.clone(), e.value.clone()?)))
                    .collect()
            })
            .unwrap_or_default();
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        if let Some(kind) = get(META_KIND) {
            if kind != T::KIND.as_str() {
                return Err(parquet_err(
                    file_path,
                    format!("file holds `{kind}` records, expected `{}`", T::KIND),
                ));
            }
        }
        let file_level = get(META_LEVEL)
            .map(parse_zone_level)
            .transpose()
            .map_err(|e| parquet_err(file_path, e))?;
        match (level, file_level) {
            (Some(a), Some(b)) if a != b => {
                return Err(parquet_err(
                    file_path,
                    format!("mixed zone levels {a} and {b}"),
                ))
            }
            (None, b) => level = b,
            _ => {}
        }
        if let Some(v) = get(META_VERSION).and_then(|v| v.parse::<i64>().ok()) {
            version = DatasetVersion::from_number(v).ok();
        }
        if let Some(a) = get(META_ACTIVITY) {
            activity = a == "true";
        }
        let reader = builder.build().map_err(|e| parquet_err(file_path, e))?;
        for batch in reader {
            let batch = batch.map_err(|e| parquet_err(file_path, e))?;
            records.extend(T::from_batch(&batch).map_err(|e| parquet_err(file_path, e))?);
        }
    }
    Ok(Table {
        level: level.ok_or_else(|| parquet_err(path, "no zone level metadata (empty dataset?)"))?,
        version,
        activity: activity && T::KIND == DatasetKind::OriginDestination,
        records,
    })
}

/// Reads a CSV file written by [`write_csv`].
pub fn read_csv_od(path: &Path, level: ZoneLevel) -> Result<Table<OdRecord>, NormalizeError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parquet_err(path, e))?;
    let headers = r.headers().map_err(|e| parquet_err(path, e))?.clone();
    let activity = headers.iter().any(|h| h == "activity_origin");
    let idx = |name: &str| headers.iter().position(|h| h == name);
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| parquet_err(path, e))?;
        let get = |name: &str| -> Result<&str, NormalizeError> {
            idx(name)
                .and_then(|i| row.get(i))
                .ok_or_else(|| parquet_err(path, format!("missing `{name}`")))
        };
        let bad = |e: String| parquet_err(path, e);
        let act = |name: &str| -> Result<ActivityKind, NormalizeError> {
            if activity {
                ActivityKind::from_label(get(name)?).map_err(|e| bad(e.to_string()))
            } else {
                Ok(ActivityKind::NotDisaggregated)
            }
        };
        records.push(OdRecord {
            day: get("day")?
                .parse()
                .map_err(|e: chrono::ParseError| bad(e.to_string()))?,
            hour: get("hour")?
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            origin: zone(get("origin")?).map_err(bad)?,
            destination: zone(get("destination")?).map_err(bad)?,
            activity_origin: act("activity_origin")?,
            activity_destination: act("activity_destination")?,
            age: AgeBand::from_label(get("age")?).map_err(|e| bad(e.to_string()))?,
            gender: Gender::from_label(get("gender")?).map_err(|e| bad(e.to_string()))?,
            income: IncomeBand::from_label(get("income")?).map_err(|e| bad(e.to_string()))?,
            distance_band: get("distance_band")?.to_string(),
            trips: get("trips")?
                .parse()
                .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            trips_km: get("trips_km")?
                .parse()
                .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        });
    }
    Ok(Table {
        level,
        version: None,
        activity,
        records,
    })
}

/// Column names of the exported schema.
pub fn column_names<T: Columnar>(activity: bool) -> Vec<String> {
    T::schema(activity)
        .fields()
        .iter()
        .map(|f| f.name().clone())
        .collect()
}
