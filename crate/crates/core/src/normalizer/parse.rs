//! Streaming parser for gzip-compressed delimited files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::marker::PhantomData;

use chrono::NaiveDate;
use flate2::read::MultiGzDecoder;
use regex::Regex;

use super::records::{OdRecord, OvernightStayRecord, Record, TripsPerPersonRecord};
use super::schema::{ColumnRef, Field, SchemaMap};
use super::NormalizeError;
use crate::fetcher::CacheEntry;
use crate::model::{is_null_marker, ActivityKind, AgeBand, Gender, IncomeBand, TripsBand, ZoneId};

pub const MAX_REPORTED_ERRORS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Stop at the first malformed row.
    #[default]
    Strict,
    /// Skip malformed rows, counting them.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rows_read: u64,
    pub rows_emitted: u64,
    pub rows_skipped: u64,
    /// First [`MAX_REPORTED_ERRORS`] problems as `(line, message)`.
    pub first_errors: Vec<(u64, String)>,
    /// Set when a lenient parse stopped early on a corrupt stream.
    pub aborted: Option<String>,
}

impl ParseReport {
    fn note(&mut self, line: u64, message: String) {
        if self.first_errors.len() < MAX_REPORTED_ERRORS {
            self.first_errors.push((line, message));
        }
    }

    pub fn merge(&mut self, other: &ParseReport) {
        self.rows_read += other.rows_read;
        self.rows_emitted += other.rows_emitted;
        self.rows_skipped += other.rows_skipped;
        for (line, msg) in &other.first_errors {
            self.note(*line, msg.clone());
        }
        if self.aborted.is_none() {
            self.aborted.clone_from(&other.aborted);
        }
    }
}

/// Column positions resolved against a file's header.
struct Bindings {
    columns: BTreeMap<Field, usize>,
}

/// One raw row with access by normalized field.
pub struct Row<'a> {
    record: &'a csv::StringRecord,
    bindings: &'a Bindings,
    schema: &'a SchemaMap,
    zone_pattern: &'a Regex,
    fallback_day: Option<NaiveDate>,
}

impl Row<'_> {
    fn raw(&self, field: Field) -> Result<Option<&str>, String> {
        match self.bindings.columns.get(&field) {
            None => Ok(None),
            Some(&i) => self
                .record
                .get(i)
                .map(|s| Some(s.trim()))
                .ok_or_else(|| format!("missing column for `{}`", field.as_str())),
        }
    }

    fn required(&self, field: Field) -> Result<&str, String> {
        self.raw(field)?
            .ok_or_else(|| format!("`{}` is not bound", field.as_str()))
    }

    pub fn day(&self) -> Result<NaiveDate, String> {
        match self.raw(Field::Day)? {
            Some(raw) => NaiveDate::parse_from_str(raw, &self.schema.date_format)
                .map_err(|_| format!("bad date `{raw}`")),
            None => self
                .fallback_day
                .ok_or_else(|| "no day column and no descriptor day".to_string()),
        }
    }

    pub fn hour(&self) -> Result<u8, String> {
        let raw = self.required(Field::Hour)?;
        match raw.parse::<u8>() {
            Ok(h) if h <= 23 => Ok(h),
            _ => Err(format!("bad hour `{raw}`")),
        }
    }

    pub fn zone(&self, field: Field) -> Result<ZoneId, String> {
        let raw = self.required(field)?;
        if !self.zone_pattern.is_match(raw) {
            return Err(format!("bad zone id `{raw}` in `{}`", field.as_str()));
        }
        ZoneId::new(raw).map_err(|e| e.to_string())
    }

    /// Non-negative finite number, honoring the schema's decimal separator.
    pub fn quantity(&self, field: Field) -> Result<f64, String> {
        let raw = match self.raw(field)? {
            Some(raw) => raw,
            None => return Ok(0.0),
        };
        let text = if self.schema.decimal_separator == '.' {
            std::borrow::Cow::Borrowed(raw)
        } else {
            std::borrow::Cow::Owned(raw.replace(self.schema.decimal_separator, "."))
        };
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            _ => Err(format!("bad `{}` value `{raw}`", field.as_str())),
        }
    }

    fn label(&self, field: Field) -> Result<Option<&str>, String> {
        let raw = match self.raw(field)? {
            None => return Ok(None),
            Some(raw) => raw,
        };
        if is_null_marker(raw) && field != Field::TripsBand {
            return Ok(None);
        }
        self.schema
            .canonical(field, raw)
            .map(Some)
            .ok_or_else(|| format!("unmapped `{}` token `{raw}`", field.as_str()))
    }

    pub fn activity(&self, field: Field) -> Result<ActivityKind, String> {
        match self.label(field)? {
            None => Ok(ActivityKind::NotDisaggregated),
            Some(l) => ActivityKind::from_label(l).map_err(|e| e.to_string()),
        }
    }

    pub fn age(&self) -> Result<AgeBand, String> {
        match self.label(Field::Age)? {
            None => Ok(AgeBand::NotDisaggregated),
            Some(l) => AgeBand::from_label(l).map_err(|e| e.to_string()),
        }
    }

    pub fn gender(&self) -> Result<Gender, String> {
        match self.label(Field::Gender)? {
            None => Ok(Gender::NotDisaggregated),
            Some(l) => Gender::from_label(l).map_err(|e| e.to_string()),
        }
    }

    pub fn income(&self) -> Result<IncomeBand, String> {
        match self.label(Field::Income)? {
            None => Ok(IncomeBand::NotDisaggregated),
            Some(l) => IncomeBand::from_label(l).map_err(|e| e.to_string()),
        }
    }

    pub fn trips_band(&self) -> Result<TripsBand, String> {
        match self.label(Field::TripsBand)? {
            None => Err("`trips_band` is not bound".into()),
            Some(l) => TripsBand::from_label(l).map_err(|e| e.to_string()),
        }
    }

    pub fn text(&self, field: Field) -> Result<String, String> {
        Ok(self.raw(field)?.unwrap_or("NA").to_string())
    }
}

/// Record types that can be built from a raw row.
pub trait FromRow: Record {
    fn from_row(row: &Row<'_>) -> Result<Self, String>;
}

impl FromRow for OdRecord {
    fn from_row(row: &Row<'_>) -> Result<Self, String> {
        Ok(OdRecord {
            day: row.day()?,
            hour: row.hour()?,
            origin: row.zone(Field::Origin)?,
            destination: row.zone(Field::Destination)?,
            activity_origin: row.activity(Field::ActivityOrigin)?,
            activity_destination: row.activity(Field::ActivityDestination)?,
            age: row.age()?,
            gender: row.gender()?,
            income: row.income()?,
            distance_band: row.text(Field::DistanceBand)?,
            trips: row.quantity(Field::Trips)?,
            trips_km: row.quantity(Field::TripsKm)?,
        })
    }
}

impl FromRow for TripsPerPersonRecord {
    fn from_row(row: &Row<'_>) -> Result<Self, String> {
        Ok(TripsPerPersonRecord {
            day: row.day()?,
            zone: row.zone(Field::Zone)?,
            age: row.age()?,
            gender: row.gender()?,
            trips_band: row.trips_band()?,
            persons: row.quantity(Field::Persons)?,
        })
    }
}

impl FromRow for OvernightStayRecord {
    fn from_row(row: &Row<'_>) -> Result<Self, String> {
        Ok(OvernightStayRecord {
            day: row.day()?,
            residence_zone: row.zone(Field::ResidenceZone)?,
            overnight_zone: row.zone(Field::OvernightZone)?,
            persons: row.quantity(Field::Persons)?,
        })
    }
}

fn stream_error(err: csv::Error) -> NormalizeError {
    match err.kind() {
        csv::ErrorKind::Io(e) => NormalizeError::GzipCorrupt(e.to_string()),
        _ => NormalizeError::GzipCorrupt(err.to_string()),
    }
}

/// Iterator over the records of one file. The [`ParseReport`] is available
/// once the iterator is exhausted.
pub struct RecordReader<T, R: Read> {
    csv: csv::Reader<R>,
    bindings: Bindings,
    schema: SchemaMap,
    zone_pattern: Regex,
    fallback_day: Option<NaiveDate>,
    mode: ParseMode,
    report: ParseReport,
    record: csv::StringRecord,
    done: bool,
    _marker: PhantomData<T>,
}

impl<T: FromRow, R: Read> RecordReader<T, R> {
    /// Reads from already decompressed text.
    pub fn new(
        reader: R,
        schema: &SchemaMap,
        mode: ParseMode,
        fallback_day: Option<NaiveDate>,
    ) -> Result<Self, NormalizeError> {
        if schema.target != T::KIND {
            return Err(NormalizeError::SchemaMismatch(format!(
                "schema `{}` parses {} files, not {}",
                schema.schema_id,
                schema.target,
                T::KIND
            )));
        }
        let mut csv = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter as u8)
            .has_headers(schema.has_header)
            .flexible(true)
            .trim(csv::Trim::None)
            .from_reader(reader);
        let header: Option<Vec<String>> = if schema.has_header {
            let h = csv.headers().map_err(stream_error)?;
            Some(
                h.iter()
                    .map(|s| s.trim().trim_start_matches('\u{feff}').to_string())
                    .collect(),
            )
        } else {
            None
        };
        let mut columns = BTreeMap::new();
        let mut missing = Vec::new();
        for (field, col) in &schema.columns {
            match (col, &header) {
                (ColumnRef::Name(name), Some(h)) => match h.iter().position(|c| c == name) {
                    Some(i) => {
                        columns.insert(*field, i);
                    }
                    None => missing.push(name.clone()),
                },
                (ColumnRef::Index(i), Some(h)) if *i >= h.len() => missing.push(format!("#{i}")),
                (ColumnRef::Index(i), _) => {
                    columns.insert(*field, *i);
                }
                (ColumnRef::Name(name), None) => missing.push(name.clone()),
            }
        }
        // An empty file has no header at all; that is an empty table, not drift.
        let empty_file = header
            .as_ref()
            .is_some_and(|h| h.len() == 1 && h[0].is_empty());
        if !missing.is_empty() && !empty_file {
            return Err(NormalizeError::SchemaMismatch(format!(
                "columns not found in header: {} (header: {})",
                missing.join(", "),
                header
                    .map(|h| h.join(&schema.delimiter.to_string()))
                    .unwrap_or_default()
            )));
        }
        let zone_pattern = Regex::new(&schema.zone_id_pattern)
            .map_err(|e| NormalizeError::SchemaMismatch(e.to_string()))?;
        Ok(RecordReader {
            csv,
            bindings: Bindings { columns },
            schema: schema.clone(),
            zone_pattern,
            fallback_day,
            mode,
            report: ParseReport::default(),
            record: csv::StringRecord::new(),
            done: empty_file,
            _marker: PhantomData,
        })
    }

    pub fn report(&self) -> &ParseReport {
        &self.report
    }

    pub fn into_report(self) -> ParseReport {
        self.report
    }
}

impl<T: FromRow, R: Read> Iterator for RecordReader<T, R> {
    type Item = Result<T, NormalizeError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            match self.csv.read_record(&mut self.record) {
                Ok(false) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    let err = stream_error(e);
                    return match self.mode {
                        ParseMode::Strict => Some(Err(err)),
                        ParseMode::Lenient => {
                            self.report.aborted = Some(err.to_string());
                            let line = self.csv.position().line();
                            self.report.note(line, err.to_string());
                            None
                        }
                    };
                }
                Ok(true) => {}
            }
            if self.record.len() == 1 && self.record[0].trim().is_empty() {
                continue;
            }
            self.report.rows_read += 1;
            let line = self.record.position().map(|p| p.line()).unwrap_or(0);
            let row = Row {
                record: &self.record,
                bindings: &self.bindings,
                schema: &self.schema,
                zone_pattern: &self.zone_pattern,
                fallback_day: self.fallback_day,
            };
            match T::from_row(&row) {
                Ok(rec) => {
                    self.report.rows_emitted += 1;
                    return Some(Ok(rec));
                }
                Err(message) => {
                    self.report.rows_skipped += 1;
                    self.report.note(line, message.clone());
                    if self.mode == ParseMode::Strict {
                        self.done = true;
                        return Some(Err(NormalizeError::MalformedRow { line, message }));
                    }
                }
            }
        }
    }
}

pub type FileReader<T> = RecordReader<T, MultiGzDecoder<BufReader<File>>>;

/// Opens a cached gzip file as a record stream.
pub fn open_file<T: FromRow>(
    entry: &CacheEntry,
    schema: &SchemaMap,
    mode: ParseMode,
) -> Result<FileReader<T>, NormalizeError> {
    if entry.descriptor.schema_id != schema.schema_id {
        return Err(NormalizeError::SchemaMismatch(format!(
            "file expects schema `{}`, got `{}`",
            entry.descriptor.schema_id, schema.schema_id
        )));
    }
    let file = File::open(&entry.local_path).map_err(|e| NormalizeError::Io {
        path: entry.local_path.clone(),
        source: e,
    })?;
    let decoder = MultiGzDecoder::new(BufReader::with_capacity(1 << 16, file));
    RecordReader::new(decoder, schema, mode, entry.descriptor.day)
}

/// Drains a record stream. Strict mode returns the first error.
pub fn collect<T: FromRow, R: Read>(
    mut reader: RecordReader<T, R>,
) -> Result<(Vec<T>, ParseReport), NormalizeError> {
    let mut out = Vec::new();
    for item in reader.by_ref() {
        out.push(item?);
    }
    Ok((out, reader.into_report()))
}

pub fn parse_od_file(
    entry: &CacheEntry,
    schema: &SchemaMap,
    mode: ParseMode,
) -> Result<(Vec<OdRecord>, ParseReport), NormalizeError> {
    collect(open_file(entry, schema, mode)?)
}

pub fn parse_trips_file(
    entry: &CacheEntry,
    schema: &SchemaMap,
    mode: ParseMode,
) -> Result<(Vec<TripsPerPersonRecord>, ParseReport), NormalizeError> {
    collect(open_file(entry, schema, mode)?)
}

pub fn parse_overnight_file(
    entry: &CacheEntry,
    schema: &SchemaMap,
    mode: ParseMode,
) -> Result<(Vec<OvernightStayRecord>, ParseReport), NormalizeError> {
    collect(open_file(entry, schema, mode)?)
}

/// Parses decompressed text; convenient for tests and piped input.
pub fn parse_text<T: FromRow>(
    text: &str,
    schema: &SchemaMap,
    mode: ParseMode,
    fallback_day: Option<NaiveDate>,
) -> Result<(Vec<T>, ParseReport), NormalizeError> {
    collect(RecordReader::new(
        text.as_bytes(),
        schema,
        mode,
        fallback_day,
    )?)
}
