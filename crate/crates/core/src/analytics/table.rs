use std::path::Path;
use std::sync::Arc;

use arrow_array::{ArrayRef, Float64Array, RecordBatch, StringArray};
use arrow_schema::{DataType, Field, Schema};
use parquet::arrow::ArrowWriter;
use parquet::basic::Compression;
use parquet::file::properties::WriterProperties;

use super::AnalyticsError;

/// A small result table: string key columns followed by numeric measures.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticsTable {
    pub key_columns: Vec<String>,
    pub measure_columns: Vec<String>,
    pub rows: Vec<AnalyticsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticsRow {
    pub keys: Vec<String>,
    pub measures: Vec<f64>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AnalyticsError + '_ {
    move |source| AnalyticsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn other_err(path: &Path, e: impl std::fmt::Display) -> AnalyticsError {
    AnalyticsError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Shortest decimal that parses back to the same value.
fn number(v: f64) -> String {
    let s = format!("{v}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

impl AnalyticsTable {
    pub fn new(key_columns: &[&str], measure_columns: &[&str]) -> Self {
        AnalyticsTable {
            key_columns: key_columns.iter().map(|s| s.to_string()).collect(),
            measure_columns: measure_columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, keys: Vec<String>, measures: Vec<f64>) {
        debug_assert_eq!(keys.len(), self.key_columns.len());
        debug_assert_eq!(measures.len(), self.measure_columns.len());
        self.rows.push(AnalyticsRow { keys, measures });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Index of a measure column by name.
    pub fn measure(&self, name: &str) -> Option<usize> {
        self.measure_columns.iter().position(|c| c == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalyticsError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let tmp = tmp_path(path);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&tmp)
            .map_err(|e| other_err(path, e))?;
        let header: Vec<&str> = self
            .key_columns
            .iter()
            .chain(&self.measure_columns)
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(|e| other_err(path, e))?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .keys
                .iter()
                .cloned()
                .chain(row.measures.iter().map(|&v| number(v)))
                .collect();
            w.write_record(&cells).map_err(|e| other_err(path, e))?;
        }
        w.flush().map_err(io_err(path))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn write_parquet(&self, path: &Path) -> Result<(), AnalyticsError> {
        let fields: Vec<Field> = self
            .key_columns
            .iter()
            .map(|c| Field::new(c, DataType::Utf8, false))
            .chain(
                self.measure_columns
                    .iter()
                    .map(|c| Field::new(c, DataType::Float64, false)),
            )
            .collect();
        let schema = Arc::new(Schema::new(fields));
        let mut columns: Vec<ArrayRef> = Vec::new();
        for i in 0..self.key_columns.len() {
            columns.push(Arc::new(StringArray::from_iter_values(
                self.rows.iter().map(|r| r.keys[i].as_str()),
            )));
        }
        for i in 0..self.measure_columns.len() {
            columns.push(Arc::new(Float64Array::from_iter_values(
                self.rows.iter().map(|r| r.measures[i]),
            )));
        }
        let batch =
            RecordBatch::try_new(schema.clone(), columns).map_err(|e| other_err(path, e))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let tmp = tmp_path(path);
        let file = std::fs::File::create(&tmp).map_err(io_err(path))?;
        let props = WriterProperties::builder()
            .set_compression(Compression::SNAPPY)
            .build();
        let mut writer =
            ArrowWriter::try_new(file, schema, Some(props)).map_err(|e| other_err(path, e))?;
        writer.write(&batch).map_err(|e| other_err(path, e))?;
        writer.close().map_err(|e| other_err(path, e))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }
}
