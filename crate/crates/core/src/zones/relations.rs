//! Crosswalk between districts, municipalities, greater urban areas and
//! census codes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ZoneError;
use crate::model::{is_null_marker, ZoneId};

/// Column layout of the published relation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSchema {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    pub district: String,
    pub municipality: String,
    #[serde(default)]
    pub gau: Option<String>,
    #[serde(default)]
    pub census: Vec<String>,
}

fn default_delimiter() -> char {
    '|'
}

fn default_true() -> bool {
    true
}

impl RelationSchema {
    /// The layout written by [`ZoneRelations::write_csv`].
    pub fn normalized() -> Self {
        RelationSchema {
            delimiter: ',',
            has_header: true,
            district: "district_id".into(),
            municipality: "municipality_id".into(),
            gau: Some("gau_id".into()),
            census: vec!["census_refs".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneRelation {
    pub district_id: ZoneId,
    pub municipality_id: ZoneId,
    pub gau_id: Option<ZoneId>,
    /// Official census codes linked to the district, deduplicated and sorted.
    pub census_refs: Vec<String>,
}

/// Validated relation table, one row per district, sorted by district id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZoneRelations {
    rows: Vec<ZoneRelation>,
    by_district: BTreeMap<ZoneId, usize>,
    by_municipality: BTreeMap<ZoneId, Vec<ZoneId>>,
}

impl ZoneRelations {
    /// Builds the table, merging repeated district rows that agree on their
    /// parents and rejecting those that do not.
    pub fn from_rows(rows: impl IntoIterator<Item = ZoneRelation>) -> Result<Self, ZoneError> {
        let mut merged: BTreeMap<ZoneId, ZoneRelation> = BTreeMap::new();
        for row in rows {
            match merged.get_mut(&row.district_id) {
                None => {
                    merged.insert(row.district_id.clone(), row);
                }
                Some(existing) => {
                    if existing.municipality_id != row.municipality_id {
                        return Err(ZoneError::RelationIntegrity {
                            district_id: row.district_id.to_string(),
                            message: format!(
                                "municipalities {} and {}",
                                existing.municipality_id, row.municipality_id
                            ),
                        });
                    }
                    if existing.gau_id != row.gau_id {
                        return Err(ZoneError::RelationIntegrity {
                            district_id: row.district_id.to_string(),
                            message: format!(
                                "greater urban areas {:?} and {:?}",
                                existing.gau_id.as_ref().map(ZoneId::as_str),
                                row.gau_id.as_ref().map(ZoneId::as_str)
                            ),
                        });
                    }
                    existing.census_refs.extend(row.census_refs);
                }
            }
        }
        let mut out = ZoneRelations::default();
        for (i, (district, mut row)) in merged.into_iter().enumerate() {
            row.census_refs.sort();
            row.census_refs.dedup();
            out.by_municipality
                .entry(row.municipality_id.clone())
                .or_default()
                .push(district.clone());
            out.by_district.insert(district, i);
            out.rows.push(row);
        }
        Ok(out)
    }

    pub fn rows(&self) -> &[ZoneRelation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, district: &ZoneId) -> Option<&ZoneRelation> {
        self.by_district.get(district).map(|&i| &self.rows[i])
    }

    pub fn municipality_of(&self, district: &ZoneId) -> Option<&ZoneId> {
        self.get(district).map(|r| &r.municipality_id)
    }

    /// `Some(None)` for a known district outside every greater urban area.
    pub fn gau_of(&self, district: &ZoneId) -> Option<Option<&ZoneId>> {
        self.get(district).map(|r| r.gau_id.as_ref())
    }

    /// Districts of a municipality in ascending order; empty when unknown.
    pub fn districts_of(&self, municipality: &ZoneId) -> &[ZoneId] {
        self.by_municipality
            .get(municipality)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Greater urban area of a municipality, taken from any of its districts.
    pub fn gau_of_municipality(&self, municipality: &ZoneId) -> Option<Option<&ZoneId>> {
        let first = self.districts_of(municipality).first()?;
        self.gau_of(first)
    }

    /// Parses a delimited relation file.
    pub fn read(reader: impl Read, schema: &RelationSchema) -> Result<Self, ZoneError> {
        let mut csv = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter as u8)
            .has_headers(schema.has_header)
            .flexible(true)
            .from_reader(reader);
        let columns = if schema.has_header {
            let header = csv
                .headers()
                .map_err(|e| ZoneError::RelationParse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let find = |name: &str| {
                header
                    .iter()
                    .position(|h| h.trim_start_matches('\u{feff}').trim() == name)
                    .ok_or_else(|| ZoneError::RelationParse {
                        line: 1,
                        message: format!("missing column {name}"),
                    })
            };
            Columns {
                district: find(&schema.district)?,
                municipality: find(&schema.municipality)?,
                gau: schema.gau.as_deref().map(find).transpose()?,
                census: schema
                    .census
                    .iter()
                    .map(|c| find(c))
                    .collect::<Result<_, _>>()?,
            }
        } else {
            let index = |name: &str| {
                name.parse::<usize>().map_err(|_| ZoneError::RelationParse {
                    line: 0,
                    message: format!("headerless layout needs column indices, got {name}"),
                })
            };
            Columns {
                district: index(&schema.district)?,
                municipality: index(&schema.municipality)?,
                gau: schema.gau.as_deref().map(index).transpose()?,
                census: schema
                    .census
                    .iter()
                    .map(|c| index(c))
                    .collect::<Result<_, _>>()?,
            }
        };
        let mut rows = Vec::new();
        for record in csv.records() {
            let record = record.map_err(|e| ZoneError::RelationParse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let cell = |i: usize| record.get(i).map(str::trim).unwrap_or("");
            let id = |i: usize, what: &str| {
                ZoneId::new(cell(i)).map_err(|e| ZoneError::RelationParse {
                    line,
                    message: format!("{what}: {e}"),
                })
            };
            let gau = match columns.gau {
                Some(i) if !is_null_marker(cell(i)) => Some(id(i, "gau")?),
                _ => None,
            };
            let census_refs = columns
                .census
                .iter()
                .map(|&i| cell(i))
                .filter(|c| !is_null_marker(c))
                .map(str::to_string)
                .collect();
            rows.push(ZoneRelation {
                district_id: id(columns.district, "district")?,
                municipality_id: id(columns.municipality, "municipality")?,
                gau_id: gau,
                census_refs,
            });
        }
        ZoneRelations::from_rows(rows)
    }

    pub fn read_path(path: &Path, schema: &RelationSchema) -> Result<Self, ZoneError> {
        let file = std::fs::File::open(path).map_err(|source| ZoneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let decoded: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(flate2::read::MultiGzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Self::read(std::io::BufReader::new(decoded), schema)
    }

    /// CSV with `district_id,municipality_id,gau_id,census_refs`; census codes
    /// are joined with `;`.
    pub fn write_csv(&self, path: &Path) -> Result<(), ZoneError> {
        let io = |source| ZoneError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("csv.tmp");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&tmp)
            .map_err(|e| ZoneError::Io {
                path: tmp.clone(),
                source: e.into(),
            })?;
        let csv_err = |e: csv::Error| ZoneError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        w.write_record(["district_id", "municipality_id", "gau_id", "census_refs"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.district_id.as_str(),
                r.municipality_id.as_str(),
                r.gau_id.as_ref().map(ZoneId::as_str).unwrap_or(""),
                &r.census_refs.join(";"),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Single Parquet file with the same columns as [`ZoneRelations::write_csv`];
    /// `gau_id` is null outside greater urban areas.
    pub fn write_parquet(&self, path: &Path) -> Result<(), ZoneError> {
        use arrow_array::{ArrayRef, RecordBatch, StringArray};
        use arrow_schema::{DataType, Field, Schema};
        use std::sync::Arc;

        let pq = |e: &dyn std::fmt::Display| ZoneError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        let io = |source| ZoneError::Io {
            path: path.to_path_buf(),
            source,
        };
        let schema = Arc::new(Schema::new(vec![
            Field::new("district_id", DataType::Utf8, false),
            Field::new("municipality_id", DataType::Utf8, false),
            Field::new("gau_id", DataType::Utf8, true),
            Field::new("census_refs", DataType::Utf8, false),
        ]));
        let columns: Vec<ArrayRef> = vec![
            Arc::new(StringArray::from_iter_values(
                self.rows.iter().map(|r| r.district_id.as_str()),
            )),
            Arc::new(StringArray::from_iter_values(
                self.rows.iter().map(|r| r.municipality_id.as_str()),
            )),
            Arc::new(StringArray::from_iter(
                self.rows
                    .iter()
                    .map(|r| r.gau_id.as_ref().map(ZoneId::as_str)),
            )),
            Arc::new(StringArray::from_iter_values(
                self.rows.iter().map(|r| r.census_refs.join(";")),
            )),
        ];
        let batch = RecordBatch::try_new(schema.clone(), columns).map_err(|e| pq(&e))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("parquet.tmp");
        let file = std::fs::File::create(&tmp).map_err(io)?;
        let props = parquet::file::properties::WriterProperties::builder()
            .set_compression(parquet::basic::Compression::SNAPPY)
            .build();
        let mut writer =
            parquet::arrow::ArrowWriter::try_new(file, schema, Some(props)).map_err(|e| pq(&e))?;
        writer.write(&batch).map_err(|e| pq(&e))?;
        writer.close().map_err(|e| pq(&e))?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Reads the file produced by [`ZoneRelations::write_csv`].
    pub fn read_normalized_csv(path: &Path) -> Result<Self, ZoneError> {
        let rows = Self::read_path(path, &RelationSchema::normalized())?.rows;
        Self::from_rows(rows.into_iter().map(|mut r| {
            r.census_refs = r
                .census_refs
                .iter()
                .flat_map(|c| c.split(';'))
                .filter(|c| !c.is_empty())
                .map(str::to_string)
                .collect();
            r
        }))
    }
}

struct Columns {
    district: usize,
    municipality: usize,
    gau: Option<usize>,
    census: Vec<usize>,
}
