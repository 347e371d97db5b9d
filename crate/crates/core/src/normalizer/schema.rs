use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{ActivityKind, AgeBand, DatasetKind, Gender, IncomeBand, ModelError, TripsBand};

/// A column located by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

/// Normalized fields a raw column may be bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Day,
    Hour,
    Origin,
    Destination,
    ActivityOrigin,
    ActivityDestination,
    Age,
    Gender,
    Income,
    DistanceBand,
    Trips,
    TripsKm,
    Zone,
    TripsBand,
    Persons,
    ResidenceZone,
    OvernightZone,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Day => "day",
            Field::Hour => "hour",
            Field::Origin => "origin",
            Field::Destination => "destination",
            Field::ActivityOrigin => "activity_origin",
            Field::ActivityDestination => "activity_destination",
            Field::Age => "age",
            Field::Gender => "gender",
            Field::Income => "income",
            Field::DistanceBand => "distance_band",
            Field::Trips => "trips",
            Field::TripsKm => "trips_km",
            Field::Zone => "zone",
            Field::TripsBand => "trips_band",
            Field::Persons => "persons",
            Field::ResidenceZone => "residence_zone",
            Field::OvernightZone => "overnight_zone",
        }
    }

    /// Fields whose raw tokens go through a value map.
    pub fn is_categorical(self) -> bool {
        matches!(
            self,
            Field::ActivityOrigin
                | Field::ActivityDestination
                | Field::Age
                | Field::Gender
                | Field::Income
                | Field::TripsBand
        )
    }

    /// Checks that `label` is a canonical label of this field's taxonomy.
    pub fn check_label(self, label: &str) -> Result<(), ModelError> {
        match self {
            Field::ActivityOrigin | Field::ActivityDestination => {
                ActivityKind::from_label(label).map(|_| ())
            }
            Field::Age => AgeBand::from_label(label).map(|_| ()),
            Field::Gender => Gender::from_label(label).map(|_| ()),
            Field::Income => IncomeBand::from_label(label).map(|_| ()),
            Field::TripsBand => TripsBand::from_label(label).map(|_| ()),
            _ => Ok(()),
        }
    }
}

pub fn mandatory_fields(kind: DatasetKind) -> &'static [Field] {
    match kind {
        DatasetKind::OriginDestination => {
            &[Field::Hour, Field::Origin, Field::Destination, Field::Trips]
        }
        DatasetKind::TripsPerPerson => &[Field::Zone, Field::TripsBand, Field::Persons],
        DatasetKind::OvernightStays => {
            &[Field::ResidenceZone, Field::OvernightZone, Field::Persons]
        }
    }
}

pub fn optional_fields(kind: DatasetKind) -> &'static [Field] {
    match kind {
        DatasetKind::OriginDestination => &[
            Field::Day,
            Field::ActivityOrigin,
            Field::ActivityDestination,
            Field::Age,
            Field::Gender,
            Field::Income,
            Field::DistanceBand,
            Field::TripsKm,
        ],
        DatasetKind::TripsPerPerson => &[Field::Day, Field::Age, Field::Gender],
        DatasetKind::OvernightStays => &[Field::Day],
    }
}

fn default_delimiter() -> char {
    '|'
}

fn default_true() -> bool {
    true
}

fn default_decimal() -> char {
    '.'
}

fn default_date_format() -> String {
    "%Y%m%d".to_string()
}

fn default_zone_pattern() -> String {
    "^[0-9A-Za-z][0-9A-Za-z_.-]*$".to_string()
}

/// How one raw file layout maps onto a normalized record type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMap {
    #[serde(default)]
    pub schema_id: String,
    pub target: DatasetKind,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default = "default_decimal")]
    pub decimal_separator: char,
    #[serde(default = "default_date_format")]
    pub date_format: String,
    #[serde(default = "default_zone_pattern")]
    pub zone_id_pattern: String,
    pub columns: BTreeMap<Field, ColumnRef>,
    #[serde(default)]
    pub value_maps: BTreeMap<Field, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema `{schema}` misses mandatory binding for `{field}`")]
    MissingBinding { schema: String, field: &'static str },
    #[error("schema `{schema}` binds `{field}`, which is not a field of {kind} records")]
    ForeignField {
        schema: String,
        field: &'static str,
        kind: DatasetKind,
    },
    #[error("schema `{schema}` value map for `{field}`: {message}")]
    BadValueMap {
        schema: String,
        field: &'static str,
        message: String,
    },
    #[error("schema `{schema}`: {message}")]
    Invalid { schema: String, message: String },
}

impl SchemaMap {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let schema = self.schema_id.clone();
        for field in mandatory_fields(self.target) {
            if !self.columns.contains_key(field) {
                return Err(SchemaError::MissingBinding {
                    schema,
                    field: field.as_str(),
                });
            }
        }
        let allowed: BTreeSet<Field> = mandatory_fields(self.target)
            .iter()
            .chain(optional_fields(self.target))
            .copied()
            .collect();
        for field in self.columns.keys().chain(self.value_maps.keys()) {
            if !allowed.contains(field) {
                return Err(SchemaError::ForeignField {
                    schema,
                    field: field.as_str(),
                    kind: self.target,
                });
            }
        }
        if self.delimiter == self.decimal_separator {
            return Err(SchemaError::Invalid {
                schema,
                message: "delimiter and decimal separator must differ".into(),
            });
        }
        if !self.delimiter.is_ascii() {
            return Err(SchemaError::Invalid {
                schema,
                message: "delimiter must be a single ASCII character".into(),
            });
        }
        if let Err(e) = regex::Regex::new(&self.zone_id_pattern) {
            return Err(SchemaError::Invalid {
                schema,
                message: format!("bad zone_id_pattern: {e}"),
            });
        }
        if !self.has_header
            && self
                .columns
                .values()
                .any(|c| matches!(c, ColumnRef::Name(_)))
        {
            return Err(SchemaError::Invalid {
                schema,
                message: "headerless schemas must bind columns by index".into(),
            });
        }
        for (field, map) in &self.value_maps {
            if !field.is_categorical() {
                return Err(SchemaError::BadValueMap {
                    schema,
                    field: field.as_str(),
                    message: "field is not categorical".into(),
                });
            }
            let mut seen = BTreeMap::new();
            for (raw, label) in map {
                field
                    .check_label(label)
                    .map_err(|e| SchemaError::BadValueMap {
                        schema: schema.clone(),
                        field: field.as_str(),
                        message: e.to_string(),
                    })?;
                if let Some(prev) = seen.insert(label.as_str(), raw.as_str()) {
                    return Err(SchemaError::BadValueMap {
                        schema,
                        field: field.as_str(),
                        message: format!("raw tokens `{prev}` and `{raw}` both map to `{label}`"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Resolves a raw categorical token to its canonical label, if mapped.
    pub fn canonical<'a>(&'a self, field: Field, raw: &'a str) -> Option<&'a str> {
        match self.value_maps.get(&field) {
            Some(map) => map.get(raw).map(String::as_str),
            None => Some(raw),
        }
    }
}
