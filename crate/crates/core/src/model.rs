//! Domain vocabulary shared by every other module: zone levels, dataset
//! versions and kinds, demographic taxonomies and validated requests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown zone level alias `{alias}`; accepted aliases: {}", accepted.join(", "))]
    UnknownAlias {
        alias: String,
        accepted: Vec<String>,
    },
    #[error("dataset version 1 does not include greater urban areas (gau); use version 2 or a finer level")]
    VersionZoneConflict,
    #[error(
        "date {date} is outside the availability window {window} of dataset version {version}"
    )]
    DateOutOfAvailability {
        date: NaiveDate,
        version: u8,
        window: Window,
    },
    #[error("malformed date `{0}`, expected YYYY-MM-DD")]
    MalformedDate(String),
    #[error("start date {start} is after end date {end}")]
    InvertedRange { start: NaiveDate, end: NaiveDate },
    #[error("unknown dataset version {0}; expected 1 or 2")]
    UnknownVersion(i64),
    #[error("unknown dataset kind `{0}`; expected od, trips or overnight")]
    UnknownKind(String),
    #[error("unknown {field} label `{label}`")]
    UnknownLabel { field: &'static str, label: String },
    #[error("invalid zone id `{0}`")]
    InvalidZoneId(String),
}

/// Spatial aggregation level, ordered from finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneLevel {
    Districts,
    Municipalities,
    #[serde(rename = "gau")]
    GreaterUrbanAreas,
}

const DISTRICT_ALIASES: &[&str] = &["districts", "distritos", "dist"];
const MUNICIPALITY_ALIASES: &[&str] = &["municipalities", "municipios", "muni"];
const GAU_ALIASES: &[&str] = &["gau", "greater_urban_areas", "grandes_areas_urbanas"];

impl ZoneLevel {
    pub const ALL: [ZoneLevel; 3] = [
        ZoneLevel::Districts,
        ZoneLevel::Municipalities,
        ZoneLevel::GreaterUrbanAreas,
    ];

    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            ZoneLevel::Districts => DISTRICT_ALIASES,
            ZoneLevel::Municipalities => MUNICIPALITY_ALIASES,
            ZoneLevel::GreaterUrbanAreas => GAU_ALIASES,
        }
    }

    /// Canonical short name, also used in cache paths and file names.
    pub fn as_str(self) -> &'static str {
        match self {
            ZoneLevel::Districts => "districts",
            ZoneLevel::Municipalities => "municipalities",
            ZoneLevel::GreaterUrbanAreas => "gau",
        }
    }

    pub fn all_aliases() -> Vec<String> {
        Self::ALL
            .iter()
            .flat_map(|l| l.aliases().iter().map(|a| a.to_string()))
            .collect()
    }
}

/// Resolves a user supplied alias (case-insensitive) to a zone level.
pub fn parse_zone_level(alias: &str) -> Result<ZoneLevel, ModelError> {
    let folded = alias.trim().to_lowercase();
    ZoneLevel::ALL
        .into_iter()
        .find(|level| level.aliases().contains(&folded.as_str()))
        .ok_or_else(|| ModelError::UnknownAlias {
            alias: alias.to_string(),
            accepted: ZoneLevel::all_aliases(),
        })
}

impl FromStr for ZoneLevel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_zone_level(s)
    }
}

impl fmt::Display for ZoneLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DatasetVersion {
    V1,
    V2,
}

impl DatasetVersion {
    pub const ALL: [DatasetVersion; 2] = [DatasetVersion::V1, DatasetVersion::V2];

    pub fn from_number(n: i64) -> Result<Self, ModelError> {
        match n {
            1 => Ok(DatasetVersion::V1),
            2 => Ok(DatasetVersion::V2),
            other => Err(ModelError::UnknownVersion(other)),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            DatasetVersion::V1 => 1,
            DatasetVersion::V2 => 2,
        }
    }

    pub fn supports(self, level: ZoneLevel) -> bool {
        !(self == DatasetVersion::V1 && level == ZoneLevel::GreaterUrbanAreas)
    }

    /// Levels published for this version, finest first.
    pub fn levels(self) -> &'static [ZoneLevel] {
        match self {
            DatasetVersion::V1 => &[ZoneLevel::Districts, ZoneLevel::Municipalities],
            DatasetVersion::V2 => &ZoneLevel::ALL,
        }
    }
}

impl fmt::Display for DatasetVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.number())
    }
}

impl Serialize for DatasetVersion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for DatasetVersion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = i64::deserialize(d)?;
        DatasetVersion::from_number(n).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "od")]
    OriginDestination,
    #[serde(rename = "trips")]
    TripsPerPerson,
    #[serde(rename = "overnight")]
    OvernightStays,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [
        DatasetKind::OriginDestination,
        DatasetKind::TripsPerPerson,
        DatasetKind::OvernightStays,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::OriginDestination => "od",
            DatasetKind::TripsPerPerson => "trips",
            DatasetKind::OvernightStays => "overnight",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "od" | "origin_destination" | "viajes" => Ok(DatasetKind::OriginDestination),
            "trips" | "trips_per_person" | "personas" => Ok(DatasetKind::TripsPerPerson),
            "overnight" | "overnight_stays" | "pernoctaciones" => Ok(DatasetKind::OvernightStays),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive date interval; an open end means "still being published".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDate,
    pub end: Option<NaiveDate>,
}

impl Window {
    pub fn contains(&self, day: NaiveDate) -> bool {
        day >= self.start && self.end.is_none_or(|end| day <= end)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end {
            Some(end) => write!(f, "{}..{}", self.start, end),
            None => write!(f, "{}..", self.start),
        }
    }
}

/// Per-version availability windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub v1: Window,
    pub v2: Window,
}

impl Default for Availability {
    fn default() -> Self {
        Availability {
            v1: Window {
                start: NaiveDate::from_ymd_opt(2020, 2, 14).unwrap(),
                end: Some(NaiveDate::from_ymd_opt(2021, 5, 9).unwrap()),
            },
            v2: Window {
                start: NaiveDate::from_ymd_opt(2022, 1, 1).unwrap(),
                end: None,
            },
        }
    }
}

impl Availability {
    pub fn window(&self, version: DatasetVersion) -> Window {
        match version {
            DatasetVersion::V1 => self.v1,
            DatasetVersion::V2 => self.v2,
        }
    }

    /// Validates raw request parameters against these windows.
    pub fn validate_request(
        &self,
        version: i64,
        kind: DatasetKind,
        zones_alias: &str,
        start: &str,
        end: Option<&str>,
        output_directory: impl AsRef<Path>,
    ) -> Result<DatasetRequest, ModelError> {
        let version = DatasetVersion::from_number(version)?;
        let level = parse_zone_level(zones_alias)?;
        if !version.supports(level) {
            return Err(ModelError::VersionZoneConflict);
        }
        let start = parse_date(start)?;
        let end = match end {
            Some(text) => parse_date(text)?,
            None => start,
        };
        let range = DateRange::new(start, end)?;
        let window = self.window(version);
        for day in [range.start, range.end] {
            if !window.contains(day) {
                return Err(ModelError::DateOutOfAvailability {
                    date: day,
                    version: version.number(),
                    window,
                });
            }
        }
        Ok(DatasetRequest {
            version,
            kind,
            level,
            range,
            output_directory: output_directory.as_ref().to_path_buf(),
        })
    }
}

pub fn parse_date(text: &str) -> Result<NaiveDate, ModelError> {
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map_err(|_| ModelError::MalformedDate(text.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DateRange {
    start: NaiveDate,
    end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, ModelError> {
        if start > end {
            return Err(ModelError::InvertedRange { start, end });
        }
        Ok(DateRange { start, end })
    }

    pub fn single(day: NaiveDate) -> Self {
        DateRange {
            start: day,
            end: day,
        }
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    pub fn len_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }
}

/// Every calendar day of the range, ascending and inclusive.
pub fn enumerate_days(range: &DateRange) -> Vec<NaiveDate> {
    range.start.iter_days().take(range.len_days()).collect()
}

/// A validated acquisition request. Only obtainable through
/// [`validate_request`] or [`Availability::validate_request`], so version 1
/// paired with greater urban areas cannot exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRequest {
    version: DatasetVersion,
    kind: DatasetKind,
    level: ZoneLevel,
    range: DateRange,
    output_directory: PathBuf,
}

impl DatasetRequest {
    pub fn version(&self) -> DatasetVersion {
        self.version
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn level(&self) -> ZoneLevel {
        self.level
    }

    pub fn range(&self) -> DateRange {
        self.range
    }

    pub fn output_directory(&self) -> &Path {
        &self.output_directory
    }

    /// Same request for another dataset kind.
    pub fn with_kind(&self, kind: DatasetKind) -> DatasetRequest {
        DatasetRequest {
            kind,
            ..self.clone()
        }
    }
}

/// Validates a request against the default availability windows.
pub fn validate_request(
    version: i64,
    kind: DatasetKind,
    zones_alias: &str,
    start: &str,
    end: Option<&str>,
    output_directory: impl AsRef<Path>,
) -> Result<DatasetRequest, ModelError> {
    Availability::default().validate_request(
        version,
        kind,
        zones_alias,
        start,
        end,
        output_directory,
    )
}

/// Zone identifier as published by the portal (district, municipality or GAU code).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZoneId(String);

impl ZoneId {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ModelError::InvalidZoneId(id));
        }
        Ok(ZoneId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ZoneId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ZoneId::new(s)
    }
}

/// Raw tokens that mean "not disaggregated" in every demographic column.
pub fn is_null_marker(raw: &str) -> bool {
    matches!(raw.trim(), "" | "NA" | "-")
}

/// Implements canonical-label round-tripping for the taxonomy enums.
macro_rules! taxonomy {
    ($(#[$meta:meta])* $name:ident, $field:literal, { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn from_label(label: &str) -> Result<Self, ModelError> {
                match label {
                    $($label => Ok($name::$variant),)+
                    other => Err(ModelError::UnknownLabel { field: $field, label: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $name::from_label(s)
            }
        }
    };
}

taxonomy!(
    /// Age groups, in years.
    AgeBand, "age", {
        A0_24 => "0-24",
        A25_44 => "25-44",
        A45_64 => "45-64",
        A65Plus => "65+",
        NotDisaggregated => "NA",
    }
);

taxonomy!(Gender, "gender", {
    Male => "male",
    Female => "female",
    NotDisaggregated => "NA",
});

taxonomy!(
    /// Yearly income per person, in euros.
    IncomeBand, "income", {
        Lt10k => "<10k",
        B10To15k => "10-15k",
        Gt15k => ">15k",
        NotDisaggregated => "NA",
    }
);

taxonomy!(ActivityKind, "activity", {
    Home => "home",
    WorkStudy => "work_study",
    FrequentVisit => "frequent_visit",
    Other => "other",
    NotDisaggregated => "NA",
});

taxonomy!(
    /// Trips made by one person in a day.
    TripsBand, "trips_band", {
        T0 => "0",
        T1 => "1",
        T2 => "2",
        T2Plus => "2+",
    }
);

/// A demographic column usable as a grouping key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Age,
    Gender,
    Income,
}

impl Dimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Age => "age",
            Dimension::Gender => "gender",
            Dimension::Income => "income",
        }
    }
}

impl FromStr for Dimension {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "age" => Ok(Dimension::Age),
            "gender" | "sex" => Ok(Dimension::Gender),
            "income" => Ok(Dimension::Income),
            other => Err(ModelError::UnknownLabel {
                field: "dimension",
                label: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Weekday,
    Weekend,
}

impl Segment {
    /// Monday to Friday are weekdays; public holidays are not special-cased.
    pub fn of(day: NaiveDate) -> Segment {
        match day.weekday() {
            Weekday::Sat | Weekday::Sun => Segment::Weekend,
            _ => Segment::Weekday,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Weekday => "weekday",
            Segment::Weekend => "weekend",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    #[test]
    fn parses_documented_aliases() {
        assert_eq!(
            parse_zone_level("municipalities").unwrap(),
            ZoneLevel::Municipalities
        );
        assert_eq!(
            parse_zone_level("gau").unwrap(),
            ZoneLevel::GreaterUrbanAreas
        );
        assert_eq!(parse_zone_level("Distritos").unwrap(), ZoneLevel::Districts);
        assert_eq!(parse_zone_level("MUNI").unwrap(), ZoneLevel::Municipalities);
    }

    #[test]
    fn unknown_alias_lists_accepted_ones() {
        let err = parse_zone_level("city").unwrap_err();
        match &err {
            ModelError::UnknownAlias { alias, accepted } => {
                assert_eq!(alias, "city");
                assert_eq!(accepted.len(), 9);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("grandes_areas_urbanas"));
    }

    #[test]
    fn end_defaults_to_start() {
        let req = validate_request(
            2,
            DatasetKind::OriginDestination,
            "municipalities",
            "2022-03-20",
            None,
            "data",
        )
        .unwrap();
        assert_eq!(req.range().start(), d("2022-03-20"));
        assert_eq!(req.range().end(), d("2022-03-20"));
        assert_eq!(req.level(), ZoneLevel::Municipalities);
    }

    #[test]
    fn v1_rejects_gau() {
        let err = validate_request(
            1,
            DatasetKind::OriginDestination,
            "gau",
            "2020-03-01",
            None,
            "d",
        )
        .unwrap_err();
        assert_eq!(err, ModelError::VersionZoneConflict);
    }

    #[test]
    fn v2_rejects_dates_before_2022() {
        let err = validate_request(
            2,
            DatasetKind::OriginDestination,
            "districts",
            "2021-06-01",
            None,
            "d",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::DateOutOfAvailability { version: 2, .. }
        ));
    }

    #[test]
    fn malformed_and_inverted_dates() {
        assert!(matches!(
            validate_request(
                2,
                DatasetKind::TripsPerPerson,
                "dist",
                "2022/03/20",
                None,
                "d"
            ),
            Err(ModelError::MalformedDate(_))
        ));
        assert!(matches!(
            validate_request(
                2,
                DatasetKind::TripsPerPerson,
                "dist",
                "2022-03-20",
                Some("2022-03-19"),
                "d"
            ),
            Err(ModelError::InvertedRange { .. })
        ));
        assert!(matches!(
            validate_request(
                3,
                DatasetKind::TripsPerPerson,
                "dist",
                "2022-03-20",
                None,
                "d"
            ),
            Err(ModelError::UnknownVersion(3))
        ));
    }

    #[test]
    fn enumerate_days_examples() {
        let r = DateRange::new(d("2022-03-20"), d("2022-03-24")).unwrap();
        assert_eq!(enumerate_days(&r).len(), 5);
        assert_eq!(
            enumerate_days(&DateRange::single(d("2022-03-20"))),
            vec![d("2022-03-20")]
        );
        let leap = DateRange::new(d("2020-02-28"), d("2020-03-01")).unwrap();
        assert_eq!(
            enumerate_days(&leap),
            vec![d("2020-02-28"), d("2020-02-29"), d("2020-03-01")]
        );
    }

    #[test]
    fn taxonomy_labels_round_trip() {
        for a in AgeBand::ALL {
            assert_eq!(AgeBand::from_label(a.label()).unwrap(), *a);
        }
        for g in Gender::ALL {
            assert_eq!(g.label().parse::<Gender>().unwrap(), *g);
        }
        for i in IncomeBand::ALL {
            assert_eq!(i.label().parse::<IncomeBand>().unwrap(), *i);
        }
        for a in ActivityKind::ALL {
            assert_eq!(a.label().parse::<ActivityKind>().unwrap(), *a);
        }
        for t in TripsBand::ALL {
            assert_eq!(t.label().parse::<TripsBand>().unwrap(), *t);
        }
        assert!(AgeBand::from_label("99-120").is_err());
    }

    #[test]
    fn segments_follow_the_civil_week() {
        assert_eq!(Segment::of(d("2022-03-21")), Segment::Weekday); // Monday
        assert_eq!(Segment::of(d("2022-03-25")), Segment::Weekday); // Friday
        assert_eq!(Segment::of(d("2022-03-26")), Segment::Weekend);
        assert_eq!(Segment::of(d("2022-03-20")), Segment::Weekend);
    }

    /// Day count by walking the proleptic Gregorian calendar by hand.
    fn days_between_oracle(a: NaiveDate, b: NaiveDate) -> i64 {
        fn is_leap(y: i32) -> bool {
            (y % 4 == 0 && y % 100 != 0) || y % 400 == 0
        }
        fn ordinal(date: NaiveDate) -> i64 {
            let months = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
            let mut n = 0i64;
            for y in 1900..date.year() {
                n += if is_leap(y) { 366 } else { 365 };
            }
            for (m, len) in months.iter().enumerate().take(date.month0() as usize) {
                n += len + if m == 1 && is_leap(date.year()) { 1 } else { 0 };
            }
            n + date.day() as i64
        }
        ordinal(b) - ordinal(a)
    }

    proptest! {
        #[test]
        fn every_alias_parses_under_case_folding(idx in 0usize..9, upper in proptest::bool::ANY) {
            let aliases = ZoneLevel::all_aliases();
            let alias = &aliases[idx];
            let input = if upper { alias.to_uppercase() } else { alias.clone() };
            let a = parse_zone_level(&input).unwrap();
            let b = parse_zone_level(&a.as_str().to_uppercase()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn enumerate_days_length_matches(start in 0i64..3000, len in 0i64..400) {
            let base = d("2020-01-01");
            let s = base + chrono::Duration::days(start);
            let e = s + chrono::Duration::days(len);
            let days = enumerate_days(&DateRange::new(s, e).unwrap());
            prop_assert_eq!(days.len() as i64, days_between_oracle(s, e) + 1);
            prop_assert!(days.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn validated_ranges_are_ordered(v in 1i64..=2, level in 0usize..3, a in 0i64..1500, b in 0i64..1500) {
            let base = d("2020-01-01");
            let s = (base + chrono::Duration::days(a)).to_string();
            let e = (base + chrono::Duration::days(b)).to_string();
            let alias = ZoneLevel::ALL[level].as_str();
            if let Ok(req) = validate_request(v, DatasetKind::OriginDestination, alias, &s, Some(&e), "out") {
                prop_assert!(req.range().start() <= req.range().end());
                prop_assert!(req.version().supports(req.level()));
            }
        }
    }
}
