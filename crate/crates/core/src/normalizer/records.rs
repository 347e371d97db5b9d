use chrono::NaiveDate;

use crate::model::{
    ActivityKind, AgeBand, DatasetKind, DatasetVersion, Gender, IncomeBand, TripsBand, ZoneId,
    ZoneLevel,
};

/// One origin-destination flow row.
#[derive(Debug, Clone, PartialEq)]
pub struct OdRecord {
    pub day: NaiveDate,
    pub hour: u8,
    pub origin: ZoneId,
    pub destination: ZoneId,
    pub activity_origin: ActivityKind,
    pub activity_destination: ActivityKind,
    pub age: AgeBand,
    pub gender: Gender,
    pub income: IncomeBand,
    /// Distance band label exactly as published (all trips exceed 500 m).
    pub distance_band: String,
    /// Person-trips, possibly fractional after population extrapolation.
    pub trips: f64,
    pub trips_km: f64,
}

impl OdRecord {
    /// Sort key: day, hour, origin, destination, then the remaining dimensions.
    pub fn sort_key(
        &self,
    ) -> (
        NaiveDate,
        u8,
        &ZoneId,
        &ZoneId,
        ActivityKind,
        ActivityKind,
        AgeBand,
        Gender,
        IncomeBand,
        &str,
    ) {
        (
            self.day,
            self.hour,
            &self.origin,
            &self.destination,
            self.activity_origin,
            self.activity_destination,
            self.age,
            self.gender,
            self.income,
            &self.distance_band,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripsPerPersonRecord {
    pub day: NaiveDate,
    /// Zone where the people spent the night.
    pub zone: ZoneId,
    pub age: AgeBand,
    pub gender: Gender,
    pub trips_band: TripsBand,
    pub persons: f64,
}

impl TripsPerPersonRecord {
    pub fn sort_key(&self) -> (NaiveDate, &ZoneId, AgeBand, Gender, TripsBand) {
        (self.day, &self.zone, self.age, self.gender, self.trips_band)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvernightStayRecord {
    pub day: NaiveDate,
    pub residence_zone: ZoneId,
    pub overnight_zone: ZoneId,
    pub persons: f64,
}

impl OvernightStayRecord {
    pub fn sort_key(&self) -> (NaiveDate, &ZoneId, &ZoneId) {
        (self.day, &self.residence_zone, &self.overnight_zone)
    }
}

/// A normalized table of one record type at one zone level.
#[derive(Debug, Clone, PartialEq)]
pub struct Table<T> {
    pub level: ZoneLevel,
    pub version: Option<DatasetVersion>,
    /// Whether the activity columns are meaningful (OD tables only).
    pub activity: bool,
    pub records: Vec<T>,
}

pub type OdTable = Table<OdRecord>;
pub type TripsTable = Table<TripsPerPersonRecord>;
pub type OvernightTable = Table<OvernightStayRecord>;

impl<T> Table<T> {
    pub fn new(level: ZoneLevel, records: Vec<T>) -> Self {
        Table {
            level,
            version: None,
            activity: true,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Record types that can be stored as normalized tables.
pub trait Record: Clone + Send + Sync + 'static {
    const KIND: DatasetKind;

    fn day(&self) -> NaiveDate;

    /// Canonical ordering used for every exported table.
    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering;
}

impl Record for OdRecord {
    const KIND: DatasetKind = DatasetKind::OriginDestination;

    fn day(&self) -> NaiveDate {
        self.day
    }

    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl Record for TripsPerPersonRecord {
    const KIND: DatasetKind = DatasetKind::TripsPerPerson;

    fn day(&self) -> NaiveDate {
        self.day
    }

    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl Record for OvernightStayRecord {
    const KIND: DatasetKind = DatasetKind::OvernightStays;

    fn day(&self) -> NaiveDate {
        self.day
    }

    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl<T: Record> Table<T> {
    /// Stable sort into canonical order.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| a.canonical_cmp(b));
    }
}

impl OdTable {
    pub fn total_trips(&self) -> f64 {
        self.records.iter().map(|r| r.trips).sum()
    }

    pub fn total_trips_km(&self) -> f64 {
        self.records.iter().map(|r| r.trips_km).sum()
    }

    /// Drops both activity columns and sums `trips` and `trips_km` over the
    /// rows that become identical. The result is in canonical order.
    pub fn collapse_activity(&self) -> OdTable {
        let mut rows: Vec<OdRecord> = self
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.activity_origin = ActivityKind::NotDisaggregated;
                r.activity_destination = ActivityKind::NotDisaggregated;
                r
            })
            .collect();
        rows.sort_by(|a, b| a.canonical_cmp(b));
        let mut merged: Vec<OdRecord> = Vec::with_capacity(rows.len());
        for row in rows {
            match merged.last_mut() {
                Some(last) if last.sort_key() == row.sort_key() => {
                    last.trips += row.trips;
                    last.trips_km += row.trips_km;
                }
                _ => merged.push(row),
            }
        }
        Table {
            level: self.level,
            version: self.version,
            activity: false,
            records: merged,
        }
    }
}
