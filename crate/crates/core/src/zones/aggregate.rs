//! Re-keying of mobility tables to a coarser zone level.

use std::cmp::Ordering;

use super::relations::ZoneRelations;
use super::ZoneError;
use crate::model::{ZoneId, ZoneLevel};
use crate::normalizer::{
    OdRecord, OvernightStayRecord, ParseMode, Record, Table, TripsPerPersonRecord,
};

/// Bucket for zones outside every greater urban area.
pub const NON_GAU: &str = "NON_GAU";
/// Bucket for zones missing from the crosswalk, in lenient mode.
pub const UNMAPPED: &str = "UNMAPPED";

/// Records whose zone columns can be rewritten and whose measures add up.
pub trait Rezone: Record {
    fn zones_mut(&mut self) -> Vec<&mut ZoneId>;

    /// Adds the measures of `other`, which has the same key.
    fn absorb(&mut self, other: &Self);
}

impl Rezone for OdRecord {
    fn zones_mut(&mut self) -> Vec<&mut ZoneId> {
        vec![&mut self.origin, &mut self.destination]
    }

    fn absorb(&mut self, other: &Self) {
        self.trips += other.trips;
        self.trips_km += other.trips_km;
    }
}

impl Rezone for TripsPerPersonRecord {
    fn zones_mut(&mut self) -> Vec<&mut ZoneId> {
        vec![&mut self.zone]
    }

    fn absorb(&mut self, other: &Self) {
        self.persons += other.persons;
    }
}

impl Rezone for OvernightStayRecord {
    fn zones_mut(&mut self) -> Vec<&mut ZoneId> {
        vec![&mut self.residence_zone, &mut self.overnight_zone]
    }

    fn absorb(&mut self, other: &Self) {
        self.persons += other.persons;
    }
}

fn bucket(name: &str) -> ZoneId {
    ZoneId::new(name).expect("bucket ids are valid")
}

/// Image of `zone` at `target`, or `None` when the crosswalk lacks it.
pub fn map_zone(
    relations: &ZoneRelations,
    source: ZoneLevel,
    target: ZoneLevel,
    zone: &ZoneId,
) -> Option<ZoneId> {
    let gau = |g: Option<&ZoneId>| g.cloned().unwrap_or_else(|| bucket(NON_GAU));
    match (source, target) {
        (ZoneLevel::Districts, ZoneLevel::Municipalities) => {
            relations.municipality_of(zone).cloned()
        }
        (ZoneLevel::Districts, ZoneLevel::GreaterUrbanAreas) => relations.gau_of(zone).map(gau),
        (ZoneLevel::Municipalities, ZoneLevel::GreaterUrbanAreas) => {
            relations.gau_of_municipality(zone).map(gau)
        }
        _ => None,
    }
}

/// Re-keys every zone column through the crosswalk and sums the measures of
/// rows that become identical. The result is in canonical order.
pub fn aggregate_to_level<T: Rezone>(
    table: &Table<T>,
    relations: &ZoneRelations,
    target: ZoneLevel,
    mode: ParseMode,
) -> Result<Table<T>, ZoneError> {
    if table.level >= target {
        return Err(ZoneError::LevelNotFiner {
            from: table.level,
            to: target,
        });
    }
    let mut rows = Vec::with_capacity(table.records.len());
    for record in &table.records {
        let mut row = record.clone();
        for zone in row.zones_mut() {
            *zone = match map_zone(relations, table.level, target, zone) {
                Some(image) => image,
                None if mode == ParseMode::Lenient => bucket(UNMAPPED),
                None => return Err(ZoneError::UnmappedZone(zone.to_string())),
            };
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| a.canonical_cmp(b));
    let mut merged: Vec<T> = Vec::with_capacity(rows.len());
    for row in rows {
        match merged.last_mut() {
            Some(last) if last.canonical_cmp(&row) == Ordering::Equal => last.absorb(&row),
            _ => merged.push(row),
        }
    }
    Ok(Table {
        level: target,
        version: table.version,
        activity: table.activity,
        records: merged,
    })
}
