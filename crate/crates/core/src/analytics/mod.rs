//! Deterministic aggregates over normalized tables: weekday/weekend
//! summaries, demographic breakdowns, hourly profiles, top-percentile flows
//! and quantile classes for choropleth maps.
//!
//! Every function is pure. Day counts used as denominators are the distinct
//! days present in the input table, split by [`Segment`].

mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{AgeBand, Dimension, Gender, IncomeBand, Segment, ZoneId};
use crate::normalizer::{OdRecord, OdTable, OvernightTable};
use crate::zones::ZoneGeometry;

pub use table::{AnalyticsRow, AnalyticsTable};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("zone {0} does not appear in the table")]
    UnknownZone(String),
    #[error("unknown dimension {0:?}; expected age, gender or income")]
    UnknownDimension(String),
    #[error("the input table is empty")]
    EmptyTable,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Parses dimension names such as `age`, `gender`, `income`.
pub fn parse_dimensions<S: AsRef<str>>(names: &[S]) -> Result<Vec<Dimension>, AnalyticsError> {
    names
        .iter()
        .map(|n| {
            Dimension::from_str(n.as_ref())
                .map_err(|_| AnalyticsError::UnknownDimension(n.as_ref().to_string()))
        })
        .collect()
}

/// Value of one demographic dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DimValue {
    Age(AgeBand),
    Gender(Gender),
    Income(IncomeBand),
}

impl DimValue {
    pub fn of(record: &OdRecord, dimension: Dimension) -> DimValue {
        match dimension {
            Dimension::Age => DimValue::Age(record.age),
            Dimension::Gender => DimValue::Gender(record.gender),
            Dimension::Income => DimValue::Income(record.income),
        }
    }

    pub fn dimension(self) -> Dimension {
        match self {
            DimValue::Age(_) => Dimension::Age,
            DimValue::Gender(_) => Dimension::Gender,
            DimValue::Income(_) => Dimension::Income,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DimValue::Age(v) => v.label(),
            DimValue::Gender(v) => v.label(),
            DimValue::Income(v) => v.label(),
        }
    }
}

const SEGMENTS: [Segment; 2] = [Segment::Weekday, Segment::Weekend];

/// Distinct days present in the table, per segment.
fn segment_days(days: impl Iterator<Item = NaiveDate>) -> BTreeMap<Segment, usize> {
    let distinct: BTreeSet<NaiveDate> = days.collect();
    let mut out: BTreeMap<Segment, usize> = SEGMENTS.iter().map(|&s| (s, 0)).collect();
    for d in distinct {
        *out.get_mut(&Segment::of(d)).unwrap() += 1;
    }
    out
}

fn distinct_days(days: impl Iterator<Item = NaiveDate>) -> usize {
    days.collect::<BTreeSet<_>>().len()
}

fn ratio(total: f64, days: usize) -> f64 {
    if days == 0 {
        0.0
    } else {
        total / days as f64
    }
}

fn require_origin(table: &OdTable, origin: &ZoneId) -> Result<(), AnalyticsError> {
    if table.records.iter().any(|r| &r.origin == origin) {
        Ok(())
    } else {
        Err(AnalyticsError::UnknownZone(origin.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSummary {
    pub segment: Segment,
    pub group: Option<DimValue>,
    pub total_trips: f64,
    /// Days of this segment present in the table.
    pub days: usize,
    pub avg_daily_trips: f64,
    /// Destinations whose summed trips are strictly positive.
    pub distinct_destinations: usize,
}

#[derive(Default)]
struct Accumulator {
    total: f64,
    by_destination: BTreeMap<ZoneId, f64>,
}

impl Accumulator {
    fn add(&mut self, r: &OdRecord) {
        self.total += r.trips;
        *self
            .by_destination
            .entry(r.destination.clone())
            .or_insert(0.0) += r.trips;
    }

    fn destinations(&self) -> usize {
        self.by_destination.values().filter(|&&t| t > 0.0).count()
    }
}

fn summaries(table: &OdTable, origin: &ZoneId, dimension: Option<Dimension>) -> Vec<FlowSummary> {
    let days = segment_days(table.records.iter().map(|r| r.day));
    let mut groups: BTreeMap<(Option<DimValue>, Segment), Accumulator> = BTreeMap::new();
    let mut present: BTreeSet<Option<DimValue>> = BTreeSet::new();
    if dimension.is_none() {
        present.insert(None);
    }
    for r in table.records.iter().filter(|r| &r.origin == origin) {
        let group = dimension.map(|d| DimValue::of(r, d));
        present.insert(group);
        groups
            .entry((group, Segment::of(r.day)))
            .or_default()
            .add(r);
    }
    let mut out = Vec::new();
    for group in present {
        for segment in SEGMENTS {
            let acc = groups.remove(&(group, segment)).unwrap_or_default();
            out.push(FlowSummary {
                segment,
                group,
                total_trips: acc.total,
                days: days[&segment],
                avg_daily_trips: ratio(acc.total, days[&segment]),
                distinct_destinations: acc.destinations(),
            });
        }
    }
    out
}

/// Average daily trips and distinct destinations from `origin`, for weekdays
/// and weekends, optionally split by one demographic dimension. Both segments
/// are always reported; a segment with no days has zero values.
pub fn weekday_weekend_summary(
    table: &OdTable,
    origin: &ZoneId,
    group_by: Option<Dimension>,
) -> Result<Vec<FlowSummary>, AnalyticsError> {
    require_origin(table, origin)?;
    Ok(summaries(table, origin, group_by))
}

pub fn summary_table(summaries: &[FlowSummary]) -> AnalyticsTable {
    let mut t = AnalyticsTable::new(
        &["dimension", "value", "segment"],
        &[
            "total_trips",
            "days",
            "avg_daily_trips",
            "distinct_destinations",
        ],
    );
    for s in summaries {
        t.push(
            vec![
                s.group
                    .map(|g| g.dimension().as_str())
                    .unwrap_or("all")
                    .to_string(),
                s.group.map(DimValue::label).unwrap_or("all").to_string(),
                s.segment.as_str().to_string(),
            ],
            vec![
                s.total_trips,
                s.days as f64,
                s.avg_daily_trips,
                s.distinct_destinations as f64,
            ],
        );
    }
    t
}

/// Per-dimension, per-value, per-segment totals in the shape of a
/// weekday/weekend comparison table.
pub fn demographic_breakdown(
    table: &OdTable,
    origin: &ZoneId,
    dimensions: &[Dimension],
) -> Result<AnalyticsTable, AnalyticsError> {
    if dimensions.is_empty() {
        return Err(AnalyticsError::InvalidArgument(
            "at least one dimension is required".into(),
        ));
    }
    require_origin(table, origin)?;
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for &d in dimensions {
        if seen.insert(d) {
            rows.extend(summaries(table, origin, Some(d)));
        }
    }
    Ok(summary_table(&rows))
}

/// Σtrips and Σtrips_km per combination of the given dimensions.
pub fn group_by_sum(
    table: &OdTable,
    dimensions: &[Dimension],
) -> BTreeMap<Vec<DimValue>, (f64, f64)> {
    let mut out: BTreeMap<Vec<DimValue>, (f64, f64)> = BTreeMap::new();
    for r in &table.records {
        let key = dimensions.iter().map(|&d| DimValue::of(r, d)).collect();
        let e = out.entry(key).or_default();
        e.0 += r.trips;
        e.1 += r.trips_km;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HourlyReducer {
    #[default]
    SumOverRange,
    MeanPerDay,
}

impl FromStr for HourlyReducer {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "sum" | "sum-over-range" => Ok(HourlyReducer::SumOverRange),
            "mean" | "mean-per-day" => Ok(HourlyReducer::MeanPerDay),
            other => Err(AnalyticsError::InvalidArgument(format!(
                "unknown reducer {other:?}; expected sum or mean"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourlyProfile {
    pub group: Option<DimValue>,
    /// Trips per hour of day, index 0 to 23.
    pub values: [f64; 24],
}

#[derive(Debug, Clone, Default)]
pub struct HourlyOptions {
    /// Keep only trips arriving at this zone.
    pub destination: Option<ZoneId>,
    pub group_by: Option<Dimension>,
    pub reducer: HourlyReducer,
    /// Drop rows whose origin equals their destination.
    pub exclude_internal: bool,
}

/// Trips per hour of day, one profile per group.
pub fn hourly_profile(
    table: &OdTable,
    options: &HourlyOptions,
) -> Result<Vec<HourlyProfile>, AnalyticsError> {
    if let Some(dest) = &options.destination {
        if !table.records.iter().any(|r| &r.destination == dest) {
            return Err(AnalyticsError::UnknownZone(dest.to_string()));
        }
    }
    let days = distinct_days(table.records.iter().map(|r| r.day));
    let mut groups: BTreeMap<Option<DimValue>, [f64; 24]> = BTreeMap::new();
    if options.group_by.is_none() {
        groups.insert(None, [0.0; 24]);
    }
    for r in &table.records {
        if options
            .destination
            .as_ref()
            .is_some_and(|d| &r.destination != d)
            || (options.exclude_internal && r.origin == r.destination)
        {
            continue;
        }
        let key = options.group_by.map(|d| DimValue::of(r, d));
        groups.entry(key).or_insert([0.0; 24])[r.hour as usize % 24] += r.trips;
    }
    Ok(groups
        .into_iter()
        .map(|(group, mut values)| {
            if options.reducer == HourlyReducer::MeanPerDay {
                for v in &mut values {
                    *v = ratio(*v, days);
                }
            }
            HourlyProfile { group, values }
        })
        .collect())
}

pub fn hourly_table(profiles: &[HourlyProfile]) -> AnalyticsTable {
    let mut t = AnalyticsTable::new(&["dimension", "value", "hour"], &["trips"]);
    for p in profiles {
        for (hour, v) in p.values.iter().enumerate() {
            t.push(
                vec![
                    p.group
                        .map(|g| g.dimension().as_str())
                        .unwrap_or("all")
                        .to_string(),
                    p.group.map(DimValue::label).unwrap_or("all").to_string(),
                    hour.to_string(),
                ],
                vec![*v],
            );
        }
    }
    t
}

/// What the percentile in [`top_percentile_flows`] is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PercentileBasis {
    /// Top p% of destinations ranked by total trips.
    #[default]
    Destinations,
    /// Smallest prefix of the ranking carrying at least p% of all trips.
    TripMass,
}

/// Number of ranked items inside the top `p` percent of `n`, at least one.
fn rank_cutoff(n: usize, p: f64) -> usize {
    let x = n as f64 * p / 100.0;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Destinations from `origin` ranked by total trips over the table, cut at
/// `percentile_rank`. Every destination tied with the last one inside the
/// cutoff is included. Sorted by descending total, then ascending id.
pub fn top_percentile_flows(
    table: &OdTable,
    origin: &ZoneId,
    percentile_rank: f64,
    basis: PercentileBasis,
) -> Result<Vec<(ZoneId, f64)>, AnalyticsError> {
    if !(percentile_rank > 0.0 && percentile_rank <= 100.0) {
        return Err(AnalyticsError::InvalidArgument(format!(
            "percentile rank {percentile_rank} is outside (0, 100]"
        )));
    }
    require_origin(table, origin)?;
    let mut totals: BTreeMap<&ZoneId, f64> = BTreeMap::new();
    for r in table.records.iter().filter(|r| &r.origin == origin) {
        *totals.entry(&r.destination).or_insert(0.0) += r.trips;
    }
    let mut ranked: Vec<(ZoneId, f64)> = totals
        .into_iter()
        .filter(|(_, t)| *t > 0.0)
        .map(|(z, t)| (z.clone(), t))
        .collect();
    if ranked.is_empty() {
        return Ok(ranked);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let k = match basis {
        PercentileBasis::Destinations => rank_cutoff(ranked.len(), percentile_rank),
        PercentileBasis::TripMass => {
            let total: f64 = ranked.iter().map(|r| r.1).sum();
            let target = total * percentile_rank / 100.0;
            let mut acc = 0.0;
            ranked
                .iter()
                .position(|r| {
                    acc += r.1;
                    acc >= target * (1.0 - 1e-12)
                })
                .map_or(ranked.len(), |i| i + 1)
        }
    };
    let cutoff = ranked[k - 1].1;
    ranked.retain(|r| r.1 >= cutoff);
    Ok(ranked)
}

pub fn flows_table(flows: &[(ZoneId, f64)]) -> AnalyticsTable {
    let mut t = AnalyticsTable::new(&["destination"], &["total_trips"]);
    for (z, v) in flows {
        t.push(vec![z.to_string()], vec![*v]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OvernightStatistic {
    #[default]
    MeanPerDay,
    Total,
}

impl FromStr for OvernightStatistic {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "mean" | "mean-per-day" => Ok(OvernightStatistic::MeanPerDay),
            "total" => Ok(OvernightStatistic::Total),
            other => Err(AnalyticsError::InvalidArgument(format!(
                "unknown statistic {other:?}; expected mean or total"
            ))),
        }
    }
}

/// Class reported for zones without data.
pub const NO_DATA_CLASS: i64 = -1;

/// Type-1 (inverse empirical CDF) breaks: break `k` of `n_classes` is the
/// sorted value at 1-based position `ceil(n·k / n_classes)`. Repeated
/// breaks are merged, so the result is strictly ascending.
pub fn quantile_breaks(values: &[f64], n_classes: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut breaks: Vec<f64> = Vec::with_capacity(n_classes);
    if n == 0 {
        return breaks;
    }
    for k in 1..=n_classes {
        let pos = (n * k).div_ceil(n_classes);
        let b = sorted[pos - 1];
        if breaks.last().is_none_or(|&last| b > last) {
            breaks.push(b);
        }
    }
    breaks
}

/// Index of the first break not below `value`.
pub fn classify(value: f64, breaks: &[f64]) -> usize {
    breaks
        .partition_point(|&b| b < value)
        .min(breaks.len().saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    pub n_classes: usize,
    pub breaks: Vec<f64>,
    pub values: BTreeMap<ZoneId, f64>,
    pub assignments: BTreeMap<ZoneId, usize>,
    /// Zones of the geometry collection that have no data.
    pub no_data: BTreeSet<ZoneId>,
}

impl QuantileMap {
    /// Features for every zone of `zones`, carrying `zone_id`, `value` and
    /// `class` (`null` value and [`NO_DATA_CLASS`] when there is no data).
    pub fn to_geojson(&self, zones: &[ZoneGeometry]) -> Value {
        let features: Vec<Value> = zones
            .iter()
            .map(|z| {
                let value = self.values.get(&z.zone_id);
                let class = self
                    .assignments
                    .get(&z.zone_id)
                    .map_or(NO_DATA_CLASS, |&c| c as i64);
                json!({
                    "type": "Feature",
                    "properties": {
                        "zone_id": z.zone_id.as_str(),
                        "value": value,
                        "class": class,
                    },
                    "geometry": z.shape.to_geojson(),
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    pub fn to_table(&self) -> AnalyticsTable {
        let mut t = AnalyticsTable::new(&["zone_id"], &["value", "class"]);
        for (z, v) in &self.values {
            t.push(vec![z.to_string()], vec![*v, self.assignments[z] as f64]);
        }
        for z in &self.no_data {
            t.push(vec![z.to_string()], vec![f64::NAN, NO_DATA_CLASS as f64]);
        }
        t
    }
}

/// Per overnight zone statistic of persons, classified into quantile classes.
pub fn overnight_quantile_map(
    table: &OvernightTable,
    zones: &[ZoneGeometry],
    n_classes: usize,
    statistic: OvernightStatistic,
) -> Result<QuantileMap, AnalyticsError> {
    if n_classes < 2 {
        return Err(AnalyticsError::InvalidArgument(format!(
            "at least 2 classes are required, got {n_classes}"
        )));
    }
    if table.is_empty() {
        return Err(AnalyticsError::EmptyTable);
    }
    let days = distinct_days(table.records.iter().map(|r| r.day));
    let mut values: BTreeMap<ZoneId, f64> = BTreeMap::new();
    for r in &table.records {
        *values.entry(r.overnight_zone.clone()).or_insert(0.0) += r.persons;
    }
    if statistic == OvernightStatistic::MeanPerDay {
        for v in values.values_mut() {
            *v = ratio(*v, days);
        }
    }
    Ok(classify_values(values, zones, n_classes))
}

/// Quantile classification of arbitrary per-zone values.
pub fn classify_values(
    values: BTreeMap<ZoneId, f64>,
    zones: &[ZoneGeometry],
    n_classes: usize,
) -> QuantileMap {
    let raw: Vec<f64> = values.values().copied().collect();
    let breaks = quantile_breaks(&raw, n_classes);
    let assignments = values
        .iter()
        .map(|(z, &v)| (z.clone(), classify(v, &breaks)))
        .collect();
    let no_data = zones
        .iter()
        .filter(|z| !values.contains_key(&z.zone_id))
        .map(|z| z.zone_id.clone())
        .collect();
    QuantileMap {
        n_classes,
        breaks,
        values,
        assignments,
        no_data,
    }
}
