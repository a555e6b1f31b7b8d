//! Descriptive statistics over stored trips and contextual sources: mode
//! share, dataset totals, stop query time series, road congestion levels and
//! event-impact reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{point_to_polyline_distance, GeoPoint};
use crate::gtfs::GtfsFeed;
use crate::inference::TravelMode;
use crate::sources::{FcdRecord, PtQuery, StreetSegment, FCD_INTERVAL_S};
use crate::trace::{median, Trip};

pub const SECONDS_PER_DAY: u32 = 86_400;
pub const DEFAULT_BUCKET_WIDTH_S: u32 = 1_800;
/// Same-weekday history required for an event baseline.
pub const MIN_BASELINE_DAYS: usize = 4;
/// Congestion snapshot lead time before an event.
pub const SNAPSHOT_LEAD_S: i64 = 1_800;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("bucket width {0} s does not divide a day")]
    BadBucketWidth(u32),
    #[error("reference speed must be positive, got {0}")]
    BadReference(f64),
    #[error("only {found} prior same-weekday dates with data, need {required}")]
    InsufficientHistory { found: usize, required: usize },
    #[error("feed has no stops")]
    NoStops,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSample {
    pub mode: TravelMode,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeShareRow {
    pub mode: TravelMode,
    pub trip_count: usize,
    pub total_duration_s: f64,
    pub count_share: f64,
    pub duration_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeShare {
    pub trip_count: usize,
    pub total_duration_s: f64,
    pub rows: Vec<ModeShareRow>,
}

impl ModeShare {
    pub fn row(&self, mode: TravelMode) -> &ModeShareRow {
        self.rows.iter().find(|r| r.mode == mode).expect("every mode has a row")
    }
}

/// Count- and duration-based share per mode. Every mode gets a row; with no
/// trips all shares are zero.
pub fn mode_share(samples: &[ModeSample]) -> ModeShare {
    let mut counts: BTreeMap<TravelMode, (usize, f64)> = TravelMode::ALL.iter().map(|m| (*m, (0, 0.0))).collect();
    for s in samples {
        let slot = counts.get_mut(&s.mode).expect("all modes present");
        slot.0 += 1;
        slot.1 += s.duration_s;
    }
    let trip_count = samples.len();
    let total_duration_s: f64 = counts.values().map(|(_, d)| d).sum();
    let share = |part: f64, whole: f64| if whole > 0.0 { part / whole } else { 0.0 };
    let rows = TravelMode::ALL
        .iter()
        .map(|mode| {
            let (n, d) = counts[mode];
            ModeShareRow {
                mode: *mode,
                trip_count: n,
                total_duration_s: d,
                count_share: share(n as f64, trip_count as f64),
                duration_share: share(d, total_duration_s),
            }
        })
        .collect();
    ModeShare {
        trip_count,
        total_duration_s,
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub user_count: usize,
    pub trip_count: usize,
    pub average_trip_duration_min: f64,
    pub gps_point_count: usize,
}

pub fn dataset_stats<'a>(trips: impl IntoIterator<Item = &'a Trip>) -> DatasetStats {
    let mut users = BTreeSet::new();
    let (mut trip_count, mut points, mut seconds) = (0usize, 0usize, 0.0f64);
    for t in trips {
        users.insert(&t.owner);
        trip_count += 1;
        points += t.points.len();
        seconds += t.duration_s();
    }
    DatasetStats {
        user_count: users.len(),
        trip_count,
        average_trip_duration_min: if trip_count == 0 {
            0.0
        } else {
            seconds / 60.0 / trip_count as f64
        },
        gps_point_count: points,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTimeseries {
    pub stop_id: String,
    pub date: NaiveDate,
    pub bucket_width_s: u32,
    pub counts: Vec<u32>,
}

impl QueryTimeseries {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Index of the first bucket with the highest count.
    pub fn peak_bucket(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        self.counts.iter().position(|&c| c == max)
    }

    pub fn bucket_start_s(&self, bucket: usize) -> u32 {
        bucket as u32 * self.bucket_width_s
    }
}

fn check_bucket_width(w: u32) -> Result<usize, AnalyticsError> {
    if w == 0 || !SECONDS_PER_DAY.is_multiple_of(w) {
        return Err(AnalyticsError::BadBucketWidth(w));
    }
    Ok((SECONDS_PER_DAY / w) as usize)
}

fn midnight(date: NaiveDate) -> DateTime<Utc> {
    date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc()
}

fn touches_stop(q: &PtQuery, stop_id: &str) -> bool {
    q.origin.stop_id() == Some(stop_id) || q.destination.stop_id() == Some(stop_id)
}

/// Queries starting or ending at `stop_id`, bucketed by departure time of day.
pub fn stop_query_timeseries<'a>(
    queries: impl IntoIterator<Item = &'a PtQuery>,
    stop_id: &str,
    date: NaiveDate,
    bucket_width_s: u32,
) -> Result<QueryTimeseries, AnalyticsError> {
    let buckets = check_bucket_width(bucket_width_s)?;
    let start = midnight(date);
    let mut counts = vec![0u32; buckets];
    for q in queries {
        if q.departure.date_naive() != date || !touches_stop(q, stop_id) {
            continue;
        }
        let offset = (q.departure - start).num_seconds() as u32;
        counts[(offset / bucket_width_s) as usize] += 1;
    }
    Ok(QueryTimeseries {
        stop_id: stop_id.to_string(),
        date,
        bucket_width_s,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoadLevel {
    Heavy,
    Medium,
    Low,
}

impl LoadLevel {
    /// Map rendering color.
    pub fn color(self) -> &'static str {
        match self {
            LoadLevel::Heavy => "red",
            LoadLevel::Medium => "yellow",
            LoadLevel::Low => "green",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CongestionThresholds {
    /// Ratios below this are heavy load.
    pub heavy_below: f64,
    /// Ratios below this (and not heavy) are medium load.
    pub medium_below: f64,
}

impl Default for CongestionThresholds {
    fn default() -> Self {
        Self {
            heavy_below: 0.5,
            medium_below: 0.75,
        }
    }
}

impl CongestionThresholds {
    pub fn level(&self, ratio: f64) -> LoadLevel {
        if ratio < self.heavy_below {
            LoadLevel::Heavy
        } else if ratio < self.medium_below {
            LoadLevel::Medium
        } else {
            LoadLevel::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionLevel {
    pub segment_id: String,
    pub interval_start: DateTime<Utc>,
    pub level: LoadLevel,
    pub speed_ratio: f64,
}

pub fn congestion_level(
    fcd: &FcdRecord,
    reference_kmh: f64,
    thresholds: &CongestionThresholds,
) -> Result<CongestionLevel, AnalyticsError> {
    if !(reference_kmh > 0.0) || !reference_kmh.is_finite() {
        return Err(AnalyticsError::BadReference(reference_kmh));
    }
    let ratio = (fcd.avg_speed_kmh / reference_kmh).clamp(0.0, 1.0);
    Ok(CongestionLevel {
        segment_id: fcd.segment_id.clone(),
        interval_start: fcd.interval_start,
        level: thresholds.level(ratio),
        speed_ratio: ratio,
    })
}

/// Free-flow reference: nearest-rank 95th percentile of observed speeds.
pub fn reference_speed(speeds: &[f64]) -> Option<f64> {
    if speeds.is_empty() {
        return None;
    }
    let mut sorted = speeds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

pub fn floor_to_interval(t: DateTime<Utc>) -> DateTime<Utc> {
    let secs = t.timestamp();
    DateTime::from_timestamp(secs - secs.rem_euclid(FCD_INTERVAL_S), 0).expect("in range")
}

/// Per-segment reference speeds over all records.
pub fn reference_speeds(records: &[FcdRecord]) -> HashMap<&str, f64> {
    let mut by_segment: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in records {
        by_segment.entry(r.segment_id.as_str()).or_default().push(r.avg_speed_kmh);
    }
    by_segment
        .into_iter()
        .filter_map(|(id, speeds)| reference_speed(&speeds).map(|v| (id, v)))
        .collect()
}

/// Congestion of every segment with a record in the interval containing `at`,
/// sorted by segment id.
pub fn congestion_snapshot(
    records: &[FcdRecord],
    at: DateTime<Utc>,
    thresholds: &CongestionThresholds,
) -> Vec<CongestionLevel> {
    let interval = floor_to_interval(at);
    let refs = reference_speeds(records);
    let mut out: Vec<CongestionLevel> = records
        .iter()
        .filter(|r| r.interval_start == interval)
        .filter_map(|r| congestion_level(r, *refs.get(r.segment_id.as_str())?, thresholds).ok())
        .collect();
    out.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    out.dedup_by(|a, b| a.segment_id == b.segment_id);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventImpactRequest {
    pub venue: GeoPoint,
    pub event_time: DateTime<Utc>,
    pub radius_m: f64,
    /// How far back to look for same-weekday baseline dates.
    pub history_horizon_s: i64,
    pub bucket_width_s: u32,
}

impl EventImpactRequest {
    pub fn new(venue: GeoPoint, event_time: DateTime<Utc>, radius_m: f64) -> Self {
        Self {
            venue,
            event_time,
            radius_m,
            history_horizon_s: 8 * 7 * 86_400,
            bucket_width_s: DEFAULT_BUCKET_WIDTH_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventImpactReport {
    pub venue: GeoPoint,
    pub event_time: DateTime<Utc>,
    pub congestion_at: DateTime<Utc>,
    pub congestion: Vec<CongestionLevel>,
    pub stop_id: String,
    pub stop_name: String,
    pub stop_distance_m: f64,
    pub event_series: QueryTimeseries,
    pub baseline_dates: Vec<NaiveDate>,
    pub baseline: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Road congestion near a venue shortly before an event, plus the query time
/// series of the stop nearest the venue against its same-weekday baseline.
pub fn event_impact_report(
    req: &EventImpactRequest,
    fcd: &[FcdRecord],
    streets: &[StreetSegment],
    queries: &[PtQuery],
    feed: &GtfsFeed,
    thresholds: &CongestionThresholds,
) -> Result<EventImpactReport, AnalyticsError> {
    check_bucket_width(req.bucket_width_s)?;
    let (stop, stop_distance_m) = feed.nearest_stop(req.venue).ok_or(AnalyticsError::NoStops)?;

    let mut by_date: HashMap<NaiveDate, Vec<&PtQuery>> = HashMap::new();
    for q in queries {
        by_date.entry(q.departure.date_naive()).or_default().push(q);
    }
    let event_date = req.event_time.date_naive();
    let mut baseline_dates = Vec::new();
    for weeks in 1.. {
        let d = event_date - Duration::weeks(weeks);
        if (event_date - d).num_seconds() > req.history_horizon_s {
            break;
        }
        if by_date.contains_key(&d) {
            baseline_dates.push(d);
        }
    }
    if baseline_dates.len() < MIN_BASELINE_DAYS {
        return Err(AnalyticsError::InsufficientHistory {
            found: baseline_dates.len(),
            required: MIN_BASELINE_DAYS,
        });
    }
    baseline_dates.sort();

    let series_for = |d: NaiveDate| {
        stop_query_timeseries(
            by_date.get(&d).into_iter().flatten().copied(),
            &stop.stop_id,
            d,
            req.bucket_width_s,
        )
    };
    let event_series = series_for(event_date)?;
    let history: Vec<QueryTimeseries> = baseline_dates.iter().map(|d| series_for(*d)).collect::<Result<_, _>>()?;
    let baseline: Vec<f64> = (0..event_series.counts.len())
        .map(|b| {
            let mut values: Vec<f64> = history.iter().map(|s| s.counts[b] as f64).collect();
            median(&mut values).unwrap_or(0.0)
        })
        .collect();
    let delta = event_series
        .counts
        .iter()
        .zip(&baseline)
        .map(|(&e, &b)| e as f64 - b)
        .collect();

    let congestion_at = floor_to_interval(req.event_time - Duration::seconds(SNAPSHOT_LEAD_S));
    let nearby: BTreeSet<&str> = streets
        .iter()
        .filter(|s| point_to_polyline_distance(req.venue, &s.geometry) <= req.radius_m)
        .map(|s| s.segment_id.as_str())
        .collect();
    let congestion = congestion_snapshot(fcd, congestion_at, thresholds)
        .into_iter()
        .filter(|c| nearby.contains(c.segment_id.as_str()))
        .collect();

    Ok(EventImpactReport {
        venue: req.venue,
        event_time: req.event_time,
        congestion_at,
        congestion,
        stop_id: stop.stop_id.clone(),
        stop_name: stop.name.clone(),
        stop_distance_m,
        event_series,
        baseline_dates,
        baseline,
        delta,
    })
}
