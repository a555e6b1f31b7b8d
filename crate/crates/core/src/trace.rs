//! Raw recordings, trip assembly and activity-based segmentation.

use std::fmt;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};
use crate::privacy::Pseudonym;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trip needs at least 2 usable points, got {usable}")]
    TooFewPoints { usable: usize },
    #[error("activity confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("accuracy {0} is not a finite non-negative number")]
    Accuracy(f64),
}

/// Device activity classes after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityKind {
    Still,
    OnFoot,
    OnBicycle,
    InVehicle,
    Unknown,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 5] = [
        ActivityKind::Still,
        ActivityKind::OnFoot,
        ActivityKind::OnBicycle,
        ActivityKind::InVehicle,
        ActivityKind::Unknown,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLabel")]
pub struct ActivityLabel {
    pub kind: ActivityKind,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawLabel {
    kind: ActivityKind,
    confidence: f64,
}

impl TryFrom<RawLabel> for ActivityLabel {
    type Error = TraceError;

    fn try_from(raw: RawLabel) -> Result<Self, Self::Error> {
        ActivityLabel::new(raw.kind, raw.confidence)
    }
}

impl ActivityLabel {
    pub fn new(kind: ActivityKind, confidence: f64) -> Result<Self, TraceError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TraceError::Confidence(confidence));
        }
        Ok(Self { kind, confidence })
    }

    pub fn certain(kind: ActivityKind) -> Self {
        Self { kind, confidence: 1.0 }
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub timestamp: DateTime<Utc>,
    pub location: GeoPoint,
    pub accuracy_m: f64,
    pub activity: ActivityLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_speed_mps: Option<f64>,
}

impl TracePoint {
    pub fn new(timestamp: DateTime<Utc>, location: GeoPoint, accuracy_m: f64, kind: ActivityKind) -> Self {
        Self {
            timestamp,
            location,
            accuracy_m,
            activity: ActivityLabel::certain(kind),
            client_speed_mps: None,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !self.accuracy_m.is_finite() || self.accuracy_m < 0.0 {
            return Err(TraceError::Accuracy(self.accuracy_m));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TripId(pub String);

impl fmt::Display for TripId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub trip_id: TripId,
    pub owner: Pseudonym,
    pub points: Vec<TracePoint>,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
}

impl Trip {
    pub fn duration_s(&self) -> f64 {
        seconds_between(self.started_at, self.ended_at)
    }
}

/// Thresholds for trip assembly and segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Points reporting worse accuracy are dropped.
    pub max_accuracy_m: f64,
    /// A new activity must persist this long before a segment boundary is committed.
    pub hysteresis_s: f64,
    /// Segments shorter than this are merged into their longer neighbor.
    pub merge_floor_s: f64,
    /// Sampling gaps longer than this are ignored in speed statistics.
    pub gap_cutoff_s: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            max_accuracy_m: 100.0,
            hysteresis_s: 60.0,
            merge_floor_s: 30.0,
            gap_cutoff_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTrip {
    pub trip: Trip,
    pub dropped_inaccurate: usize,
    pub deduplicated: usize,
}

impl AssembledTrip {
    pub fn dropped(&self) -> usize {
        self.dropped_inaccurate + self.deduplicated
    }
}

pub(crate) fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_milliseconds() as f64 / 1000.0
}

/// Sorts, filters and deduplicates raw points into a trip.
///
/// Timestamps are truncated to milliseconds. Points less accurate than
/// `max_accuracy_m` are dropped first; among points sharing a timestamp the
/// most accurate one is kept.
pub fn assemble_trip(
    trip_id: TripId,
    owner: Pseudonym,
    raw_points: Vec<TracePoint>,
    cfg: &TraceConfig,
) -> Result<AssembledTrip, TraceError> {
    let total = raw_points.len();
    let mut points: Vec<TracePoint> = raw_points
        .into_iter()
        .filter(|p| p.validate().is_ok() && p.accuracy_m <= cfg.max_accuracy_m)
        .map(|mut p| {
            p.timestamp = p
                .timestamp
                .duration_trunc(TimeDelta::milliseconds(1))
                .unwrap_or(p.timestamp);
            p
        })
        .collect();
    let dropped_inaccurate = total - points.len();

    // stable: equal timestamps keep input order, so the first of equally
    // accurate duplicates wins
    points.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.accuracy_m.total_cmp(&b.accuracy_m)));
    let before = points.len();
    points.dedup_by(|later, kept| later.timestamp == kept.timestamp);
    let deduplicated = before - points.len();

    if points.len() < 2 {
        return Err(TraceError::TooFewPoints { usable: points.len() });
    }
    let started_at = points[0].timestamp;
    let ended_at = points[points.len() - 1].timestamp;
    Ok(AssembledTrip {
        trip: Trip {
            trip_id,
            owner,
            points,
            started_at,
            ended_at,
        },
        dropped_inaccurate,
        deduplicated,
    })
}

/// A unimodal slice of a trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<'t> {
    pub trip_id: &'t TripId,
    /// Index of the first point within the parent trip.
    pub offset: usize,
    pub points: &'t [TracePoint],
    pub dominant_activity: ActivityKind,
    pub duration_s: f64,
    pub length_m: f64,
}

impl<'t> Segment<'t> {
    pub fn new(trip_id: &'t TripId, offset: usize, points: &'t [TracePoint], dominant_activity: ActivityKind) -> Self {
        let (duration_s, length_m) = match (points.first(), points.last()) {
            (Some(first), Some(last)) => (seconds_between(first.timestamp, last.timestamp), path_length(points)),
            _ => (0.0, 0.0),
        };
        Self {
            trip_id,
            offset,
            points,
            dominant_activity,
            duration_s,
            length_m,
        }
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.points[0].timestamp
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.points[self.points.len() - 1].timestamp
    }
}

fn path_length(points: &[TracePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| haversine_distance(w[0].location, w[1].location))
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct Run {
    kind: ActivityKind,
    start: usize,
    end: usize, // exclusive
}

fn runs(kinds: &[ActivityKind]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (i, &kind) in kinds.iter().enumerate() {
        match out.last_mut() {
            Some(run) if run.kind == kind => run.end = i + 1,
            _ => out.push(Run { kind, start: i, end: i + 1 }),
        }
    }
    out
}

/// Splits a trip into unimodal segments.
///
/// Unknown labels inherit the surrounding activity. A change of activity is
/// committed only when the new activity persists for `hysteresis_s`; shorter
/// excursions are relabeled with the current activity. Any remaining segment
/// shorter than `merge_floor_s` is folded into its longer neighbor. The
/// segments partition the trip's points in order.
pub fn segment_by_activity<'t>(trip: &'t Trip, cfg: &TraceConfig) -> Vec<Segment<'t>> {
    let points = &trip.points;
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let ts = |i: usize| points[i].timestamp;

    let mut kinds: Vec<ActivityKind> = points.iter().map(|p| p.activity.kind).collect();
    fill_unknown(&mut kinds);

    // how long a run lasts: until the next different label, or the final point
    let persists = |run: &Run| {
        let until = if run.end < n { ts(run.end) } else { ts(n - 1) };
        seconds_between(ts(run.start), until)
    };
    let raw_runs = runs(&kinds);
    let mut current = raw_runs
        .iter()
        .find(|r| persists(r) >= cfg.hysteresis_s)
        .or_else(|| raw_runs.iter().max_by(|a, b| persists(a).total_cmp(&persists(b))))
        .map(|r| r.kind)
        .unwrap_or(kinds[0]);
    let mut smoothed = kinds.clone();
    for run in &raw_runs {
        if run.kind == current {
            continue;
        }
        if persists(run) >= cfg.hysteresis_s {
            current = run.kind;
        } else {
            smoothed[run.start..run.end].fill(current);
        }
    }

    let span = |r: &Run| seconds_between(ts(r.start), ts(r.end - 1));
    let mut segs = runs(&smoothed);
    while segs.len() > 1 {
        let Some((i, _)) = segs
            .iter()
            .enumerate()
            .filter(|(_, r)| span(r) < cfg.merge_floor_s)
            .min_by(|a, b| span(a.1).total_cmp(&span(b.1)))
        else {
            break;
        };
        let into_prev = match (i.checked_sub(1), segs.get(i + 1)) {
            (Some(p), Some(next)) => span(&segs[p]) >= span(next),
            (Some(_), None) => true,
            _ => false,
        };
        let short = segs.remove(i);
        if into_prev {
            segs[i - 1].end = short.end;
        } else {
            segs[i].start = short.start;
        }
        // neighbors may now share a kind
        let mut merged: Vec<Run> = Vec::with_capacity(segs.len());
        for r in segs {
            match merged.last_mut() {
                Some(last) if last.kind == r.kind => last.end = r.end,
                _ => merged.push(r),
            }
        }
        segs = merged;
    }

    segs.into_iter()
        .map(|r| Segment::new(&trip.trip_id, r.start, &points[r.start..r.end], r.kind))
        .collect()
}

fn fill_unknown(kinds: &mut [ActivityKind]) {
    let Some(first_known) = kinds.iter().copied().find(|k| *k != ActivityKind::Unknown) else {
        return;
    };
    let mut last = first_known;
    for k in kinds.iter_mut() {
        if *k == ActivityKind::Unknown {
            *k = last;
        } else {
            last = *k;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    pub duration_s: f64,
    pub length_m: f64,
    pub median_speed_mps: f64,
}

/// Duration, path length and median per-gap speed. Gaps longer than
/// `gap_cutoff_s` do not contribute speed samples.
pub fn trip_geometry_stats(points: &[TracePoint], cfg: &TraceConfig) -> GeometryStats {
    let duration_s = match (points.first(), points.last()) {
        (Some(a), Some(b)) => seconds_between(a.timestamp, b.timestamp),
        _ => 0.0,
    };
    let mut speeds: Vec<f64> = points
        .windows(2)
        .filter_map(|w| {
            let dt = seconds_between(w[0].timestamp, w[1].timestamp);
            (dt > 0.0 && dt <= cfg.gap_cutoff_s).then(|| haversine_distance(w[0].location, w[1].location) / dt)
        })
        .collect();
    GeometryStats {
        duration_s,
        length_m: path_length(points),
        median_speed_mps: median(&mut speeds).unwrap_or(0.0),
    }
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}
