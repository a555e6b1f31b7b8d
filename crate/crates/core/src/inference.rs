//! Transport-mode classification of segments and schedule-based transit matching.
//!
//! Device activity labels separate walking and cycling from vehicle travel but
//! cannot tell a car from a tram or bus. A vehicle segment becomes transit only
//! when a scheduled trip explains it: entry and exit stops near the segment's
//! endpoints, departure and arrival times within tolerance, and the trace
//! following the route's shape. Otherwise it is a car.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::point_to_polyline_distance;
use crate::gtfs::{GtfsFeed, RouteType, ServiceSeconds};
use crate::trace::{seconds_between, ActivityKind, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TravelMode {
    Walk,
    Bicycle,
    Car,
    Tram,
    Bus,
    Unknown,
}

impl TravelMode {
    pub const ALL: [TravelMode; 6] = [
        TravelMode::Walk,
        TravelMode::Bicycle,
        TravelMode::Car,
        TravelMode::Tram,
        TravelMode::Bus,
        TravelMode::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TravelMode::Walk => "Walk",
            TravelMode::Bicycle => "Bicycle",
            TravelMode::Car => "Car",
            TravelMode::Tram => "Tram",
            TravelMode::Bus => "Bus",
            TravelMode::Unknown => "Unknown",
        }
    }

    pub fn is_transit(self) -> bool {
        matches!(self, TravelMode::Tram | TravelMode::Bus)
    }
}

impl fmt::Display for TravelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TravelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TravelMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeLabel {
    pub mode: TravelMode,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtEnrichment {
    pub entry_stop_id: String,
    pub exit_stop_id: String,
    pub route_id: String,
    pub trip_id: String,
    /// Mean absolute difference between observed and scheduled times at entry and exit.
    pub schedule_deviation_s: f64,
}

/// A scheduled trip that could explain a vehicle segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub trip_id: String,
    pub route_id: String,
    pub entry_stop_id: String,
    pub exit_stop_id: String,
    pub service_date: NaiveDate,
    pub dep_a: ServiceSeconds,
    pub arr_b: ServiceSeconds,
    /// Mean distance of the segment's points to the trip's route shape.
    pub spatial_score_m: f64,
    /// Mean absolute schedule deviation at entry and exit.
    pub temporal_score_s: f64,
}

impl MatchCandidate {
    /// Total preference order: temporal, spatial, route, trip, then entry,
    /// exit, departure and service date so that no two candidates tie.
    pub fn preference(&self, other: &Self) -> Ordering {
        self.temporal_score_s
            .total_cmp(&other.temporal_score_s)
            .then(self.spatial_score_m.total_cmp(&other.spatial_score_m))
            .then_with(|| self.route_id.cmp(&other.route_id))
            .then_with(|| self.trip_id.cmp(&other.trip_id))
            .then_with(|| self.entry_stop_id.cmp(&other.entry_stop_id))
            .then_with(|| self.exit_stop_id.cmp(&other.exit_stop_id))
            .then(self.dep_a.cmp(&other.dep_a))
            .then(self.service_date.cmp(&other.service_date))
    }

    pub fn enrichment(&self) -> PtEnrichment {
        PtEnrichment {
            entry_stop_id: self.entry_stop_id.clone(),
            exit_stop_id: self.exit_stop_id.clone(),
            route_id: self.route_id.clone(),
            trip_id: self.trip_id.clone(),
            schedule_deviation_s: self.temporal_score_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Stops this close to a segment endpoint are entry/exit candidates.
    pub entry_radius_m: f64,
    /// Allowed deviation between observed segment start and scheduled departure.
    pub temporal_tolerance_s: f64,
    /// Candidates whose mean trace-to-shape distance exceeds this are rejected.
    pub spatial_accept_m: f64,
    /// Segments with fewer points are not classified.
    pub min_points: usize,
    /// Confidence multiplier applied when vehicle segments needed disambiguation.
    pub transit_damping: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            entry_radius_m: 150.0,
            temporal_tolerance_s: 300.0,
            spatial_accept_m: 100.0,
            min_points: 10,
            transit_damping: 0.8,
        }
    }
}

/// Service days to try for an observed instant: its own UTC date and the day
/// before (for trips running past midnight), with the instant's offset in
/// seconds from each service-day midnight.
pub fn service_days(at: DateTime<Utc>) -> [(NaiveDate, f64); 2] {
    let date = at.date_naive();
    let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
    let offset = seconds_between(midnight, at);
    let prev = date - Duration::days(1);
    [(date, offset), (prev, offset + 86_400.0)]
}

/// Finds the best scheduled trip explaining a vehicle segment, if any.
pub fn match_transit(segment: &Segment<'_>, feed: &GtfsFeed, cfg: &InferenceConfig) -> Option<MatchCandidate> {
    if segment.points.len() < 2 {
        return None;
    }
    let first = &segment.points[0];
    let last = &segment.points[segment.points.len() - 1];
    let entries = feed.stops_within(first.location, cfg.entry_radius_m);
    let exits = feed.stops_within(last.location, cfg.entry_radius_m);
    if entries.is_empty() || exits.is_empty() {
        return None;
    }

    let mut shape_scores: HashMap<String, Option<f64>> = HashMap::new();
    let mut best: Option<MatchCandidate> = None;
    for (service_date, obs_start) in service_days(first.timestamp) {
        let obs_end = obs_start + seconds_between(first.timestamp, last.timestamp);
        let lo = (obs_start - cfg.temporal_tolerance_s).ceil().max(0.0);
        let hi = (obs_start + cfg.temporal_tolerance_s).floor() + 1.0;
        if hi <= lo || lo > u32::MAX as f64 {
            continue;
        }
        let window = (lo as ServiceSeconds, hi.min(u32::MAX as f64) as ServiceSeconds);
        for (entry, _) in &entries {
            for (exit, _) in &exits {
                if entry == exit {
                    continue;
                }
                let Ok(services) = feed.trips_serving_pair(entry, exit, service_date, window) else {
                    continue;
                };
                for svc in services {
                    let Some(trip) = feed.trip(&svc.trip_id) else { continue };
                    let spatial = *shape_scores.entry(feed.shape_key(trip)).or_insert_with(|| {
                        feed.trip_shape(trip).map(|shape| {
                            segment
                                .points
                                .iter()
                                .map(|p| point_to_polyline_distance(p.location, &shape))
                                .sum::<f64>()
                                / segment.points.len() as f64
                        })
                    });
                    let Some(spatial) = spatial.filter(|s| *s <= cfg.spatial_accept_m) else {
                        continue;
                    };
                    let temporal = ((obs_start - svc.dep_a as f64).abs() + (obs_end - svc.arr_b as f64).abs()) / 2.0;
                    let candidate = MatchCandidate {
                        trip_id: svc.trip_id,
                        route_id: svc.route_id,
                        entry_stop_id: entry.clone(),
                        exit_stop_id: exit.clone(),
                        service_date,
                        dep_a: svc.dep_a,
                        arr_b: svc.arr_b,
                        spatial_score_m: spatial,
                        temporal_score_s: temporal,
                    };
                    if best.as_ref().is_none_or(|b| candidate.preference(b) == Ordering::Less) {
                        best = Some(candidate);
                    }
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: ModeLabel,
    pub enrichment: Option<PtEnrichment>,
}

impl Classification {
    fn unknown(confidence: f64) -> Self {
        Self {
            label: ModeLabel {
                mode: TravelMode::Unknown,
                confidence,
            },
            enrichment: None,
        }
    }
}

/// Duration-weighted activity majority: each point's label covers the time
/// until the next point. Returns the winning kind and its share.
pub fn activity_majority(segment: &Segment<'_>) -> Option<(ActivityKind, f64)> {
    let mut weights = [0.0f64; 5];
    let mut total = 0.0;
    for w in segment.points.windows(2) {
        let dt = seconds_between(w[0].timestamp, w[1].timestamp);
        let slot = ActivityKind::ALL.iter().position(|k| *k == w[0].activity.kind).unwrap();
        weights[slot] += dt;
        total += dt;
    }
    if total <= 0.0 {
        return None;
    }
    // ties resolve to the earlier kind in declaration order
    let (slot, weight) = weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &w)| if w > best.1 { (i, w) } else { best });
    Some((ActivityKind::ALL[slot], weight / total))
}

/// Assigns a travel mode, and for transit the entry/exit stops and line.
pub fn classify_segment(segment: &Segment<'_>, feed: &GtfsFeed, cfg: &InferenceConfig) -> Classification {
    if segment.points.len() < cfg.min_points {
        return Classification::unknown(0.0);
    }
    let Some((kind, share)) = activity_majority(segment) else {
        return Classification::unknown(0.0);
    };
    let label = |mode, confidence| ModeLabel { mode, confidence };
    match kind {
        ActivityKind::OnFoot => Classification {
            label: label(TravelMode::Walk, share),
            enrichment: None,
        },
        ActivityKind::OnBicycle => Classification {
            label: label(TravelMode::Bicycle, share),
            enrichment: None,
        },
        ActivityKind::InVehicle => {
            let confidence = share * cfg.transit_damping;
            match match_transit(segment, feed, cfg) {
                Some(candidate) => {
                    let mode = match feed.route(&candidate.route_id).map(|r| r.route_type) {
                        Some(RouteType::Tram) => TravelMode::Tram,
                        Some(RouteType::Bus) => TravelMode::Bus,
                        _ => TravelMode::Unknown,
                    };
                    Classification {
                        label: label(mode, confidence),
                        enrichment: Some(candidate.enrichment()),
                    }
                }
                None => Classification {
                    label: label(TravelMode::Car, confidence),
                    enrichment: None,
                },
            }
        }
        ActivityKind::Still | ActivityKind::Unknown => Classification::unknown(share),
    }
}

/// Reference answer for one evaluated trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mode: TravelMode,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_stop_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_stop_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_id: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predicted} predictions for {truth} ground-truth trips")]
    LengthMismatch { predicted: usize, truth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub mode: String,
    pub number: usize,
    pub correct: usize,
    pub median_duration_s: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub total: AccuracyRow,
}

impl AccuracyReport {
    pub fn row(&self, mode: TravelMode) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.mode == mode.as_str())
    }
}

/// Whether a prediction counts as correct. Transit trips need the right
/// entry stop, exit stop and line on top of the mode.
pub fn is_correct(predicted: &Classification, truth: &GroundTruth) -> bool {
    if predicted.label.mode != truth.mode {
        return false;
    }
    if truth.route_id.is_none() && !truth.mode.is_transit() {
        return true;
    }
    match &predicted.enrichment {
        Some(e) => {
            Some(&e.entry_stop_id) == truth.entry_stop_id.as_ref()
                && Some(&e.exit_stop_id) == truth.exit_stop_id.as_ref()
                && Some(&e.route_id) == truth.route_id.as_ref()
        }
        None => false,
    }
}

fn summarize(mode: &str, items: &[(bool, f64)]) -> AccuracyRow {
    let mut durations: Vec<f64> = items.iter().map(|(_, d)| *d).collect();
    let correct = items.iter().filter(|(ok, _)| *ok).count();
    AccuracyRow {
        mode: mode.to_string(),
        number: items.len(),
        correct,
        median_duration_s: crate::trace::median(&mut durations),
        accuracy: (!items.is_empty()).then(|| correct as f64 / items.len() as f64),
    }
}

/// Per-mode and overall recognition accuracy. Rows for Bicycle, Car, Tram and
/// Bus are always present; Walk and Unknown appear when the truth contains them.
pub fn evaluate_against_ground_truth(
    predicted: &[Classification],
    truth: &[GroundTruth],
) -> Result<AccuracyReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut by_mode: HashMap<TravelMode, Vec<(bool, f64)>> = HashMap::new();
    let mut all = Vec::with_capacity(truth.len());
    for (p, t) in predicted.iter().zip(truth) {
        let item = (is_correct(p, t), t.duration_s);
        by_mode.entry(t.mode).or_default().push(item);
        all.push(item);
    }
    let order = [
        TravelMode::Bicycle,
        TravelMode::Car,
        TravelMode::Tram,
        TravelMode::Bus,
        TravelMode::Walk,
        TravelMode::Unknown,
    ];
    let rows = order
        .into_iter()
        .filter(|m| !matches!(m, TravelMode::Walk | TravelMode::Unknown) || by_mode.contains_key(m))
        .map(|m| summarize(m.as_str(), by_mode.get(&m).map(Vec::as_slice).unwrap_or(&[])))
        .collect();
    Ok(AccuracyReport {
        rows,
        total: summarize("Total", &all),
    })
}

fn fmt_minutes(seconds: Option<f64>) -> String {
    match seconds {
        None => "-".into(),
        Some(s) => format!("{} min.", trim_decimal((s / 60.0 * 10.0).round() / 10.0)),
    }
}

fn fmt_percent(fraction: Option<f64>) -> String {
    match fraction {
        None => "-".into(),
        Some(f) => format!("{}%", trim_decimal((f * 1000.0).round() / 10.0)),
    }
}

fn trim_decimal(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>6} {:>16} {:>9}", "Mode", "Number", "Median Duration", "Accuracy")?;
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            writeln!(
                f,
                "{:<8} {:>6} {:>16} {:>9}",
                row.mode,
                row.number,
                fmt_minutes(row.median_duration_s),
                fmt_percent(row.accuracy)
            )?;
        }
        Ok(())
    }
}
