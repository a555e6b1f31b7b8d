//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use mobility_core::geo::{haversine_distance, point_to_polyline_distance, GeoPoint};
use mobility_core::gtfs::{GtfsFeed, Route, RouteType, ServiceCalendar, ServicePattern, Stop, StopTime, TripSchedule};
use mobility_core::inference::{InferenceConfig, MatchCandidate};
use mobility_core::trace::{ActivityKind, TracePoint, TripId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn origin() -> GeoPoint {
    GeoPoint::new(52.37, 9.73).unwrap()
}

pub fn utc(date: NaiveDate, seconds: f64) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap()) + Duration::milliseconds((seconds * 1000.0) as i64)
}

/// Linear-scan reference for `SpatialIndex::nearest_within`.
pub fn scan_within<Id: Clone + Ord>(entries: &[(Id, GeoPoint)], p: GeoPoint, radius: f64) -> Vec<(Id, f64)> {
    let mut out: Vec<(Id, f64)> = entries
        .iter()
        .map(|(id, q)| (id.clone(), haversine_distance(p, *q)))
        .filter(|(_, d)| *d <= radius)
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Brute-force reference for `match_transit`: every (entry visit, exit visit)
/// pair of every trip on both candidate service days, scored from scratch.
pub fn brute_force_match(points: &[TracePoint], feed: &GtfsFeed, cfg: &InferenceConfig) -> Option<MatchCandidate> {
    if points.len() < 2 {
        return None;
    }
    let first = &points[0];
    let last = &points[points.len() - 1];
    let span = (last.timestamp - first.timestamp).num_milliseconds() as f64 / 1000.0;
    let date = first.timestamp.date_naive();
    let midnight = Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap());
    let since_midnight = (first.timestamp - midnight).num_milliseconds() as f64 / 1000.0;

    let mut all = Vec::new();
    for (service_date, obs_start) in [(date, since_midnight), (date - Duration::days(1), since_midnight + 86_400.0)] {
        let obs_end = obs_start + span;
        for trip in feed.trips() {
            if !feed.is_trip_active(trip, service_date) {
                continue;
            }
            let st = &trip.stop_times;
            for ia in 0..st.len() {
                let dep = st[ia].departure as f64;
                if (dep - obs_start).abs() > cfg.temporal_tolerance_s {
                    continue;
                }
                let a = feed.stop(&st[ia].stop_id).unwrap();
                if haversine_distance(first.location, a.location) > cfg.entry_radius_m {
                    continue;
                }
                for ib in ia + 1..st.len() {
                    if st[ib].stop_id == st[ia].stop_id {
                        continue;
                    }
                    // only the first visit of this exit stop after boarding counts
                    if st[ia + 1..ib].iter().any(|s| s.stop_id == st[ib].stop_id) {
                        continue;
                    }
                    let b = feed.stop(&st[ib].stop_id).unwrap();
                    if haversine_distance(last.location, b.location) > cfg.entry_radius_m {
                        continue;
                    }
                    let Some(shape) = feed.trip_shape(trip) else { continue };
                    let spatial = points
                        .iter()
                        .map(|p| point_to_polyline_distance(p.location, &shape))
                        .sum::<f64>()
                        / points.len() as f64;
                    if spatial > cfg.spatial_accept_m {
                        continue;
                    }
                    let temporal = ((obs_start - dep).abs() + (obs_end - st[ib].arrival as f64).abs()) / 2.0;
                    all.push(MatchCandidate {
                        trip_id: trip.trip_id.clone(),
                        route_id: trip.route_id.clone(),
                        entry_stop_id: a.stop_id.clone(),
                        exit_stop_id: b.stop_id.clone(),
                        service_date,
                        dep_a: st[ia].departure,
                        arr_b: st[ib].arrival,
                        spatial_score_m: spatial,
                        temporal_score_s: temporal,
                    });
                }
            }
        }
    }
    all.into_iter().min_by(|x, y| {
        let kx = (&x.route_id, &x.trip_id, &x.entry_stop_id, &x.exit_stop_id, x.dep_a, x.service_date);
        let ky = (&y.route_id, &y.trip_id, &y.entry_stop_id, &y.exit_stop_id, y.dep_a, y.service_date);
        x.temporal_score_s
            .total_cmp(&y.temporal_score_s)
            .then(x.spatial_score_m.total_cmp(&y.spatial_score_m))
            .then(kx.cmp(&ky))
            .then(Ordering::Equal)
    })
}

pub struct RandomFeed {
    pub feed: GtfsFeed,
    pub stops: Vec<Stop>,
}

/// Random feed: up to `max_stops` stops on a coarse grid (so several stops
/// fall inside one matching radius), up to `max_trips` trips on a handful of
/// routes, duplicate timings, loops, past-midnight times and a calendar that
/// switches some services off on some days.
pub fn random_feed(rng: &mut ChaCha8Rng, max_stops: usize, max_trips: usize, base_date: NaiveDate) -> RandomFeed {
    let n_stops = rng.random_range(4..=max_stops);
    let stops: Vec<Stop> = (0..n_stops)
        .map(|i| {
            let east = rng.random_range(0..12) as f64 * 120.0;
            let north = rng.random_range(0..12) as f64 * 120.0;
            Stop {
                stop_id: format!("S{i:02}"),
                name: format!("Stop {i}"),
                location: origin().offset_m(east, north),
            }
        })
        .collect();
    let n_routes = rng.random_range(1..=5);
    let routes: Vec<Route> = (0..n_routes)
        .map(|r| Route {
            route_id: format!("R{r}"),
            short_name: format!("{r}"),
            route_type: if rng.random_bool(0.5) { RouteType::Tram } else { RouteType::Bus },
        })
        .collect();
    let patterns: Vec<Vec<String>> = (0..n_routes)
        .map(|_| {
            let len = rng.random_range(2..=8.min(n_stops + 2));
            let mut seq: Vec<String> = Vec::new();
            while seq.len() < len {
                let s = stops[rng.random_range(0..n_stops)].stop_id.clone();
                if seq.last() != Some(&s) {
                    seq.push(s);
                }
            }
            seq
        })
        .collect();
    let n_trips = rng.random_range(1..=max_trips);
    let mut trips = Vec::new();
    for t in 0..n_trips {
        let r = rng.random_range(0..n_routes);
        let mut time: u32 = if rng.random_bool(0.2) {
            rng.random_range(23 * 3600..26 * 3600)
        } else {
            // coarse grid so distinct trips often share exact times
            8 * 3600 + rng.random_range(0..12u32) * 150
        };
        let stop_times = patterns[r]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i > 0 {
                    time += rng.random_range(1..4u32) * 60;
                }
                let arrival = time;
                time += rng.random_range(0..2u32) * 30;
                StopTime {
                    stop_id: s.clone(),
                    arrival,
                    departure: time,
                    stop_sequence: i as u32 + 1,
                }
            })
            .collect();
        trips.push(TripSchedule {
            trip_id: format!("T{t:03}"),
            route_id: format!("R{r}"),
            service_id: format!("svc{}", rng.random_range(0..3)),
            shape_id: None,
            stop_times,
        });
    }
    let mut removed: HashMap<String, BTreeSet<NaiveDate>> = HashMap::new();
    if rng.random_bool(0.5) {
        removed.entry("svc1".into()).or_default().insert(base_date);
    }
    if rng.random_bool(0.5) {
        removed.entry("svc2".into()).or_default().insert(base_date - Duration::days(1));
    }
    let patterns_cal: HashMap<String, ServicePattern> = (0..3)
        .map(|i| {
            (
                format!("svc{i}"),
                ServicePattern {
                    weekdays: [true; 7],
                    start: base_date - Duration::days(10),
                    end: base_date + Duration::days(10),
                },
            )
        })
        .collect();
    let calendar = ServiceCalendar::from_parts(Some(patterns_cal), HashMap::new(), removed);
    let feed = GtfsFeed::new(stops.clone(), routes, trips, calendar, HashMap::new()).unwrap();
    RandomFeed { feed, stops }
}

/// A vehicle trace that rides `trip` from stop index `ia` to `ib`, with
/// timing jitter and positional noise.
pub fn ride_trace(
    rng: &mut ChaCha8Rng,
    feed: &GtfsFeed,
    trip: &TripSchedule,
    ia: usize,
    ib: usize,
    service_date: NaiveDate,
) -> Vec<TracePoint> {
    let st = &trip.stop_times;
    let jitter_start = rng.random_range(-200.0..200.0);
    let jitter_end = rng.random_range(-200.0..200.0);
    let t0 = st[ia].departure as f64 + jitter_start;
    let t1 = (st[ib].arrival as f64 + jitter_end).max(t0 + 60.0);
    let path: Vec<GeoPoint> = st[ia..=ib].iter().map(|s| feed.stop(&s.stop_id).unwrap().location).collect();
    let n = rng.random_range(3..30);
    let noise = rng.random_range(0.0..60.0);
    (0..n)
        .map(|k| {
            let f = k as f64 / (n - 1) as f64;
            let pos = f * (path.len() - 1) as f64;
            let i = (pos.floor() as usize).min(path.len() - 2);
            let g = pos - i as f64;
            let (a, b) = (path[i], path[i + 1]);
            let p = GeoPoint::new(a.lat() + g * (b.lat() - a.lat()), a.lon() + g * (b.lon() - a.lon())).unwrap();
            let p = p.offset_m(rng.random_range(-noise..=noise), rng.random_range(-noise..=noise));
            TracePoint::new(utc(service_date, t0 + f * (t1 - t0)), p, 10.0, ActivityKind::InVehicle)
        })
        .collect()
}

pub fn trip_id(s: &str) -> TripId {
    TripId(s.to_string())
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_envelopes(name: &str) -> Vec<mobility_core::ingest::TraceUploadEnvelope> {
    let text = std::fs::read_to_string(fixtures_dir().join("traces").join(name)).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

pub const FIXTURE_RIDER: &str = "fixture-rider@example.org";

pub fn test_key() -> mobility_core::privacy::PrivacyKey {
    mobility_core::privacy::PrivacyKey::from_bytes(b"integration-test-key-0123456789abcdef".to_vec()).unwrap()
}

pub fn fixed_clock() -> std::sync::Arc<mobility_core::ingest::FixedClock> {
    std::sync::Arc::new(mobility_core::ingest::FixedClock(Utc.with_ymd_and_hms(2018, 1, 1, 12, 0, 0).unwrap()))
}

/// Ingest service over `store` with the fixture GTFS feed loaded.
pub fn service_on(store: std::sync::Arc<mobility_core::store::Store>) -> mobility_core::ingest::IngestService {
    let feed = mobility_core::gtfs::load_gtfs(fixtures_dir().join("gtfs")).unwrap();
    mobility_core::ingest::IngestService::new(store, test_key(), Default::default())
        .with_clock(fixed_clock())
        .with_feed(feed)
}

pub fn service() -> mobility_core::ingest::IngestService {
    service_on(std::sync::Arc::new(mobility_core::store::Store::in_memory()))
}

/// Every persisted byte of a directory store, in file-name order.
pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Whether `needle` occurs anywhere in the persisted store or in `extra`.
pub fn contains_bytes(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

/// The fixture stadium, next to fixture stop S1.
pub fn stadium() -> GeoPoint {
    GeoPoint::new(52.3601, 9.7312).unwrap()
}

/// Event 2017-12-17 (a Sunday) at 15:30 UTC.
pub fn event_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2017, 12, 17, 15, 30, 0).unwrap()
}

fn query_at(stop: &str, t: DateTime<Utc>) -> mobility_core::sources::PtQuery {
    use mobility_core::sources::{Endpoint, PtQuery};
    PtQuery {
        origin: Endpoint::Stop("S4".into()),
        destination: Endpoint::Stop(stop.into()),
        departure: t,
        issued_at: t - Duration::minutes(20),
    }
}

/// Query log around stop S1: `weeks` prior Sundays with background traffic
/// of roughly `per_bucket` queries every 30 minutes from 06:00 to 22:00, and
/// an event day with the same background plus `extra` queries in
/// [14:30, 14:45) and a ramp in the buckets before it. Queries at other
/// stops are mixed in as distractors.
pub fn event_query_log(
    rng: &mut ChaCha8Rng,
    weeks: i64,
    per_bucket: u32,
    extra: u32,
) -> Vec<mobility_core::sources::PtQuery> {
    let event_day = event_time().date_naive();
    let mut out = Vec::new();
    for w in 0..=weeks {
        let day = event_day - Duration::weeks(w);
        for bucket in 12..44u32 {
            let n = per_bucket + rng.random_range(0..3) - 1;
            for _ in 0..n {
                let s = bucket as f64 * 1800.0 + rng.random_range(0.0..1800.0);
                out.push(query_at("S1", utc(day, s.floor())));
            }
            for _ in 0..rng.random_range(0..4) {
                let s = bucket as f64 * 1800.0 + rng.random_range(0.0..1800.0);
                out.push(query_at("S3", utc(day, s.floor())));
            }
        }
    }
    for (start, count) in [(13.0 * 3600.0, extra / 5), (13.5 * 3600.0, extra / 3), (14.0 * 3600.0, extra / 2), (14.5 * 3600.0, extra)] {
        let span = if start == 14.5 * 3600.0 { 900.0 } else { 1800.0 };
        for _ in 0..count {
            out.push(query_at("S1", utc(event_day, (start + rng.random_range::<f64, _>(0.0..span)).floor())));
        }
    }
    out
}

/// Structural check of a GeoJSON FeatureCollection of LineStrings, written
/// against the raw JSON rather than the crate's own types.
pub fn check_feature_collection(text: &str) -> Result<usize, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if v["type"] != "FeatureCollection" {
        return Err("top-level type is not FeatureCollection".into());
    }
    let features = v["features"].as_array().ok_or("features is not an array")?;
    for (i, f) in features.iter().enumerate() {
        if f["type"] != "Feature" || !f["properties"].is_object() {
            return Err(format!("feature {i} is malformed"));
        }
        let g = &f["geometry"];
        if g["type"] != "LineString" {
            return Err(format!("feature {i} geometry is not a LineString"));
        }
        let coords = g["coordinates"].as_array().ok_or("coordinates is not an array")?;
        if coords.len() < 2 {
            return Err(format!("feature {i} has fewer than 2 positions"));
        }
        for c in coords {
            let pos = c.as_array().ok_or("position is not an array")?;
            let (Some(lon), Some(lat)) = (pos.first().and_then(|x| x.as_f64()), pos.get(1).and_then(|x| x.as_f64())) else {
                return Err(format!("feature {i} has a non-numeric position"));
            };
            if pos.len() != 2 || !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                return Err(format!("feature {i} has an out-of-range position {lon},{lat}"));
            }
        }
    }
    Ok(features.len())
}

/// Random byte-level damage: flips, inserts, deletions, truncation,
/// duplicated chunks and stray delimiter bytes.
pub fn mutate(rng: &mut rand_chacha::ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    for _ in 0..rng.random_range(1..6) {
        if out.is_empty() {
            out.push(rng.random());
            continue;
        }
        let i = rng.random_range(0..out.len());
        match rng.random_range(0..6) {
            0 => out[i] = rng.random(),
            1 => out.insert(i, rng.random()),
            2 => {
                out.remove(i);
            }
            3 => out.truncate(i),
            4 => {
                let j = rng.random_range(i..out.len());
                let chunk = out[i..j].to_vec();
                out.splice(i..i, chunk);
            }
            _ => out.insert(i, b"\n,;<>\"&\xff"[rng.random_range(0..8)]),
        }
    }
    out
}
