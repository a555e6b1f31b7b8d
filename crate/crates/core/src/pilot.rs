//! Synthetic pilot: a small timetabled city, simulated trips with exact
//! ground truth, and an evaluation that pushes the trips through the real
//! ingest pipeline.
//!
//! Transit trips board a scheduled GTFS trip at its departure time and ride
//! it stop by stop, so entry stop, exit stop and line are known exactly.
//! Noise is isotropic Gaussian on positions plus uniform random replacement
//! of activity labels. It is not a model of any real device.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, TimeDelta, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::geo::GeoPoint;
use crate::gtfs::{
    load_gtfs, write_feed_dir, GtfsError, GtfsFeed, Route, RouteType, ServiceCalendar, ServiceSeconds, Stop,
    StopTime, TripSchedule,
};
use crate::inference::{
    evaluate_against_ground_truth, AccuracyReport, Classification, EvalError, GroundTruth, ModeLabel, TravelMode,
};
use crate::ingest::{FixedClock, IngestError, IngestService, RecordingAction, TraceUploadEnvelope};
use crate::privacy::PrivacyKey;
use crate::store::{Store, SubmitResponse};
use crate::trace::{ActivityKind, ActivityLabel, TracePoint};

pub const FEED_DIR: &str = "feed";
pub const ENVELOPES_FILE: &str = "envelopes.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const SPEC_FILE: &str = "pilot.toml";

const SAMPLE_INTERVAL_S: i64 = 2;
const STOPS_PER_LINE: usize = 12;
const STOP_SPACING_M: f64 = 500.0;
const HEADWAY_S: u32 = 600;
const FIRST_DEPARTURE_S: u32 = 6 * 3600;
const LAST_DEPARTURE_S: u32 = 21 * 3600;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("invalid pilot spec: {0}")]
    Spec(String),
    #[error("pilot io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{file} line {line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error(transparent)]
    Gtfs(#[from] GtfsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPilotSpec {
    pub bicycle: usize,
    pub car: usize,
    pub tram: usize,
    pub bus: usize,
    pub walk: usize,
    pub gps_noise_sigma_m: f64,
    pub label_corruption: f64,
    pub seed: u64,
    pub participants: usize,
}

impl Default for SyntheticPilotSpec {
    fn default() -> Self {
        Self {
            bicycle: 16,
            car: 14,
            tram: 13,
            bus: 15,
            walk: 0,
            gps_noise_sigma_m: 0.0,
            label_corruption: 0.0,
            seed: 7,
            participants: 8,
        }
    }
}

impl SyntheticPilotSpec {
    pub fn validate(&self) -> Result<(), PilotError> {
        if !(0.0..=1.0).contains(&self.label_corruption) {
            return Err(PilotError::Spec(format!(
                "label_corruption must be in [0, 1], got {}",
                self.label_corruption
            )));
        }
        if !self.gps_noise_sigma_m.is_finite() || self.gps_noise_sigma_m < 0.0 {
            return Err(PilotError::Spec(format!(
                "gps_noise_sigma_m must be finite and >= 0, got {}",
                self.gps_noise_sigma_m
            )));
        }
        if self.participants == 0 {
            return Err(PilotError::Spec("participants must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.bicycle + self.car + self.tram + self.bus + self.walk
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PilotError> {
        let spec: Self = toml::from_str(text).map_err(|e| PilotError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Ground truth for one simulated trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotTruth {
    pub trip_key: String,
    pub user_token: String,
    /// Message id of the trip's Stop envelope.
    pub stop_message_id: String,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct PilotBundle {
    pub spec: SyntheticPilotSpec,
    pub stops: Vec<Stop>,
    pub routes: Vec<Route>,
    pub schedules: Vec<TripSchedule>,
    pub service_range: (NaiveDate, NaiveDate),
    pub envelopes: Vec<TraceUploadEnvelope>,
    pub truth: Vec<PilotTruth>,
}

impl PilotBundle {
    pub fn feed(&self) -> Result<GtfsFeed, GtfsError> {
        GtfsFeed::new(
            self.stops.clone(),
            self.routes.clone(),
            self.schedules.clone(),
            ServiceCalendar::always(),
            HashMap::new(),
        )
    }

    /// Writes `feed/`, `envelopes.jsonl`, `truth.jsonl` and `pilot.toml`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), PilotError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| PilotError::Io {
                path: path.clone(),
                message: e.to_string(),
            }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let feed_dir = dir.join(FEED_DIR);
        write_feed_dir(&feed_dir, &self.stops, &self.routes, &self.schedules, self.service_range)
            .map_err(io(&feed_dir))?;
        write_jsonl(&dir.join(ENVELOPES_FILE), &self.envelopes)?;
        write_jsonl(&dir.join(TRUTH_FILE), &self.truth)?;
        let spec_path = dir.join(SPEC_FILE);
        fs::write(&spec_path, self.spec.to_toml()).map_err(io(&spec_path))?;
        Ok(())
    }
}

/// Inputs needed to evaluate a pilot, as read back from disk.
#[derive(Debug)]
pub struct PilotInputs {
    pub feed: GtfsFeed,
    pub envelopes: Vec<TraceUploadEnvelope>,
    pub truth: Vec<PilotTruth>,
}

pub fn read_pilot(dir: impl AsRef<Path>) -> Result<PilotInputs, PilotError> {
    let dir = dir.as_ref();
    Ok(PilotInputs {
        feed: load_gtfs(dir.join(FEED_DIR))?,
        envelopes: read_jsonl(&dir.join(ENVELOPES_FILE))?,
        truth: read_jsonl(&dir.join(TRUTH_FILE))?,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PilotError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("pilot records serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| PilotError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PilotError> {
    let text = fs::read_to_string(path).map_err(|e| PilotError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PilotError::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

struct Line {
    route_id: &'static str,
    route_type: RouteType,
    north_m: f64,
    run_s: u32,
    dwell_s: u32,
}

const LINES: [Line; 4] = [
    Line {
        route_id: "T1",
        route_type: RouteType::Tram,
        north_m: 0.0,
        run_s: 75,
        dwell_s: 20,
    },
    Line {
        route_id: "T2",
        route_type: RouteType::Tram,
        north_m: 1500.0,
        run_s: 75,
        dwell_s: 20,
    },
    Line {
        route_id: "B1",
        route_type: RouteType::Bus,
        north_m: 3000.0,
        run_s: 90,
        dwell_s: 30,
    },
    Line {
        route_id: "B2",
        route_type: RouteType::Bus,
        north_m: 4500.0,
        run_s: 90,
        dwell_s: 30,
    },
];

fn city_origin() -> GeoPoint {
    GeoPoint::new(52.3759, 9.7320).expect("valid origin")
}

fn stop_id(line: &Line, k: usize) -> String {
    format!("{}-S{:02}", line.route_id, k + 1)
}

fn build_network() -> (Vec<Stop>, Vec<Route>, Vec<TripSchedule>) {
    let origin = city_origin();
    let west_end = -STOP_SPACING_M * (STOPS_PER_LINE as f64 - 1.0) / 2.0;
    let mut stops = Vec::new();
    let mut routes = Vec::new();
    let mut trips = Vec::new();
    for line in &LINES {
        routes.push(Route {
            route_id: line.route_id.into(),
            short_name: line.route_id.into(),
            route_type: line.route_type,
        });
        for k in 0..STOPS_PER_LINE {
            stops.push(Stop {
                stop_id: stop_id(line, k),
                name: format!("{} Stop {}", line.route_id, k + 1),
                location: origin.offset_m(west_end + STOP_SPACING_M * k as f64, line.north_m),
            });
        }
        for (dir, order) in [
            ("E", (0..STOPS_PER_LINE).collect::<Vec<_>>()),
            ("W", (0..STOPS_PER_LINE).rev().collect()),
        ] {
            let mut dep0 = FIRST_DEPARTURE_S;
            while dep0 <= LAST_DEPARTURE_S {
                let stop_times = order
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let i32_ = i as u32;
                        let arrival = if i == 0 {
                            dep0
                        } else {
                            dep0 + i32_ * line.run_s + (i32_ - 1) * line.dwell_s
                        };
                        let departure = if i == 0 || i + 1 == order.len() {
                            arrival
                        } else {
                            arrival + line.dwell_s
                        };
                        StopTime {
                            stop_id: stop_id(line, k),
                            arrival,
                            departure,
                            stop_sequence: i32_ + 1,
                        }
                    })
                    .collect();
                trips.push(TripSchedule {
                    trip_id: format!("{}-{}-{:02}{:02}", line.route_id, dir, dep0 / 3600, dep0 % 3600 / 60),
                    route_id: line.route_id.into(),
                    service_id: "daily".into(),
                    shape_id: None,
                    stop_times,
                });
                dep0 += HEADWAY_S;
            }
        }
    }
    (stops, routes, trips)
}

fn pilot_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 6, 4).expect("valid date")
}

fn at(date: NaiveDate, seconds: i64) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight")) + TimeDelta::seconds(seconds)
}

/// Noise-free path: (seconds since service midnight, position).
struct CleanTrip {
    date: NaiveDate,
    samples: Vec<(i64, GeoPoint)>,
    activity: ActivityKind,
    truth: GroundTruth,
}

fn sample_times(start: i64, end: i64) -> Vec<i64> {
    let mut ts: Vec<i64> = (start..end).step_by(SAMPLE_INTERVAL_S as usize).collect();
    ts.push(end);
    ts
}

fn transit_trip(rng: &mut ChaCha8Rng, mode: TravelMode, schedules: &[TripSchedule], stops: &[Stop]) -> CleanTrip {
    let route_type = if mode == TravelMode::Tram {
        RouteType::Tram
    } else {
        RouteType::Bus
    };
    let lines: Vec<&Line> = LINES.iter().filter(|l| l.route_type == route_type).collect();
    let line = lines[rng.random_range(0..lines.len())];
    let candidates: Vec<&TripSchedule> = schedules
        .iter()
        .filter(|t| {
            let dep0 = t.stop_times[0].departure;
            t.route_id == line.route_id && (7 * 3600..=18 * 3600).contains(&dep0)
        })
        .collect();
    let trip = candidates[rng.random_range(0..candidates.len())];
    let n = trip.stop_times.len();
    let i = rng.random_range(0..=n - 4);
    let j = rng.random_range(i + 3..=(i + 8).min(n - 1));
    let location = |sid: &str| {
        stops
            .iter()
            .find(|s| s.stop_id == sid)
            .map(|s| s.location)
            .expect("stop exists")
    };
    let st = &trip.stop_times;
    let position = |t: ServiceSeconds| -> GeoPoint {
        for k in i..j {
            let (a, b) = (&st[k], &st[k + 1]);
            if t <= a.departure {
                return location(&a.stop_id);
            }
            if t < b.arrival {
                let f = (t - a.departure) as f64 / (b.arrival - a.departure) as f64;
                let (pa, pb) = (location(&a.stop_id), location(&b.stop_id));
                return GeoPoint::new(pa.lat() + f * (pb.lat() - pa.lat()), pa.lon() + f * (pb.lon() - pa.lon()))
                    .expect("interpolated point valid");
            }
        }
        location(&st[j].stop_id)
    };
    let start = st[i].departure as i64;
    let end = st[j].arrival as i64;
    let samples = sample_times(start, end)
        .into_iter()
        .map(|t| (t, position(t as ServiceSeconds)))
        .collect();
    CleanTrip {
        date: pilot_start_date(),
        samples,
        activity: ActivityKind::InVehicle,
        truth: GroundTruth {
            mode,
            duration_s: (end - start) as f64,
            entry_stop_id: Some(st[i].stop_id.clone()),
            exit_stop_id: Some(st[j].stop_id.clone()),
            route_id: Some(trip.route_id.clone()),
        },
    }
}

fn free_trip(rng: &mut ChaCha8Rng, mode: TravelMode) -> CleanTrip {
    // (band north offset, max heading deviation, speed range, duration range, activity)
    let (north, max_heading_deg, speed, duration, activity) = match mode {
        TravelMode::Car => (-4000.0, 10.0, (8.0, 14.0), (420, 900), ActivityKind::InVehicle),
        TravelMode::Bicycle => (-8000.0, 30.0, (4.0, 5.5), (480, 1200), ActivityKind::OnBicycle),
        _ => (-12000.0, 45.0, (1.2, 1.6), (300, 900), ActivityKind::OnFoot),
    };
    let origin = city_origin();
    let east0 = rng.random_range(-3000.0..0.0);
    let heading = rng.random_range::<f64, _>(-max_heading_deg..max_heading_deg).to_radians();
    let heading = if rng.random_bool(0.5) {
        heading
    } else {
        std::f64::consts::PI - heading
    };
    let v: f64 = rng.random_range(speed.0..speed.1);
    let dur: i64 = rng.random_range(duration.0..=duration.1);
    let start: i64 = rng.random_range(7 * 3600..19 * 3600);
    let samples = sample_times(start, start + dur)
        .into_iter()
        .map(|t| {
            let d = v * (t - start) as f64;
            (t, origin.offset_m(east0 + d * heading.cos(), north + d * heading.sin()))
        })
        .collect();
    CleanTrip {
        date: pilot_start_date(),
        samples,
        activity,
        truth: GroundTruth {
            mode,
            duration_s: dur as f64,
            entry_stop_id: None,
            exit_stop_id: None,
            route_id: None,
        },
    }
}

pub fn participant_token(k: usize) -> String {
    format!("pilot-participant-{k:02}@example.org")
}

/// Generates the pilot. Identical specs give identical bundles.
pub fn generate_pilot(spec: &SyntheticPilotSpec) -> Result<PilotBundle, PilotError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (stops, routes, schedules) = build_network();

    let mut modes = Vec::with_capacity(spec.total());
    for (mode, count) in [
        (TravelMode::Bicycle, spec.bicycle),
        (TravelMode::Car, spec.car),
        (TravelMode::Tram, spec.tram),
        (TravelMode::Bus, spec.bus),
        (TravelMode::Walk, spec.walk),
    ] {
        modes.extend(std::iter::repeat_n(mode, count));
    }
    modes.shuffle(&mut rng);

    let noise = (spec.gps_noise_sigma_m > 0.0)
        .then(|| Normal::new(0.0, spec.gps_noise_sigma_m).expect("sigma validated"));
    let accuracy_m = (5.0 + spec.gps_noise_sigma_m).min(100.0);

    let mut envelopes = Vec::new();
    let mut truth = Vec::new();
    for (k, mode) in modes.into_iter().enumerate() {
        let participant = rng.random_range(0..spec.participants);
        let day_offset = rng.random_range(0..7);
        let mut clean = if mode.is_transit() {
            transit_trip(&mut rng, mode, &schedules, &stops)
        } else {
            free_trip(&mut rng, mode)
        };
        clean.date += TimeDelta::days(day_offset);

        let points: Vec<TracePoint> = clean
            .samples
            .iter()
            .map(|&(t, p)| {
                let location = match &noise {
                    Some(n) => p.offset_m(n.sample(&mut rng), n.sample(&mut rng)),
                    None => p,
                };
                let kind = if spec.label_corruption > 0.0 && rng.random_bool(spec.label_corruption) {
                    ActivityKind::ALL[rng.random_range(0..ActivityKind::ALL.len())]
                } else {
                    clean.activity
                };
                TracePoint {
                    timestamp: at(clean.date, t),
                    location,
                    accuracy_m,
                    activity: ActivityLabel::certain(kind),
                    client_speed_mps: None,
                }
            })
            .collect();

        let key = format!("pilot-{k:03}");
        let token = participant_token(participant);
        let third = points.len() / 3;
        let chunks = [
            (RecordingAction::Start, "start", &points[..third]),
            (RecordingAction::Append, "append", &points[third..2 * third]),
            (RecordingAction::Stop, "stop", &points[2 * third..]),
        ];
        for (action, suffix, chunk) in chunks {
            envelopes.push(TraceUploadEnvelope {
                client_message_id: format!("{key}/{suffix}"),
                user_token: token.clone(),
                recording_action: action,
                points: chunk.to_vec(),
            });
        }
        truth.push(PilotTruth {
            trip_key: key.clone(),
            user_token: token,
            stop_message_id: format!("{key}/stop"),
            truth: clean.truth,
        });
    }

    Ok(PilotBundle {
        spec: spec.clone(),
        stops,
        routes,
        schedules,
        service_range: (
            NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            NaiveDate::from_ymd_opt(2018, 12, 31).expect("valid date"),
        ),
        envelopes,
        truth,
    })
}

/// Evaluation result: the accuracy table plus the per-trip verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotEvaluation {
    pub report: AccuracyReport,
    pub predictions: Vec<PilotPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotPrediction {
    pub trip_key: String,
    pub truth: GroundTruth,
    pub predicted: Classification,
}

const PILOT_KEY: &[u8; 32] = b"synthetic-pilot-evaluation-key!!";

fn pilot_clock() -> FixedClock {
    FixedClock(Utc.with_ymd_and_hms(2018, 7, 1, 0, 0, 0).single().expect("valid instant"))
}

/// Replays every envelope through an in-memory ingest service, runs the
/// processing jobs and scores each trip's longest segment against truth.
pub fn evaluate_pilot(
    feed: GtfsFeed,
    envelopes: &[TraceUploadEnvelope],
    truth: &[PilotTruth],
    config: &PipelineConfig,
) -> Result<PilotEvaluation, PilotError> {
    let key = PrivacyKey::from_bytes(PILOT_KEY.to_vec()).expect("pilot key is long enough");
    let service = IngestService::new(Arc::new(Store::in_memory()), key, config.clone())
        .with_clock(Arc::new(pilot_clock()))
        .with_feed(feed);

    let tokens: BTreeSet<&str> = envelopes.iter().map(|e| e.user_token.as_str()).collect();
    for token in tokens {
        service.grant_consent(token, "pilot")?;
    }
    let mut responses: BTreeMap<(String, String), SubmitResponse> = BTreeMap::new();
    for env in envelopes {
        match service.submit_trace_batch(env) {
            Ok(r) => {
                responses.insert((env.user_token.clone(), env.client_message_id.clone()), r);
            }
            Err(IngestError::TooFewPoints { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    service.run_pending_jobs();

    let snap = service.snapshot();
    let unknown = Classification {
        label: ModeLabel {
            mode: TravelMode::Unknown,
            confidence: 0.0,
        },
        enrichment: None,
    };
    let mut predictions = Vec::with_capacity(truth.len());
    for t in truth {
        let predicted = responses
            .get(&(t.user_token.clone(), t.stop_message_id.clone()))
            .and_then(|r| {
                snap.segments_of(&r.trip_id)
                    .iter()
                    .reduce(|best, s| if s.duration_s > best.duration_s { s } else { best })
                    .map(|s| s.classification())
            })
            .unwrap_or_else(|| unknown.clone());
        predictions.push(PilotPrediction {
            trip_key: t.trip_key.clone(),
            truth: t.truth.clone(),
            predicted,
        });
    }
    let classes: Vec<Classification> = predictions.iter().map(|p| p.predicted.clone()).collect();
    let truths: Vec<GroundTruth> = truth.iter().map(|t| t.truth.clone()).collect();
    Ok(PilotEvaluation {
        report: evaluate_against_ground_truth(&classes, &truths)?,
        predictions,
    })
}

pub fn evaluate_pilot_dir(dir: impl AsRef<Path>, config: &PipelineConfig) -> Result<PilotEvaluation, PilotError> {
    let inputs = read_pilot(dir)?;
    evaluate_pilot(inputs.feed, &inputs.envelopes, &inputs.truth, config)
}
