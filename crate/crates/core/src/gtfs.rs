//! GTFS static feed loading and the timetable queries used by transit matching.
//!
//! Only the core files are required (`stops.txt`, `routes.txt`, `trips.txt`,
//! `stop_times.txt`). `calendar.txt` and `calendar_dates.txt` are read when
//! present; without a calendar every service runs every day. `shapes.txt` is
//! used for route geometry when present, otherwise a trip's shape is the
//! polyline through its stops.
//!
//! Times are seconds since the start of the service day and may exceed 24 h.
//! Query windows are half-open `[start, end)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoPoint, Polyline, SpatialIndex};

#[derive(Debug, Error)]
pub enum GtfsError {
    #[error("missing required file {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("dangling {kind} reference {id:?}")]
    DanglingReference { kind: RefKind, id: String },
    #[error("duplicate {kind} id {id:?}")]
    Duplicate { kind: RefKind, id: String },
    #[error("unknown stop {0:?}")]
    UnknownStop(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    Stop,
    Route,
    Trip,
    Service,
    Shape,
}

impl std::fmt::Display for RefKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RefKind::Stop => "stop",
            RefKind::Route => "route",
            RefKind::Trip => "trip",
            RefKind::Service => "service",
            RefKind::Shape => "shape",
        })
    }
}

/// Seconds since service-day midnight.
pub type ServiceSeconds = u32;

/// Parses `H:MM:SS` / `HH:MM:SS`, allowing hours past 23.
pub fn parse_gtfs_time(s: &str) -> Option<ServiceSeconds> {
    let mut parts = s.trim().split(':');
    let h: u32 = parts.next()?.parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let sec: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || m > 59 || sec > 59 {
        return None;
    }
    h.checked_mul(3600)?.checked_add(m * 60 + sec)
}

pub fn format_gtfs_time(t: ServiceSeconds) -> String {
    format!("{:02}:{:02}:{:02}", t / 3600, (t / 60) % 60, t % 60)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub name: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouteType {
    Tram,
    Subway,
    Rail,
    Bus,
    Other(u16),
}

impl RouteType {
    pub fn from_code(code: u16) -> Self {
        match code {
            0 => RouteType::Tram,
            1 => RouteType::Subway,
            2 => RouteType::Rail,
            3 => RouteType::Bus,
            other => RouteType::Other(other),
        }
    }

    pub fn code(self) -> u16 {
        match self {
            RouteType::Tram => 0,
            RouteType::Subway => 1,
            RouteType::Rail => 2,
            RouteType::Bus => 3,
            RouteType::Other(code) => code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    pub short_name: String,
    pub route_type: RouteType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopTime {
    pub stop_id: String,
    pub arrival: ServiceSeconds,
    pub departure: ServiceSeconds,
    pub stop_sequence: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripSchedule {
    pub trip_id: String,
    pub route_id: String,
    pub service_id: String,
    pub shape_id: Option<String>,
    pub stop_times: Vec<StopTime>,
}

/// Weekly pattern plus date range from `calendar.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServicePattern {
    pub weekdays: [bool; 7],
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Active-date resolution per service id.
#[derive(Debug, Clone, Default)]
pub struct ServiceCalendar {
    /// `None` when the feed ships no calendar at all.
    patterns: Option<HashMap<String, ServicePattern>>,
    added: HashMap<String, BTreeSet<NaiveDate>>,
    removed: HashMap<String, BTreeSet<NaiveDate>>,
}

impl ServiceCalendar {
    /// A calendar where every service is active every day.
    pub fn always() -> Self {
        Self::default()
    }

    /// Builds a calendar from `calendar.txt` patterns (or `None` for no
    /// calendar file) and `calendar_dates.txt` additions and removals.
    pub fn from_parts(
        patterns: Option<HashMap<String, ServicePattern>>,
        added: HashMap<String, BTreeSet<NaiveDate>>,
        removed: HashMap<String, BTreeSet<NaiveDate>>,
    ) -> Self {
        Self {
            patterns,
            added,
            removed,
        }
    }

    pub fn is_active(&self, service_id: &str, date: NaiveDate) -> bool {
        if self.removed.get(service_id).is_some_and(|d| d.contains(&date)) {
            return false;
        }
        if self.added.get(service_id).is_some_and(|d| d.contains(&date)) {
            return true;
        }
        match &self.patterns {
            None => true,
            Some(patterns) => patterns.get(service_id).is_some_and(|p| {
                p.start <= date
                    && date <= p.end
                    && p.weekdays[date.weekday().num_days_from_monday() as usize]
            }),
        }
    }

    pub fn knows(&self, service_id: &str) -> bool {
        match &self.patterns {
            None => true,
            Some(p) => p.contains_key(service_id) || self.added.contains_key(service_id),
        }
    }
}

/// Entry, exit and timing of one trip serving an ordered stop pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairService {
    pub trip_id: String,
    pub route_id: String,
    pub dep_a: ServiceSeconds,
    pub arr_b: ServiceSeconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedCounts {
    pub stops: usize,
    pub routes: usize,
    pub trips: usize,
    pub stop_times: usize,
}

/// A validated, immutable GTFS feed with a stop spatial index.
#[derive(Debug, Clone)]
pub struct GtfsFeed {
    stops: BTreeMap<String, Stop>,
    routes: BTreeMap<String, Route>,
    trips: Vec<TripSchedule>,
    trip_index: HashMap<String, usize>,
    calendar: ServiceCalendar,
    shapes: HashMap<String, Polyline>,
    // stop_id -> (trip index, position in stop_times), sorted by departure
    stop_visits: HashMap<String, Vec<(usize, usize)>>,
    stop_index: SpatialIndex<String>,
}

impl GtfsFeed {
    /// Validates and indexes in-memory feed parts.
    pub fn new(
        stops: Vec<Stop>,
        routes: Vec<Route>,
        mut trips: Vec<TripSchedule>,
        calendar: ServiceCalendar,
        shapes: HashMap<String, Polyline>,
    ) -> Result<Self, GtfsError> {
        let mut stop_map = BTreeMap::new();
        for stop in stops {
            if stop_map.contains_key(&stop.stop_id) {
                return Err(GtfsError::Duplicate {
                    kind: RefKind::Stop,
                    id: stop.stop_id,
                });
            }
            stop_map.insert(stop.stop_id.clone(), stop);
        }
        let mut route_map = BTreeMap::new();
        for route in routes {
            if route_map.contains_key(&route.route_id) {
                return Err(GtfsError::Duplicate {
                    kind: RefKind::Route,
                    id: route.route_id,
                });
            }
            route_map.insert(route.route_id.clone(), route);
        }

        trips.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        let mut trip_index = HashMap::with_capacity(trips.len());
        for (i, trip) in trips.iter_mut().enumerate() {
            if trip_index.insert(trip.trip_id.clone(), i).is_some() {
                return Err(GtfsError::Duplicate {
                    kind: RefKind::Trip,
                    id: trip.trip_id.clone(),
                });
            }
            if !route_map.contains_key(&trip.route_id) {
                return Err(GtfsError::DanglingReference {
                    kind: RefKind::Route,
                    id: trip.route_id.clone(),
                });
            }
            if let Some(shape_id) = &trip.shape_id {
                if !shapes.is_empty() && !shapes.contains_key(shape_id) {
                    return Err(GtfsError::DanglingReference {
                        kind: RefKind::Shape,
                        id: shape_id.clone(),
                    });
                }
            }
            trip.stop_times.sort_by_key(|st| st.stop_sequence);
            validate_stop_times(trip, &stop_map)?;
        }

        let mut stop_visits: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (ti, trip) in trips.iter().enumerate() {
            for (pos, st) in trip.stop_times.iter().enumerate() {
                stop_visits.entry(st.stop_id.clone()).or_default().push((ti, pos));
            }
        }
        for visits in stop_visits.values_mut() {
            visits.sort_by(|&(ta, pa), &(tb, pb)| {
                trips[ta].stop_times[pa]
                    .departure
                    .cmp(&trips[tb].stop_times[pb].departure)
                    .then(ta.cmp(&tb))
                    .then(pa.cmp(&pb))
            });
        }

        let stop_index = SpatialIndex::build(
            stop_map.values().map(|s| (s.stop_id.clone(), s.location)),
        );

        Ok(Self {
            stops: stop_map,
            routes: route_map,
            trips,
            trip_index,
            calendar,
            shapes,
            stop_visits,
            stop_index,
        })
    }

    pub fn counts(&self) -> FeedCounts {
        FeedCounts {
            stops: self.stops.len(),
            routes: self.routes.len(),
            trips: self.trips.len(),
            stop_times: self.trips.iter().map(|t| t.stop_times.len()).sum(),
        }
    }

    pub fn stops(&self) -> impl Iterator<Item = &Stop> {
        self.stops.values()
    }

    pub fn stop(&self, stop_id: &str) -> Option<&Stop> {
        self.stops.get(stop_id)
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.routes.values()
    }

    pub fn route(&self, route_id: &str) -> Option<&Route> {
        self.routes.get(route_id)
    }

    pub fn trips(&self) -> &[TripSchedule] {
        &self.trips
    }

    pub fn trip(&self, trip_id: &str) -> Option<&TripSchedule> {
        self.trip_index.get(trip_id).map(|&i| &self.trips[i])
    }

    pub fn calendar(&self) -> &ServiceCalendar {
        &self.calendar
    }

    pub fn stop_index(&self) -> &SpatialIndex<String> {
        &self.stop_index
    }

    pub fn stops_within(&self, p: GeoPoint, radius_m: f64) -> Vec<(String, f64)> {
        self.stop_index.nearest_within(p, radius_m)
    }

    pub fn nearest_stop(&self, p: GeoPoint) -> Option<(&Stop, f64)> {
        self.stop_index
            .nearest(p)
            .and_then(|(id, d)| self.stops.get(&id).map(|s| (s, d)))
    }

    pub fn is_trip_active(&self, trip: &TripSchedule, date: NaiveDate) -> bool {
        self.calendar.is_active(&trip.service_id, date)
    }

    /// Route geometry for a trip: its `shapes.txt` polyline if any, else the
    /// line through its stops in sequence.
    pub fn trip_shape(&self, trip: &TripSchedule) -> Option<Polyline> {
        if let Some(line) = trip.shape_id.as_ref().and_then(|id| self.shapes.get(id)) {
            return Some(line.clone());
        }
        Polyline::from_points_dedup(
            trip.stop_times
                .iter()
                .filter_map(|st| self.stops.get(&st.stop_id).map(|s| s.location)),
        )
    }

    /// Key identifying geometry shared by trips; equal keys mean equal shapes.
    pub fn shape_key(&self, trip: &TripSchedule) -> String {
        match &trip.shape_id {
            Some(id) if self.shapes.contains_key(id) => format!("shape:{id}"),
            _ => {
                let mut key = String::from("stops:");
                for st in &trip.stop_times {
                    key.push_str(&st.stop_id);
                    key.push('\u{1f}');
                }
                key
            }
        }
    }

    /// Trips active on `date` departing `stop_id` within `[window.0, window.1)`,
    /// sorted by departure then trip id.
    pub fn departures_at_stop(
        &self,
        stop_id: &str,
        date: NaiveDate,
        window: (ServiceSeconds, ServiceSeconds),
    ) -> Result<Vec<(String, ServiceSeconds)>, GtfsError> {
        if !self.stops.contains_key(stop_id) {
            return Err(GtfsError::UnknownStop(stop_id.to_string()));
        }
        let mut out: Vec<(String, ServiceSeconds)> = self
            .visits_in_window(stop_id, window)
            .filter(|&(ti, _)| self.is_trip_active(&self.trips[ti], date))
            .map(|(ti, pos)| {
                let trip = &self.trips[ti];
                (trip.trip_id.clone(), trip.stop_times[pos].departure)
            })
            .collect();
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Trips active on `date` that depart `stop_a` within the window and later
    /// reach `stop_b`. One entry per boarding visit, alighting at the first
    /// subsequent visit of `stop_b`. Sorted by `dep_a`, then trip id, then `arr_b`.
    pub fn trips_serving_pair(
        &self,
        stop_a: &str,
        stop_b: &str,
        date: NaiveDate,
        window: (ServiceSeconds, ServiceSeconds),
    ) -> Result<Vec<PairService>, GtfsError> {
        for id in [stop_a, stop_b] {
            if !self.stops.contains_key(id) {
                return Err(GtfsError::UnknownStop(id.to_string()));
            }
        }
        let mut out = Vec::new();
        for (ti, pos) in self.visits_in_window(stop_a, window) {
            let trip = &self.trips[ti];
            if !self.is_trip_active(trip, date) {
                continue;
            }
            if let Some(exit) = trip.stop_times[pos + 1..].iter().find(|st| st.stop_id == stop_b) {
                out.push(PairService {
                    trip_id: trip.trip_id.clone(),
                    route_id: trip.route_id.clone(),
                    dep_a: trip.stop_times[pos].departure,
                    arr_b: exit.arrival,
                });
            }
        }
        out.sort_by(|a, b| {
            a.dep_a
                .cmp(&b.dep_a)
                .then_with(|| a.trip_id.cmp(&b.trip_id))
                .then(a.arr_b.cmp(&b.arr_b))
        });
        Ok(out)
    }

    fn visits_in_window(
        &self,
        stop_id: &str,
        (t0, t1): (ServiceSeconds, ServiceSeconds),
    ) -> impl Iterator<Item = (usize, usize)> + '_ {
        let visits = self.stop_visits.get(stop_id).map(Vec::as_slice).unwrap_or(&[]);
        let dep = |&(ti, pos): &(usize, usize)| self.trips[ti].stop_times[pos].departure;
        let lo = visits.partition_point(|v| dep(v) < t0);
        let hi = visits.partition_point(|v| dep(v) < t1).max(lo);
        visits[lo..hi].iter().copied()
    }
}

fn validate_stop_times(trip: &TripSchedule, stops: &BTreeMap<String, Stop>) -> Result<(), GtfsError> {
    let parse_err = |message: String| GtfsError::Parse {
        file: "stop_times.txt".into(),
        line: 0,
        message,
    };
    let mut prev: Option<&StopTime> = None;
    for st in &trip.stop_times {
        if !stops.contains_key(&st.stop_id) {
            return Err(GtfsError::DanglingReference {
                kind: RefKind::Stop,
                id: st.stop_id.clone(),
            });
        }
        if st.departure < st.arrival {
            return Err(parse_err(format!(
                "trip {} departs {} before arriving",
                trip.trip_id, st.stop_id
            )));
        }
        if let Some(p) = prev {
            if p.stop_sequence == st.stop_sequence {
                return Err(parse_err(format!(
                    "trip {} repeats stop_sequence {}",
                    trip.trip_id, st.stop_sequence
                )));
            }
            if st.arrival < p.departure {
                return Err(parse_err(format!(
                    "trip {} goes back in time at stop_sequence {}",
                    trip.trip_id, st.stop_sequence
                )));
            }
        }
        prev = Some(st);
    }
    Ok(())
}

#[derive(Deserialize)]
struct StopRow {
    stop_id: String,
    #[serde(default)]
    stop_name: String,
    stop_lat: f64,
    stop_lon: f64,
}

#[derive(Deserialize)]
struct RouteRow {
    route_id: String,
    #[serde(default)]
    route_short_name: String,
    route_type: u16,
}

#[derive(Deserialize)]
struct TripRow {
    route_id: String,
    service_id: String,
    trip_id: String,
    #[serde(default)]
    shape_id: Option<String>,
}

#[derive(Deserialize)]
struct StopTimeRow {
    trip_id: String,
    arrival_time: String,
    departure_time: String,
    stop_id: String,
    stop_sequence: u32,
}

#[derive(Deserialize)]
struct CalendarRow {
    service_id: String,
    monday: u8,
    tuesday: u8,
    wednesday: u8,
    thursday: u8,
    friday: u8,
    saturday: u8,
    sunday: u8,
    start_date: String,
    end_date: String,
}

#[derive(Deserialize)]
struct CalendarDateRow {
    service_id: String,
    date: String,
    exception_type: u8,
}

#[derive(Deserialize)]
struct ShapeRow {
    shape_id: String,
    shape_pt_lat: f64,
    shape_pt_lon: f64,
    shape_pt_sequence: u32,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y%m%d").ok()
}

/// Reads every row of a header-driven CSV file into `T`, reporting the file
/// name and line number of the first bad row.
fn read_rows<T: serde::de::DeserializeOwned, R: Read>(file: &str, reader: R) -> Result<Vec<(u64, T)>, GtfsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(strip_bom(reader)?);
    let headers = rdr.headers().map_err(|e| csv_error(file, e))?.clone();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                let row = record.deserialize(Some(&headers)).map_err(|e| GtfsError::Parse {
                    file: file.into(),
                    line,
                    message: e.to_string(),
                })?;
                out.push((line, row));
            }
            Err(e) => return Err(csv_error(file, e)),
        }
    }
    Ok(out)
}

fn strip_bom<R: Read>(mut reader: R) -> Result<std::io::Cursor<Vec<u8>>, GtfsError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|source| GtfsError::Io {
        path: PathBuf::new(),
        source,
    })?;
    if buf.starts_with(&[0xEF, 0xBB, 0xBF]) {
        buf.drain(..3);
    }
    Ok(std::io::Cursor::new(buf))
}

fn csv_error(file: &str, e: csv::Error) -> GtfsError {
    GtfsError::Parse {
        file: file.into(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

fn open(dir: &Path, name: &str, required: bool) -> Result<Option<File>, GtfsError> {
    let path = dir.join(name);
    match File::open(&path) {
        Ok(f) => Ok(Some(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if required {
                Err(GtfsError::MissingFile(name.into()))
            } else {
                Ok(None)
            }
        }
        Err(source) => Err(GtfsError::Io { path, source }),
    }
}

/// Loads and validates a GTFS feed from a directory of CSV files.
pub fn load_gtfs(dir: impl AsRef<Path>) -> Result<GtfsFeed, GtfsError> {
    let dir = dir.as_ref();
    let stops_f = open(dir, "stops.txt", true)?.unwrap();
    let routes_f = open(dir, "routes.txt", true)?.unwrap();
    let trips_f = open(dir, "trips.txt", true)?.unwrap();
    let stop_times_f = open(dir, "stop_times.txt", true)?.unwrap();

    let mut stops = Vec::new();
    for (line, row) in read_rows::<StopRow, _>("stops.txt", stops_f)? {
        let location = GeoPoint::new(row.stop_lat, row.stop_lon).map_err(|e| GtfsError::Parse {
            file: "stops.txt".into(),
            line,
            message: e.to_string(),
        })?;
        stops.push(Stop {
            stop_id: row.stop_id,
            name: row.stop_name,
            location,
        });
    }

    let routes = read_rows::<RouteRow, _>("routes.txt", routes_f)?
        .into_iter()
        .map(|(_, r)| Route {
            route_id: r.route_id,
            short_name: r.route_short_name,
            route_type: RouteType::from_code(r.route_type),
        })
        .collect();

    let mut trips: Vec<TripSchedule> = Vec::new();
    let mut trip_pos: HashMap<String, usize> = HashMap::new();
    for (_, r) in read_rows::<TripRow, _>("trips.txt", trips_f)? {
        if trip_pos.insert(r.trip_id.clone(), trips.len()).is_some() {
            return Err(GtfsError::Duplicate {
                kind: RefKind::Trip,
                id: r.trip_id,
            });
        }
        trips.push(TripSchedule {
            trip_id: r.trip_id,
            route_id: r.route_id,
            service_id: r.service_id,
            shape_id: r.shape_id.filter(|s| !s.is_empty()),
            stop_times: Vec::new(),
        });
    }

    for (line, r) in read_rows::<StopTimeRow, _>("stop_times.txt", stop_times_f)? {
        let bad_time = |field: &str, v: &str| GtfsError::Parse {
            file: "stop_times.txt".into(),
            line,
            message: format!("invalid {field} {v:?}"),
        };
        let arrival = parse_gtfs_time(&r.arrival_time).ok_or_else(|| bad_time("arrival_time", &r.arrival_time))?;
        let departure =
            parse_gtfs_time(&r.departure_time).ok_or_else(|| bad_time("departure_time", &r.departure_time))?;
        let &ti = trip_pos.get(&r.trip_id).ok_or_else(|| GtfsError::DanglingReference {
            kind: RefKind::Trip,
            id: r.trip_id.clone(),
        })?;
        trips[ti].stop_times.push(StopTime {
            stop_id: r.stop_id,
            arrival,
            departure,
            stop_sequence: r.stop_sequence,
        });
    }

    let mut calendar = ServiceCalendar::always();
    if let Some(f) = open(dir, "calendar.txt", false)? {
        let mut patterns = HashMap::new();
        for (line, r) in read_rows::<CalendarRow, _>("calendar.txt", f)? {
            let bad = || GtfsError::Parse {
                file: "calendar.txt".into(),
                line,
                message: "invalid start_date/end_date".into(),
            };
            patterns.insert(
                r.service_id,
                ServicePattern {
                    weekdays: [r.monday, r.tuesday, r.wednesday, r.thursday, r.friday, r.saturday, r.sunday]
                        .map(|d| d == 1),
                    start: parse_date(&r.start_date).ok_or_else(bad)?,
                    end: parse_date(&r.end_date).ok_or_else(bad)?,
                },
            );
        }
        calendar.patterns = Some(patterns);
    }
    if let Some(f) = open(dir, "calendar_dates.txt", false)? {
        for (line, r) in read_rows::<CalendarDateRow, _>("calendar_dates.txt", f)? {
            let date = parse_date(&r.date).ok_or_else(|| GtfsError::Parse {
                file: "calendar_dates.txt".into(),
                line,
                message: format!("invalid date {:?}", r.date),
            })?;
            let target = match r.exception_type {
                1 => &mut calendar.added,
                2 => &mut calendar.removed,
                other => {
                    return Err(GtfsError::Parse {
                        file: "calendar_dates.txt".into(),
                        line,
                        message: format!("invalid exception_type {other}"),
                    })
                }
            };
            target.entry(r.service_id).or_default().insert(date);
        }
    }
    if calendar.patterns.is_some() {
        if let Some(t) = trips.iter().find(|t| !calendar.knows(&t.service_id)) {
            return Err(GtfsError::DanglingReference {
                kind: RefKind::Service,
                id: t.service_id.clone(),
            });
        }
    }

    let mut shapes = HashMap::new();
    if let Some(f) = open(dir, "shapes.txt", false)? {
        let mut raw: BTreeMap<String, Vec<(u32, GeoPoint)>> = BTreeMap::new();
        for (line, r) in read_rows::<ShapeRow, _>("shapes.txt", f)? {
            let p = GeoPoint::new(r.shape_pt_lat, r.shape_pt_lon).map_err(|e| GtfsError::Parse {
                file: "shapes.txt".into(),
                line,
                message: e.to_string(),
            })?;
            raw.entry(r.shape_id).or_default().push((r.shape_pt_sequence, p));
        }
        for (id, mut pts) in raw {
            pts.sort_by_key(|&(seq, _)| seq);
            if let Some(line) = Polyline::from_points_dedup(pts.into_iter().map(|(_, p)| p)) {
                shapes.insert(id, line);
            }
        }
    }

    GtfsFeed::new(stops, routes, trips, calendar, shapes)
}

/// Writes the stop universe as a `stops.txt` file body.
pub fn write_stops_csv<W: Write>(feed: &GtfsFeed, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stop_id", "stop_name", "stop_lat", "stop_lon"])?;
    for s in feed.stops() {
        w.write_record([
            s.stop_id.as_str(),
            s.name.as_str(),
            &s.location.lat().to_string(),
            &s.location.lon().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a complete feed directory (core files plus `calendar.txt` covering
/// every service on every day of `service_range`).
pub fn write_feed_dir(
    dir: impl AsRef<Path>,
    stops: &[Stop],
    routes: &[Route],
    trips: &[TripSchedule],
    service_range: (NaiveDate, NaiveDate),
) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let to_io = |e: csv::Error| std::io::Error::other(e.to_string());

    let mut w = csv::Writer::from_path(dir.join("stops.txt")).map_err(to_io)?;
    w.write_record(["stop_id", "stop_name", "stop_lat", "stop_lon"]).map_err(to_io)?;
    for s in stops {
        w.write_record([
            s.stop_id.as_str(),
            s.name.as_str(),
            &s.location.lat().to_string(),
            &s.location.lon().to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("routes.txt")).map_err(to_io)?;
    w.write_record(["route_id", "route_short_name", "route_type"]).map_err(to_io)?;
    for r in routes {
        w.write_record([r.route_id.as_str(), r.short_name.as_str(), &r.route_type.code().to_string()])
            .map_err(to_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("trips.txt")).map_err(to_io)?;
    w.write_record(["route_id", "service_id", "trip_id"]).map_err(to_io)?;
    for t in trips {
        w.write_record([t.route_id.as_str(), t.service_id.as_str(), t.trip_id.as_str()])
            .map_err(to_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("stop_times.txt")).map_err(to_io)?;
    w.write_record(["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"])
        .map_err(to_io)?;
    for t in trips {
        for st in &t.stop_times {
            w.write_record([
                t.trip_id.as_str(),
                &format_gtfs_time(st.arrival),
                &format_gtfs_time(st.departure),
                st.stop_id.as_str(),
                &st.stop_sequence.to_string(),
            ])
            .map_err(to_io)?;
        }
    }
    w.flush()?;

    let services: BTreeSet<&str> = trips.iter().map(|t| t.service_id.as_str()).collect();
    let mut w = csv::Writer::from_path(dir.join("calendar.txt")).map_err(to_io)?;
    w.write_record([
        "service_id", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "start_date",
        "end_date",
    ])
    .map_err(to_io)?;
    let (start, end) = service_range;
    for s in services {
        let mut row = vec![s.to_string()];
        row.extend(std::iter::repeat_n("1".to_string(), 7));
        row.push(start.format("%Y%m%d").to_string());
        row.push(end.format("%Y%m%d").to_string());
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
