//! Snapshot-isolated store for trips, processing artifacts, privacy records
//! and contextual sources.
//!
//! Readers take an immutable [`Snapshot`]; writers run a closure against a
//! private copy and either commit all of it or nothing. Collections sit
//! behind `Arc`s so a transaction only copies what it touches.
//!
//! A directory-backed store keeps one JSON-lines file per collection and
//! rewrites the changed ones on every commit (write to a temp file, then
//! rename). Layout:
//!
//! | file                 | one line per                                  |
//! |----------------------|-----------------------------------------------|
//! | `trips.jsonl`        | assembled trip (owner is a pseudonym)         |
//! | `segments.jsonl`     | classified segment of a trip                  |
//! | `jobs.jsonl`         | processing job record                         |
//! | `recordings.jsonl`   | recording in progress (buffered raw points)   |
//! | `envelopes.jsonl`    | idempotency receipt of an accepted upload     |
//! | `vault.jsonl`        | identity vault entry (sealed identifier)      |
//! | `consent.jsonl`      | consent record                                |
//! | `fcd.jsonl`          | floating-car speed record                     |
//! | `queries.jsonl`      | transit query log entry                       |
//! | `notifications.jsonl`| traffic notification                          |
//! | `streets.jsonl`      | street segment                                |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::ModeSample;
use crate::inference::{Classification, ModeLabel, PtEnrichment};
use crate::privacy::{ConsentRecord, IdentityVaultEntry, Pseudonym};
use crate::sources::{FcdRecord, PtQuery, StreetSegment, TrafficNotification};
use crate::trace::{ActivityKind, Segment, TracePoint, Trip, TripId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt store file {file} line {line}: {message}")]
    Corrupt { file: String, line: usize, message: String },
    #[error("invalid job transition {from:?} -> {to:?}")]
    InvalidTransition { from: JobStage, to: JobStage },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobStage {
    Received,
    Segmented,
    Classified,
    Enriched,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: JobStage,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub trip_id: TripId,
    pub stage: JobStage,
    pub history: Vec<StageStamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobRecord {
    pub fn new(trip_id: TripId, at: DateTime<Utc>) -> Self {
        Self {
            job_id: format!("job-{}", trip_id.0),
            trip_id,
            stage: JobStage::Received,
            history: vec![StageStamp {
                stage: JobStage::Received,
                at,
            }],
            error: None,
        }
    }

    /// Moves forward to `to`; stages only advance and `Failed` is terminal.
    pub fn advance(&mut self, to: JobStage, at: DateTime<Utc>) -> Result<(), StoreError> {
        let ok = match (self.stage, to) {
            (JobStage::Failed, _) | (JobStage::Enriched, _) => false,
            (_, JobStage::Failed) => true,
            (from, to) => to > from,
        };
        if !ok {
            return Err(StoreError::InvalidTransition { from: self.stage, to });
        }
        self.stage = to;
        self.history.push(StageStamp { stage: to, at });
        Ok(())
    }

    pub fn is_pending(&self) -> bool {
        matches!(self.stage, JobStage::Received | JobStage::Segmented)
    }

    pub fn stamp(&self, stage: JobStage) -> Option<DateTime<Utc>> {
        self.history.iter().find(|s| s.stage == stage).map(|s| s.at)
    }
}

/// A persisted, classified segment. Points are referenced by range into the
/// parent trip rather than copied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub trip_id: TripId,
    pub index: usize,
    pub offset: usize,
    pub len: usize,
    pub dominant_activity: ActivityKind,
    pub duration_s: f64,
    pub length_m: f64,
    pub label: ModeLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrichment: Option<PtEnrichment>,
}

impl SegmentRecord {
    pub fn from_segment(index: usize, segment: &Segment<'_>, classification: Classification) -> Self {
        Self {
            trip_id: segment.trip_id.clone(),
            index,
            offset: segment.offset,
            len: segment.points.len(),
            dominant_activity: segment.dominant_activity,
            duration_s: segment.duration_s,
            length_m: segment.length_m,
            label: classification.label,
            enrichment: classification.enrichment,
        }
    }

    pub fn points<'t>(&self, trip: &'t Trip) -> &'t [TracePoint] {
        let end = (self.offset + self.len).min(trip.points.len());
        &trip.points[self.offset.min(end)..end]
    }

    pub fn classification(&self) -> Classification {
        Classification {
            label: self.label,
            enrichment: self.enrichment.clone(),
        }
    }
}

/// Raw points buffered between Start and Stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenRecording {
    pub owner: Pseudonym,
    pub trip_id: TripId,
    pub started_at: DateTime<Utc>,
    pub points: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub trip_id: TripId,
    pub points_accepted: usize,
    pub points_dropped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeReceipt {
    pub owner: Pseudonym,
    pub client_message_id: String,
    pub response: SubmitResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Collection {
    Trips,
    Segments,
    Jobs,
    Recordings,
    Envelopes,
    Vault,
    Consent,
    Fcd,
    Queries,
    Notifications,
    Streets,
}

impl Collection {
    pub const ALL: [Collection; 11] = [
        Collection::Trips,
        Collection::Segments,
        Collection::Jobs,
        Collection::Recordings,
        Collection::Envelopes,
        Collection::Vault,
        Collection::Consent,
        Collection::Fcd,
        Collection::Queries,
        Collection::Notifications,
        Collection::Streets,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Collection::Trips => "trips.jsonl",
            Collection::Segments => "segments.jsonl",
            Collection::Jobs => "jobs.jsonl",
            Collection::Recordings => "recordings.jsonl",
            Collection::Envelopes => "envelopes.jsonl",
            Collection::Vault => "vault.jsonl",
            Collection::Consent => "consent.jsonl",
            Collection::Fcd => "fcd.jsonl",
            Collection::Queries => "queries.jsonl",
            Collection::Notifications => "notifications.jsonl",
            Collection::Streets => "streets.jsonl",
        }
    }
}

pub type EnvelopeKey = (Pseudonym, String);

#[derive(Debug, Clone, Default)]
pub struct StoreData {
    trips: Arc<BTreeMap<TripId, Trip>>,
    segments: Arc<BTreeMap<TripId, Vec<SegmentRecord>>>,
    jobs: Arc<BTreeMap<String, JobRecord>>,
    recordings: Arc<BTreeMap<Pseudonym, OpenRecording>>,
    envelopes: Arc<BTreeMap<EnvelopeKey, EnvelopeReceipt>>,
    vault: Arc<BTreeMap<Pseudonym, IdentityVaultEntry>>,
    consents: Arc<BTreeMap<Pseudonym, Vec<ConsentRecord>>>,
    fcd: Arc<Vec<FcdRecord>>,
    queries: Arc<Vec<PtQuery>>,
    notifications: Arc<Vec<TrafficNotification>>,
    streets: Arc<BTreeMap<String, StreetSegment>>,
}

impl StoreData {
    pub fn trips(&self) -> &BTreeMap<TripId, Trip> {
        &self.trips
    }

    pub fn trip(&self, id: &TripId) -> Option<&Trip> {
        self.trips.get(id)
    }

    pub fn trips_of<'a>(&'a self, owner: &'a Pseudonym) -> impl Iterator<Item = &'a Trip> + 'a {
        self.trips.values().filter(move |t| &t.owner == owner)
    }

    pub fn segments(&self) -> &BTreeMap<TripId, Vec<SegmentRecord>> {
        &self.segments
    }

    pub fn segments_of(&self, id: &TripId) -> &[SegmentRecord] {
        self.segments.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// One sample per classified segment of the user's trips.
    pub fn mode_samples_of(&self, owner: &Pseudonym) -> Vec<ModeSample> {
        self.trips_of(owner)
            .flat_map(|t| self.segments_of(&t.trip_id))
            .map(|s| ModeSample {
                mode: s.label.mode,
                duration_s: s.duration_s,
            })
            .collect()
    }

    pub fn jobs(&self) -> &BTreeMap<String, JobRecord> {
        &self.jobs
    }

    pub fn recordings(&self) -> &BTreeMap<Pseudonym, OpenRecording> {
        &self.recordings
    }

    pub fn envelope(&self, owner: &Pseudonym, client_message_id: &str) -> Option<&EnvelopeReceipt> {
        self.envelopes.get(&(owner.clone(), client_message_id.to_string()))
    }

    pub fn envelopes(&self) -> &BTreeMap<EnvelopeKey, EnvelopeReceipt> {
        &self.envelopes
    }

    pub fn vault(&self) -> &BTreeMap<Pseudonym, IdentityVaultEntry> {
        &self.vault
    }

    pub fn consents(&self) -> &BTreeMap<Pseudonym, Vec<ConsentRecord>> {
        &self.consents
    }

    pub fn has_active_consent(&self, p: &Pseudonym) -> bool {
        self.consents.get(p).is_some_and(|cs| cs.iter().any(ConsentRecord::is_active))
    }

    pub fn fcd(&self) -> &[FcdRecord] {
        &self.fcd
    }

    pub fn queries(&self) -> &[PtQuery] {
        &self.queries
    }

    pub fn notifications(&self) -> &[TrafficNotification] {
        &self.notifications
    }

    pub fn streets(&self) -> &BTreeMap<String, StreetSegment> {
        &self.streets
    }

    /// JSON-lines encoding of one collection, in key order.
    pub fn encode(&self, c: Collection) -> Vec<u8> {
        fn lines<'a, T: Serialize + 'a>(items: impl Iterator<Item = &'a T>) -> Vec<u8> {
            let mut out = Vec::new();
            for item in items {
                serde_json::to_writer(&mut out, item).expect("store records serialize");
                out.push(b'\n');
            }
            out
        }
        match c {
            Collection::Trips => lines(self.trips.values()),
            Collection::Segments => lines(self.segments.values().flatten()),
            Collection::Jobs => lines(self.jobs.values()),
            Collection::Recordings => lines(self.recordings.values()),
            Collection::Envelopes => lines(self.envelopes.values()),
            Collection::Vault => lines(self.vault.values()),
            Collection::Consent => lines(self.consents.values().flatten()),
            Collection::Fcd => lines(self.fcd.iter()),
            Collection::Queries => lines(self.queries.iter()),
            Collection::Notifications => lines(self.notifications.iter()),
            Collection::Streets => lines(self.streets.values()),
        }
    }

    /// Every collection's encoding, each preceded by its file name.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in Collection::ALL {
            out.extend_from_slice(format!("# {}\n", c.file_name()).as_bytes());
            out.extend(self.encode(c));
        }
        out
    }

    fn decode(&mut self, c: Collection, bytes: &[u8]) -> Result<(), StoreError> {
        fn parse<T: DeserializeOwned>(c: Collection, bytes: &[u8]) -> Result<Vec<T>, StoreError> {
            let text = std::str::from_utf8(bytes).map_err(|e| StoreError::Corrupt {
                file: c.file_name().into(),
                line: 0,
                message: e.to_string(),
            })?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                        file: c.file_name().into(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect()
        }
        match c {
            Collection::Trips => {
                self.trips = Arc::new(parse::<Trip>(c, bytes)?.into_iter().map(|t| (t.trip_id.clone(), t)).collect())
            }
            Collection::Segments => {
                let mut map: BTreeMap<TripId, Vec<SegmentRecord>> = BTreeMap::new();
                for s in parse::<SegmentRecord>(c, bytes)? {
                    map.entry(s.trip_id.clone()).or_default().push(s);
                }
                self.segments = Arc::new(map);
            }
            Collection::Jobs => {
                self.jobs = Arc::new(parse::<JobRecord>(c, bytes)?.into_iter().map(|j| (j.job_id.clone(), j)).collect())
            }
            Collection::Recordings => {
                self.recordings = Arc::new(
                    parse::<OpenRecording>(c, bytes)?
                        .into_iter()
                        .map(|r| (r.owner.clone(), r))
                        .collect(),
                )
            }
            Collection::Envelopes => {
                self.envelopes = Arc::new(
                    parse::<EnvelopeReceipt>(c, bytes)?
                        .into_iter()
                        .map(|r| ((r.owner.clone(), r.client_message_id.clone()), r))
                        .collect(),
                )
            }
            Collection::Vault => {
                self.vault = Arc::new(
                    parse::<IdentityVaultEntry>(c, bytes)?
                        .into_iter()
                        .map(|v| (v.pseudonym.clone(), v))
                        .collect(),
                )
            }
            Collection::Consent => {
                let mut map: BTreeMap<Pseudonym, Vec<ConsentRecord>> = BTreeMap::new();
                for r in parse::<ConsentRecord>(c, bytes)? {
                    map.entry(r.pseudonym.clone()).or_default().push(r);
                }
                self.consents = Arc::new(map);
            }
            Collection::Fcd => self.fcd = Arc::new(parse(c, bytes)?),
            Collection::Queries => self.queries = Arc::new(parse(c, bytes)?),
            Collection::Notifications => self.notifications = Arc::new(parse(c, bytes)?),
            Collection::Streets => {
                self.streets = Arc::new(
                    parse::<StreetSegment>(c, bytes)?
                        .into_iter()
                        .map(|s| (s.segment_id.clone(), s))
                        .collect(),
                )
            }
        }
        Ok(())
    }
}

/// Immutable, mutually consistent read view.
pub type Snapshot = Arc<StoreData>;

/// Mutable working copy handed to a transaction closure.
pub struct Txn {
    data: StoreData,
    dirty: BTreeSet<Collection>,
}

impl Txn {
    pub fn view(&self) -> &StoreData {
        &self.data
    }

    pub fn trips_mut(&mut self) -> &mut BTreeMap<TripId, Trip> {
        self.dirty.insert(Collection::Trips);
        Arc::make_mut(&mut self.data.trips)
    }

    pub fn segments_mut(&mut self) -> &mut BTreeMap<TripId, Vec<SegmentRecord>> {
        self.dirty.insert(Collection::Segments);
        Arc::make_mut(&mut self.data.segments)
    }

    pub fn jobs_mut(&mut self) -> &mut BTreeMap<String, JobRecord> {
        self.dirty.insert(Collection::Jobs);
        Arc::make_mut(&mut self.data.jobs)
    }

    pub fn recordings_mut(&mut self) -> &mut BTreeMap<Pseudonym, OpenRecording> {
        self.dirty.insert(Collection::Recordings);
        Arc::make_mut(&mut self.data.recordings)
    }

    pub fn envelopes_mut(&mut self) -> &mut BTreeMap<EnvelopeKey, EnvelopeReceipt> {
        self.dirty.insert(Collection::Envelopes);
        Arc::make_mut(&mut self.data.envelopes)
    }

    pub fn vault_mut(&mut self) -> &mut BTreeMap<Pseudonym, IdentityVaultEntry> {
        self.dirty.insert(Collection::Vault);
        Arc::make_mut(&mut self.data.vault)
    }

    pub fn consents_mut(&mut self) -> &mut BTreeMap<Pseudonym, Vec<ConsentRecord>> {
        self.dirty.insert(Collection::Consent);
        Arc::make_mut(&mut self.data.consents)
    }

    pub fn fcd_mut(&mut self) -> &mut Vec<FcdRecord> {
        self.dirty.insert(Collection::Fcd);
        Arc::make_mut(&mut self.data.fcd)
    }

    pub fn queries_mut(&mut self) -> &mut Vec<PtQuery> {
        self.dirty.insert(Collection::Queries);
        Arc::make_mut(&mut self.data.queries)
    }

    pub fn notifications_mut(&mut self) -> &mut Vec<TrafficNotification> {
        self.dirty.insert(Collection::Notifications);
        Arc::make_mut(&mut self.data.notifications)
    }

    pub fn streets_mut(&mut self) -> &mut BTreeMap<String, StreetSegment> {
        self.dirty.insert(Collection::Streets);
        Arc::make_mut(&mut self.data.streets)
    }
}

/// The store: concurrent snapshot reads, one writer at a time.
#[derive(Debug)]
pub struct Store {
    current: RwLock<Snapshot>,
    writer: Mutex<()>,
    dir: Option<PathBuf>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            current: RwLock::new(Arc::new(StoreData::default())),
            writer: Mutex::new(()),
            dir: None,
        }
    }

    /// Opens (creating if needed) a directory-backed store.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut data = StoreData::default();
        for c in Collection::ALL {
            let path = dir.join(c.file_name());
            match fs::read(&path) {
                Ok(bytes) => data.decode(c, &bytes)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Ok(Self {
            current: RwLock::new(Arc::new(data)),
            writer: Mutex::new(()),
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Runs `f` against a private copy; on `Ok` the changes are persisted and
    /// published atomically, on `Err` they are discarded.
    pub fn transact<R, E>(&self, f: impl FnOnce(&mut Txn) -> Result<R, E>) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut txn = Txn {
            data: (*self.snapshot()).clone(),
            dirty: BTreeSet::new(),
        };
        let out = f(&mut txn)?;
        if let Some(dir) = &self.dir {
            for c in &txn.dirty {
                write_atomic(&dir.join(c.file_name()), &txn.data.encode(*c))?;
            }
        }
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(txn.data);
        Ok(out)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
