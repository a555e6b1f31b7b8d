//! Trace upload, processing jobs and data-subject operations on top of the
//! [`Store`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::gtfs::GtfsFeed;
use crate::inference::classify_segment;
use crate::privacy::{
    pseudonymize, seal_identity, ConsentRecord, ErasureReceipt, IdentityVaultEntry, PrivacyError, PrivacyKey,
    Pseudonym,
};
use crate::sources::{FcdRecord, PtQuery, StreetSegment, TrafficNotification};
use crate::store::{
    EnvelopeReceipt, JobRecord, JobStage, OpenRecording, SegmentRecord, Snapshot, Store, StoreError, SubmitResponse,
    Txn,
};
use crate::trace::{assemble_trip, segment_by_activity, TraceError, TracePoint, Trip, TripId};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no active consent for this user")]
    NoConsent,
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("too few usable points to form a trip ({usable})")]
    TooFewPoints { usable: usize },
    #[error("unknown pseudonym {0}")]
    UnknownPseudonym(Pseudonym),
    #[error("unknown trip {0}")]
    UnknownTrip(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} is already running")]
    JobBusy(String),
    #[error("no transit feed loaded; job {job_id} parked at Segmented")]
    FeedUnavailable { job_id: String },
    #[error("malformed export line {line}: {message}")]
    Import { line: usize, message: String },
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordingAction {
    Start,
    Append,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceUploadEnvelope {
    pub client_message_id: String,
    pub user_token: String,
    pub recording_action: RecordingAction,
    #[serde(default)]
    pub points: Vec<TracePoint>,
}

impl TraceUploadEnvelope {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.client_message_id.trim().is_empty() {
            return Err(IngestError::InvalidEnvelope("client_message_id is empty".into()));
        }
        if self.user_token.is_empty() {
            return Err(IngestError::InvalidEnvelope("user_token is empty".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            p.validate()
                .map_err(|e| IngestError::InvalidEnvelope(format!("point {i}: {e}")))?;
        }
        if let Some(i) = self.points.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(IngestError::InvalidEnvelope(format!(
                "points not time-ordered at index {}",
                i + 1
            )));
        }
        Ok(())
    }
}

/// Source of stage and record timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Outcome of a `run_pending_jobs` sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTally {
    pub processed: usize,
    pub stages: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

/// One line of a user export dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ExportRecord {
    Vault(IdentityVaultEntry),
    Consent(ConsentRecord),
    Trip(Trip),
    Segment(SegmentRecord),
    Job(JobRecord),
    Recording(OpenRecording),
    Envelope(EnvelopeReceipt),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub records: usize,
    pub trips: usize,
}

pub struct IngestService {
    store: Arc<Store>,
    key: PrivacyKey,
    config: PipelineConfig,
    feed: RwLock<Option<Arc<GtfsFeed>>>,
    clock: Arc<dyn Clock>,
    running: Mutex<BTreeSet<TripId>>,
}

fn derive_trip_id(owner: &Pseudonym, client_message_id: &str) -> TripId {
    let mut h = Sha256::new();
    h.update(owner.as_str().as_bytes());
    h.update([0u8]);
    h.update(client_message_id.as_bytes());
    TripId(format!("trip-{}", &hex::encode(h.finalize())[..24]))
}

impl IngestService {
    pub fn new(store: Arc<Store>, key: PrivacyKey, config: PipelineConfig) -> Self {
        Self {
            store,
            key,
            config,
            feed: RwLock::new(None),
            clock: Arc::new(SystemClock),
            running: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_feed(self, feed: GtfsFeed) -> Self {
        self.load_feed(feed);
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Snapshot {
        self.store.snapshot()
    }

    pub fn load_feed(&self, feed: GtfsFeed) {
        *self.feed.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(feed));
    }

    pub fn feed(&self) -> Option<Arc<GtfsFeed>> {
        self.feed.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn pseudonym_for(&self, user_token: &str) -> Result<Pseudonym, IngestError> {
        Ok(pseudonymize(user_token, &self.key)?)
    }

    /// Records consent and ensures the user has a vault entry.
    pub fn grant_consent(&self, user_token: &str, policy_version: &str) -> Result<ConsentRecord, IngestError> {
        let now = self.clock.now();
        let entry = seal_identity(user_token, &self.key, now)?;
        let record = ConsentRecord {
            pseudonym: entry.pseudonym.clone(),
            policy_version: policy_version.to_string(),
            granted_at: now,
            withdrawn_at: None,
        };
        self.store.transact(|txn| {
            if !txn.view().vault().contains_key(&entry.pseudonym) {
                txn.vault_mut().insert(entry.pseudonym.clone(), entry.clone());
            }
            let existing = txn.view().consents().get(&entry.pseudonym);
            let already = existing.and_then(|cs| {
                cs.iter()
                    .find(|c| c.is_active() && c.policy_version == policy_version)
                    .cloned()
            });
            if let Some(active) = already {
                return Ok(active);
            }
            txn.consents_mut()
                .entry(entry.pseudonym.clone())
                .or_default()
                .push(record.clone());
            Ok::<_, IngestError>(record.clone())
        })
    }

    /// Marks every active consent withdrawn and erases the user's data. The
    /// consent records themselves stay as an audit trail.
    pub fn withdraw_consent(&self, pseudonym: &Pseudonym) -> Result<ErasureReceipt, IngestError> {
        let now = self.clock.now();
        self.store.transact(|txn| {
            let known = txn.view().consents().contains_key(pseudonym);
            if !known {
                return Err(IngestError::UnknownPseudonym(pseudonym.clone()));
            }
            if let Some(cs) = txn.consents_mut().get_mut(pseudonym) {
                cs.iter_mut().for_each(|c| c.withdraw(now));
            }
            Ok(erase_in(txn, pseudonym))
        })
    }

    pub fn submit_trace_batch(&self, envelope: &TraceUploadEnvelope) -> Result<SubmitResponse, IngestError> {
        envelope.validate()?;
        let owner = self.pseudonym_for(&envelope.user_token)?;
        if let Some(receipt) = self.store.snapshot().envelope(&owner, &envelope.client_message_id) {
            return Ok(receipt.response.clone());
        }
        let now = self.clock.now();
        let vault_entry = seal_identity(&envelope.user_token, &self.key, now)?;
        let outcome = self.store.transact(|txn| {
            // Checked again under the writer lock: a concurrent duplicate may
            // have committed in between.
            if let Some(receipt) = txn.view().envelope(&owner, &envelope.client_message_id) {
                return Ok(Ok(receipt.response.clone()));
            }
            if !txn.view().has_active_consent(&owner) {
                return Err(IngestError::NoConsent);
            }
            if !txn.view().vault().contains_key(&owner) {
                txn.vault_mut().insert(owner.clone(), vault_entry.clone());
            }
            let result = self.apply_envelope(txn, &owner, envelope, now);
            match result {
                Ok(response) => {
                    txn.envelopes_mut().insert(
                        (owner.clone(), envelope.client_message_id.clone()),
                        EnvelopeReceipt {
                            owner: owner.clone(),
                            client_message_id: envelope.client_message_id.clone(),
                            response: response.clone(),
                        },
                    );
                    Ok(Ok(response))
                }
                // The recording is discarded and that removal is committed;
                // the error goes back to the caller.
                Err(e @ IngestError::TooFewPoints { .. }) => Ok(Err(e)),
                Err(e) => Err(e),
            }
        })?;
        outcome
    }

    fn apply_envelope(
        &self,
        txn: &mut Txn,
        owner: &Pseudonym,
        envelope: &TraceUploadEnvelope,
        now: DateTime<Utc>,
    ) -> Result<SubmitResponse, IngestError> {
        let n = envelope.points.len();
        match envelope.recording_action {
            RecordingAction::Start => {
                let trip_id = derive_trip_id(owner, &envelope.client_message_id);
                txn.recordings_mut().insert(
                    owner.clone(),
                    OpenRecording {
                        owner: owner.clone(),
                        trip_id: trip_id.clone(),
                        started_at: now,
                        points: envelope.points.clone(),
                    },
                );
                Ok(SubmitResponse {
                    trip_id,
                    points_accepted: n,
                    points_dropped: 0,
                    job_id: None,
                })
            }
            RecordingAction::Append => {
                let rec = txn
                    .recordings_mut()
                    .get_mut(owner)
                    .ok_or_else(|| IngestError::InvalidEnvelope("no recording in progress".into()))?;
                rec.points.extend(envelope.points.iter().cloned());
                Ok(SubmitResponse {
                    trip_id: rec.trip_id.clone(),
                    points_accepted: n,
                    points_dropped: 0,
                    job_id: None,
                })
            }
            RecordingAction::Stop => {
                let (trip_id, mut raw) = match txn.recordings_mut().remove(owner) {
                    Some(rec) => (rec.trip_id, rec.points),
                    None => (derive_trip_id(owner, &envelope.client_message_id), Vec::new()),
                };
                raw.extend(envelope.points.iter().cloned());
                let total = raw.len();
                let assembled = match assemble_trip(trip_id.clone(), owner.clone(), raw, self.config.trace()) {
                    Ok(a) => a,
                    Err(TraceError::TooFewPoints { usable }) => return Err(IngestError::TooFewPoints { usable }),
                    Err(e) => return Err(IngestError::InvalidEnvelope(e.to_string())),
                };
                let dropped = assembled.dropped();
                let job = JobRecord::new(trip_id.clone(), now);
                let job_id = job.job_id.clone();
                txn.trips_mut().insert(trip_id.clone(), assembled.trip);
                txn.segments_mut().remove(&trip_id);
                txn.jobs_mut().insert(job_id.clone(), job);
                Ok(SubmitResponse {
                    trip_id,
                    points_accepted: total - dropped,
                    points_dropped: dropped,
                    job_id: Some(job_id),
                })
            }
        }
    }

    pub fn pending_jobs(&self) -> Vec<String> {
        self.store
            .snapshot()
            .jobs()
            .values()
            .filter(|j| j.is_pending())
            .map(|j| j.job_id.clone())
            .collect()
    }

    /// Segments, classifies and enriches one trip. Results and the final
    /// stage transition are committed together.
    pub fn run_processing_job(&self, job_id: &str) -> Result<JobRecord, IngestError> {
        let snap = self.store.snapshot();
        let job = snap
            .jobs()
            .get(job_id)
            .cloned()
            .ok_or_else(|| IngestError::UnknownJob(job_id.to_string()))?;
        if !job.is_pending() {
            return Ok(job);
        }
        let _lease = TripLease::acquire(&self.running, &job.trip_id)
            .ok_or_else(|| IngestError::JobBusy(job_id.to_string()))?;
        // Re-read after taking the lease: another worker may just have finished.
        let snap = self.store.snapshot();
        let job = snap
            .jobs()
            .get(job_id)
            .cloned()
            .ok_or_else(|| IngestError::UnknownJob(job_id.to_string()))?;
        if !job.is_pending() {
            return Ok(job);
        }
        let now = self.clock.now();
        let Some(trip) = snap.trip(&job.trip_id) else {
            return self.store.transact(|txn| {
                let j = txn
                    .jobs_mut()
                    .get_mut(job_id)
                    .ok_or_else(|| IngestError::UnknownJob(job_id.to_string()))?;
                j.error = Some("trip missing".into());
                j.advance(JobStage::Failed, now)?;
                Ok(j.clone())
            });
        };

        let segments = segment_by_activity(trip, self.config.trace());
        let Some(feed) = self.feed() else {
            self.store.transact(|txn| {
                let j = txn
                    .jobs_mut()
                    .get_mut(job_id)
                    .ok_or_else(|| IngestError::UnknownJob(job_id.to_string()))?;
                if j.stage < JobStage::Segmented {
                    j.advance(JobStage::Segmented, now)?;
                }
                j.error = Some("feed unavailable".into());
                Ok::<_, IngestError>(())
            })?;
            return Err(IngestError::FeedUnavailable {
                job_id: job_id.to_string(),
            });
        };
        let inference = self.config.inference();
        let records: Vec<SegmentRecord> = segments
            .iter()
            .enumerate()
            .map(|(i, s)| SegmentRecord::from_segment(i, s, classify_segment(s, &feed, inference)))
            .collect();

        self.store.transact(|txn| {
            if txn.view().trip(&job.trip_id).is_none() {
                return Err(IngestError::UnknownTrip(job.trip_id.0.clone()));
            }
            let mut j = txn
                .view()
                .jobs()
                .get(job_id)
                .cloned()
                .ok_or_else(|| IngestError::UnknownJob(job_id.to_string()))?;
            for stage in [JobStage::Segmented, JobStage::Classified, JobStage::Enriched] {
                if j.stage < stage {
                    j.advance(stage, now)?;
                }
            }
            j.error = None;
            txn.segments_mut().insert(job.trip_id.clone(), records);
            txn.jobs_mut().insert(job_id.to_string(), j.clone());
            Ok(j)
        })
    }

    /// Runs every pending job, in parallel across trips.
    pub fn run_pending_jobs(&self) -> StageTally {
        let ids = self.pending_jobs();
        let results: Vec<(String, Result<JobRecord, IngestError>)> = ids
            .par_iter()
            .map(|id| (id.clone(), self.run_processing_job(id)))
            .collect();
        let mut tally = StageTally::default();
        for (id, r) in results {
            tally.processed += 1;
            let stage = match r {
                Ok(job) => format!("{:?}", job.stage),
                Err(e) => {
                    tally.errors.push(format!("{id}: {e}"));
                    match e {
                        IngestError::FeedUnavailable { .. } => "Segmented".to_string(),
                        _ => "Error".to_string(),
                    }
                }
            };
            *tally.stages.entry(stage).or_default() += 1;
        }
        tally
    }

    /// Removes the user's trips, segments, jobs, open recordings, upload
    /// receipts and vault entry in one transaction. Consent records stay.
    pub fn erase_user(&self, pseudonym: &Pseudonym) -> Result<ErasureReceipt, IngestError> {
        self.store.transact(|txn| Ok::<_, IngestError>(erase_in(txn, pseudonym)))
    }

    /// JSON-lines dump of everything stored about the user.
    pub fn export_user(&self, pseudonym: &Pseudonym) -> Result<String, IngestError> {
        export_from(&self.store.snapshot(), pseudonym)
    }

    /// Loads a dump produced by [`export_user`](Self::export_user), replacing
    /// whatever is stored under the same keys.
    pub fn import_user(&self, dump: &str) -> Result<ImportSummary, IngestError> {
        let mut parsed = Vec::new();
        for (i, line) in dump.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExportRecord = serde_json::from_str(line).map_err(|e| IngestError::Import {
                line: i + 1,
                message: e.to_string(),
            })?;
            parsed.push(rec);
        }
        self.store.transact(|txn| {
            let mut summary = ImportSummary::default();
            let mut consent_owners = BTreeSet::new();
            for rec in parsed {
                summary.records += 1;
                match rec {
                    ExportRecord::Vault(v) => {
                        txn.vault_mut().insert(v.pseudonym.clone(), v);
                    }
                    ExportRecord::Consent(c) => {
                        let list = txn.consents_mut().entry(c.pseudonym.clone()).or_default();
                        if consent_owners.insert(c.pseudonym.clone()) {
                            list.clear();
                        }
                        list.push(c);
                    }
                    ExportRecord::Trip(t) => {
                        summary.trips += 1;
                        txn.segments_mut().remove(&t.trip_id);
                        txn.trips_mut().insert(t.trip_id.clone(), t);
                    }
                    ExportRecord::Segment(s) => {
                        txn.segments_mut().entry(s.trip_id.clone()).or_default().push(s);
                    }
                    ExportRecord::Job(j) => {
                        txn.jobs_mut().insert(j.job_id.clone(), j);
                    }
                    ExportRecord::Recording(r) => {
                        txn.recordings_mut().insert(r.owner.clone(), r);
                    }
                    ExportRecord::Envelope(e) => {
                        txn.envelopes_mut()
                            .insert((e.owner.clone(), e.client_message_id.clone()), e);
                    }
                }
            }
            Ok(summary)
        })
    }

    pub fn ingest_fcd(&self, records: Vec<FcdRecord>) -> Result<usize, IngestError> {
        let n = records.len();
        self.store.transact(|txn| {
            txn.fcd_mut().extend(records);
            Ok::<_, IngestError>(n)
        })
    }

    pub fn ingest_queries(&self, queries: Vec<PtQuery>) -> Result<usize, IngestError> {
        let n = queries.len();
        self.store.transact(|txn| {
            txn.queries_mut().extend(queries);
            Ok::<_, IngestError>(n)
        })
    }

    pub fn ingest_notifications(&self, items: Vec<TrafficNotification>) -> Result<usize, IngestError> {
        let n = items.len();
        self.store.transact(|txn| {
            txn.notifications_mut().extend(items);
            Ok::<_, IngestError>(n)
        })
    }

    pub fn ingest_streets(&self, streets: Vec<StreetSegment>) -> Result<usize, IngestError> {
        let n = streets.len();
        self.store.transact(|txn| {
            let map = txn.streets_mut();
            for s in streets {
                map.insert(s.segment_id.clone(), s);
            }
            Ok::<_, IngestError>(n)
        })
    }
}

struct TripLease<'a> {
    running: &'a Mutex<BTreeSet<TripId>>,
    trip: TripId,
}

impl<'a> TripLease<'a> {
    fn acquire(running: &'a Mutex<BTreeSet<TripId>>, trip: &TripId) -> Option<Self> {
        let mut set = running.lock().unwrap_or_else(|e| e.into_inner());
        set.insert(trip.clone()).then(|| TripLease {
            running,
            trip: trip.clone(),
        })
    }
}

impl Drop for TripLease<'_> {
    fn drop(&mut self) {
        self.running
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&self.trip);
    }
}

fn erase_in(txn: &mut Txn, pseudonym: &Pseudonym) -> ErasureReceipt {
    let trip_ids: Vec<TripId> = txn.view().trips_of(pseudonym).map(|t| t.trip_id.clone()).collect();
    let mut receipt = ErasureReceipt {
        trips_deleted: 0,
        points_deleted: 0,
        vault_deleted: false,
    };
    if !trip_ids.is_empty() {
        let trips = txn.trips_mut();
        for id in &trip_ids {
            if let Some(t) = trips.remove(id) {
                receipt.trips_deleted += 1;
                receipt.points_deleted += t.points.len();
            }
        }
        let segments = txn.segments_mut();
        for id in &trip_ids {
            segments.remove(id);
        }
        let ids: BTreeSet<&TripId> = trip_ids.iter().collect();
        txn.jobs_mut().retain(|_, j| !ids.contains(&j.trip_id));
    }
    if txn.view().recordings().contains_key(pseudonym) {
        txn.recordings_mut().remove(pseudonym);
    }
    if txn.view().envelopes().keys().any(|(o, _)| o == pseudonym) {
        txn.envelopes_mut().retain(|(o, _), _| o != pseudonym);
    }
    if txn.view().vault().contains_key(pseudonym) {
        txn.vault_mut().remove(pseudonym);
        receipt.vault_deleted = true;
    }
    receipt
}

fn export_from(snap: &Snapshot, pseudonym: &Pseudonym) -> Result<String, IngestError> {
    let vault = snap
        .vault()
        .get(pseudonym)
        .ok_or_else(|| IngestError::UnknownPseudonym(pseudonym.clone()))?;
    let mut records = vec![ExportRecord::Vault(vault.clone())];
    for c in snap.consents().get(pseudonym).into_iter().flatten() {
        records.push(ExportRecord::Consent(c.clone()));
    }
    let trips: Vec<&Trip> = snap.trips_of(pseudonym).collect();
    for t in &trips {
        records.push(ExportRecord::Trip((*t).clone()));
    }
    for t in &trips {
        for s in snap.segments_of(&t.trip_id) {
            records.push(ExportRecord::Segment(s.clone()));
        }
    }
    for j in snap.jobs().values() {
        if trips.iter().any(|t| t.trip_id == j.trip_id) {
            records.push(ExportRecord::Job(j.clone()));
        }
    }
    if let Some(r) = snap.recordings().get(pseudonym) {
        records.push(ExportRecord::Recording(r.clone()));
    }
    for ((o, _), e) in snap.envelopes() {
        if o == pseudonym {
            records.push(ExportRecord::Envelope(e.clone()));
        }
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("export records serialize"));
        out.push('\n');
    }
    Ok(out)
}
