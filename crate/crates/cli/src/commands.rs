use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use mobility_core::analytics::{
    congestion_snapshot, dataset_stats, event_impact_report, mode_share, stop_query_timeseries, EventImpactRequest,
};
use mobility_core::geo::GeoPoint;
use mobility_core::geojson::{export_trips_geojson, TripFilter};
use mobility_core::gtfs::{load_gtfs, GtfsFeed};
use mobility_core::inference::TravelMode;
use mobility_core::ingest::{IngestService, TraceUploadEnvelope};
use mobility_core::pilot::{evaluate_pilot_dir, generate_pilot, SyntheticPilotSpec};
use mobility_core::privacy::{PrivacyKey, Pseudonym};
use mobility_core::sources::{load_street_segments, parse_fcd_csv, parse_query_log_csv, parse_traffic_feed, RowError};
use mobility_core::store::Store;
use serde::Serialize;
use serde_json::json;

use crate::error::{io, CliError};
use crate::settings::Settings;
use crate::{Command, ConsentCmd, GenerateArgs, GtfsCmd, IngestArgs, KeyCmd, PilotCmd, PipelineCmd, ReportCmd, ServeArgs, SourceKind, UserCmd};

/// Where `gtfs load` keeps its copy of the feed, inside the store directory.
pub const STORE_FEED_DIR: &str = "gtfs";

type CmdResult = Result<(), CliError>;

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn out(text: &str) -> CmdResult {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::internal("io", e.to_string())),
        _ => Ok(()),
    }
}

fn emit<T: Serialize>(value: &T) -> CmdResult {
    let line = serde_json::to_string(value).map_err(|e| CliError::internal("json", e.to_string()))?;
    out(&(line + "\n"))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| io(path, e))
}

fn key(settings: &Settings) -> Result<PrivacyKey, CliError> {
    let path = settings
        .key_file
        .as_ref()
        .ok_or_else(|| CliError::user("config", "no key file: pass --key-file or set MOBILITY_KEY_FILE"))?;
    Ok(PrivacyKey::from_file(path)?)
}

fn feed(settings: &Settings) -> Result<Option<GtfsFeed>, CliError> {
    settings.feed_dir().map(load_gtfs).transpose().map_err(CliError::from)
}

fn service(settings: &Settings) -> Result<IngestService, CliError> {
    let store = Store::open(settings.store_dir()?)?;
    let svc = IngestService::new(Arc::new(store), key(settings)?, settings.pipeline.clone());
    Ok(match feed(settings)? {
        Some(f) => svc.with_feed(f),
        None => svc,
    })
}

fn pseudonym(raw: &str) -> Result<Pseudonym, CliError> {
    Ok(Pseudonym::from_str(raw)?)
}

pub fn run(settings: &Settings, command: Command) -> CmdResult {
    match command {
        Command::Gtfs(GtfsCmd::Load { dir }) => gtfs_load(settings, &dir),
        Command::Ingest(args) => ingest(settings, args),
        Command::Consent(ConsentCmd::Grant { user_token, policy }) => emit(&service(settings)?.grant_consent(&user_token, &policy)?),
        Command::Consent(ConsentCmd::Withdraw { pseudonym: p }) => emit(&service(settings)?.withdraw_consent(&pseudonym(&p)?)?),
        Command::Pipeline(PipelineCmd::Run) => {
            let svc = service(settings)?;
            let tally = svc.run_pending_jobs();
            emit(&tally)
        }
        Command::Pilot(PilotCmd::Generate(args)) => pilot_generate(args),
        Command::Pilot(PilotCmd::Evaluate { dir, json }) => {
            let eval = evaluate_pilot_dir(&dir, &settings.pipeline)?;
            if json {
                emit(&eval)
            } else {
                out(&eval.report.to_string())
            }
        }
        Command::Report(r) => report(settings, r),
        Command::User(UserCmd::Erase { pseudonym: p }) => emit(&service(settings)?.erase_user(&pseudonym(&p)?)?),
        Command::User(UserCmd::Export { pseudonym: p }) => {
            let dump = service(settings)?.export_user(&pseudonym(&p)?)?;
            out(&dump)
        }
        Command::User(UserCmd::Import { file }) => {
            let text = String::from_utf8(read(&file)?).map_err(|_| CliError::user("import", "export file is not UTF-8"))?;
            emit(&service(settings)?.import_user(&text)?)
        }
        Command::Key(KeyCmd::Generate { path }) => key_generate(&path),
        Command::Serve(args) => serve(settings, args),
    }
}

fn gtfs_load(settings: &Settings, dir: &Path) -> CmdResult {
    let feed = load_gtfs(dir)?;
    let counts = feed.counts();
    let mut kept = None;
    if let Some(store) = &settings.store {
        let target = store.join(STORE_FEED_DIR);
        std::fs::create_dir_all(&target).map_err(|e| io(&target, e))?;
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        names.sort();
        for src in names {
            let dst = target.join(src.file_name().unwrap());
            std::fs::copy(&src, &dst).map_err(|e| io(&dst, e))?;
        }
        kept = Some(target);
    }
    emit(&json!({ "feed": dir, "counts": counts, "kept_at": kept }))
}

#[derive(Serialize)]
struct IngestReport {
    file: String,
    kind: &'static str,
    rows_ok: usize,
    rows_failed: usize,
    errors: Vec<serde_json::Value>,
}

fn row_errors(errors: &[RowError]) -> Vec<serde_json::Value> {
    errors.iter().map(|e| json!({ "line": e.line, "kind": e.kind })).collect()
}

fn ingest(settings: &Settings, args: IngestArgs) -> CmdResult {
    let bytes = read(&args.file)?;
    let file = args.file.display().to_string();
    let svc = service(settings)?;
    let report = match args.kind {
        SourceKind::Fcd => {
            let parsed = parse_fcd_csv(bytes.as_slice())?;
            let errors = row_errors(&parsed.errors);
            let ok = svc.ingest_fcd(parsed.records)?;
            IngestReport { file, kind: "fcd", rows_ok: ok, rows_failed: errors.len(), errors }
        }
        SourceKind::Queries => {
            let parsed = parse_query_log_csv(bytes.as_slice())?;
            let errors = row_errors(&parsed.errors);
            let ok = svc.ingest_queries(parsed.records)?;
            IngestReport { file, kind: "queries", rows_ok: ok, rows_failed: errors.len(), errors }
        }
        SourceKind::Feed => {
            let parsed = parse_traffic_feed(bytes.as_slice())?;
            let errors: Vec<_> = parsed.warnings.iter().map(|w| json!({ "warning": w })).collect();
            let ok = svc.ingest_notifications(parsed.notifications)?;
            IngestReport { file, kind: "feed", rows_ok: ok, rows_failed: errors.len(), errors }
        }
        SourceKind::Segments => {
            let ok = svc.ingest_streets(load_street_segments(bytes.as_slice())?)?;
            IngestReport { file, kind: "segments", rows_ok: ok, rows_failed: 0, errors: Vec::new() }
        }
        SourceKind::Traces => ingest_traces(&svc, file, &bytes, args.consent.as_deref())?,
    };
    emit(&report)
}

fn ingest_traces(svc: &IngestService, file: String, bytes: &[u8], consent: Option<&str>) -> Result<IngestReport, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CliError::user("source", "trace file is not UTF-8"))?;
    let mut envelopes = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceUploadEnvelope>(line) {
            Ok(e) => envelopes.push((i + 1, e)),
            Err(e) => errors.push(json!({ "line": i + 1, "message": e.to_string() })),
        }
    }
    if let Some(policy) = consent {
        let users: BTreeSet<&str> = envelopes.iter().map(|(_, e)| e.user_token.as_str()).collect();
        for u in users {
            svc.grant_consent(u, policy)?;
        }
    }
    let mut ok = 0;
    for (line, env) in &envelopes {
        match svc.submit_trace_batch(env) {
            Ok(_) => ok += 1,
            Err(e) => {
                let e = CliError::from(e);
                if e.exit_code() == 2 {
                    return Err(e);
                }
                errors.push(json!({ "line": line, "code": e.code, "message": e.message }));
            }
        }
    }
    Ok(IngestReport {
        file,
        kind: "traces",
        rows_ok: ok,
        rows_failed: errors.len(),
        errors,
    })
}

fn pilot_generate(args: GenerateArgs) -> CmdResult {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = String::from_utf8(read(path)?).map_err(|_| CliError::user("pilot", "spec is not UTF-8"))?;
            SyntheticPilotSpec::from_toml_str(&text)?
        }
        None => SyntheticPilotSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.noise {
        spec.gps_noise_sigma_m = v;
    }
    if let Some(v) = args.corruption {
        spec.label_corruption = v;
    }
    for (flag, slot) in [
        (args.bicycle, &mut spec.bicycle),
        (args.car, &mut spec.car),
        (args.tram, &mut spec.tram),
        (args.bus, &mut spec.bus),
        (args.walk, &mut spec.walk),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let bundle = generate_pilot(&spec)?;
    bundle.write_to(&args.out)?;
    emit(&json!({
        "out": args.out,
        "trips": bundle.truth.len(),
        "envelopes": bundle.envelopes.len(),
        "spec": spec,
    }))
}

fn report(settings: &Settings, r: ReportCmd) -> CmdResult {
    let svc = service(settings)?;
    let snap = svc.snapshot();
    match r {
        ReportCmd::Stats => emit(&dataset_stats(snap.trips().values())),
        ReportCmd::ModeShare { pseudonym: p, user_token } => {
            let p = match (p, user_token) {
                (Some(p), _) => pseudonym(&p)?,
                (None, Some(t)) => svc.pseudonym_for(&t)?,
                (None, None) => return Err(CliError::user("usage", "pass a pseudonym or --user-token")),
            };
            if !snap.vault().contains_key(&p) {
                return Err(CliError::user("not_found", format!("unknown pseudonym {p}")));
            }
            emit(&mode_share(&snap.mode_samples_of(&p)))
        }
        ReportCmd::Impact { lat, lon, time, radius, horizon, bucket } => {
            let venue = GeoPoint::new(lat, lon).map_err(|e| CliError::user("usage", e.to_string()))?;
            let feed = svc.feed().ok_or_else(|| CliError::user("feed_unavailable", "no transit feed: pass --feed or run gtfs load"))?;
            let mut req = EventImpactRequest::new(venue, time, radius);
            if let Some(h) = horizon {
                req.history_horizon_s = h;
            }
            if let Some(b) = bucket {
                req.bucket_width_s = b;
            }
            let streets: Vec<_> = snap.streets().values().cloned().collect();
            emit(&event_impact_report(&req, snap.fcd(), &streets, snap.queries(), &feed, &settings.pipeline.congestion)?)
        }
        ReportCmd::Queries { stop, date, bucket } => emit(&stop_query_timeseries(snap.queries(), &stop, date, bucket)?),
        ReportCmd::Congestion { at } => emit(&congestion_snapshot(snap.fcd(), at, &settings.pipeline.congestion)),
        ReportCmd::Geojson { pseudonym: p, from, to, mode } => {
            let filter = TripFilter {
                pseudonym: p.as_deref().map(pseudonym).transpose()?,
                from,
                to,
                mode: mode
                    .as_deref()
                    .map(|m| TravelMode::from_str(m).map_err(|_| CliError::user("usage", format!("unknown mode {m:?}"))))
                    .transpose()?,
            };
            out(&(export_trips_geojson(&snap, &filter).to_json() + "\n"))
        }
    }
}

fn key_generate(path: &Path) -> CmdResult {
    if path.exists() {
        return Err(CliError::user("io", format!("{} exists; not overwriting a key", path.display())));
    }
    let mut bytes = [0u8; 32];
    rand::Fill::fill(&mut bytes, &mut rand::rng());
    std::fs::write(path, hex::encode(bytes) + "\n").map_err(|e| io(path, e))?;
    emit(&json!({ "key_file": path }))
}

fn serve(settings: &Settings, args: ServeArgs) -> CmdResult {
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let svc = Arc::new(service(settings)?);
    let state = mobility_server::AppState {
        service: svc,
        auto_process: !args.no_auto_process,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::internal("runtime", e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&settings.listen)
            .await
            .map_err(|e| CliError::user("listen", format!("{}: {e}", settings.listen)))?;
        mobility_server::serve(listener, state)
            .await
            .map_err(|e| CliError::internal("serve", e.to_string()))
    })
}
