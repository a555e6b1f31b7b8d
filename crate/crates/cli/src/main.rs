mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::settings::{Overrides, Settings};

#[derive(Debug, Parser)]
#[command(name = "mobility", version, about = "Intermodal trip pipeline: ingest, process, analyze, serve")]
struct Cli {
    /// Config file (flat TOML).
    #[arg(long, global = true, env = "MOBILITY_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory.
    #[arg(long, global = true, env = "MOBILITY_STORE")]
    store: Option<PathBuf>,
    /// GTFS feed directory.
    #[arg(long, global = true, env = "MOBILITY_FEED")]
    feed: Option<PathBuf>,
    /// Privacy key file (hex text or raw bytes, at least 32 bytes).
    #[arg(long, global = true, env = "MOBILITY_KEY_FILE")]
    key_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Transit feed commands.
    #[command(subcommand)]
    Gtfs(GtfsCmd),
    /// Parse a source file and add its records to the store.
    Ingest(IngestArgs),
    /// Consent management.
    #[command(subcommand)]
    Consent(ConsentCmd),
    /// Processing jobs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Synthetic pilot generation and evaluation.
    #[command(subcommand)]
    Pilot(PilotCmd),
    /// Analytics outputs.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Data subject requests.
    #[command(subcommand)]
    User(UserCmd),
    /// Key material.
    #[command(subcommand)]
    Key(KeyCmd),
    /// Start the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum GtfsCmd {
    /// Validate a feed directory, print its counts and keep a copy in the store.
    Load { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceKind {
    /// Floating car data CSV.
    Fcd,
    /// Journey-planner query log CSV.
    Queries,
    /// Traffic notification RSS feed.
    Feed,
    /// Street segment GeoJSON.
    Segments,
    /// Trace upload envelopes, one JSON object per line.
    Traces,
}

#[derive(Debug, Args)]
struct IngestArgs {
    kind: SourceKind,
    file: PathBuf,
    /// For traces: grant consent under this policy version to every user in the file first.
    #[arg(long)]
    consent: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ConsentCmd {
    /// Record consent; prints the consent record with the user's pseudonym.
    Grant {
        user_token: String,
        #[arg(long, default_value = "v1")]
        policy: String,
    },
    /// Withdraw consent and erase the user's data.
    Withdraw { pseudonym: String },
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    /// Process all pending jobs and print the stage tally.
    Run,
}

#[derive(Debug, Subcommand)]
enum PilotCmd {
    /// Write a synthetic pilot (feed, envelopes, ground truth) to a directory.
    Generate(GenerateArgs),
    /// Evaluate a generated pilot and print the accuracy table.
    Evaluate {
        dir: PathBuf,
        /// Print the full evaluation as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Pilot spec TOML; flags below override it.
    spec: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// GPS noise standard deviation in metres.
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of activity labels replaced at random.
    #[arg(long)]
    corruption: Option<f64>,
    #[arg(long)]
    bicycle: Option<usize>,
    #[arg(long)]
    car: Option<usize>,
    #[arg(long)]
    tram: Option<usize>,
    #[arg(long)]
    bus: Option<usize>,
    #[arg(long)]
    walk: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Users, trips, average duration and point count.
    Stats,
    /// Mode share of one user.
    ModeShare {
        /// Pseudonym; or pass --user-token to derive it.
        pseudonym: Option<String>,
        #[arg(long, conflicts_with = "pseudonym")]
        user_token: Option<String>,
    },
    /// Congestion near a venue before an event and the nearest stop's query load.
    Impact {
        #[arg(long, allow_negative_numbers = true)]
        lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        lon: f64,
        /// Event start, RFC 3339.
        #[arg(long)]
        time: DateTime<Utc>,
        /// Metres.
        #[arg(long, default_value_t = 600.0)]
        radius: f64,
        /// Baseline lookback in seconds.
        #[arg(long)]
        horizon: Option<i64>,
        #[arg(long)]
        bucket: Option<u32>,
    },
    /// Query counts at a stop over one day.
    Queries {
        #[arg(long)]
        stop: String,
        #[arg(long)]
        date: NaiveDate,
        #[arg(long, default_value_t = 1800)]
        bucket: u32,
    },
    /// Congestion level of every segment at an instant.
    Congestion {
        #[arg(long)]
        at: DateTime<Utc>,
    },
    /// Stored segments as GeoJSON.
    Geojson {
        #[arg(long)]
        pseudonym: Option<String>,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        #[arg(long)]
        mode: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum UserCmd {
    /// Delete everything stored for a pseudonym except its consent history.
    Erase { pseudonym: String },
    /// Print a user's records as JSON lines.
    Export { pseudonym: String },
    /// Restore records from an export.
    Import { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum KeyCmd {
    /// Write a fresh random 32-byte key as hex. Refuses to overwrite.
    Generate { path: PathBuf },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "MOBILITY_LISTEN")]
    listen: Option<String>,
    /// Leave jobs pending after upload; run them with POST /jobs/run.
    #[arg(long)]
    no_auto_process: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = error::CliError::user("usage", e.render().to_string().trim());
            eprintln!("{}", err.line());
            return ExitCode::from(1);
        }
    };
    let overrides = Overrides {
        config: cli.config.clone(),
        store: cli.store.clone(),
        feed: cli.feed.clone(),
        key_file: cli.key_file.clone(),
        listen: match &cli.command {
            Command::Serve(a) => a.listen.clone(),
            _ => None,
        },
    };
    let result = Settings::resolve(&overrides).and_then(|s| commands::run(&s, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
