use mobility_core::analytics::AnalyticsError;
use mobility_core::config::ConfigError;
use mobility_core::gtfs::GtfsError;
use mobility_core::ingest::IngestError;
use mobility_core::pilot::PilotError;
use mobility_core::privacy::PrivacyError;
use mobility_core::sources::SourceError;
use mobility_core::store::StoreError;
use serde::Serialize;

/// Exit 1: bad input or state the operator can fix. Exit 2: anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    User,
    Internal,
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    #[serde(skip)]
    pub severity: Severity,
}

impl CliError {
    pub fn user(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            severity: Severity::User,
        }
    }

    pub fn internal(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            severity: Severity::Internal,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.severity {
            Severity::User => 1,
            Severity::Internal => 2,
        }
    }

    /// The machine-readable line written to stderr.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": { "code": self.code, "message": self.message, "exit": self.exit_code() } }).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::user("config", e.to_string())
    }
}

impl From<GtfsError> for CliError {
    fn from(e: GtfsError) -> Self {
        Self::user("gtfs", e.to_string())
    }
}

impl From<SourceError> for CliError {
    fn from(e: SourceError) -> Self {
        Self::user("source", e.to_string())
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        Self::user("analytics", e.to_string())
    }
}

impl From<PrivacyError> for CliError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::MalformedPseudonym(_) => Self::user("privacy", "malformed pseudonym"),
            other => Self::user("privacy", other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::internal("store", e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let code = match &e {
            IngestError::NoConsent => "no_consent",
            IngestError::InvalidEnvelope(_) => "invalid_envelope",
            IngestError::TooFewPoints { .. } => "too_few_points",
            IngestError::UnknownPseudonym(_) | IngestError::UnknownTrip(_) | IngestError::UnknownJob(_) => "not_found",
            IngestError::JobBusy(_) => "job_busy",
            IngestError::FeedUnavailable { .. } => "feed_unavailable",
            IngestError::Import { .. } => "import",
            IngestError::Privacy(_) => return Self::user("privacy", e.to_string()),
            IngestError::Store(_) => return Self::internal("store", e.to_string()),
        };
        Self::user(code, e.to_string())
    }
}

impl From<PilotError> for CliError {
    fn from(e: PilotError) -> Self {
        match e {
            PilotError::Ingest(i) => i.into(),
            PilotError::Gtfs(g) => g.into(),
            other => Self::user("pilot", other.to_string()),
        }
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::user("io", format!("{}: {e}", path.display()))
}
