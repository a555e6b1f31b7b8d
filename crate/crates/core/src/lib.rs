//! Intermodal urban-mobility pipeline: GPS trip recordings are segmented by
//! transport mode, transit legs are matched against GTFS timetables, data is
//! stored under pseudonyms, and analytics are served over an API.

pub mod analytics;
pub mod config;
pub mod geo;
pub mod geojson;
pub mod gtfs;
pub mod inference;
pub mod ingest;
pub mod pilot;
pub mod privacy;
pub mod sources;
pub mod store;
pub mod trace;
