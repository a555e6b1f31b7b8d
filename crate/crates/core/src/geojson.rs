//! GeoJSON export of classified trip segments.
//!
//! Positions are `[lon, lat]`. Output key order is fixed by the struct
//! layout, so the same snapshot always yields the same bytes.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::inference::TravelMode;
use crate::privacy::Pseudonym;
use crate::store::StoreData;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym: Option<Pseudonym>,
    /// Inclusive, on the trip's UTC start date.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NaiveDate>,
    /// Inclusive, on the trip's UTC start date.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TravelMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: String,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: String,
    pub geometry: LineString,
    pub properties: SegmentProperties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineString {
    #[serde(rename = "type")]
    pub kind: String,
    pub coordinates: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProperties {
    pub trip_id: String,
    pub mode: TravelMode,
    pub duration_s: f64,
    pub length_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_stop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_stop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

impl FeatureCollection {
    pub fn empty() -> Self {
        Self {
            kind: "FeatureCollection".into(),
            features: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("geojson serializes")
    }
}

/// One LineString feature per stored segment of every trip passing `filter`.
pub fn export_trips_geojson(snapshot: &StoreData, filter: &TripFilter) -> FeatureCollection {
    let mut fc = FeatureCollection::empty();
    for trip in snapshot.trips().values() {
        if filter.pseudonym.as_ref().is_some_and(|p| p != &trip.owner) {
            continue;
        }
        let day = trip.started_at.date_naive();
        if filter.from.is_some_and(|d| day < d) || filter.to.is_some_and(|d| day > d) {
            continue;
        }
        for seg in snapshot.segments_of(&trip.trip_id) {
            if filter.mode.is_some_and(|m| m != seg.label.mode) {
                continue;
            }
            let coordinates = seg
                .points(trip)
                .iter()
                .map(|p| [p.location.lon(), p.location.lat()])
                .collect();
            let pt = seg.enrichment.as_ref();
            fc.features.push(Feature {
                kind: "Feature".into(),
                geometry: LineString {
                    kind: "LineString".into(),
                    coordinates,
                },
                properties: SegmentProperties {
                    trip_id: trip.trip_id.0.clone(),
                    mode: seg.label.mode,
                    duration_s: seg.duration_s,
                    length_m: seg.length_m,
                    entry_stop: pt.map(|e| e.entry_stop_id.clone()),
                    exit_stop: pt.map(|e| e.exit_stop_id.clone()),
                    route: pt.map(|e| e.route_id.clone()),
                },
            });
        }
    }
    fc
}
