//! Parsers for contextual sources: floating-car speeds, transit query logs,
//! RSS traffic notifications and street-segment geometry.
//!
//! CSV sources are tolerant per row: a bad row is reported by line number and
//! the rest of the file still loads. Only structurally broken input (wrong
//! header, unreadable stream, malformed XML/JSON) is fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use quick_xml::events::{BytesStart, BytesText, Event};
use quick_xml::{Reader, Writer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{GeoPoint, Polyline};

pub const FCD_HEADER: [&str; 3] = ["segment_id", "interval_start", "avg_speed_kmh"];
pub const QUERY_HEADER: [&str; 4] = ["origin", "destination", "departure", "issued_at"];

/// FCD interval length in seconds.
pub const FCD_INTERVAL_S: i64 = 900;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("expected header {expected:?}, found {found:?}")]
    BadHeader { expected: Vec<String>, found: Vec<String> },
    #[error("read error: {0}")]
    Io(String),
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("not an RSS document: {0}")]
    NotRss(String),
    #[error("invalid GeoJSON: {0}")]
    InvalidGeoJson(String),
    #[error("feature {index} has no segment_id property")]
    MissingSegmentId { index: usize },
    #[error("feature {index} geometry is {found}, expected LineString")]
    NonLineStringGeometry { index: usize, found: String },
    #[error("feature {index} has invalid coordinates: {reason}")]
    InvalidCoordinates { index: usize, reason: String },
    #[error("duplicate segment_id {0:?}")]
    DuplicateSegmentId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowErrorKind {
    FieldCount { expected: usize, found: usize },
    InvalidUtf8,
    EmptyField(String),
    BadInstant(String),
    Misaligned,
    BadNumber(String),
    NegativeSpeed,
    BadEndpoint(String),
    SameEndpoints,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub kind: RowErrorKind,
}

/// Valid records plus per-row failures.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<RowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcdRecord {
    pub segment_id: String,
    pub interval_start: DateTime<Utc>,
    pub avg_speed_kmh: f64,
}

/// Public-transport query endpoint: a stop id or a coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Stop(String),
    Coord(GeoPoint),
}

impl Endpoint {
    pub fn stop_id(&self) -> Option<&str> {
        match self {
            Endpoint::Stop(id) => Some(id),
            Endpoint::Coord(_) => None,
        }
    }

    /// `"lat;lon"` becomes a coordinate, anything else a stop id.
    pub fn parse(s: &str) -> Result<Self, RowErrorKind> {
        let s = s.trim();
        if s.is_empty() {
            return Err(RowErrorKind::BadEndpoint(s.into()));
        }
        if let Some((lat, lon)) = s.split_once(';') {
            if let (Ok(lat), Ok(lon)) = (lat.trim().parse::<f64>(), lon.trim().parse::<f64>()) {
                return GeoPoint::new(lat, lon)
                    .map(Endpoint::Coord)
                    .map_err(|_| RowErrorKind::BadEndpoint(s.into()));
            }
        }
        Ok(Endpoint::Stop(s.to_string()))
    }

    pub fn render(&self) -> String {
        match self {
            Endpoint::Stop(id) => id.clone(),
            Endpoint::Coord(p) => format!("{};{}", p.lat(), p.lon()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtQuery {
    pub origin: Endpoint,
    pub destination: Endpoint,
    pub departure: DateTime<Utc>,
    pub issued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationCategory {
    Warning,
    Accident,
    Other,
}

impl NotificationCategory {
    /// Keyword scan over a title (German and English).
    pub fn from_title(title: &str) -> Self {
        let t = title.to_lowercase();
        if t.contains("unfall") || t.contains("accident") {
            NotificationCategory::Accident
        } else if t.contains("warnung") || t.contains("warning") {
            NotificationCategory::Warning
        } else {
            NotificationCategory::Other
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficNotification {
    pub id: String,
    pub title: String,
    pub description: String,
    pub published_at: DateTime<Utc>,
    pub location: Option<GeoPoint>,
    pub category: NotificationCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedParse {
    pub notifications: Vec<TrafficNotification>,
    /// Items skipped for a missing or unreadable publication date.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetSegment {
    pub segment_id: String,
    pub geometry: Polyline,
    pub name: Option<String>,
    pub road_class: Option<String>,
}

pub fn parse_instant(s: &str) -> Result<DateTime<Utc>, RowErrorKind> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.with_timezone(&Utc))
        .map_err(|_| RowErrorKind::BadInstant(s.into()))
}

pub fn format_instant(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn is_interval_aligned(t: &DateTime<Utc>) -> bool {
    t.timestamp().rem_euclid(FCD_INTERVAL_S) == 0 && t.nanosecond() == 0
}

/// Rows of a header-checked CSV stream as `(line, fields)`; undecodable rows
/// become row errors.
fn csv_rows<R: Read>(stream: R, header: &[&str]) -> Result<(Vec<(u64, Vec<String>)>, Vec<RowError>), SourceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(stream);
    let mut record = csv::ByteRecord::new();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut first = true;
    loop {
        match rdr.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(SourceError::Io(e.to_string())),
                _ => {
                    errors.push(RowError {
                        line: e.position().map_or(0, |p| p.line()),
                        kind: RowErrorKind::InvalidUtf8,
                    });
                    continue;
                }
            },
        }
        let line = record.position().map_or(0, |p| p.line());
        let fields: Option<Vec<String>> = record
            .iter()
            .map(|f| std::str::from_utf8(f).ok().map(|s| s.trim().to_string()))
            .collect();
        if first {
            first = false;
            let found = fields.unwrap_or_default();
            let mut found_clean = found.clone();
            if let Some(f) = found_clean.first_mut() {
                *f = f.trim_start_matches('\u{feff}').to_string();
            }
            if found_clean != header {
                return Err(SourceError::BadHeader {
                    expected: header.iter().map(|s| s.to_string()).collect(),
                    found,
                });
            }
            continue;
        }
        match fields {
            None => errors.push(RowError {
                line,
                kind: RowErrorKind::InvalidUtf8,
            }),
            Some(f) if f.len() == 1 && f[0].is_empty() => {}
            Some(f) if f.len() != header.len() => errors.push(RowError {
                line,
                kind: RowErrorKind::FieldCount {
                    expected: header.len(),
                    found: f.len(),
                },
            }),
            Some(f) => rows.push((line, f)),
        }
    }
    if first {
        return Err(SourceError::BadHeader {
            expected: header.iter().map(|s| s.to_string()).collect(),
            found: Vec::new(),
        });
    }
    Ok((rows, errors))
}

fn parse_fcd_row(f: &[String]) -> Result<FcdRecord, RowErrorKind> {
    if f[0].is_empty() {
        return Err(RowErrorKind::EmptyField("segment_id".into()));
    }
    let interval_start = parse_instant(&f[1])?;
    if !is_interval_aligned(&interval_start) {
        return Err(RowErrorKind::Misaligned);
    }
    let speed: f64 = f[2].parse().map_err(|_| RowErrorKind::BadNumber(f[2].clone()))?;
    if !speed.is_finite() {
        return Err(RowErrorKind::BadNumber(f[2].clone()));
    }
    if speed < 0.0 {
        return Err(RowErrorKind::NegativeSpeed);
    }
    Ok(FcdRecord {
        segment_id: f[0].clone(),
        interval_start,
        avg_speed_kmh: speed,
    })
}

/// Parses `segment_id,interval_start,avg_speed_kmh` rows.
pub fn parse_fcd_csv<R: Read>(stream: R) -> Result<Parsed<FcdRecord>, SourceError> {
    let (rows, mut errors) = csv_rows(stream, &FCD_HEADER)?;
    let mut records = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        match parse_fcd_row(&fields) {
            Ok(r) => records.push(r),
            Err(kind) => errors.push(RowError { line, kind }),
        }
    }
    errors.sort_by_key(|e| e.line);
    Ok(Parsed { records, errors })
}

pub fn write_fcd_csv(records: &[FcdRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FCD_HEADER).expect("write to Vec");
    for r in records {
        w.write_record([
            r.segment_id.as_str(),
            &format_instant(&r.interval_start),
            &r.avg_speed_kmh.to_string(),
        ])
        .expect("write to Vec");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("csv output is UTF-8")
}

fn parse_query_row(f: &[String]) -> Result<PtQuery, RowErrorKind> {
    let origin = Endpoint::parse(&f[0])?;
    let destination = Endpoint::parse(&f[1])?;
    if origin == destination {
        return Err(RowErrorKind::SameEndpoints);
    }
    Ok(PtQuery {
        origin,
        destination,
        departure: parse_instant(&f[2])?,
        issued_at: parse_instant(&f[3])?,
    })
}

/// Parses `origin,destination,departure,issued_at` rows.
pub fn parse_query_log_csv<R: Read>(stream: R) -> Result<Parsed<PtQuery>, SourceError> {
    let (rows, mut errors) = csv_rows(stream, &QUERY_HEADER)?;
    let mut records = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        match parse_query_row(&fields) {
            Ok(q) => records.push(q),
            Err(kind) => errors.push(RowError { line, kind }),
        }
    }
    errors.sort_by_key(|e| e.line);
    Ok(Parsed { records, errors })
}

pub fn write_query_log_csv(queries: &[PtQuery]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(QUERY_HEADER).expect("write to Vec");
    for q in queries {
        w.write_record([
            q.origin.render(),
            q.destination.render(),
            format_instant(&q.departure),
            format_instant(&q.issued_at),
        ])
        .expect("write to Vec");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("csv output is UTF-8")
}

#[derive(Default)]
struct ItemFields {
    title: Option<String>,
    description: Option<String>,
    guid: Option<String>,
    link: Option<String>,
    pub_date: Option<String>,
    georss_point: Option<String>,
    geo_lat: Option<String>,
    geo_long: Option<String>,
}

impl ItemFields {
    fn set(&mut self, tag: &str, text: String) {
        let slot = match tag {
            "title" => &mut self.title,
            "description" => &mut self.description,
            "guid" => &mut self.guid,
            "link" => &mut self.link,
            "pubDate" => &mut self.pub_date,
            "georss:point" => &mut self.georss_point,
            "geo:lat" => &mut self.geo_lat,
            "geo:long" => &mut self.geo_long,
            _ => return,
        };
        slot.get_or_insert_with(String::new).push_str(&text);
    }

    fn location(&self) -> Option<GeoPoint> {
        if let Some(pt) = &self.georss_point {
            let mut it = pt.split_whitespace().map(str::parse::<f64>);
            if let (Some(Ok(lat)), Some(Ok(lon))) = (it.next(), it.next()) {
                return GeoPoint::new(lat, lon).ok();
            }
        }
        match (&self.geo_lat, &self.geo_long) {
            (Some(lat), Some(lon)) => GeoPoint::new(lat.trim().parse().ok()?, lon.trim().parse().ok()?).ok(),
            _ => None,
        }
    }
}

/// Parses an RSS 2.0 document into notifications, one per `<item>`.
pub fn parse_traffic_feed<R: Read>(mut stream: R) -> Result<FeedParse, SourceError> {
    let mut buf = Vec::new();
    stream.read_to_end(&mut buf).map_err(|e| SourceError::Io(e.to_string()))?;
    let mut reader = Reader::from_reader(buf.as_slice());
    reader.config_mut().check_end_names = true;

    let mut stack: Vec<String> = Vec::new();
    let mut saw_root = false;
    let mut item: Option<ItemFields> = None;
    let mut notifications = Vec::new();
    let mut warnings = Vec::new();
    let mut item_index = 0usize;
    let mut event_buf = Vec::new();
    let malformed = |e: &dyn std::fmt::Display, pos: u64| SourceError::MalformedXml(format!("{e} at byte {pos}"));

    loop {
        let pos = reader.buffer_position();
        let event = reader.read_event_into(&mut event_buf).map_err(|e| malformed(&e, pos))?;
        match event {
            Event::Start(start) => {
                let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
                if stack.is_empty() {
                    if saw_root {
                        return Err(SourceError::MalformedXml("multiple root elements".into()));
                    }
                    saw_root = true;
                    if name != "rss" {
                        return Err(SourceError::NotRss(format!("root element <{name}>")));
                    }
                }
                if name == "item" && item.is_none() {
                    item = Some(ItemFields::default());
                }
                stack.push(name);
            }
            Event::Empty(start) => {
                if stack.is_empty() {
                    let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
                    return Err(SourceError::NotRss(format!("empty root element <{name}>")));
                }
            }
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                if name == "item" && !stack.iter().any(|n| n == "item") {
                    if let Some(fields) = item.take() {
                        item_index += 1;
                        match item_to_notification(fields, item_index) {
                            Ok(n) => notifications.push(n),
                            Err(w) => warnings.push(w),
                        }
                    }
                }
            }
            Event::Text(text) => {
                if let (Some(fields), Some(tag)) = (item.as_mut(), stack.last()) {
                    let s = text.unescape().map_err(|e| malformed(&e, pos))?;
                    fields.set(tag, s.into_owned());
                } else if stack.is_empty() && !text.iter().all(u8::is_ascii_whitespace) {
                    return Err(SourceError::MalformedXml("text outside the root element".into()));
                }
            }
            Event::CData(data) => {
                if let (Some(fields), Some(tag)) = (item.as_mut(), stack.last()) {
                    fields.set(tag, String::from_utf8_lossy(&data).into_owned());
                }
            }
            Event::Eof => break,
            _ => {}
        }
        event_buf.clear();
    }
    if !stack.is_empty() {
        return Err(SourceError::MalformedXml(format!("unexpected end of document inside <{}>", stack.join("/"))));
    }
    if !saw_root {
        return Err(SourceError::MalformedXml("empty document".into()));
    }
    Ok(FeedParse { notifications, warnings })
}

fn item_to_notification(fields: ItemFields, index: usize) -> Result<TrafficNotification, String> {
    let title = fields.title.clone().unwrap_or_default().trim().to_string();
    let published_at = match fields.pub_date.as_deref().map(str::trim) {
        None | Some("") => return Err(format!("item {index} ({title:?}) has no pubDate; skipped")),
        Some(raw) => DateTime::parse_from_rfc2822(raw)
            .or_else(|_| DateTime::parse_from_rfc3339(raw))
            .map(|d| d.with_timezone(&Utc))
            .map_err(|_| format!("item {index} ({title:?}) has unreadable pubDate {raw:?}; skipped"))?,
    };
    let location = fields.location();
    let id = fields
        .guid
        .or(fields.link)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("{}#{}", published_at.timestamp(), title));
    Ok(TrafficNotification {
        category: NotificationCategory::from_title(&title),
        id,
        title,
        description: fields.description.unwrap_or_default().trim().to_string(),
        published_at,
        location,
    })
}

/// Renders notifications as an RSS 2.0 channel (with GeoRSS points).
pub fn write_traffic_feed(channel_title: &str, items: &[TrafficNotification]) -> String {
    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    let text = |w: &mut Writer<Vec<u8>>, tag: &str, value: &str| {
        w.create_element(tag)
            .write_text_content(BytesText::new(value))
            .expect("write to Vec");
    };
    let mut rss = BytesStart::new("rss");
    rss.push_attribute(("version", "2.0"));
    rss.push_attribute(("xmlns:georss", "http://www.georss.org/georss"));
    w.write_event(Event::Start(rss)).expect("write to Vec");
    w.write_event(Event::Start(BytesStart::new("channel"))).expect("write to Vec");
    text(&mut w, "title", channel_title);
    for n in items {
        w.write_event(Event::Start(BytesStart::new("item"))).expect("write to Vec");
        text(&mut w, "guid", &n.id);
        text(&mut w, "title", &n.title);
        text(&mut w, "description", &n.description);
        text(&mut w, "pubDate", &n.published_at.to_rfc2822());
        if let Some(p) = n.location {
            text(&mut w, "georss:point", &format!("{} {}", p.lat(), p.lon()));
        }
        w.write_event(Event::End(quick_xml::events::BytesEnd::new("item"))).expect("write to Vec");
    }
    w.write_event(Event::End(quick_xml::events::BytesEnd::new("channel"))).expect("write to Vec");
    w.write_event(Event::End(quick_xml::events::BytesEnd::new("rss"))).expect("write to Vec");
    String::from_utf8(w.into_inner()).expect("xml output is UTF-8")
}

/// Loads street segments from a GeoJSON FeatureCollection of LineStrings.
/// Positions are `[lon, lat]`.
pub fn load_street_segments<R: Read>(stream: R) -> Result<Vec<StreetSegment>, SourceError> {
    let doc: Value = serde_json::from_reader(stream).map_err(|e| SourceError::InvalidGeoJson(e.to_string()))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(SourceError::InvalidGeoJson("top-level object is not a FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| SourceError::InvalidGeoJson("missing features array".into()))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(features.len());
    for (index, feature) in features.iter().enumerate() {
        let props = feature.get("properties");
        let segment_id = match props.and_then(|p| p.get("segment_id")) {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(SourceError::MissingSegmentId { index }),
        };
        let geometry = feature.get("geometry").unwrap_or(&Value::Null);
        let gtype = geometry.get("type").and_then(Value::as_str).unwrap_or("null");
        if gtype != "LineString" {
            return Err(SourceError::NonLineStringGeometry {
                index,
                found: gtype.to_string(),
            });
        }
        let bad = |reason: &str| SourceError::InvalidCoordinates {
            index,
            reason: reason.to_string(),
        };
        let coords = geometry
            .get("coordinates")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("coordinates missing"))?;
        let mut points = Vec::with_capacity(coords.len());
        for pos in coords {
            let pair = pos.as_array().filter(|a| a.len() >= 2).ok_or_else(|| bad("position is not [lon, lat]"))?;
            let (lon, lat) = match (pair[0].as_f64(), pair[1].as_f64()) {
                (Some(lon), Some(lat)) => (lon, lat),
                _ => return Err(bad("non-numeric position")),
            };
            points.push(GeoPoint::new(lat, lon).map_err(|e| bad(&e.to_string()))?);
        }
        let geometry = Polyline::new(points).map_err(|e| bad(&e.to_string()))?;
        if !seen.insert(segment_id.clone()) {
            return Err(SourceError::DuplicateSegmentId(segment_id));
        }
        let text_prop = |key: &str| props.and_then(|p| p.get(key)).and_then(Value::as_str).map(str::to_string);
        out.push(StreetSegment {
            segment_id,
            geometry,
            name: text_prop("name"),
            road_class: text_prop("road_class").or_else(|| text_prop("highway")),
        });
    }
    Ok(out)
}

pub fn write_street_segments(segments: &[StreetSegment]) -> String {
    let features: Vec<Value> = segments
        .iter()
        .map(|s| {
            let mut props = serde_json::Map::new();
            props.insert("segment_id".into(), json!(s.segment_id));
            if let Some(name) = &s.name {
                props.insert("name".into(), json!(name));
            }
            if let Some(class) = &s.road_class {
                props.insert("road_class".into(), json!(class));
            }
            let coords: Vec<[f64; 2]> = s.geometry.points().iter().map(|p| [p.lon(), p.lat()]).collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": props,
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features}).to_string()
}

/// FCD records joined to their street segment by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment<'a> {
    pub joined: Vec<(&'a FcdRecord, &'a StreetSegment)>,
    pub unmatched_ids: BTreeSet<String>,
}

impl Alignment<'_> {
    pub fn unmatched_records(&self, records: &[FcdRecord]) -> usize {
        records.iter().filter(|r| self.unmatched_ids.contains(&r.segment_id)).count()
    }
}

pub fn align_fcd_to_segments<'a>(records: &'a [FcdRecord], segments: &'a [StreetSegment]) -> Alignment<'a> {
    let by_id: BTreeMap<&str, &StreetSegment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    let mut joined = Vec::new();
    let mut unmatched_ids = BTreeSet::new();
    for r in records {
        match by_id.get(r.segment_id.as_str()) {
            Some(seg) => joined.push((r, *seg)),
            None => {
                unmatched_ids.insert(r.segment_id.clone());
            }
        }
    }
    Alignment { joined, unmatched_ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fcd_valid_row() {
        let p = parse_fcd_csv("segment_id,interval_start,avg_speed_kmh\nseg42,2017-12-17T15:00:00Z,34.5\n".as_bytes()).unwrap();
        assert!(p.errors.is_empty());
        assert_eq!(p.records[0].segment_id, "seg42");
        assert_eq!(p.records[0].avg_speed_kmh, 34.5);
        assert_eq!(format_instant(&p.records[0].interval_start), "2017-12-17T15:00:00Z");
    }

    #[test]
    fn fcd_row_errors() {
        let body = "segment_id,interval_start,avg_speed_kmh\n\
                    a,2017-12-17T15:07:00Z,30\n\
                    b,2017-12-17T15:15:00Z,-5\n\
                    c,yesterday,10\n\
                    d,2017-12-17T15:30:00Z\n\
                    e,2017-12-17T15:30:00Z,NaN\n\
                    f,2017-12-17T15:45:00Z,12\n";
        let p = parse_fcd_csv(body.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 1);
        let kinds: Vec<_> = p.errors.iter().map(|e| (e.line, e.kind.clone())).collect();
        assert_eq!(kinds[0], (2, RowErrorKind::Misaligned));
        assert_eq!(kinds[1], (3, RowErrorKind::NegativeSpeed));
        assert!(matches!(kinds[2], (4, RowErrorKind::BadInstant(_))));
        assert_eq!(kinds[3], (5, RowErrorKind::FieldCount { expected: 3, found: 2 }));
        assert!(matches!(kinds[4], (6, RowErrorKind::BadNumber(_))));
    }

    #[test]
    fn fcd_bad_header_is_fatal() {
        assert!(matches!(
            parse_fcd_csv("a,b,c\n".as_bytes()),
            Err(SourceError::BadHeader { .. })
        ));
        assert!(matches!(parse_fcd_csv("".as_bytes()), Err(SourceError::BadHeader { .. })));
    }

    #[test]
    fn query_rows() {
        let body = "origin,destination,departure,issued_at\n\
                    S1,S3,2017-12-17T14:30:00Z,2017-12-17T09:12:00Z\n\
                    S1,S1,2017-12-17T14:30:00Z,2017-12-17T09:12:00Z\n\
                    52.36;9.73,S2,2017-12-17T14:30:00Z,2017-12-17T09:12:00Z\n\
                    95;9.73,S2,2017-12-17T14:30:00Z,2017-12-17T09:12:00Z\n";
        let p = parse_query_log_csv(body.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.records[0].origin, Endpoint::Stop("S1".into()));
        assert_eq!(p.records[1].origin, Endpoint::Coord(GeoPoint::new(52.36, 9.73).unwrap()));
        assert_eq!(p.errors[0], RowError { line: 3, kind: RowErrorKind::SameEndpoints });
        assert!(matches!(p.errors[1].kind, RowErrorKind::BadEndpoint(_)));
    }

    #[test]
    fn invalid_utf8_row_is_reported() {
        let mut body = b"segment_id,interval_start,avg_speed_kmh\n".to_vec();
        body.extend_from_slice(b"s\xff,2017-12-17T15:00:00Z,1\nok,2017-12-17T15:00:00Z,2\n");
        let p = parse_fcd_csv(body.as_slice()).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.errors, vec![RowError { line: 2, kind: RowErrorKind::InvalidUtf8 }]);
    }

    const FEED: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<rss version="2.0" xmlns:georss="http://www.georss.org/georss">
  <channel>
    <title>Verkehr</title>
    <item>
      <title>Unfall auf A2</title>
      <description><![CDATA[Zwei Fahrstreifen gesperrt]]></description>
      <guid>n-1</guid>
      <pubDate>Sun, 17 Dec 2017 14:05:00 +0100</pubDate>
      <georss:point>52.40 9.80</georss:point>
    </item>
    <item>
      <title>Stauwarnung &amp; Baustelle</title>
      <pubDate>Sun, 17 Dec 2017 15:00:00 GMT</pubDate>
    </item>
    <item>
      <title>Ohne Datum</title>
    </item>
  </channel>
</rss>"#;

    #[test]
    fn rss_items() {
        let parsed = parse_traffic_feed(FEED.as_bytes()).unwrap();
        assert_eq!(parsed.notifications.len(), 2);
        let first = &parsed.notifications[0];
        assert_eq!(first.category, NotificationCategory::Accident);
        assert_eq!(first.id, "n-1");
        assert_eq!(first.description, "Zwei Fahrstreifen gesperrt");
        assert_eq!(format_instant(&first.published_at), "2017-12-17T13:05:00Z");
        assert_eq!(first.location, Some(GeoPoint::new(52.40, 9.80).unwrap()));
        assert_eq!(parsed.notifications[1].title, "Stauwarnung & Baustelle");
        assert_eq!(parsed.notifications[1].category, NotificationCategory::Warning);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn rss_empty_and_truncated() {
        let empty = r#"<rss version="2.0"><channel><title>x</title></channel></rss>"#;
        assert!(parse_traffic_feed(empty.as_bytes()).unwrap().notifications.is_empty());
        let truncated = &FEED[..FEED.len() / 2];
        assert!(matches!(
            parse_traffic_feed(truncated.as_bytes()),
            Err(SourceError::MalformedXml(_))
        ));
        assert!(matches!(parse_traffic_feed("".as_bytes()), Err(SourceError::MalformedXml(_))));
        assert!(matches!(
            parse_traffic_feed("<feed></feed>".as_bytes()),
            Err(SourceError::NotRss(_))
        ));
    }

    #[test]
    fn rss_keyword_categories() {
        assert_eq!(NotificationCategory::from_title("Accident on B6"), NotificationCategory::Accident);
        assert_eq!(NotificationCategory::from_title("Weather WARNING"), NotificationCategory::Warning);
        assert_eq!(NotificationCategory::from_title("Baustelle"), NotificationCategory::Other);
    }

    #[test]
    fn geojson_segments() {
        let doc = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"segment_id":"seg42","name":"Hildesheimer Str"},
             "geometry":{"type":"LineString","coordinates":[[9.73,52.37],[9.74,52.37],[9.75,52.38]]}}]}"#;
        let segs = load_street_segments(doc.as_bytes()).unwrap();
        assert_eq!(segs.len(), 1);
        let first = segs[0].geometry.points()[0];
        assert_eq!((first.lat(), first.lon()), (52.37, 9.73));
        assert_eq!(segs[0].geometry.points().len(), 3);
        assert_eq!(segs[0].name.as_deref(), Some("Hildesheimer Str"));
    }

    #[test]
    fn geojson_errors() {
        let point = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"segment_id":"p"},"geometry":{"type":"Point","coordinates":[9.7,52.3]}}]}"#;
        assert!(matches!(
            load_street_segments(point.as_bytes()),
            Err(SourceError::NonLineStringGeometry { index: 0, .. })
        ));
        let no_id = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{},"geometry":{"type":"LineString","coordinates":[[9.7,52.3],[9.8,52.3]]}}]}"#;
        assert!(matches!(
            load_street_segments(no_id.as_bytes()),
            Err(SourceError::MissingSegmentId { index: 0 })
        ));
        assert!(matches!(
            load_street_segments("[1,2".as_bytes()),
            Err(SourceError::InvalidGeoJson(_))
        ));
    }

    #[test]
    fn alignment_partitions_records() {
        let doc = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"segment_id":"seg42"},
             "geometry":{"type":"LineString","coordinates":[[9.73,52.37],[9.74,52.37]]}}]}"#;
        let segs = load_street_segments(doc.as_bytes()).unwrap();
        let fcd = parse_fcd_csv(
            "segment_id,interval_start,avg_speed_kmh\nseg42,2017-12-17T15:00:00Z,34.5\nseg7,2017-12-17T15:00:00Z,20\n".as_bytes(),
        )
        .unwrap()
        .records;
        let a = align_fcd_to_segments(&fcd, &segs);
        assert_eq!(a.joined.len(), 1);
        assert_eq!(a.joined[0].1.segment_id, "seg42");
        assert_eq!(a.unmatched_ids.iter().collect::<Vec<_>>(), vec!["seg7"]);
    }
}
