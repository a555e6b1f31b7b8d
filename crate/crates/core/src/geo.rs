//! Geometry primitives: validated coordinates, great-circle distance,
//! point-to-polyline distance and a uniform-grid spatial index.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default grid cell size in degrees (~550 m of latitude).
pub const DEFAULT_CELL_SIZE_DEG: f64 = 0.005;

const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline repeats point {0} consecutively")]
    RepeatedPoint(usize),
}

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;

    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn distance_to(&self, other: &GeoPoint) -> f64 {
        haversine_distance(*self, *other)
    }

    /// Moves the point by local east/north offsets in meters.
    ///
    /// Uses the same equirectangular approximation as the polyline math, so it
    /// is only meaningful for offsets up to a few kilometers. The result is
    /// clamped into the valid coordinate range.
    pub fn offset_m(&self, east: f64, north: f64) -> GeoPoint {
        let lat = (self.lat + north / METERS_PER_DEGREE).clamp(-90.0, 90.0);
        let cos = self.lat.to_radians().cos().max(1e-12);
        let mut lon = self.lon + east / (METERS_PER_DEGREE * cos);
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint { lat, lon }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// An ordered list of at least two points with no consecutive repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeoPoint>", into = "Vec<GeoPoint>")]
pub struct Polyline {
    points: Vec<GeoPoint>,
}

impl TryFrom<Vec<GeoPoint>> for Polyline {
    type Error = GeoError;

    fn try_from(points: Vec<GeoPoint>) -> Result<Self, Self::Error> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<GeoPoint> {
    fn from(line: Polyline) -> Self {
        line.points
    }
}

impl Polyline {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if points.len() < 2 {
            return Err(GeoError::TooFewPoints(points.len()));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(GeoError::RepeatedPoint(i + 1));
        }
        Ok(Self { points })
    }

    /// Builds a polyline after collapsing consecutive repeats; `None` when
    /// fewer than two distinct points remain.
    pub fn from_points_dedup(points: impl IntoIterator<Item = GeoPoint>) -> Option<Self> {
        let mut out: Vec<GeoPoint> = Vec::new();
        for p in points {
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        Polyline::new(out).ok()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn length_m(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| haversine_distance(w[0], w[1]))
            .sum()
    }
}

/// Minimum distance in meters from `p` to any segment of `line`.
///
/// Computed in a local equirectangular projection centered on `p`.
pub fn point_to_polyline_distance(p: GeoPoint, line: &Polyline) -> f64 {
    let cos_lat = p.lat.to_radians().cos();
    let project = |q: &GeoPoint| -> (f64, f64) {
        let mut dlon = q.lon - p.lon;
        if dlon > 180.0 {
            dlon -= 360.0;
        } else if dlon < -180.0 {
            dlon += 360.0;
        }
        (
            dlon * cos_lat * METERS_PER_DEGREE,
            (q.lat - p.lat) * METERS_PER_DEGREE,
        )
    };
    line.points
        .windows(2)
        .map(|w| distance_origin_to_segment(project(&w[0]), project(&w[1])))
        .fold(f64::INFINITY, f64::min)
}

fn distance_origin_to_segment(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (-(a.0 * dx + a.1 * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (x, y) = (a.0 + t * dx, a.1 + t * dy);
    (x * x + y * y).sqrt()
}

/// Uniform lat/lon grid over point entries, immutable once built.
#[derive(Debug, Clone)]
pub struct SpatialIndex<Id> {
    cell_size: f64,
    lon_cells: i64,
    cells: HashMap<(i64, i64), Vec<(Id, GeoPoint)>>,
    len: usize,
}

impl<Id: Clone + Ord> SpatialIndex<Id> {
    pub fn build(entries: impl IntoIterator<Item = (Id, GeoPoint)>) -> Self {
        Self::with_cell_size(entries, DEFAULT_CELL_SIZE_DEG)
    }

    pub fn with_cell_size(entries: impl IntoIterator<Item = (Id, GeoPoint)>, cell_size: f64) -> Self {
        assert!(
            cell_size.is_finite() && cell_size > 0.0,
            "cell size must be positive"
        );
        let lon_cells = (360.0 / cell_size).ceil() as i64;
        let mut index = Self {
            cell_size,
            lon_cells,
            cells: HashMap::new(),
            len: 0,
        };
        for (id, p) in entries {
            let key = index.cell_of(p);
            index.cells.entry(key).or_default().push((id, p));
            index.len += 1;
        }
        index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Id, GeoPoint)> {
        self.cells.values().flatten()
    }

    fn cell_of(&self, p: GeoPoint) -> (i64, i64) {
        let row = ((p.lat + 90.0) / self.cell_size).floor() as i64;
        let col = ((p.lon + 180.0) / self.cell_size).floor() as i64;
        (row, col.rem_euclid(self.lon_cells))
    }

    /// All indexed entries within `radius` meters of `p`, nearest first,
    /// ties broken by id.
    pub fn nearest_within(&self, p: GeoPoint, radius: f64) -> Vec<(Id, f64)> {
        if !(radius > 0.0) || self.is_empty() {
            return Vec::new();
        }
        let lat_span = radius / METERS_PER_DEGREE;
        let (row, col) = self.cell_of(p);
        let row_rings = ((lat_span / self.cell_size).ceil() as i64).max(1);

        // widest longitude span over the latitude band the query can touch
        let max_abs_lat = (p.lat.abs() + lat_span).min(90.0);
        let cos = max_abs_lat.to_radians().cos();
        let col_rings = if cos <= 1e-9 {
            self.lon_cells
        } else {
            let lon_span = lat_span / cos;
            ((lon_span / self.cell_size).ceil() as i64).max(1)
        };

        let visited_cells = (2 * row_rings + 1).saturating_mul((2 * col_rings + 1).min(self.lon_cells));
        let mut hits: Vec<(Id, f64)> = Vec::new();
        let mut consider = |bucket: &Vec<(Id, GeoPoint)>| {
            for (id, q) in bucket {
                let d = haversine_distance(p, *q);
                if d <= radius {
                    hits.push((id.clone(), d));
                }
            }
        };
        if visited_cells as usize >= self.cells.len() || 2 * col_rings + 1 >= self.lon_cells {
            self.cells.values().for_each(&mut consider);
        } else {
            for r in row - row_rings..=row + row_rings {
                for c in col - col_rings..=col + col_rings {
                    if let Some(bucket) = self.cells.get(&(r, c.rem_euclid(self.lon_cells))) {
                        consider(bucket);
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        hits
    }

    /// The closest entry regardless of distance.
    pub fn nearest(&self, p: GeoPoint) -> Option<(Id, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut radius = self.cell_size * METERS_PER_DEGREE;
        loop {
            if let Some(first) = self.nearest_within(p, radius).into_iter().next() {
                return Some(first);
            }
            if radius > std::f64::consts::PI * EARTH_RADIUS_M {
                return None;
            }
            radius *= 4.0;
        }
    }
}
