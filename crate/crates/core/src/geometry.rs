//! Coordinates, distances, trap arrays and the discretized state space.
//!
//! Geographic inputs (`GeoPoint`) are projected onto a local metric plane
//! (`PlanePoint`) with an equirectangular projection about a recorded
//! origin. Everything the likelihood touches lives on that plane, in metres.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrError};

/// Mean Earth radius used by every great-circle computation, in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest extent the local projection accepts.
pub const MAX_PROJECTION_SPAN_M: f64 = 200_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(ScrError::InvalidInput(format!(
                "coordinate out of range: lon {lon}, lat {lat}"
            )));
        }
        Ok(Self { lon, lat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist_sq(&self, other: &PlanePoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &PlanePoint) -> f64 {
        self.dist_sq(other).sqrt()
    }
}

/// Great-circle distance in metres on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection about a fixed origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub origin: GeoPoint,
}

impl Projection {
    pub fn new(origin: GeoPoint) -> Self {
        Self { origin }
    }

    pub fn project(&self, p: GeoPoint) -> PlanePoint {
        let cos_lat0 = self.origin.lat.to_radians().cos();
        PlanePoint {
            x: EARTH_RADIUS_M * (p.lon - self.origin.lon).to_radians() * cos_lat0,
            y: EARTH_RADIUS_M * (p.lat - self.origin.lat).to_radians(),
        }
    }

    pub fn unproject(&self, p: PlanePoint) -> GeoPoint {
        let cos_lat0 = self.origin.lat.to_radians().cos();
        GeoPoint {
            lon: self.origin.lon + (p.x / (EARTH_RADIUS_M * cos_lat0)).to_degrees(),
            lat: self.origin.lat + (p.y / EARTH_RADIUS_M).to_degrees(),
        }
    }
}

/// Projects `points` onto the local plane about `origin`.
///
/// Rejects inputs whose bounding box (origin included) spans more than
/// [`MAX_PROJECTION_SPAN_M`].
pub fn project_to_plane(points: &[GeoPoint], origin: GeoPoint) -> Result<Vec<PlanePoint>> {
    let span = geo_span(points.iter().copied().chain(std::iter::once(origin)));
    if span > MAX_PROJECTION_SPAN_M {
        return Err(ScrError::ExtentExceeded {
            span_m: span,
            limit_m: MAX_PROJECTION_SPAN_M,
        });
    }
    let proj = Projection::new(origin);
    Ok(points.iter().map(|&p| proj.project(p)).collect())
}

fn geo_span(points: impl Iterator<Item = GeoPoint>) -> f64 {
    let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
    let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        lon = (lon.0.min(p.lon), lon.1.max(p.lon));
        lat = (lat.0.min(p.lat), lat.1.max(p.lat));
    }
    if !lon.0.is_finite() {
        return 0.0;
    }
    let lo = GeoPoint { lon: lon.0, lat: lat.0 };
    let hi = GeoPoint { lon: lon.1, lat: lat.1 };
    let lo_hi = GeoPoint { lon: lon.0, lat: lat.1 };
    let hi_lo = GeoPoint { lon: lon.1, lat: lat.0 };
    haversine_distance(lo, hi).max(haversine_distance(lo_hi, hi_lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trap {
    pub id: String,
    pub point: PlanePoint,
    /// Geographic position when the trap was read from lon/lat input.
    pub geo: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapArray {
    traps: Vec<Trap>,
    /// Trap-level covariates, one value per trap.
    pub covariates: BTreeMap<String, Vec<f64>>,
    pub projection: Option<Projection>,
}

impl TrapArray {
    pub fn new(traps: Vec<Trap>) -> Result<Self> {
        if traps.is_empty() {
            return Err(ScrError::Empty("trap array has no traps".into()));
        }
        let mut seen = HashSet::new();
        for t in &traps {
            if !seen.insert(t.id.as_str()) {
                return Err(ScrError::InvalidInput(format!("duplicate trap id `{}`", t.id)));
            }
            if !t.point.x.is_finite() || !t.point.y.is_finite() {
                return Err(ScrError::InvalidInput(format!(
                    "trap `{}` has non-finite coordinates",
                    t.id
                )));
            }
        }
        Ok(Self {
            traps,
            covariates: BTreeMap::new(),
            projection: None,
        })
    }

    /// Builds an array from planar points with ids `"1"`, `"2"`, ...
    pub fn from_points(points: &[PlanePoint]) -> Result<Self> {
        Self::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &point)| Trap {
                    id: (i + 1).to_string(),
                    point,
                    geo: None,
                })
                .collect(),
        )
    }

    /// A `rows × cols` square grid with the given spacing, lower-left trap at the origin.
    pub fn grid(rows: usize, cols: usize, spacing: f64) -> Result<Self> {
        let points: Vec<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| PlanePoint::new(c as f64 * spacing, r as f64 * spacing)))
            .collect();
        Self::from_points(&points)
    }

    pub fn len(&self) -> usize {
        self.traps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traps.is_empty()
    }

    pub fn traps(&self) -> &[Trap] {
        &self.traps
    }

    pub fn points(&self) -> Vec<PlanePoint> {
        self.traps.iter().map(|t| t.point).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.traps.iter().position(|t| t.id == id)
    }

    pub fn set_covariate(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.traps.len() {
            return Err(ScrError::InvalidInput(format!(
                "trap covariate `{name}` has {} values for {} traps",
                values.len(),
                self.traps.len()
            )));
        }
        self.covariates.insert(name.to_string(), values);
        Ok(())
    }

    /// Geographic positions of all traps, if every trap has one.
    pub fn geo_points(&self) -> Option<Vec<GeoPoint>> {
        self.traps.iter().map(|t| t.geo).collect()
    }

    /// Mean nearest-neighbour distance between traps; `None` for a single trap.
    pub fn mean_spacing(&self) -> Option<f64> {
        if self.traps.len() < 2 {
            return None;
        }
        let total: f64 = self
            .traps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                self.traps
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| a.point.dist(&b.point))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        Some(total / self.traps.len() as f64)
    }

    /// Reads `trap_id,lon,lat[,covariate...]`, projecting about `origin`
    /// (the trap centroid when `None`), or planar `trap_id,x,y[,covariate...]`
    /// in metres.
    pub fn read_csv<R: Read>(reader: R, origin: Option<GeoPoint>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let geographic = match (headers.get(0), headers.get(1), headers.get(2)) {
            (Some("trap_id"), Some("lon"), Some("lat")) => true,
            (Some("trap_id"), Some("x"), Some("y")) => false,
            _ => {
                return Err(ScrError::InvalidInput(
                    "trap file header must start with `trap_id,lon,lat` or `trap_id,x,y`".into(),
                ))
            }
        };
        let cov_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        let mut covs = vec![Vec::new(); cov_names.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i).unwrap_or("").parse::<f64>().map_err(|_| {
                    ScrError::InvalidInput(format!("trap file row {}: bad number in column {}", line + 2, i + 1))
                })
            };
            ids.push(rec.get(0).unwrap_or("").to_string());
            coords.push((field(1)?, field(2)?));
            for (c, col) in covs.iter_mut().enumerate() {
                col.push(field(3 + c)?);
            }
        }
        if ids.is_empty() {
            return Err(ScrError::Empty("trap file has no rows".into()));
        }
        let mut arr = if geographic {
            let geos = coords
                .iter()
                .map(|&(lon, lat)| GeoPoint::new(lon, lat))
                .collect::<Result<Vec<_>>>()?;
            let origin = origin.unwrap_or_else(|| GeoPoint {
                lon: geos.iter().map(|g| g.lon).sum::<f64>() / geos.len() as f64,
                lat: geos.iter().map(|g| g.lat).sum::<f64>() / geos.len() as f64,
            });
            let planar = project_to_plane(&geos, origin)?;
            let traps = ids
                .into_iter()
                .zip(planar)
                .zip(&geos)
                .map(|((id, point), &geo)| Trap {
                    id,
                    point,
                    geo: Some(geo),
                })
                .collect();
            let mut arr = Self::new(traps)?;
            arr.projection = Some(Projection::new(origin));
            arr
        } else {
            let traps = ids
                .into_iter()
                .zip(coords)
                .map(|(id, (x, y))| Trap {
                    id,
                    point: PlanePoint::new(x, y),
                    geo: None,
                })
                .collect();
            Self::new(traps)?
        };
        for (name, values) in cov_names.into_iter().zip(covs) {
            arr.set_covariate(&name, values)?;
        }
        Ok(arr)
    }

    /// Writes planar `trap_id,x,y[,covariate...]`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["trap_id".to_string(), "x".into(), "y".into()];
        header.extend(self.covariates.keys().cloned());
        w.write_record(&header)?;
        for (j, t) in self.traps.iter().enumerate() {
            let mut row = vec![t.id.clone(), t.point.x.to_string(), t.point.y.to_string()];
            row.extend(self.covariates.values().map(|v| v[j].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv_path(path: &Path, origin: Option<GeoPoint>) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| ScrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::read_csv(file, origin)
    }
}

/// Candidate activity-centre locations with equal cell areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    points: Vec<PlanePoint>,
    cell_area: f64,
    pub covariates: BTreeMap<String, Vec<f64>>,
    pub projection: Option<Projection>,
}

impl StateSpace {
    pub fn new(points: Vec<PlanePoint>, cell_area: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(ScrError::Empty("state space has no points".into()));
        }
        if !(cell_area > 0.0 && cell_area.is_finite()) {
            return Err(ScrError::InvalidInput(format!(
                "cell area must be positive, got {cell_area}"
            )));
        }
        let mut seen = HashSet::new();
        for p in &points {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(ScrError::InvalidInput(
                    "state-space point with non-finite coordinates".into(),
                ));
            }
            if !seen.insert((p.x.to_bits(), p.y.to_bits())) {
                return Err(ScrError::InvalidInput(format!(
                    "duplicate state-space point ({}, {})",
                    p.x, p.y
                )));
            }
        }
        Ok(Self {
            points,
            cell_area,
            covariates: BTreeMap::new(),
            projection: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PlanePoint] {
        &self.points
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    pub fn total_area(&self) -> f64 {
        self.cell_area * self.points.len() as f64
    }

    pub fn set_covariate(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.points.len() {
            return Err(ScrError::InvalidInput(format!(
                "state-space covariate `{name}` has {} values for {} points",
                values.len(),
                self.points.len()
            )));
        }
        self.covariates.insert(name.to_string(), values);
        Ok(())
    }

    /// Geographic positions of the points, available when a projection is recorded.
    pub fn geo_points(&self) -> Option<Vec<GeoPoint>> {
        let proj = self.projection?;
        Some(self.points.iter().map(|&p| proj.unproject(p)).collect())
    }

    /// Writes `point_id,x,y,cell_area[,covariate...]`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["point_id".to_string(), "x".into(), "y".into(), "cell_area".into()];
        header.extend(self.covariates.keys().cloned());
        w.write_record(&header)?;
        for (u, p) in self.points.iter().enumerate() {
            let mut row = vec![
                (u + 1).to_string(),
                p.x.to_string(),
                p.y.to_string(),
                self.cell_area.to_string(),
            ];
            row.extend(self.covariates.values().map(|v| v[u].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Square lattice covering the trap bounding box expanded by `buffer`.
///
/// Returns the state space and any warnings (a spacing coarser than the
/// buffer makes the integration grid coarse but is not an error).
pub fn build_state_space(traps: &TrapArray, buffer: f64, spacing: f64) -> Result<(StateSpace, Vec<String>)> {
    if traps.is_empty() {
        return Err(ScrError::Empty("cannot build a state space without traps".into()));
    }
    if !(buffer > 0.0) || !(spacing > 0.0) {
        return Err(ScrError::InvalidInput(format!(
            "buffer and spacing must be positive (buffer {buffer}, spacing {spacing})"
        )));
    }
    let mut warnings = Vec::new();
    if spacing > buffer {
        let msg = format!("state-space spacing {spacing} m exceeds buffer {buffer} m; integration grid is coarse");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let pts = traps.points();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let steps = |lo: f64, hi: f64| ((hi - lo + 2.0 * buffer) / spacing + 1e-9).floor() as usize + 1;
    let nx = steps(xmin, xmax);
    let ny = steps(ymin, ymax);
    let x0 = xmin - buffer;
    let y0 = ymin - buffer;
    let points = (0..ny)
        .flat_map(|r| (0..nx).map(move |c| PlanePoint::new(x0 + c as f64 * spacing, y0 + r as f64 * spacing)))
        .collect();
    let mut ss = StateSpace::new(points, spacing * spacing)?;
    ss.projection = traps.projection;
    log::info!(
        "state space: {} points ({nx} x {ny}), cell area {} m^2",
        ss.len(),
        ss.cell_area()
    );
    Ok((ss, warnings))
}

/// Inverse-distance-weighted interpolation over the `k_neighbors` nearest samples.
///
/// A target that coincides with a sample takes that sample's value.
pub fn idw_interpolate(
    samples: &[(PlanePoint, f64)],
    targets: &[PlanePoint],
    power: f64,
    k_neighbors: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(ScrError::Empty("IDW needs at least one sample".into()));
    }
    if !(power > 0.0) || k_neighbors == 0 {
        return Err(ScrError::InvalidInput(format!(
            "IDW needs power > 0 and k_neighbors >= 1 (got {power}, {k_neighbors})"
        )));
    }
    let k = k_neighbors.min(samples.len());
    let mut scratch: Vec<(f64, f64)> = Vec::with_capacity(samples.len());
    let out = targets
        .iter()
        .map(|t| {
            scratch.clear();
            scratch.extend(samples.iter().map(|(p, v)| (p.dist(t), *v)));
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
                scratch.truncate(k);
            }
            if let Some(&(_, v)) = scratch.iter().find(|(d, _)| *d == 0.0) {
                return v;
            }
            let (num, den) = scratch.iter().fold((0.0, 0.0), |(num, den), &(d, v)| {
                let w = d.powf(-power);
                (num + w * v, den + w)
            });
            num / den
        })
        .collect();
    Ok(out)
}

/// Haversine distance from `reference` to each target, in metres.
pub fn proximity_values(reference: GeoPoint, targets: &[GeoPoint]) -> Vec<f64> {
    targets.iter().map(|&t| haversine_distance(reference, t)).collect()
}
