//! Approximating volumes by sets of disjoint tree nodes.
//!
//! A polygon-frustum is covered by the cross product of a set of surface
//! strings (grid cells found by a breadth-first walk over spatial neighbors,
//! then merged pairwise into parents) and a single altitude string (the
//! longest common prefix of the encoded altitude bounds). Covers are always
//! over-approximations.

// `!(a < b)` comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod planar;

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{interleave, rect_area, BitString, BitStringPair, EarthModel, GeoError, GeoPoint, NodeFrustum};
use planar::Rect;

/// Upper bound on grid cells examined by one surface cover.
pub const MAX_COVER_CELLS: usize = 1 << 20;

/// Circles are approximated by a circumscribed polygon with this many sides.
pub const CIRCLE_SIDES: usize = 16;

/// Relative tolerance when comparing a cell area against the target area.
const AREA_RTOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverError {
    #[error("polygon needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon ring intersects itself")]
    SelfIntersecting,
    #[error("altitude range [{0}, {1}] is empty or inverted")]
    InvertedAltitude(f64, f64),
    #[error(transparent)]
    Range(#[from] GeoError),
    #[error("edge spans {0:.3}° of longitude; split polygons at the antimeridian or densify edges longer than 180°")]
    AntimeridianEdge(f64),
    #[error("polygon has zero area")]
    Degenerate,
    #[error("volume has no frustums")]
    EmptyVolume,
    #[error("cover would exceed {MAX_COVER_CELLS} grid cells; use a larger relative grid size")]
    TooManyCells,
    #[error("relative grid size must be finite and non-negative, got {0}")]
    InvalidGridSize(f64),
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
}

/// A surface vertex in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Self {
        LonLat { lon, lat }
    }
}

/// A lon/lat polygon extruded between two altitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonFrustum {
    pub ring: Vec<LonLat>,
    pub alt_min: f64,
    pub alt_max: f64,
}

/// The non-empty union of polygon-frustums claimed by a certificate or a
/// query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub frustums: Vec<PolygonFrustum>,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RelativeGridSize(f64);

impl RelativeGridSize {
    pub fn new(f: f64) -> Result<Self, CoverError> {
        if !f.is_finite() || f < 0.0 {
            return Err(CoverError::InvalidGridSize(f));
        }
        Ok(RelativeGridSize(f))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

impl PolygonFrustum {
    /// Builds a frustum; a closing vertex equal to the first one is dropped.
    pub fn new(mut ring: Vec<LonLat>, alt_min: f64, alt_max: f64) -> Result<Self, CoverError> {
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        let f = PolygonFrustum { ring, alt_min, alt_max };
        f.validate(&EarthModel::WGS84)?;
        Ok(f)
    }

    /// Axis-aligned lon/lat rectangle.
    pub fn rect(lon_lo: f64, lat_lo: f64, lon_hi: f64, lat_hi: f64, alt_min: f64, alt_max: f64) -> Result<Self, CoverError> {
        Self::new(
            vec![
                LonLat::new(lon_lo, lat_lo),
                LonLat::new(lon_hi, lat_lo),
                LonLat::new(lon_hi, lat_hi),
                LonLat::new(lon_lo, lat_hi),
            ],
            alt_min,
            alt_max,
        )
    }

    pub fn validate(&self, model: &EarthModel) -> Result<(), CoverError> {
        if self.ring.len() < 3 {
            return Err(CoverError::TooFewVertices(self.ring.len()));
        }
        for v in &self.ring {
            model.discretize(&GeoPoint::new(v.lon, v.lat, model.min_alt))?;
        }
        for alt in [self.alt_min, self.alt_max] {
            model.discretize(&GeoPoint::new(0.0, 0.0, alt))?;
        }
        if !(self.alt_min < self.alt_max) {
            return Err(CoverError::InvertedAltitude(self.alt_min, self.alt_max));
        }
        for (a, b) in planar::edges(&self.ring) {
            let span = (b.lon - a.lon).abs();
            if span > 180.0 {
                return Err(CoverError::AntimeridianEdge(span));
            }
        }
        if planar::self_intersects(&self.ring) {
            return Err(CoverError::SelfIntersecting);
        }
        Ok(())
    }

    pub fn bounds(&self) -> Rect {
        planar::bounding_rect(&self.ring)
    }

    /// Closed containment of a point.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.alt >= self.alt_min && p.alt <= self.alt_max && planar::contains_point(&self.ring, LonLat::new(p.lon, p.lat))
    }

    /// Closed intersection with another frustum.
    pub fn intersects(&self, other: &PolygonFrustum) -> bool {
        self.alt_min <= other.alt_max
            && other.alt_min <= self.alt_max
            && planar::polygons_intersect(&self.ring, &other.ring)
    }

    /// The same polygon with every vertex moved toward the vertex centroid.
    pub fn shrink(&self, factor: f64) -> PolygonFrustum {
        let n = self.ring.len() as f64;
        let c = self.ring.iter().fold(LonLat::new(0.0, 0.0), |acc, v| LonLat::new(acc.lon + v.lon / n, acc.lat + v.lat / n));
        PolygonFrustum {
            ring: self
                .ring
                .iter()
                .map(|v| LonLat::new(c.lon + (v.lon - c.lon) * factor, c.lat + (v.lat - c.lat) * factor))
                .collect(),
            alt_min: self.alt_min,
            alt_max: self.alt_max,
        }
    }

    /// Deterministic interior samples: the vertices plus a regular grid over
    /// the bounding box restricted to the polygon, refined until at least
    /// `min_count` grid points fall inside. Sample altitudes sweep the range.
    pub fn grid_samples(&self, min_count: usize) -> Vec<GeoPoint> {
        let b = self.bounds();
        let mut out = Vec::new();
        let mut side = ((min_count as f64).sqrt().ceil() as usize).max(2);
        loop {
            out.clear();
            let mut k = 0usize;
            for i in 0..side {
                for j in 0..side {
                    let lon = b.lon_lo + (b.lon_hi - b.lon_lo) * (i as f64 + 0.5) / side as f64;
                    let lat = b.lat_lo + (b.lat_hi - b.lat_lo) * (j as f64 + 0.5) / side as f64;
                    if planar::contains_point(&self.ring, LonLat::new(lon, lat)) {
                        let t = (k % 11) as f64 / 10.0;
                        k += 1;
                        out.push(GeoPoint::new(lon, lat, self.alt_min + t * (self.alt_max - self.alt_min)));
                    }
                }
            }
            if out.len() >= min_count || side >= 4096 {
                break;
            }
            side *= 2;
        }
        for v in &self.ring {
            out.push(GeoPoint::new(v.lon, v.lat, self.alt_min));
            out.push(GeoPoint::new(v.lon, v.lat, self.alt_max));
        }
        out
    }
}

impl VolumeSpec {
    pub fn new(frustums: Vec<PolygonFrustum>) -> Result<Self, CoverError> {
        if frustums.is_empty() {
            return Err(CoverError::EmptyVolume);
        }
        Ok(VolumeSpec { frustums })
    }

    pub fn single(f: PolygonFrustum) -> Self {
        VolumeSpec { frustums: vec![f] }
    }

    pub fn validate(&self, model: &EarthModel) -> Result<(), CoverError> {
        if self.frustums.is_empty() {
            return Err(CoverError::EmptyVolume);
        }
        self.frustums.iter().try_for_each(|f| f.validate(model))
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        self.frustums.iter().any(|f| f.contains(p))
    }

    pub fn intersects(&self, other: &VolumeSpec) -> bool {
        self.frustums.iter().any(|a| other.frustums.iter().any(|b| a.intersects(b)))
    }
}

/// Closed intersection of a node frustum and a polygon-frustum.
pub fn intersects(n: &NodeFrustum, s: &PolygonFrustum) -> bool {
    n.alt_lo <= s.alt_max
        && s.alt_min <= n.alt_hi
        && planar::rect_intersects_polygon(&node_rect(n), &s.ring)
}

fn node_rect(n: &NodeFrustum) -> Rect {
    Rect {
        lon_lo: n.lon_lo,
        lon_hi: n.lon_hi,
        lat_lo: n.lat_lo,
        lat_hi: n.lat_hi,
    }
}

/// Area of the polygon's surface projection on the authalic sphere, using
/// the equal-area `(λ, sin φ)` shoelace.
pub fn polygon_area(model: &EarthModel, s: &PolygonFrustum) -> Result<f64, CoverError> {
    if s.ring.len() < 3 {
        return Err(CoverError::TooFewVertices(s.ring.len()));
    }
    let planar_area = planar::signed_area(&s.ring).abs();
    if planar_area < 1e-20 {
        return Err(CoverError::Degenerate);
    }
    let r = model.authalic_radius();
    let sum: f64 = planar::edges(&s.ring)
        .map(|(a, b)| (b.lon - a.lon).to_radians() * (a.lat.to_radians().sin() + b.lat.to_radians().sin()) / 2.0)
        .sum();
    let area = r * r * sum.abs();
    if !(area > 0.0) {
        return Err(CoverError::Degenerate);
    }
    Ok(area)
}

fn reference_surface(model: &EarthModel, s: &PolygonFrustum) -> Result<BitString, CoverError> {
    let v = s.ring[0];
    Ok(model.locate(&GeoPoint::new(v.lon, v.lat, model.min_alt))?.surface)
}

/// Smallest surface depth whose cell (the one holding the first ring
/// vertex) has area at most `f` times the polygon area.
pub fn grid_depth(model: &EarthModel, s: &PolygonFrustum, f: RelativeGridSize) -> Result<u8, CoverError> {
    let max = model.surface_bits();
    if f.get() == 0.0 {
        return Ok(max);
    }
    let target = f.get() * polygon_area(model, s)? * (1.0 + AREA_RTOL);
    let full = reference_surface(model, s)?;
    Ok((0..=max)
        .find(|&d| model.cell_area(&BitStringPair::new(full.prefix(d), BitString::EMPTY)) <= target)
        .unwrap_or(max))
}

/// Surface strings whose cells cover the polygon's surface projection.
/// The result is prefix-free and sorted.
pub fn surface_cover(model: &EarthModel, s: &PolygonFrustum, f: RelativeGridSize) -> Result<Vec<BitString>, CoverError> {
    s.validate(model)?;
    let depth = grid_depth(model, s, f)?;
    let seed = reference_surface(model, s)?.prefix(depth);
    let (bits_x, bits_y) = model.grid_bits(depth);
    let (cols, rows) = (1u64 << bits_x, 1u64 << bits_y);
    let lon_step = 360.0 / cols as f64;
    let lat_step = 180.0 / rows as f64;
    let cell_rect = |c: u64, r: u64| Rect {
        lon_lo: c as f64 * lon_step - 180.0,
        lon_hi: (c + 1) as f64 * lon_step - 180.0,
        lat_lo: r as f64 * lat_step - 90.0,
        lat_hi: (r + 1) as f64 * lat_step - 90.0,
    };
    let bounds = s.bounds();
    let poly_area = planar::signed_area(&s.ring).abs();
    // Positive-area overlap; cells that only touch the boundary are skipped.
    let overlaps = |r: &Rect| {
        r.overlaps(&bounds) && planar::clipped_area(&s.ring, r) > poly_area.min(r.area()) * AREA_RTOL
    };

    let (c0, r0) = model.grid_index(&seed);
    let neighbors = |c: u64, r: u64| {
        let mut out = Vec::with_capacity(8);
        for dc in -1i64..=1 {
            for dr in -1i64..=1 {
                let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                if (dc, dr) != (0, 0) && nc >= 0 && nr >= 0 && (nc as u64) < cols && (nr as u64) < rows {
                    out.push((nc as u64, nr as u64));
                }
            }
        }
        out
    };

    let mut visited: HashSet<(u64, u64)> = HashSet::new();
    let mut queue: VecDeque<(u64, u64)> = VecDeque::new();
    visited.insert((c0, r0));
    queue.push_back((c0, r0));
    // The reference vertex may sit on a corner of the seed cell.
    for n in neighbors(c0, r0) {
        visited.insert(n);
        queue.push_back(n);
    }
    let mut hits: BTreeSet<BitString> = BTreeSet::new();
    while let Some((c, r)) = queue.pop_front() {
        if !overlaps(&cell_rect(c, r)) {
            continue;
        }
        hits.insert(interleave(BitString::from_bits(c, bits_x), BitString::from_bits(r, bits_y)));
        for n in neighbors(c, r) {
            if visited.insert(n) {
                if visited.len() > MAX_COVER_CELLS {
                    return Err(CoverError::TooManyCells);
                }
                queue.push_back(n);
            }
        }
    }
    if hits.is_empty() {
        hits.insert(seed);
    }
    Ok(merge_siblings(hits).into_iter().collect())
}

/// Replaces sibling pairs by their parent until no siblings remain.
pub fn merge_siblings(cells: BTreeSet<BitString>) -> BTreeSet<BitString> {
    let mut set = cells;
    let Some(max_len) = set.iter().map(|s| s.len()).max() else {
        return set;
    };
    for len in (1..=max_len).rev() {
        let level: Vec<BitString> = set.iter().filter(|s| s.len() == len && s.last() == Some(false)).copied().collect();
        for left in level {
            let parent = left.pop().expect("non-empty");
            let right = parent.push(true);
            if set.contains(&right) {
                set.remove(&left);
                set.remove(&right);
                set.insert(parent);
            }
        }
    }
    set
}

/// Longest altitude string whose slab contains `[alt_min, alt_max]`.
pub fn altitude_range_string(model: &EarthModel, alt_min: f64, alt_max: f64) -> Result<BitString, CoverError> {
    if !(alt_min < alt_max) {
        return Err(CoverError::InvertedAltitude(alt_min, alt_max));
    }
    let lo = model.discretize(&GeoPoint::new(0.0, 0.0, alt_min))?.z;
    model.discretize(&GeoPoint::new(0.0, 0.0, alt_max))?;
    // Last one-meter cell that still has points below alt_max.
    let hi = (((alt_max - model.min_alt).ceil() as u64).saturating_sub(1)).clamp(lo, model.max_z());
    let a = BitString::from_bits(lo, model.bits_alt);
    let b = BitString::from_bits(hi, model.bits_alt);
    Ok(a.common_prefix(&b))
}

/// Node pairs whose union covers every frustum of `v`. Pairs nested inside
/// another returned pair are dropped.
pub fn cover_volume(model: &EarthModel, v: &VolumeSpec, f: RelativeGridSize) -> Result<Vec<BitStringPair>, CoverError> {
    if v.frustums.is_empty() {
        return Err(CoverError::EmptyVolume);
    }
    let mut pairs: BTreeSet<BitStringPair> = BTreeSet::new();
    for fr in &v.frustums {
        let alt = altitude_range_string(model, fr.alt_min, fr.alt_max)?;
        for s in surface_cover(model, fr, f)? {
            pairs.insert(BitStringPair::new(s, alt));
        }
    }
    Ok(drop_nested(pairs))
}

/// Removes every pair whose volume lies inside another pair's volume.
pub fn drop_nested(pairs: BTreeSet<BitStringPair>) -> Vec<BitStringPair> {
    let all: Vec<BitStringPair> = pairs.into_iter().collect();
    all.iter()
        .filter(|p| !all.iter().any(|q| q != *p && q.contains_volume(p)))
        .copied()
        .collect()
}

/// Circumscribed polygon around a circle of `radius` meters. Longitudes
/// past ±180° are wrapped into a second frustum; polar circles become a
/// latitude band.
pub fn circle_frustums(model: &EarthModel, center: &GeoPoint, radius: f64, alt: Option<(f64, f64)>) -> Result<Vec<PolygonFrustum>, CoverError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(CoverError::InvalidRadius(radius));
    }
    model.discretize(&GeoPoint::new(center.lon, center.lat, model.min_alt))?;
    let (alt_min, alt_max) = alt.unwrap_or((model.min_alt, model.alt_top()));
    // Smallest radius of curvature on the ellipsoid: degrees come out
    // larger than on the true surface, so the polygon stays circumscribed.
    let e2 = 1.0 - (model.semi_minor * model.semi_minor) / (model.semi_major * model.semi_major);
    let r_min = model.semi_major * (1.0 - e2);
    let circum = radius / (std::f64::consts::PI / CIRCLE_SIDES as f64).cos();
    let dlat = (circum / r_min).to_degrees();
    let lat_lo = center.lat - dlat;
    let lat_hi = center.lat + dlat;
    let cos_max = lat_lo.abs().max(lat_hi.abs()).min(90.0).to_radians().cos();
    let dlon = if cos_max > 1e-9 { (circum / (r_min * cos_max)).to_degrees() } else { f64::INFINITY };

    if lat_hi >= 90.0 || lat_lo <= -90.0 || dlon >= 180.0 {
        let band = PolygonFrustum {
            ring: vec![
                LonLat::new(-180.0, lat_lo.max(-90.0)),
                LonLat::new(0.0, lat_lo.max(-90.0)),
                LonLat::new(180.0, lat_lo.max(-90.0)),
                LonLat::new(180.0, lat_hi.min(90.0)),
                LonLat::new(0.0, lat_hi.min(90.0)),
                LonLat::new(-180.0, lat_hi.min(90.0)),
            ],
            alt_min,
            alt_max,
        };
        band.validate(model)?;
        return Ok(vec![band]);
    }

    let ring: Vec<LonLat> = (0..CIRCLE_SIDES)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_SIDES as f64;
            let north = circum * theta.sin();
            let east = circum * theta.cos();
            let lat = center.lat + (north / r_min).to_degrees();
            let lon = center.lon + (east / (r_min * cos_max)).to_degrees();
            LonLat::new(lon, lat)
        })
        .collect();

    let world = Rect { lon_lo: -180.0, lon_hi: 180.0, lat_lo: -90.0, lat_hi: 90.0 };
    let mut out = Vec::new();
    for shift in [0.0, -360.0, 360.0] {
        let shifted: Vec<LonLat> = ring.iter().map(|p| LonLat::new(p.lon + shift, p.lat)).collect();
        let b = planar::bounding_rect(&shifted);
        if !b.overlaps(&world) || planar::clipped_area(&shifted, &world) <= 0.0 {
            continue;
        }
        let clipped = if world.contains(LonLat::new(b.lon_lo, b.lat_lo)) && world.contains(LonLat::new(b.lon_hi, b.lat_hi)) {
            shifted
        } else {
            dedup_ring(planar::clip_to_rect(&shifted, &world))
        };
        let f = PolygonFrustum { ring: clipped, alt_min, alt_max };
        f.validate(model)?;
        out.push(f);
    }
    Ok(out)
}

fn dedup_ring(mut ring: Vec<LonLat>) -> Vec<LonLat> {
    ring.dedup();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

/// Cover of a circle query.
pub fn cover_circle(model: &EarthModel, center: &GeoPoint, radius: f64, alt: Option<(f64, f64)>, f: RelativeGridSize) -> Result<Vec<BitStringPair>, CoverError> {
    let v = VolumeSpec::new(circle_frustums(model, center, radius, alt)?)?;
    cover_volume(model, &v, f)
}

/// Area in m² of a lon/lat rectangle on the authalic sphere.
pub fn rect_surface_area(model: &EarthModel, r: &Rect) -> f64 {
    rect_area(model.authalic_radius(), r.lon_lo, r.lon_hi, r.lat_lo, r.lat_hi)
}
