//! Planar polygon primitives in lon/lat degree space.

use super::LonLat;

/// Sign of the turn `a → b → c`.
fn orient(a: LonLat, b: LonLat, c: LonLat) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(p: LonLat, a: LonLat, b: LonLat) -> bool {
    orient(a, b, p) == 0.0
        && p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

/// Closed segment intersection (touching and collinear overlap count).
pub fn segments_intersect(p1: LonLat, p2: LonLat, q1: LonLat, q2: LonLat) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) || on_segment(q2, p1, p2)
}

pub fn edges(ring: &[LonLat]) -> impl Iterator<Item = (LonLat, LonLat)> + '_ {
    ring.iter()
        .copied()
        .zip(ring.iter().copied().cycle().skip(1))
}

/// Point in polygon with the boundary counted as inside.
pub fn contains_point(ring: &[LonLat], p: LonLat) -> bool {
    let mut inside = false;
    for (a, b) in edges(ring) {
        if on_segment(p, a, b) {
            return true;
        }
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Signed shoelace area in square degrees.
pub fn signed_area(ring: &[LonLat]) -> f64 {
    let Some(&o) = ring.first() else { return 0.0 };
    edges(ring)
        .map(|(a, b)| (a.lon - o.lon) * (b.lat - o.lat) - (b.lon - o.lon) * (a.lat - o.lat))
        .sum::<f64>()
        / 2.0
}

/// Whether any two non-adjacent edges touch, or adjacent edges fold back
/// onto each other.
pub fn self_intersects(ring: &[LonLat]) -> bool {
    let n = ring.len();
    let e: Vec<(LonLat, LonLat)> = edges(ring).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is fine; a collinear fold-back is not.
                let (a, b) = e[i];
                let (c, d) = e[j];
                let (shared, far_i, far_j) = if b == c { (b, a, d) } else { (a, b, c) };
                if orient(far_i, shared, far_j) == 0.0
                    && (on_segment(far_j, far_i, shared) || on_segment(far_i, shared, far_j))
                {
                    return true;
                }
            } else if segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lon_lo: f64,
    pub lon_hi: f64,
    pub lat_lo: f64,
    pub lat_hi: f64,
}

impl Rect {
    pub fn corners(&self) -> [LonLat; 4] {
        [
            LonLat::new(self.lon_lo, self.lat_lo),
            LonLat::new(self.lon_hi, self.lat_lo),
            LonLat::new(self.lon_hi, self.lat_hi),
            LonLat::new(self.lon_lo, self.lat_hi),
        ]
    }

    pub fn contains(&self, p: LonLat) -> bool {
        p.lon >= self.lon_lo && p.lon <= self.lon_hi && p.lat >= self.lat_lo && p.lat <= self.lat_hi
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.lon_lo <= o.lon_hi && o.lon_lo <= self.lon_hi && self.lat_lo <= o.lat_hi && o.lat_lo <= self.lat_hi
    }

    pub fn area(&self) -> f64 {
        (self.lon_hi - self.lon_lo) * (self.lat_hi - self.lat_lo)
    }
}

pub fn bounding_rect(ring: &[LonLat]) -> Rect {
    ring.iter().fold(
        Rect {
            lon_lo: f64::INFINITY,
            lon_hi: f64::NEG_INFINITY,
            lat_lo: f64::INFINITY,
            lat_hi: f64::NEG_INFINITY,
        },
        |r, p| Rect {
            lon_lo: r.lon_lo.min(p.lon),
            lon_hi: r.lon_hi.max(p.lon),
            lat_lo: r.lat_lo.min(p.lat),
            lat_hi: r.lat_hi.max(p.lat),
        },
    )
}

/// Closed intersection of two simple polygons.
pub fn polygons_intersect(a: &[LonLat], b: &[LonLat]) -> bool {
    if !bounding_rect(a).overlaps(&bounding_rect(b)) {
        return false;
    }
    for (p1, p2) in edges(a) {
        for (q1, q2) in edges(b) {
            if segments_intersect(p1, p2, q1, q2) {
                return true;
            }
        }
    }
    contains_point(b, a[0]) || contains_point(a, b[0])
}

/// Closed intersection of a rectangle and a simple polygon.
pub fn rect_intersects_polygon(r: &Rect, ring: &[LonLat]) -> bool {
    polygons_intersect(&r.corners(), ring)
}

/// Sutherland–Hodgman clip of `ring` against `r`. The area of the result
/// equals the area of the intersection even for concave input.
pub fn clip_to_rect(ring: &[LonLat], r: &Rect) -> Vec<LonLat> {
    type Inside = fn(LonLat, &Rect) -> bool;
    type Cut = fn(LonLat, LonLat, &Rect) -> LonLat;
    let planes: [(Inside, Cut); 4] = [
        (|p, r| p.lon >= r.lon_lo, |a, b, r| {
            let t = (r.lon_lo - a.lon) / (b.lon - a.lon);
            LonLat::new(r.lon_lo, a.lat + t * (b.lat - a.lat))
        }),
        (|p, r| p.lon <= r.lon_hi, |a, b, r| {
            let t = (r.lon_hi - a.lon) / (b.lon - a.lon);
            LonLat::new(r.lon_hi, a.lat + t * (b.lat - a.lat))
        }),
        (|p, r| p.lat >= r.lat_lo, |a, b, r| {
            let t = (r.lat_lo - a.lat) / (b.lat - a.lat);
            LonLat::new(a.lon + t * (b.lon - a.lon), r.lat_lo)
        }),
        (|p, r| p.lat <= r.lat_hi, |a, b, r| {
            let t = (r.lat_hi - a.lat) / (b.lat - a.lat);
            LonLat::new(a.lon + t * (b.lon - a.lon), r.lat_hi)
        }),
    ];
    let mut out: Vec<LonLat> = ring.to_vec();
    for (inside, cut) in planes {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            match (inside(cur, r), inside(prev, r)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cut(prev, cur, r));
                    out.push(cur);
                }
                (false, true) => out.push(cut(prev, cur, r)),
                (false, false) => {}
            }
        }
    }
    out
}

/// Area of `ring ∩ r` in square degrees.
pub fn clipped_area(ring: &[LonLat], r: &Rect) -> f64 {
    let clipped = clip_to_rect(ring, r);
    if clipped.len() < 3 {
        return 0.0;
    }
    signed_area(&clipped).abs()
}
