//! Earth model, coordinate discretization and the bit-string addressing of
//! tree nodes.
//!
//! Every node of the map tree is a pair of bit strings. The surface string
//! interleaves longitude and latitude bits (starting with longitude), the
//! altitude string holds altitude bits. The pair `(ε, ε)` is the root and
//! covers the whole ellipsoidal shell between the minimum and maximum
//! altitude.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length in bytes of the canonical [`BitStringPair`] encoding.
pub const PAIR_ENCODED_LEN: usize = 11;

const MAX_SURFACE_ENCODED_BITS: u8 = 51;
const MAX_ALTITUDE_ENCODED_BITS: u8 = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("{dimension} {value} outside [{min}, {max}]")]
    OutOfRange {
        dimension: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid node: surface length {surface} (max {max_surface}), altitude length {altitude} (max {max_altitude})")]
    InvalidNode {
        surface: u8,
        altitude: u8,
        max_surface: u8,
        max_altitude: u8,
    },
    #[error("the root node has no parent")]
    RootHasNoParent,
    #[error("malformed bit string pair encoding: {0}")]
    Encoding(String),
    #[error("invalid bit string {0:?}")]
    BitString(String),
    #[error("invalid earth model: {0}")]
    Model(String),
}

/// A bit string of at most 64 bits.
///
/// The bits are kept right-aligned in `bits`; the first bit of the string is
/// the most significant of the `len` low bits. Ordering compares the length
/// first, which matches the byte order of the canonical pair encoding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BitString {
    len: u8,
    bits: u64,
}

impl BitString {
    pub const EMPTY: BitString = BitString { len: 0, bits: 0 };

    /// Builds a string from the `len` low bits of `bits`.
    pub fn from_bits(bits: u64, len: u8) -> Self {
        assert!(len <= 64, "bit string longer than 64 bits");
        let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        BitString {
            len,
            bits: bits & mask,
        }
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The bits as an integer (first bit most significant).
    pub fn value(&self) -> u64 {
        self.bits
    }

    /// Bit `i`, counted from the start of the string.
    pub fn bit(&self, i: u8) -> bool {
        assert!(i < self.len, "bit index out of range");
        (self.bits >> (self.len - 1 - i)) & 1 == 1
    }

    pub fn push(&self, bit: bool) -> Self {
        assert!(self.len < 64, "bit string overflow");
        BitString {
            len: self.len + 1,
            bits: (self.bits << 1) | bit as u64,
        }
    }

    /// Drops the last bit. Returns `None` on the empty string.
    pub fn pop(&self) -> Option<Self> {
        (self.len > 0).then(|| BitString {
            len: self.len - 1,
            bits: self.bits >> 1,
        })
    }

    pub fn last(&self) -> Option<bool> {
        (self.len > 0).then_some(self.bits & 1 == 1)
    }

    /// The first `len` bits.
    pub fn prefix(&self, len: u8) -> Self {
        assert!(len <= self.len, "prefix longer than string");
        BitString {
            len,
            bits: if len == 0 { 0 } else { self.bits >> (self.len - len) },
        }
    }

    pub fn is_prefix_of(&self, other: &BitString) -> bool {
        self.len <= other.len && other.prefix(self.len) == *self
    }

    /// Prefix-comparable strings address nested (or equal) regions.
    pub fn is_comparable(&self, other: &BitString) -> bool {
        self.is_prefix_of(other) || other.is_prefix_of(self)
    }

    pub fn common_prefix(&self, other: &BitString) -> Self {
        let mut len = self.len.min(other.len);
        while len > 0 && self.prefix(len) != other.prefix(len) {
            len -= 1;
        }
        self.prefix(len)
    }

    /// Value of the string right-padded with `fill` up to `width` bits.
    pub fn padded(&self, width: u8, fill: bool) -> u64 {
        assert!(width >= self.len && width <= 64);
        let pad = width - self.len;
        let shifted = if pad == 64 { 0 } else { self.bits << pad };
        if fill && pad > 0 {
            shifted | ((1u64 << pad) - 1)
        } else {
            shifted
        }
    }

    /// Packs the string MSB-first into `out`, zero-padding the tail.
    fn pack_into(&self, out: &mut [u8]) {
        let width = (out.len() * 8) as u8;
        let v = self.padded(width, false);
        for (i, b) in out.iter_mut().enumerate() {
            *b = (v >> (width as usize - 8 * (i + 1))) as u8;
        }
    }

    fn unpack(bytes: &[u8], len: u8) -> Result<Self, GeoError> {
        let width = (bytes.len() * 8) as u8;
        let v = bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64);
        let pad = width - len;
        if pad > 0 && v & ((1u64 << pad) - 1) != 0 {
            return Err(GeoError::Encoding("non-zero padding bits".into()));
        }
        Ok(BitString::from_bits(
            if pad == 64 { 0 } else { v >> pad },
            len,
        ))
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len == 0 {
            return f.write_str("ε");
        }
        for i in 0..self.len {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for BitString {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ε" || s == "e" {
            return Ok(BitString::EMPTY);
        }
        if s.len() > 64 {
            return Err(GeoError::BitString(s.to_string()));
        }
        s.chars().try_fold(BitString::EMPTY, |acc, c| match c {
            '0' => Ok(acc.push(false)),
            '1' => Ok(acc.push(true)),
            _ => Err(GeoError::BitString(s.to_string())),
        })
    }
}

/// Address of one tree node: a surface string and an altitude string.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BitStringPair {
    pub surface: BitString,
    pub altitude: BitString,
}

impl BitStringPair {
    pub const ROOT: BitStringPair = BitStringPair {
        surface: BitString::EMPTY,
        altitude: BitString::EMPTY,
    };

    pub fn new(surface: BitString, altitude: BitString) -> Self {
        BitStringPair { surface, altitude }
    }

    /// Parses `"surface/altitude"`, e.g. `"10/1"` or `"010/ε"`.
    pub fn parse(s: &str) -> Result<Self, GeoError> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| GeoError::BitString(s.to_string()))?;
        Ok(BitStringPair::new(a.parse()?, b.parse()?))
    }

    pub fn is_root(&self) -> bool {
        self.surface.is_empty() && self.altitude.is_empty()
    }

    /// Number of edges from the root.
    pub fn depth(&self) -> u32 {
        self.surface.len() as u32 + self.altitude.len() as u32
    }

    /// Tree parent: drop the last altitude bit, or the last surface bit when
    /// the altitude string is empty.
    pub fn parent(&self) -> Result<Self, GeoError> {
        if let Some(a) = self.altitude.pop() {
            Ok(BitStringPair::new(self.surface, a))
        } else if let Some(s) = self.surface.pop() {
            Ok(BitStringPair::new(s, BitString::EMPTY))
        } else {
            Err(GeoError::RootHasNoParent)
        }
    }

    /// All strict tree ancestors, nearest first.
    pub fn ancestors(&self) -> impl Iterator<Item = BitStringPair> {
        std::iter::successors(self.parent().ok(), |p| p.parent().ok())
    }

    /// Whether this node's volume contains `other`'s volume.
    pub fn contains_volume(&self, other: &BitStringPair) -> bool {
        self.surface.is_prefix_of(&other.surface) && self.altitude.is_prefix_of(&other.altitude)
    }

    /// Whether the two node volumes overlap. Node volumes either nest or are
    /// disjoint in each dimension, so this is a prefix test per string.
    pub fn intersects_volume(&self, other: &BitStringPair) -> bool {
        self.surface.is_comparable(&other.surface) && self.altitude.is_comparable(&other.altitude)
    }

    /// Canonical 11-byte encoding: surface length, 7 bytes of surface bits,
    /// altitude length, 2 bytes of altitude bits, all MSB-first.
    pub fn encode(&self) -> [u8; PAIR_ENCODED_LEN] {
        assert!(
            self.surface.len() <= MAX_SURFACE_ENCODED_BITS
                && self.altitude.len() <= MAX_ALTITUDE_ENCODED_BITS,
            "pair exceeds encodable lengths"
        );
        let mut out = [0u8; PAIR_ENCODED_LEN];
        out[0] = self.surface.len();
        self.surface.pack_into(&mut out[1..8]);
        out[8] = self.altitude.len();
        self.altitude.pack_into(&mut out[9..11]);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GeoError> {
        if bytes.len() != PAIR_ENCODED_LEN {
            return Err(GeoError::Encoding(format!(
                "expected {PAIR_ENCODED_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let (sl, al) = (bytes[0], bytes[8]);
        if sl > MAX_SURFACE_ENCODED_BITS || al > MAX_ALTITUDE_ENCODED_BITS {
            return Err(GeoError::Encoding(format!(
                "lengths {sl}/{al} exceed 51/15"
            )));
        }
        Ok(BitStringPair::new(
            BitString::unpack(&bytes[1..8], sl)?,
            BitString::unpack(&bytes[9..11], al)?,
        ))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.encode())
    }

    pub fn from_hex(s: &str) -> Result<Self, GeoError> {
        let bytes = hex::decode(s).map_err(|e| GeoError::Encoding(e.to_string()))?;
        Self::decode(&bytes)
    }
}

impl fmt::Display for BitStringPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.surface, self.altitude)
    }
}

impl fmt::Debug for BitStringPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for BitStringPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BitStringPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BitStringPair::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// A geodetic point: longitude and latitude in degrees, altitude in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64, alt: f64) -> Self {
        GeoPoint { lon, lat, alt }
    }
}

/// Integer grid coordinates of a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscretePoint {
    pub x: u64,
    pub y: u64,
    pub z: u64,
}

/// Lon/lat/alt box of a node. Intervals are half-open except where an upper
/// bound coincides with the global maximum (180°, 90°, or the top of the
/// shell), which is closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFrustum {
    pub lon_lo: f64,
    pub lon_hi: f64,
    pub lat_lo: f64,
    pub lat_hi: f64,
    pub alt_lo: f64,
    pub alt_hi: f64,
    closed_lon: bool,
    closed_lat: bool,
    closed_alt: bool,
}

impl NodeFrustum {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        fn within(v: f64, lo: f64, hi: f64, closed: bool) -> bool {
            lo <= v && (v < hi || (closed && v == hi))
        }
        within(p.lon, self.lon_lo, self.lon_hi, self.closed_lon)
            && within(p.lat, self.lat_lo, self.lat_hi, self.closed_lat)
            && within(p.alt, self.alt_lo, self.alt_hi, self.closed_alt)
    }

    pub fn contains_frustum(&self, other: &NodeFrustum) -> bool {
        self.lon_lo <= other.lon_lo
            && other.lon_hi <= self.lon_hi
            && self.lat_lo <= other.lat_lo
            && other.lat_hi <= self.lat_hi
            && self.alt_lo <= other.alt_lo
            && other.alt_hi <= self.alt_hi
    }

    /// Overlap with positive volume.
    pub fn overlaps(&self, other: &NodeFrustum) -> bool {
        self.lon_lo < other.lon_hi
            && other.lon_lo < self.lon_hi
            && self.lat_lo < other.lat_hi
            && other.lat_lo < self.lat_hi
            && self.alt_lo < other.alt_hi
            && other.alt_lo < self.alt_hi
    }
}

/// Discretization parameters. [`EarthModel::WGS84`] is the production
/// model; smaller bit budgets exist so tree properties can be checked
/// exhaustively.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthModel {
    /// Semi-major axis in meters.
    pub semi_major: f64,
    /// Semi-minor axis in meters.
    pub semi_minor: f64,
    pub bits_lon: u8,
    pub bits_lat: u8,
    pub bits_alt: u8,
    /// Lowest representable altitude in meters.
    pub min_alt: f64,
}

impl Default for EarthModel {
    fn default() -> Self {
        EarthModel::WGS84
    }
}

impl EarthModel {
    pub const WGS84: EarthModel = EarthModel {
        semi_major: 6_378_137.0,
        semi_minor: 6_356_752.314_2,
        bits_lon: 26,
        bits_lat: 25,
        bits_alt: 15,
        min_alt: -11_000.0,
    };

    /// WGS84 axes with a smaller bit budget.
    pub fn reduced(bits_lon: u8, bits_lat: u8, bits_alt: u8) -> Result<Self, GeoError> {
        let m = EarthModel {
            bits_lon,
            bits_lat,
            bits_alt,
            ..EarthModel::WGS84
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), GeoError> {
        if self.bits_lon != self.bits_lat + 1 {
            return Err(GeoError::Model("longitude needs exactly one more bit than latitude".into()));
        }
        if self.bits_lon + self.bits_lat > MAX_SURFACE_ENCODED_BITS || self.bits_alt > MAX_ALTITUDE_ENCODED_BITS || self.bits_alt == 0 {
            return Err(GeoError::Model("bit budget exceeds the 51/15 encoding".into()));
        }
        Ok(())
    }

    pub fn surface_bits(&self) -> u8 {
        self.bits_lon + self.bits_lat
    }

    pub fn max_x(&self) -> u64 {
        (1u64 << self.bits_lon) - 1
    }

    pub fn max_y(&self) -> u64 {
        (1u64 << self.bits_lat) - 1
    }

    pub fn max_z(&self) -> u64 {
        (1u64 << self.bits_alt) - 1
    }

    /// Highest discretized altitude `H = D + C_z`; points up to `H + 1` are valid.
    pub fn max_alt(&self) -> f64 {
        self.min_alt + self.max_z() as f64
    }

    /// Upper end of the altitude shell (`H + 1`).
    pub fn alt_top(&self) -> f64 {
        self.max_alt() + 1.0
    }

    /// Radius of the sphere with the same surface area as the ellipsoid.
    pub fn authalic_radius(&self) -> f64 {
        let a = self.semi_major;
        let b = self.semi_minor;
        let e = (1.0 - (b * b) / (a * a)).sqrt();
        let q = 1.0 + (1.0 - e * e) / (2.0 * e) * ((1.0 + e) / (1.0 - e)).ln();
        (a * a / 2.0 * q).sqrt()
    }

    pub fn validate(&self, n: &BitStringPair) -> Result<(), GeoError> {
        if n.surface.len() > self.surface_bits() || n.altitude.len() > self.bits_alt {
            return Err(GeoError::InvalidNode {
                surface: n.surface.len(),
                altitude: n.altitude.len(),
                max_surface: self.surface_bits(),
                max_altitude: self.bits_alt,
            });
        }
        Ok(())
    }

    pub fn is_leaf(&self, n: &BitStringPair) -> bool {
        n.altitude.len() == self.bits_alt
    }

    pub fn discretize(&self, p: &GeoPoint) -> Result<DiscretePoint, GeoError> {
        fn check(dimension: &'static str, value: f64, min: f64, max: f64) -> Result<(), GeoError> {
            if value.is_nan() || value < min || value > max {
                return Err(GeoError::OutOfRange { dimension, value, min, max });
            }
            Ok(())
        }
        check("longitude", p.lon, -180.0, 180.0)?;
        check("latitude", p.lat, -90.0, 90.0)?;
        check("altitude", p.alt, self.min_alt, self.alt_top())?;

        let scale = |v: f64, offset: f64, span: f64, bits: u8, max: u64| -> u64 {
            let raw = ((v + offset) / span * (1u64 << bits) as f64).floor() as u64;
            raw.min(max)
        };
        let z = ((p.alt - self.min_alt).floor() as u64).min(self.max_z());
        Ok(DiscretePoint {
            x: scale(p.lon, 180.0, 360.0, self.bits_lon, self.max_x()),
            y: scale(p.lat, 90.0, 180.0, self.bits_lat, self.max_y()),
            z,
        })
    }

    /// Interleaves the coordinate bits: `x0 y0 x1 y1 … x(By-1) y(By-1) x(Bx-1)`.
    pub fn encode_point(&self, d: DiscretePoint) -> BitStringPair {
        let x = BitString::from_bits(d.x, self.bits_lon);
        let y = BitString::from_bits(d.y, self.bits_lat);
        BitStringPair::new(interleave(x, y), BitString::from_bits(d.z, self.bits_alt))
    }

    /// The deepest node containing `p`.
    pub fn locate(&self, p: &GeoPoint) -> Result<BitStringPair, GeoError> {
        Ok(self.encode_point(self.discretize(p)?))
    }

    /// Children in hash-slot order: surface·0, surface·1, altitude·0,
    /// altitude·1. Slots that do not exist for `n` are `None`.
    pub fn child_slots(&self, n: &BitStringPair) -> [Option<BitStringPair>; 4] {
        let mut slots = [None; 4];
        if n.altitude.is_empty() && n.surface.len() < self.surface_bits() {
            slots[0] = Some(BitStringPair::new(n.surface.push(false), n.altitude));
            slots[1] = Some(BitStringPair::new(n.surface.push(true), n.altitude));
        }
        if n.altitude.len() < self.bits_alt {
            slots[2] = Some(BitStringPair::new(n.surface, n.altitude.push(false)));
            slots[3] = Some(BitStringPair::new(n.surface, n.altitude.push(true)));
        }
        slots
    }

    pub fn children(&self, n: &BitStringPair) -> Result<Vec<BitStringPair>, GeoError> {
        self.validate(n)?;
        Ok(self.child_slots(n).into_iter().flatten().collect())
    }

    /// Splits a surface string into its longitude and latitude prefixes.
    pub fn split_surface(&self, s: &BitString) -> (BitString, BitString) {
        deinterleave(s)
    }

    pub fn node_volume(&self, n: &BitStringPair) -> NodeFrustum {
        let (x, y) = deinterleave(&n.surface);
        let lon_unit = 360.0 / (1u64 << self.bits_lon) as f64;
        let lat_unit = 180.0 / (1u64 << self.bits_lat) as f64;
        let x_lo = x.padded(self.bits_lon, false);
        let x_hi = x.padded(self.bits_lon, true) + 1;
        let y_lo = y.padded(self.bits_lat, false);
        let y_hi = y.padded(self.bits_lat, true) + 1;
        let z_lo = n.altitude.padded(self.bits_alt, false);
        let z_hi = n.altitude.padded(self.bits_alt, true) + 1;
        NodeFrustum {
            lon_lo: x_lo as f64 * lon_unit - 180.0,
            lon_hi: x_hi as f64 * lon_unit - 180.0,
            lat_lo: y_lo as f64 * lat_unit - 90.0,
            lat_hi: y_hi as f64 * lat_unit - 90.0,
            alt_lo: self.min_alt + z_lo as f64,
            alt_hi: self.min_alt + z_hi as f64,
            closed_lon: x_hi == 1u64 << self.bits_lon,
            closed_lat: y_hi == 1u64 << self.bits_lat,
            closed_alt: z_hi == 1u64 << self.bits_alt,
        }
    }

    /// Area of the node's lon/lat rectangle on the authalic sphere, in m².
    pub fn cell_area(&self, n: &BitStringPair) -> f64 {
        let v = self.node_volume(n);
        rect_area(self.authalic_radius(), v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi)
    }

    /// Grid index of a surface string at its own depth: `(column, row)`.
    pub fn grid_index(&self, s: &BitString) -> (u64, u64) {
        let (x, y) = deinterleave(s);
        (x.value(), y.value())
    }

    /// Number of longitude and latitude bits at a given surface depth.
    pub fn grid_bits(&self, depth: u8) -> (u8, u8) {
        (depth.div_ceil(2), depth / 2)
    }
}

/// `R² · Δλ · (sin φ_hi − sin φ_lo)` with angles given in degrees.
pub(crate) fn rect_area(radius: f64, lon_lo: f64, lon_hi: f64, lat_lo: f64, lat_hi: f64) -> f64 {
    radius * radius
        * (lon_hi - lon_lo).to_radians()
        * (lat_hi.to_radians().sin() - lat_lo.to_radians().sin())
}

/// Interleaves longitude and latitude prefixes, starting with longitude.
/// `x` must have the same length as `y` or one more bit.
pub fn interleave(x: BitString, y: BitString) -> BitString {
    assert!(x.len() == y.len() || x.len() == y.len() + 1);
    let mut out = BitString::EMPTY;
    for i in 0..x.len() {
        out = out.push(x.bit(i));
        if i < y.len() {
            out = out.push(y.bit(i));
        }
    }
    out
}

/// Inverse of [`interleave`]: even positions are longitude bits.
pub fn deinterleave(s: &BitString) -> (BitString, BitString) {
    let mut x = BitString::EMPTY;
    let mut y = BitString::EMPTY;
    for i in 0..s.len() {
        if i % 2 == 0 {
            x = x.push(s.bit(i));
        } else {
            y = y.push(s.bit(i));
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(s: &str) -> BitStringPair {
        BitStringPair::parse(s).unwrap()
    }

    const M: EarthModel = EarthModel::WGS84;

    #[test]
    fn model_constants() {
        assert_eq!(M.max_x(), 67_108_863);
        assert_eq!(M.max_y(), 33_554_431);
        assert_eq!(M.max_z(), 32_767);
        assert_eq!(M.max_alt(), 21_767.0);
        assert_eq!(M.max_z() as f64, M.max_alt() - M.min_alt);
        assert_eq!(M.surface_bits(), 51);
        // Bit counts follow from the axes: floor(log2(circumference)) + 1.
        let bx = (2.0 * M.semi_major * std::f64::consts::PI).log2().floor() as u8 + 1;
        let by = (M.semi_minor * std::f64::consts::PI).log2().floor() as u8 + 1;
        let bz = (9000.0 - M.min_alt).log2().floor() as u8 + 1;
        assert_eq!((bx, by, bz), (M.bits_lon, M.bits_lat, M.bits_alt));
    }

    #[test]
    fn discretize_corners_and_midpoint() {
        let d = M.discretize(&GeoPoint::new(-180.0, -90.0, -11_000.0)).unwrap();
        assert_eq!((d.x, d.y, d.z), (0, 0, 0));
        let d = M.discretize(&GeoPoint::new(180.0, 90.0, 21_768.0)).unwrap();
        assert_eq!((d.x, d.y, d.z), (67_108_863, 33_554_431, 32_767));
        let d = M.discretize(&GeoPoint::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((d.x, d.y, d.z), (1 << 25, 1 << 24, 11_000));
    }

    #[test]
    fn discretize_rejects_out_of_range() {
        let err = M.discretize(&GeoPoint::new(0.0, 90.5, 0.0)).unwrap_err();
        assert!(matches!(err, GeoError::OutOfRange { dimension: "latitude", .. }));
        let err = M.discretize(&GeoPoint::new(0.0, 0.0, 21_768.5)).unwrap_err();
        assert!(matches!(err, GeoError::OutOfRange { dimension: "altitude", .. }));
        let err = M.discretize(&GeoPoint::new(f64::NAN, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, GeoError::OutOfRange { dimension: "longitude", .. }));
    }

    #[test]
    fn encode_point_examples() {
        let n = M.encode_point(DiscretePoint { x: 0, y: 0, z: 0 });
        assert_eq!((n.surface.len(), n.surface.value()), (51, 0));
        assert_eq!((n.altitude.len(), n.altitude.value()), (15, 0));

        let n = M.encode_point(DiscretePoint { x: 1 << 25, y: 0, z: 0 });
        assert_eq!(n.surface.value(), 1u64 << 50);
        assert_eq!(n.altitude.value(), 0);

        let n = M.encode_point(DiscretePoint { x: M.max_x(), y: M.max_y(), z: M.max_z() });
        assert_eq!(n.surface.value(), (1u64 << 51) - 1);
        assert_eq!(n.altitude.value(), (1u64 << 15) - 1);

        // Last surface bit is the least significant longitude bit.
        let n = M.encode_point(DiscretePoint { x: 1, y: 0, z: 0 });
        assert_eq!(n.surface.value(), 1);
        let n = M.encode_point(DiscretePoint { x: 0, y: 1, z: 0 });
        assert_eq!(n.surface.value(), 2);
    }

    #[test]
    fn children_per_node_kind() {
        let c = M.children(&BitStringPair::ROOT).unwrap();
        assert_eq!(c, vec![pair("0/ε"), pair("1/ε"), pair("ε/0"), pair("ε/1")]);
        assert_eq!(M.children(&pair("10/1")).unwrap(), vec![pair("10/10"), pair("10/11")]);
        let leaf = BitStringPair::new(BitString::EMPTY, BitString::from_bits(5, 15));
        assert!(M.children(&leaf).unwrap().is_empty());
        let deepest = BitStringPair::new(BitString::from_bits(0, 51), BitString::EMPTY);
        assert_eq!(M.children(&deepest).unwrap().len(), 2);
        let bad = BitStringPair::new(BitString::from_bits(0, 52), BitString::EMPTY);
        assert!(matches!(M.children(&bad), Err(GeoError::InvalidNode { .. })));
    }

    #[test]
    fn parents() {
        assert_eq!(pair("10/1").parent().unwrap(), pair("10/ε"));
        assert_eq!(pair("101/ε").parent().unwrap(), pair("10/ε"));
        assert_eq!(pair("ε/0").parent().unwrap(), BitStringPair::ROOT);
        assert_eq!(BitStringPair::ROOT.parent(), Err(GeoError::RootHasNoParent));
        for n in [pair("10/1"), pair("0110/ε"), pair("ε/01")] {
            assert!(M.children(&n.parent().unwrap()).unwrap().contains(&n));
        }
        assert_eq!(pair("01/10").ancestors().count(), 4);
    }

    #[test]
    fn node_volume_examples() {
        let v = M.node_volume(&pair("0/ε"));
        assert_eq!((v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi), (-180.0, 0.0, -90.0, 90.0));
        assert_eq!((v.alt_lo, v.alt_hi), (-11_000.0, 21_768.0));

        let v = M.node_volume(&pair("01/ε"));
        assert_eq!((v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi), (-180.0, 0.0, 0.0, 90.0));

        let v = M.node_volume(&pair("010/ε"));
        assert_eq!((v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi), (-180.0, -90.0, 0.0, 90.0));
        assert_eq!((v.alt_lo, v.alt_hi), (-11_000.0, 21_768.0));

        let v = M.node_volume(&pair("10/ε"));
        assert_eq!((v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi), (0.0, 180.0, -90.0, 0.0));

        let v = M.node_volume(&pair("10/1"));
        assert_eq!((v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi), (0.0, 180.0, -90.0, 0.0));
        assert_eq!((v.alt_lo, v.alt_hi), (5_384.0, 21_768.0));
    }

    #[test]
    fn global_maxima_are_closed() {
        let p = GeoPoint::new(180.0, 90.0, 21_768.0);
        let n = M.locate(&p).unwrap();
        assert!(M.node_volume(&n).contains(&p));
        assert!(M.node_volume(&BitStringPair::ROOT).contains(&p));
        // Interior split lines stay half-open.
        assert!(!M.node_volume(&pair("0/ε")).contains(&GeoPoint::new(0.0, 0.0, 0.0)));
        assert!(M.node_volume(&pair("1/ε")).contains(&GeoPoint::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn cell_areas() {
        let r = M.authalic_radius();
        assert!((r - 6_371_007.2).abs() < 0.1, "authalic radius {r}");
        let sphere = 4.0 * std::f64::consts::PI * r * r;
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(M.cell_area(&BitStringPair::ROOT), sphere) < 1e-12);
        assert!(rel(M.cell_area(&pair("0/ε")), sphere / 2.0) < 1e-12);
        assert!(rel(M.cell_area(&pair("00/ε")), sphere / 4.0) < 1e-12);
        // Altitude strings do not change the surface.
        assert_eq!(M.cell_area(&pair("00/1")), M.cell_area(&pair("00/ε")));
    }

    #[test]
    fn pair_encoding_layout() {
        let n = pair("101/01");
        let e = n.encode();
        assert_eq!(e, [3, 0b1010_0000, 0, 0, 0, 0, 0, 0, 2, 0b0100_0000, 0]);
        assert_eq!(BitStringPair::decode(&e).unwrap(), n);
        assert_eq!(BitStringPair::ROOT.encode(), [0u8; 11]);

        let mut bad = e;
        bad[7] = 1; // padding bit
        assert!(BitStringPair::decode(&bad).is_err());
        let mut bad = e;
        bad[0] = 52;
        assert!(BitStringPair::decode(&bad).is_err());
        assert!(BitStringPair::decode(&e[..10]).is_err());
    }

    #[test]
    fn deinterleave_inverts_interleave_exhaustively() {
        for k in 0..=12u8 {
            for v in 0..(1u64 << k) {
                let s = BitString::from_bits(v, k);
                let (x, y) = deinterleave(&s);
                assert_eq!(interleave(x, y), s);
            }
        }
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-180.0..=180.0f64, -90.0..=90.0f64, -11_000.0..=21_768.0f64)
            .prop_map(|(lon, lat, alt)| GeoPoint::new(lon, lat, alt))
    }

    fn arb_pair() -> impl Strategy<Value = BitStringPair> {
        (0u8..=51, any::<u64>(), 0u8..=15, any::<u64>()).prop_map(|(sl, s, al, a)| {
            BitStringPair::new(BitString::from_bits(s, sl), BitString::from_bits(a, al))
        })
    }

    proptest! {
        #[test]
        fn located_node_contains_point(p in arb_point()) {
            let n = M.locate(&p).unwrap();
            prop_assert!(M.node_volume(&n).contains(&p), "{p:?} not in {n}");
            for a in n.ancestors() {
                prop_assert!(M.node_volume(&a).contains(&p));
            }
        }

        #[test]
        fn pair_encoding_round_trips(n in arb_pair()) {
            prop_assert_eq!(BitStringPair::decode(&n.encode()).unwrap(), n);
            prop_assert_eq!(BitStringPair::from_hex(&n.to_hex()).unwrap(), n);
        }

        #[test]
        fn encoding_order_matches_pair_order(a in arb_pair(), b in arb_pair()) {
            prop_assert_eq!(a.cmp(&b), a.encode().cmp(&b.encode()));
        }

        #[test]
        fn children_nest_and_are_disjoint(n in arb_pair()) {
            let parent = M.node_volume(&n);
            let kids = M.children(&n).unwrap();
            for c in &kids {
                prop_assert!(parent.contains_frustum(&M.node_volume(c)));
                prop_assert_eq!(c.parent().unwrap(), n);
            }
            // Siblings of the same split kind never overlap.
            for pair in kids.chunks(2) {
                if pair.len() == 2 {
                    prop_assert!(!M.node_volume(&pair[0]).overlaps(&M.node_volume(&pair[1])));
                }
            }
        }

        #[test]
        fn meter_precision(p in arb_point(), dim in 0usize..3) {
            // 2 m along one axis, measured on the semi-minor sphere (worst case).
            let deg = 2.0 / (M.semi_minor * std::f64::consts::PI / 180.0);
            let mut q = p;
            match dim {
                0 => q.lon = if p.lon + deg <= 180.0 { p.lon + deg } else { p.lon - deg },
                1 => q.lat = if p.lat + deg <= 90.0 { p.lat + deg } else { p.lat - deg },
                _ => q.alt = if p.alt + 2.0 <= 21_768.0 { p.alt + 2.0 } else { p.alt - 2.0 },
            }
            prop_assert_ne!(M.discretize(&p).unwrap(), M.discretize(&q).unwrap());
        }
    }
}
