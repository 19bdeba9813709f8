//! Seeded synthetic certificate corpora.

use std::io::Read;

use geomap_core::cert::{GeoCert, LocVerification};
use geomap_core::cover::{PolygonFrustum, VolumeSpec};
use geomap_core::crypto::{sha256_parts, KeyPair};
use geomap_core::geo::GeoPoint;
use geomap_core::time::Timestamp;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest canonical certificate accepted into a corpus.
pub const MAX_PAYLOAD: usize = 3328;

/// Edge length of generated certificate squares in meters.
pub const CERT_EDGE_M: f64 = 10.0;

/// Altitude extent of generated certificates in meters.
pub const CERT_HEIGHT_M: f64 = 3.0;

/// Base altitudes are drawn from `[0, MAX_BASE_ALT]`.
pub const MAX_BASE_ALT: f64 = 200.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("density map: {0}")]
    Density(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCell {
    pub lon_lo: f64,
    pub lat_lo: f64,
    pub lon_hi: f64,
    pub lat_hi: f64,
    pub weight: f64,
}

/// Relative certificate density over lon/lat cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    cells: Vec<DensityCell>,
    sampler: WeightedIndex<f64>,
}

impl DensityMap {
    pub fn new(cells: Vec<DensityCell>) -> Result<Self, DatasetError> {
        for (i, c) in cells.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(DatasetError::Density(format!("cell {i}: weight {} is not a non-negative number", c.weight)));
            }
            let ok = (-180.0..=180.0).contains(&c.lon_lo)
                && (-180.0..=180.0).contains(&c.lon_hi)
                && (-90.0..=90.0).contains(&c.lat_lo)
                && (-90.0..=90.0).contains(&c.lat_hi)
                && c.lon_lo < c.lon_hi
                && c.lat_lo < c.lat_hi;
            if !ok {
                return Err(DatasetError::Density(format!("cell {i}: bad bounds")));
            }
        }
        let sampler = WeightedIndex::new(cells.iter().map(|c| c.weight))
            .map_err(|e| DatasetError::Density(format!("weights: {e}")))?;
        Ok(DensityMap { cells, sampler })
    }

    /// Gaussian "cities" of random size over a 0.5° grid covering Europe.
    /// Cells far from every city get weight zero.
    pub fn synthetic(seed: u64) -> Self {
        let (lon0, lat0, step, cols, rows) = (-10.0, 36.0, 0.5, 80, 48);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6765_6f6d_6170);
        let cities: Vec<(f64, f64, f64, f64)> = (0..40)
            .map(|_| {
                let lon = rng.gen_range(lon0 + 1.0..lon0 + step * cols as f64 - 1.0);
                let lat = rng.gen_range(lat0 + 1.0..lat0 + step * rows as f64 - 1.0);
                let sigma = rng.gen_range(0.2..1.2);
                let size = 1.0 / rng.gen_range(0.05f64..1.0);
                (lon, lat, sigma, size)
            })
            .collect();
        let mut cells = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                let lon_lo = lon0 + step * c as f64;
                let lat_lo = lat0 + step * r as f64;
                let (cx, cy) = (lon_lo + step / 2.0, lat_lo + step / 2.0);
                let w: f64 = cities
                    .iter()
                    .map(|(lon, lat, s, size)| size * (-((cx - lon).powi(2) + (cy - lat).powi(2)) / (2.0 * s * s)).exp())
                    .sum();
                cells.push(DensityCell { lon_lo, lat_lo, lon_hi: lon_lo + step, lat_hi: lat_lo + step, weight: if w < 1e-3 { 0.0 } else { w } });
            }
        }
        DensityMap::new(cells).expect("synthetic map has positive weight")
    }

    /// Reads `lon_lo,lat_lo,lon_hi,lat_hi,weight` rows with a header line.
    pub fn from_csv<R: Read>(r: R) -> Result<Self, DatasetError> {
        let mut rd = csv::Reader::from_reader(r);
        let cells = rd.deserialize().collect::<Result<Vec<DensityCell>, _>>()?;
        DensityMap::new(cells)
    }

    pub fn cells(&self) -> &[DensityCell] {
        &self.cells
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let c = &self.cells[self.sampler.sample(rng)];
        (rng.gen_range(c.lon_lo..c.lon_hi), rng.gen_range(c.lat_lo..c.lat_hi))
    }
}

/// Deterministic issuer for a corpus seed.
pub fn corpus_issuer(seed: u64) -> KeyPair {
    KeyPair::from_seed(sha256_parts(&[b"geomap corpus issuer", &seed.to_be_bytes()]).0)
}

/// Meters per degree of latitude and longitude at `lat` on WGS84.
pub fn meters_per_degree(lat: f64) -> (f64, f64) {
    let p = lat.to_radians();
    let m_lat = 111_132.954 - 559.822 * (2.0 * p).cos() + 1.175 * (4.0 * p).cos();
    let m_lon = 111_412.84 * p.cos() - 93.5 * (3.0 * p).cos();
    (m_lat, m_lon)
}

/// A square of `edge` meters with its south-west corner at (lon, lat).
pub fn square_frustum(lon: f64, lat: f64, edge: f64, alt_min: f64, alt_max: f64) -> PolygonFrustum {
    let (m_lat, m_lon) = meters_per_degree(lat);
    PolygonFrustum::rect(lon, lat, lon + edge / m_lon, lat + edge / m_lat, alt_min, alt_max).expect("valid square")
}

const NOT_BEFORE: Timestamp = Timestamp(1_700_000_000_000);
const VALIDITY_MS: u64 = 10 * 365 * 24 * 3600 * 1000;

/// Certificate `index` of the corpus for `seed`; signed by `issuer` under
/// the id `issuer_id`, without SCTs.
pub fn generate_cert(seed: u64, index: u64, density: &DensityMap, issuer: &KeyPair, issuer_id: &str) -> GeoCert {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let (lon, lat) = density.sample(&mut rng);
        let base = rng.gen_range(0.0..=MAX_BASE_ALT);
        let owner: f64 = Normal::new(500.0, 150.0).expect("valid").sample(&mut rng);
        let owner = owner.abs() as u32;
        let mut key = vec![0u8; 32];
        rng.fill(&mut key[..]);
        let mut c = GeoCert {
            subject_uri: format!("gecko://site-{index}.s{seed:x}.example/"),
            issuer_id: issuer_id.to_string(),
            serial: index,
            volume: VolumeSpec::single(square_frustum(lon, lat, CERT_EDGE_M, base, base + CERT_HEIGHT_M)),
            attributes: vec![("owner".into(), format!("owner-{owner}"))],
            loc_verification: LocVerification::ALL[rng.gen_range(0..LocVerification::ALL.len())],
            not_before: NOT_BEFORE,
            not_after: Timestamp(NOT_BEFORE.0 + VALIDITY_MS),
            scts: vec![],
            public_key: key,
            signature: vec![],
        };
        c.normalize();
        c.sign(issuer);
        if c.canonical_encode().len() <= MAX_PAYLOAD {
            return c;
        }
    }
}

/// `count` certificates, identical for identical arguments.
pub fn generate_dataset(seed: u64, count: usize, density: &DensityMap, issuer: &KeyPair, issuer_id: &str) -> Vec<GeoCert> {
    (0..count as u64).map(|i| generate_cert(seed, i, density, issuer, issuer_id)).collect()
}

/// A point inside the certificate's first frustum, at mid altitude.
pub fn cert_center(c: &GeoCert) -> GeoPoint {
    let f = &c.volume.frustums[0];
    let n = f.ring.len() as f64;
    let (lon, lat) = f.ring.iter().fold((0.0, 0.0), |(a, b), p| (a + p.lon / n, b + p.lat / n));
    GeoPoint::new(lon, lat, (f.alt_min + f.alt_max) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let d = DensityMap::synthetic(7);
        let ca = corpus_issuer(7);
        let a = generate_dataset(7, 50, &d, &ca, "ca");
        let b = generate_dataset(7, 50, &d, &ca, "ca");
        assert_eq!(a.iter().map(|c| c.canonical_encode()).collect::<Vec<_>>(), b.iter().map(|c| c.canonical_encode()).collect::<Vec<_>>());
        assert_ne!(a[0], generate_dataset(8, 1, &d, &ca, "ca")[0]);
        for c in &a {
            assert!(c.canonical_encode().len() <= MAX_PAYLOAD);
            c.validate().unwrap();
            c.verify_signature(&ca.public_key()).unwrap();
            let f = &c.volume.frustums[0];
            assert!((0.0..=MAX_BASE_ALT).contains(&f.alt_min));
            assert!((f.alt_max - f.alt_min - CERT_HEIGHT_M).abs() < 1e-9);
        }
    }

    #[test]
    fn square_is_ten_meters() {
        let f = square_frustum(8.5, 47.4, 10.0, 0.0, 3.0);
        let m = geomap_core::geo::EarthModel::WGS84;
        let area = geomap_core::cover::polygon_area(&m, &f).unwrap();
        assert!((area - 100.0).abs() < 1.0, "area {area}");
    }

    #[test]
    fn zero_density_cells_stay_empty() {
        let cells = vec![
            DensityCell { lon_lo: 0.0, lat_lo: 0.0, lon_hi: 1.0, lat_hi: 1.0, weight: 0.0 },
            DensityCell { lon_lo: 5.0, lat_lo: 5.0, lon_hi: 6.0, lat_hi: 6.0, weight: 2.0 },
        ];
        let d = DensityMap::new(cells).unwrap();
        let ca = corpus_issuer(1);
        for c in generate_dataset(1, 200, &d, &ca, "ca") {
            let p = cert_center(&c);
            assert!(p.lon >= 5.0 && p.lat >= 5.0);
        }
        assert!(DensityMap::new(vec![DensityCell { lon_lo: 0.0, lat_lo: 0.0, lon_hi: 1.0, lat_hi: 1.0, weight: 0.0 }]).is_err());
        let csv = "lon_lo,lat_lo,lon_hi,lat_hi,weight\n0,0,1,1,1\n1,0,2,1,3\n";
        assert_eq!(DensityMap::from_csv(csv.as_bytes()).unwrap().cells().len(), 2);
    }
}
