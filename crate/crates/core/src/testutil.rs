use crate::cert::{GeoCert, LocVerification};
use crate::cover::{PolygonFrustum, VolumeSpec};
use crate::crypto::KeyPair;
use crate::time::Timestamp;

/// A signed ~10 m square certificate from issuer "ca", without SCTs.
pub fn cert(ca: &KeyPair, n: u64, lon: f64, lat: f64) -> GeoCert {
    let d = 0.0001;
    let mut c = GeoCert {
        subject_uri: format!("gecko://host{n}.example/"),
        issuer_id: "ca".into(),
        serial: n,
        volume: VolumeSpec::single(PolygonFrustum::rect(lon, lat, lon + d, lat + d, 10.0, 13.0).unwrap()),
        attributes: vec![],
        loc_verification: LocVerification::ALL[0],
        not_before: Timestamp(0),
        not_after: Timestamp(u64::MAX / 2),
        scts: vec![],
        public_key: vec![7; 32],
        signature: vec![],
    };
    c.sign(ca);
    c
}
