use std::collections::BTreeSet;

use geomap_core::crypto::{sha256, Hash32};
use geomap_core::geo::{BitStringPair, EarthModel, GeoPoint};
use geomap_core::smt::{verify_proof, Placement, Proof, Smt};
use proptest::prelude::*;

const M: EarthModel = EarthModel::WGS84;

/// The ancestor of the leaf at `p` with the given string lengths.
fn node(p: (f64, f64, f64), s: u8, a: u8) -> BitStringPair {
    let leaf = M.locate(&GeoPoint::new(p.0, p.1, p.2)).unwrap();
    BitStringPair::new(leaf.surface.prefix(s), leaf.altitude.prefix(a))
}

fn point() -> impl Strategy<Value = (f64, f64, f64)> {
    // A small region so random nodes share ancestors.
    (8.0..8.01f64, 47.0..47.01f64, -100.0..500.0f64)
}

fn pair() -> impl Strategy<Value = BitStringPair> {
    (point(), 20u8..=51, 0u8..=15).prop_map(|(p, s, a)| node(p, s, a))
}

fn comparable(a: &BitStringPair, b: &BitStringPair) -> bool {
    let under = |x: &BitStringPair, y: &BitStringPair| x.surface.is_prefix_of(&y.surface) && x.altitude.is_prefix_of(&y.altitude);
    under(a, b) || under(b, a)
}

/// Node cells are half-open boxes; they overlap when every axis does.
fn overlap(a: &BitStringPair, b: &BitStringPair) -> bool {
    let (x, y) = (M.node_volume(a), M.node_volume(b));
    x.lon_lo < y.lon_hi && y.lon_lo < x.lon_hi && x.lat_lo < y.lat_hi && y.lat_lo < x.lat_hi && x.alt_lo < y.alt_hi && y.alt_lo < x.alt_hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn proven_set_is_every_cert_whose_cell_meets_the_query(
        certs in prop::collection::vec(prop::collection::vec(pair(), 1..4), 1..40),
        query in prop::collection::vec(pair(), 1..6),
    ) {
        let mut query = query;
        query.sort_by_key(|p| p.encode());
        query.dedup();
        // Query pairs must not nest.
        let query: Vec<BitStringPair> = query.iter().filter(|q| !query.iter().any(|o| o != *q && comparable(o, q) && o.surface.len() + o.altitude.len() < q.surface.len() + q.altitude.len())).cloned().collect();

        let placements: Vec<Placement> = certs.iter().enumerate().map(|(i, pairs)| {
            let mut pairs = pairs.clone();
            pairs.sort_by_key(|p| p.encode());
            pairs.dedup();
            Placement { cert_hash: sha256(&(i as u64).to_be_bytes()), pairs }
        }).collect();
        let mut smt = Smt::new(M);
        smt.batch_update(&placements, &[]).unwrap();

        let proof = smt.generate_proof(&query);
        let round = Proof::decode(&proof.encode()).unwrap();
        prop_assert_eq!(&round, &proof);
        let proven = verify_proof(&M, &round, &smt.root()).unwrap();
        let expected: BTreeSet<Hash32> = placements.iter()
            .filter(|pl| pl.pairs.iter().any(|p| query.iter().any(|q| overlap(p, q))))
            .map(|pl| pl.cert_hash)
            .collect();
        prop_assert_eq!(proven, expected);

        let mut other = smt.root();
        other.0[0] ^= 1;
        prop_assert!(verify_proof(&M, &round, &other).is_err());
    }
}
