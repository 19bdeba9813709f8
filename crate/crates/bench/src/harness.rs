//! In-process deployments and the ingest, throughput and latency runs.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use geomap_core::api::{MapServerApi, QueryRequest, RemoteMap};
use geomap_core::cert::GeoCert;
use geomap_core::client::verify_response;
use geomap_core::cover::{cover_circle, RelativeGridSize};
use geomap_core::crypto::{sha256_parts, KeyPair, PublicKey};
use geomap_core::geo::{EarthModel, GeoPoint};
use geomap_core::log::{LogSource, LogStub};
use geomap_core::server::{CycleReport, MapServer, MapServerOptions, ServerError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{cert_center, corpus_issuer, generate_dataset, DensityMap};

/// Issuer id used for generated corpora.
pub const CORPUS_CA: &str = "synthetic-ca";

/// Query radius used by the throughput and latency runs.
pub const QUERY_RADIUS_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("response {index} failed verification: {detail}")]
    Unverified { index: usize, detail: String },
    #[error("query {index}: {detail}")]
    Query { index: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn key(seed: u64, role: &str) -> KeyPair {
    KeyPair::from_seed(sha256_parts(&[b"geomap bench key", role.as_bytes(), &seed.to_be_bytes()]).0)
}

/// One CA, one log and one map server, all in process.
pub struct Deployment {
    pub seed: u64,
    pub ca: KeyPair,
    pub log: Arc<LogStub>,
    pub server: Arc<MapServer>,
    map_key: PublicKey,
}

impl Deployment {
    pub fn new(seed: u64) -> Result<Self, BenchError> {
        let ca = corpus_issuer(seed);
        let log = Arc::new(LogStub::new("bench-log", key(seed, "log")));
        let mut opts = MapServerOptions::new([("bench-log".to_string(), log.public_key())].into());
        opts.ca_keys = [(CORPUS_CA.to_string(), ca.public_key())].into();
        let map = key(seed, "map");
        let map_key = map.public_key();
        let server = Arc::new(MapServer::new(map, vec![log.clone() as Arc<dyn LogSource>], opts)?);
        Ok(Deployment { seed, ca, log, server, map_key })
    }

    pub fn map_key(&self) -> PublicKey {
        self.map_key
    }

    pub fn log_keys(&self) -> BTreeMap<String, PublicKey> {
        [("bench-log".to_string(), self.log.public_key())].into()
    }

    pub fn ca_keys(&self) -> BTreeMap<String, PublicKey> {
        [(CORPUS_CA.to_string(), self.ca.public_key())].into()
    }

    /// Logs each certificate as a precertificate, attaches the SCT and
    /// logs the final certificate. Returns the final certificates.
    pub fn submit(&self, certs: &[GeoCert]) -> Vec<GeoCert> {
        certs
            .iter()
            .map(|c| {
                let mut c = c.clone();
                let sct = self.log.submit_cert(&c).expect("log accepts corpus certificates");
                c.scts.push(sct);
                self.log.submit_cert(&c).expect("log accepts corpus certificates");
                c
            })
            .collect()
    }

    /// Generates `count` certificates, logs them and ingests in one cycle.
    pub fn load_corpus(&self, count: usize, density: &DensityMap) -> Result<(Vec<GeoCert>, CycleReport), BenchError> {
        let certs = self.submit(&generate_dataset(self.seed, count, density, &self.ca, CORPUS_CA));
        let report = self.server.ingest_cycle()?;
        Ok((certs, report))
    }
}

/// One point per certificate in a seeded random order.
pub fn query_points(certs: &[GeoCert], seed: u64) -> Vec<GeoPoint> {
    let mut pts: Vec<GeoPoint> = certs.iter().map(cert_center).collect();
    pts.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x0071_7565_7279));
    pts
}

/// Query covers for 10 m circles at full altitude range.
pub fn query_requests(model: &EarthModel, points: &[GeoPoint]) -> Vec<QueryRequest> {
    let f = RelativeGridSize::new(1.0).expect("positive");
    points.iter().map(|p| QueryRequest::new(cover_circle(model, p, QUERY_RADIUS_M, None, f).expect("cover of a 10 m circle"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestRow {
    pub batch_size: usize,
    pub batches: usize,
    pub certs: usize,
    pub total_ms: f64,
    pub mean_ms_per_cert: f64,
}

/// Mean ingest time per certificate for each batch size, each on a fresh
/// deployment. About `certs_per_size` certificates are ingested per size.
pub fn bench_ingest(seed: u64, batch_sizes: &[usize], certs_per_size: usize, density: &DensityMap) -> Result<Vec<IngestRow>, BenchError> {
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let b = b.max(1);
        let batches = (certs_per_size / b).max(1);
        let d = Deployment::new(seed)?;
        let corpus = generate_dataset(seed, b * batches, density, &d.ca, CORPUS_CA);
        let mut total = 0.0;
        for chunk in corpus.chunks(b) {
            d.submit(chunk);
            let t = Instant::now();
            let r = d.server.ingest_cycle()?;
            total += t.elapsed().as_secs_f64() * 1e3;
            debug_assert_eq!(r.inserted, chunk.len());
        }
        let n = b * batches;
        log::info!("ingest batch {b}: {:.3} ms per cert", total / n as f64);
        rows.push(IngestRow { batch_size: b, batches, certs: n, total_ms: total, mean_ms_per_cert: total / n as f64 });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpsRow {
    pub workers: usize,
    pub queries: usize,
    pub seconds: f64,
    pub qps: f64,
    pub verified: usize,
}

/// Queries per second against the in-process query path for each worker
/// count. Responses are serialized as the HTTP layer would and verified
/// after the timed section.
pub fn bench_throughput(
    d: &Deployment,
    requests: &[QueryRequest],
    worker_counts: &[usize],
    queries_per_count: usize,
) -> Result<Vec<QpsRow>, BenchError> {
    let model = *d.server.model();
    let mut rows = Vec::new();
    for &w in worker_counts {
        let w = w.max(1);
        let next = AtomicUsize::new(0);
        let t = Instant::now();
        let results: Vec<Vec<(usize, Vec<u8>)>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..w)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= queries_per_count {
                                break;
                            }
                            let resp = d.server.handle_query(&requests[i % requests.len()]);
                            out.push((i, resp.map(|r| serde_json::to_vec(&r).expect("serializable")).unwrap_or_default()));
                        }
                        out
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("worker")).collect()
        });
        let secs = t.elapsed().as_secs_f64();
        let mut verified = 0;
        for (i, body) in results.into_iter().flatten() {
            let resp = serde_json::from_slice(&body).map_err(|e| BenchError::Query { index: i, detail: e.to_string() })?;
            verify_response(&model, &requests[i % requests.len()], &resp, &d.map_key, &d.log_keys())
                .map_err(|e| BenchError::Unverified { index: i, detail: e.to_string() })?;
            verified += 1;
        }
        let qps = queries_per_count as f64 / secs;
        log::info!("{w} workers: {qps:.0} queries/s");
        rows.push(QpsRow { workers: w, queries: queries_per_count, seconds: secs, qps, verified });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub query: usize,
    pub cover_us: f64,
    pub query_us: f64,
    pub verify_us: f64,
    pub total_us: f64,
    pub request_bytes: usize,
    pub response_bytes: usize,
    pub pairs: usize,
    pub certs: usize,
}

/// Client-side latency split into cover computation, the HTTP round trip
/// and verification, plus request and response sizes.
pub fn bench_latency(
    api: &RemoteMap,
    points: &[GeoPoint],
    map_key: &PublicKey,
    log_keys: &BTreeMap<String, PublicKey>,
) -> Result<Vec<LatencyRow>, BenchError> {
    let model = EarthModel::WGS84;
    let f = RelativeGridSize::new(1.0).expect("positive");
    let mut rows = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let t0 = Instant::now();
        let req = QueryRequest::new(cover_circle(&model, p, QUERY_RADIUS_M, None, f).map_err(|e| BenchError::Query { index: i, detail: e.to_string() })?);
        let t1 = Instant::now();
        let (resp, size) = api.query_sized(&req).map_err(|e| BenchError::Query { index: i, detail: format!("{}: {e}", api.name()) })?;
        let t2 = Instant::now();
        let v = verify_response(&model, &req, &resp, map_key, log_keys).map_err(|e| BenchError::Unverified { index: i, detail: e.to_string() })?;
        let t3 = Instant::now();
        let us = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e6;
        rows.push(LatencyRow {
            query: i,
            cover_us: us(t0, t1),
            query_us: us(t1, t2),
            verify_us: us(t2, t3),
            total_us: us(t0, t3),
            request_bytes: req.encode_binary().len(),
            response_bytes: size,
            pairs: req.pairs.len(),
            certs: v.certs.len(),
        });
    }
    Ok(rows)
}
