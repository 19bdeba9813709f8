//! Map server: log ingestion into a shadow table, table swap with a new
//! signed map head, and the query path over the serving table.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{ApiError, B64Bytes, ConsistencyResponse, QueryRequest, QueryResponse, SmhResponse};
use crate::cert::{GeoCert, RevocationRecord};
use crate::codec::{Reader, Writer};
use crate::cover::{cover_volume, RelativeGridSize};
use crate::crypto::{Hash32, KeyFile, KeyPair, PublicKey};
use crate::geo::{BitStringPair, EarthModel};
use crate::log::{leaf_hash, sct_count, LogEntry, LogError, LogSource, MerkleTree, SignedConsistencyHead, SignedMapHead, SmhSource, Sth};
use crate::smt::{Placement, Smt, SmtError};
use crate::time::Timestamp;

/// Entries fetched per `get_entries` call.
pub const ENTRY_CHUNK: u64 = 1000;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Smt(#[from] SmtError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no source log could be reached")]
    Unreachable,
    #[error("storage: {0}")]
    Storage(String),
}

fn default_listen() -> String {
    "127.0.0.1:8700".to_string()
}

fn default_interval() -> u64 {
    10_000
}

fn default_f() -> f64 {
    0.1
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub id: String,
    pub url: String,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Path to a key file.
    pub signing_key: PathBuf,
    pub sources: Vec<SourceConfig>,
    #[serde(default = "default_interval")]
    pub ingest_interval_ms: u64,
    #[serde(default = "default_f")]
    pub f_ingest: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub storage: Option<PathBuf>,
    /// Issuer keys by CA id. Empty disables issuer signature checks.
    #[serde(default)]
    pub ca_keys: BTreeMap<String, PublicKey>,
}

impl ServerConfig {
    /// Reads the JSON config and applies `GEOMAP_LISTEN` / `GEOMAP_STORAGE`.
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ServerConfig = serde_json::from_str(&text).map_err(|e| ServerError::Config(e.to_string()))?;
        if let Ok(v) = std::env::var("GEOMAP_LISTEN") {
            cfg.listen = v;
        }
        if let Ok(v) = std::env::var("GEOMAP_STORAGE") {
            cfg.storage = Some(PathBuf::from(v));
        }
        if let Some(dir) = path.parent() {
            if cfg.signing_key.is_relative() {
                cfg.signing_key = dir.join(&cfg.signing_key);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if !(self.f_ingest > 0.0 && self.f_ingest.is_finite()) {
            return Err(ServerError::Config(format!("f_ingest must be positive, got {}", self.f_ingest)));
        }
        if self.sources.is_empty() {
            return Err(ServerError::Config("at least one source log is required".into()));
        }
        if self.workers == 0 {
            return Err(ServerError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn signing_keypair(&self) -> Result<KeyPair, ServerError> {
        let text = std::fs::read_to_string(&self.signing_key)?;
        let kf: KeyFile = serde_json::from_str(&text).map_err(|e| ServerError::Config(format!("signing key: {e}")))?;
        kf.keypair().map_err(|e| ServerError::Config(format!("signing key: {e}")))
    }

    pub fn log_keys(&self) -> BTreeMap<String, PublicKey> {
        self.sources.iter().map(|s| (s.id.clone(), s.public_key)).collect()
    }
}

/// Why a log entry did not change the map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Skip {
    Malformed(String),
    Precert,
    NoValidSct,
    UnknownIssuer(String),
    BadIssuerSignature,
    Cover(String),
    Revoked,
    Duplicate,
    RevocationForeignIssuer,
}

/// Effect of one log entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Insert { placement: Placement, body: Vec<u8> },
    Remove { placement: Placement, record: RevocationRecord },
    /// Revocation of a certificate not (yet) in the map.
    Revocation(RevocationRecord),
    Skipped(Skip),
}

/// Turns log entries into tree placements. The server and the replaying
/// auditor share this so that both derive identical trees.
pub struct Ingestor {
    model: EarthModel,
    f: RelativeGridSize,
    log_keys: BTreeMap<String, PublicKey>,
    ca_keys: BTreeMap<String, PublicKey>,
    live: HashMap<Hash32, (String, Vec<BitStringPair>)>,
    revoked: HashMap<Hash32, RevocationRecord>,
}

impl Ingestor {
    pub fn new(model: EarthModel, f: RelativeGridSize, log_keys: BTreeMap<String, PublicKey>, ca_keys: BTreeMap<String, PublicKey>) -> Self {
        Ingestor { model, f, log_keys, ca_keys, live: HashMap::new(), revoked: HashMap::new() }
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn apply(&mut self, entry: &[u8]) -> Outcome {
        match LogEntry::decode(entry) {
            Ok(LogEntry::Cert(c)) => self.apply_cert(c, &entry[1..]),
            Ok(LogEntry::Revocation(r)) => self.apply_revocation(r),
            Err(e) => Outcome::Skipped(Skip::Malformed(e.to_string())),
        }
    }

    fn apply_cert(&mut self, cert: GeoCert, body: &[u8]) -> Outcome {
        if cert.scts.is_empty() {
            return Outcome::Skipped(Skip::Precert);
        }
        if sct_count(&cert, &self.log_keys) == 0 {
            return Outcome::Skipped(Skip::NoValidSct);
        }
        if !self.ca_keys.is_empty() {
            let Some(k) = self.ca_keys.get(&cert.issuer_id) else {
                return Outcome::Skipped(Skip::UnknownIssuer(cert.issuer_id.clone()));
            };
            if cert.verify_signature(k).is_err() {
                return Outcome::Skipped(Skip::BadIssuerSignature);
            }
        }
        let hash = cert.cert_hash();
        if self.revoked.get(&hash).is_some_and(|r| r.issuer_id == cert.issuer_id) {
            return Outcome::Skipped(Skip::Revoked);
        }
        if self.live.contains_key(&hash) {
            return Outcome::Skipped(Skip::Duplicate);
        }
        let pairs = match cover_volume(&self.model, &cert.volume, self.f) {
            Ok(p) => p,
            Err(e) => return Outcome::Skipped(Skip::Cover(e.to_string())),
        };
        self.live.insert(hash, (cert.issuer_id.clone(), pairs.clone()));
        Outcome::Insert { placement: Placement { cert_hash: hash, pairs }, body: body.to_vec() }
    }

    fn apply_revocation(&mut self, rec: RevocationRecord) -> Outcome {
        if !self.ca_keys.is_empty() {
            let Some(k) = self.ca_keys.get(&rec.issuer_id) else {
                return Outcome::Skipped(Skip::UnknownIssuer(rec.issuer_id.clone()));
            };
            if rec.verify(k).is_err() {
                return Outcome::Skipped(Skip::BadIssuerSignature);
            }
        }
        if self.revoked.contains_key(&rec.cert_hash) {
            return Outcome::Skipped(Skip::Duplicate);
        }
        if let Some((issuer, _)) = self.live.get(&rec.cert_hash) {
            if *issuer != rec.issuer_id {
                return Outcome::Skipped(Skip::RevocationForeignIssuer);
            }
        }
        self.revoked.insert(rec.cert_hash, rec.clone());
        match self.live.remove(&rec.cert_hash) {
            Some((_, pairs)) => Outcome::Remove { placement: Placement { cert_hash: rec.cert_hash, pairs }, record: rec },
            None => Outcome::Revocation(rec),
        }
    }
}

/// Accumulated tree changes of one ingest cycle.
#[derive(Debug, Default)]
pub struct Batch {
    pub inserts: Vec<Placement>,
    pub removals: Vec<Placement>,
    pub bodies: Vec<(Hash32, Vec<u8>)>,
    pub revocations: Vec<(RevocationRecord, Vec<BitStringPair>)>,
    pub skipped: usize,
}

impl Batch {
    pub fn push(&mut self, o: Outcome) {
        match o {
            Outcome::Insert { placement, body } => {
                self.bodies.push((placement.cert_hash, body));
                self.inserts.push(placement);
            }
            Outcome::Remove { placement, record } => {
                self.revocations.push((record, placement.pairs.clone()));
                self.removals.push(placement);
            }
            Outcome::Revocation(r) => self.revocations.push((r, Vec::new())),
            Outcome::Skipped(s) => {
                log::debug!("skipped log entry: {s:?}");
                self.skipped += 1;
            }
        }
    }
}

/// Verified view of one source log.
#[derive(Debug, Clone, Default)]
struct Cursor {
    mirror: MerkleTree,
    sth: Option<Sth>,
    quarantined: Option<String>,
}

enum SyncError {
    Unreachable(String),
    Quarantine(String),
}

fn fetch_range(src: &dyn LogSource, start: u64, end: u64, chunk: u64) -> Result<Vec<Vec<u8>>, LogError> {
    let mut out = Vec::with_capacity((end - start) as usize);
    let mut at = start;
    while at < end {
        let hi = (at + chunk).min(end);
        let got = src.get_entries(at, hi)?;
        if got.is_empty() || got.len() as u64 > hi - at {
            return Err(LogError::Inconsistent { log: src.log_id().to_string(), detail: format!("get_entries({at},{hi}) returned {} entries", got.len()) });
        }
        at += got.len() as u64;
        out.extend(got);
    }
    Ok(out)
}

/// Fetches a log's entries `[0, sth.tree_size)` and checks them against the STH.
pub fn fetch_verified_prefix(src: &dyn LogSource, sth: &Sth) -> Result<Vec<Vec<u8>>, LogError> {
    let entries = fetch_range(src, 0, sth.tree_size, ENTRY_CHUNK)?;
    let mut t = MerkleTree::new();
    for e in &entries {
        t.push(leaf_hash(e));
    }
    if t.root() != sth.root {
        return Err(LogError::Inconsistent { log: src.log_id().to_string(), detail: "entries do not match the cited tree head".into() });
    }
    Ok(entries)
}

pub struct MapServerOptions {
    pub model: EarthModel,
    pub f_ingest: RelativeGridSize,
    pub log_keys: BTreeMap<String, PublicKey>,
    pub ca_keys: BTreeMap<String, PublicKey>,
    pub storage: Option<PathBuf>,
}

impl MapServerOptions {
    pub fn new(log_keys: BTreeMap<String, PublicKey>) -> Self {
        MapServerOptions {
            model: EarthModel::WGS84,
            f_ingest: RelativeGridSize::new(default_f()).expect("positive"),
            log_keys,
            ca_keys: BTreeMap::new(),
            storage: None,
        }
    }
}

/// An immutable table together with the head that commits to it.
pub struct ServingState {
    pub smt: Smt,
    pub smh: SignedMapHead,
    pub index: u64,
}

struct IngestState {
    ingestor: Ingestor,
    shadow: Option<Smt>,
    cursors: BTreeMap<String, Cursor>,
}

#[derive(Default)]
struct History {
    heads: Vec<SignedMapHead>,
    tree: MerkleTree,
}

impl History {
    fn push(&mut self, smh: SignedMapHead) -> u64 {
        self.tree.push(leaf_hash(&smh.canonical_encode()));
        self.heads.push(smh);
        self.heads.len() as u64 - 1
    }
}

/// Summary of one ingest cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub smh_index: u64,
    pub smt_root: Hash32,
    pub entries: usize,
    pub inserted: usize,
    pub removed: usize,
    pub skipped: usize,
    pub unreachable: Vec<String>,
    pub quarantined: Vec<String>,
}

pub struct MapServer {
    model: EarthModel,
    key: KeyPair,
    sources: Vec<Arc<dyn LogSource>>,
    log_keys: BTreeMap<String, PublicKey>,
    serving: RwLock<Option<Arc<ServingState>>>,
    ingest: Mutex<IngestState>,
    certs: RwLock<HashMap<Hash32, Vec<u8>>>,
    revocations: RwLock<Vec<(RevocationRecord, Vec<BitStringPair>)>>,
    history: RwLock<History>,
    storage: Option<PathBuf>,
}

const HISTORY_FILE: &str = "smh-history.bin";

impl MapServer {
    pub fn new(key: KeyPair, sources: Vec<Arc<dyn LogSource>>, opts: MapServerOptions) -> Result<Self, ServerError> {
        for s in &sources {
            if !opts.log_keys.contains_key(s.log_id()) {
                return Err(ServerError::Config(format!("no key configured for source log {:?}", s.log_id())));
            }
        }
        if opts.ca_keys.is_empty() {
            log::warn!("no CA keys configured: issuer signatures are not checked at ingest");
        }
        let mut history = History::default();
        if let Some(dir) = &opts.storage {
            std::fs::create_dir_all(dir)?;
            for smh in load_history(&dir.join(HISTORY_FILE))? {
                history.push(smh);
            }
            log::info!("restored {} map heads from {}", history.heads.len(), dir.display());
        }
        let cursors = sources.iter().map(|s| (s.log_id().to_string(), Cursor::default())).collect();
        Ok(MapServer {
            model: opts.model,
            ingest: Mutex::new(IngestState {
                ingestor: Ingestor::new(opts.model, opts.f_ingest, opts.log_keys.clone(), opts.ca_keys),
                shadow: None,
                cursors,
            }),
            key,
            sources,
            log_keys: opts.log_keys,
            serving: RwLock::new(None),
            certs: RwLock::new(HashMap::new()),
            revocations: RwLock::new(Vec::new()),
            history: RwLock::new(history),
            storage: opts.storage,
        })
    }

    pub fn model(&self) -> &EarthModel {
        &self.model
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    /// The current serving table, if any head was issued since start.
    pub fn serving(&self) -> Option<Arc<ServingState>> {
        self.serving.read().clone()
    }

    pub fn cert_count(&self) -> usize {
        self.certs.read().len()
    }

    fn sync_source(&self, src: &dyn LogSource, cur: &Cursor) -> Result<(Sth, MerkleTree, Vec<Vec<u8>>), SyncError> {
        let id = src.log_id();
        let sth = src.get_sth().map_err(|e| SyncError::Unreachable(e.to_string()))?;
        let key = &self.log_keys[id];
        if sth.verify(key).is_err() {
            return Err(SyncError::Quarantine("tree head signature does not verify".into()));
        }
        let have = cur.mirror.size();
        if sth.tree_size < have {
            return Err(SyncError::Quarantine(format!("tree shrank from {have} to {}", sth.tree_size)));
        }
        let entries = match fetch_range(src, have, sth.tree_size, ENTRY_CHUNK) {
            Ok(e) => e,
            Err(LogError::Inconsistent { detail, .. }) => return Err(SyncError::Quarantine(detail)),
            Err(e) => return Err(SyncError::Unreachable(e.to_string())),
        };
        let mut mirror = cur.mirror.clone();
        for e in &entries {
            mirror.push(leaf_hash(e));
        }
        if mirror.root() != sth.root {
            return Err(SyncError::Quarantine(format!("entries up to {} do not match the signed root", sth.tree_size)));
        }
        Ok((sth, mirror, entries))
    }

    /// Fetches new entries from every source, updates the shadow table,
    /// swaps it in and issues a new map head.
    pub fn ingest_cycle(&self) -> Result<CycleReport, ServerError> {
        let mut st = self.ingest.lock();
        let st = &mut *st;
        let mut batch = Batch::default();
        let mut entries_seen = 0;
        let mut unreachable = Vec::new();
        let mut quarantined = Vec::new();
        for src in &self.sources {
            let id = src.log_id().to_string();
            let cur = st.cursors.get_mut(&id).expect("cursor per source");
            if cur.quarantined.is_some() {
                quarantined.push(id);
                continue;
            }
            match self.sync_source(src.as_ref(), cur) {
                Ok((sth, mirror, entries)) => {
                    entries_seen += entries.len();
                    for e in &entries {
                        batch.push(st.ingestor.apply(e));
                    }
                    cur.mirror = mirror;
                    cur.sth = Some(sth);
                }
                Err(SyncError::Unreachable(why)) => {
                    log::warn!("source log {id} unreachable, keeping its previous head: {why}");
                    unreachable.push(id);
                }
                Err(SyncError::Quarantine(why)) => {
                    log::error!("source log {id} quarantined: {why}");
                    cur.quarantined = Some(why);
                    quarantined.push(id);
                }
            }
        }
        if unreachable.len() == self.sources.len() {
            log::error!("ingest cycle skipped: no source log reachable");
            return Err(ServerError::Unreachable);
        }
        let sources: Vec<SmhSource> =
            st.cursors.iter().filter_map(|(id, c)| c.sth.clone().map(|sth| SmhSource { log_id: id.clone(), sth })).collect();

        let current = self.serving();
        let mut shadow = match st.shadow.take() {
            Some(s) => s,
            None => current.as_ref().map(|c| c.smt.clone()).unwrap_or_else(|| Smt::new(self.model)),
        };
        let root = shadow.batch_update(&batch.inserts, &batch.removals)?;

        {
            let mut certs = self.certs.write();
            for (h, b) in batch.bodies.drain(..) {
                certs.insert(h, b);
            }
        }
        if !batch.revocations.is_empty() {
            self.revocations.write().extend(batch.revocations.iter().cloned());
        }

        let (smh, index) = {
            let mut hist = self.history.write();
            let mut ts = Timestamp::now();
            if let Some(last) = hist.heads.last() {
                ts = ts.max(Timestamp(last.timestamp.0 + 1));
            }
            let smh = SignedMapHead::sign(root, ts, sources, &self.key);
            let index = hist.push(smh.clone());
            (smh, index)
        };
        if let Some(dir) = &self.storage {
            append_history(&dir.join(HISTORY_FILE), &smh)?;
        }

        let new_state = Arc::new(ServingState { smt: shadow, smh, index });
        let old = (*self.serving.write()).replace(new_state);
        drop(current);

        // The previous table becomes the next shadow once readers let go of
        // it; it then needs this cycle's changes replayed onto it.
        if let Some(old) = old {
            if let Some(mut smt) = reclaim(old, Duration::from_secs(2)) {
                smt.batch_update(&batch.inserts, &batch.removals)?;
                st.shadow = Some(smt);
            }
        }

        Ok(CycleReport {
            smh_index: index,
            smt_root: root,
            entries: entries_seen,
            inserted: batch.inserts.len(),
            removed: batch.removals.len(),
            skipped: batch.skipped,
            unreachable,
            quarantined,
        })
    }

    /// Runs `ingest_cycle` every `interval` on a background thread until
    /// the returned handle is stopped.
    pub fn spawn_ingest_loop(self: &Arc<Self>, interval: Duration) -> IngestLoop {
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let server = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            while !flag.load(std::sync::atomic::Ordering::Relaxed) {
                let t = Instant::now();
                match server.ingest_cycle() {
                    Ok(r) => log::info!("map head {} root {} (+{} −{} skipped {})", r.smh_index, r.smt_root, r.inserted, r.removed, r.skipped),
                    Err(e) => log::error!("ingest cycle failed: {e}"),
                }
                while t.elapsed() < interval && !flag.load(std::sync::atomic::Ordering::Relaxed) {
                    thread::sleep(Duration::from_millis(20).min(interval));
                }
            }
        });
        IngestLoop { stop, handle: Some(handle) }
    }

    pub fn handle_query(&self, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
        req.validate(&self.model)?;
        let state = self.serving().ok_or_else(|| ApiError::Server("no map head issued yet".into()))?;
        let proof = state.smt.generate_proof(&req.pairs);
        let certs = self.certs.read();
        let mut certificates = Vec::new();
        for h in proof.cert_hashes() {
            let body = certs.get(&h).ok_or_else(|| ApiError::Server(format!("missing body for {h}")))?;
            certificates.push(B64Bytes(body.clone()));
        }
        drop(certs);
        let revocations = self
            .revocations
            .read()
            .iter()
            .filter(|(_, pairs)| pairs.iter().any(|p| req.pairs.iter().any(|q| p.intersects_volume(q))))
            .map(|(r, _)| r.clone())
            .collect();
        Ok(QueryResponse { proof, smh: state.smh.clone(), smh_index: state.index, certificates, revocations })
    }

    /// Canonical certificate bytes by hash.
    pub fn get_cert(&self, hash: &Hash32) -> Result<Vec<u8>, ApiError> {
        self.certs.read().get(hash).cloned().ok_or_else(|| ApiError::NotFound(format!("certificate {hash}")))
    }

    /// Latest head, or the head at `index` in the history.
    pub fn get_smh(&self, index: Option<u64>) -> Result<SmhResponse, ApiError> {
        let hist = self.history.read();
        let n = hist.heads.len() as u64;
        let i = match index {
            Some(i) if i < n => i,
            Some(i) => return Err(ApiError::NotFound(format!("map head {i} (have {n})"))),
            None if n > 0 => n - 1,
            None => return Err(ApiError::NotFound("no map head issued yet".into())),
        };
        Ok(SmhResponse { index: i, smh: hist.heads[i as usize].clone() })
    }

    /// Consistency proof between two sizes of the head history.
    pub fn get_consistency(&self, from: u64, to: u64) -> Result<ConsistencyResponse, ApiError> {
        let proof = self.history.read().tree.consistency_proof(from, to).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        Ok(ConsistencyResponse { from, to, proof })
    }

    pub fn consistency_head(&self) -> SignedConsistencyHead {
        let hist = self.history.read();
        SignedConsistencyHead::sign(hist.tree.root(), hist.tree.size(), &self.key)
    }

    /// Every head issued so far, oldest first.
    pub fn smh_history(&self) -> Vec<SignedMapHead> {
        self.history.read().heads.clone()
    }
}

/// In-process access with the same semantics as the HTTP API.
impl crate::api::MapServerApi for MapServer {
    fn name(&self) -> String {
        format!("local:{}", self.public_key())
    }

    fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
        self.handle_query(req)
    }

    fn smh(&self, index: Option<u64>) -> Result<SmhResponse, ApiError> {
        self.get_smh(index)
    }

    fn consistency(&self, from: u64, to: u64) -> Result<ConsistencyResponse, ApiError> {
        self.get_consistency(from, to)
    }

    fn consistency_head(&self) -> Result<SignedConsistencyHead, ApiError> {
        Ok(MapServer::consistency_head(self))
    }

    fn cert(&self, hash: &Hash32) -> Result<Vec<u8>, ApiError> {
        self.get_cert(hash)
    }
}

/// Stops the background ingest thread on drop.
pub struct IngestLoop {
    stop: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl IngestLoop {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, std::sync::atomic::Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for IngestLoop {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Waits until no reader holds `state`, then takes its table.
fn reclaim(mut state: Arc<ServingState>, limit: Duration) -> Option<Smt> {
    let t = Instant::now();
    loop {
        match Arc::try_unwrap(state) {
            Ok(s) => return Some(s.smt),
            Err(s) if t.elapsed() < limit => {
                state = s;
                thread::sleep(Duration::from_millis(1));
            }
            Err(_) => {
                log::warn!("previous table still in use, rebuilding the shadow next cycle");
                return None;
            }
        }
    }
}

fn load_history(path: &Path) -> Result<Vec<SignedMapHead>, ServerError> {
    let mut bytes = Vec::new();
    match std::fs::File::open(path) {
        Ok(mut f) => f.read_to_end(&mut bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut r = Reader::new(&bytes);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let rec = r.bytes("history record").map_err(|e| ServerError::Storage(e.to_string()))?;
        out.push(SignedMapHead::decode(rec).map_err(|e| ServerError::Storage(e.to_string()))?);
    }
    Ok(out)
}

fn append_history(path: &Path, smh: &SignedMapHead) -> Result<(), ServerError> {
    let mut w = Writer::new();
    w.bytes(&smh.canonical_encode());
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&w.finish())?;
    f.sync_data()?;
    Ok(())
}

/// Rebuilds the tree an SMH commits to from the log prefixes it cites and
/// returns the resulting root.
pub fn replay_smh(
    model: EarthModel,
    f: RelativeGridSize,
    smh: &SignedMapHead,
    logs: &[Arc<dyn LogSource>],
    log_keys: &BTreeMap<String, PublicKey>,
    ca_keys: &BTreeMap<String, PublicKey>,
) -> Result<Hash32, ServerError> {
    let mut ing = Ingestor::new(model, f, log_keys.clone(), ca_keys.clone());
    let mut batch = Batch::default();
    for s in &smh.sources {
        let src = logs.iter().find(|l| l.log_id() == s.log_id).ok_or_else(|| LogError::UnknownLog(s.log_id.clone()))?;
        for e in fetch_verified_prefix(src.as_ref(), &s.sth)? {
            batch.push(ing.apply(&e));
        }
    }
    let mut smt = Smt::new(model);
    Ok(smt.batch_update(&batch.inserts, &batch.removals)?)
}
