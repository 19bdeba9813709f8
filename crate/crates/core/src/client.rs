//! Relying-party client: query construction, multi-server fetch with proof
//! verification, union of verified sets, exact filtering and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{ApiError, MapServerApi, QueryRequest, QueryResponse, RemoteMap};
use crate::cert::{validate_object, CertError, Decision, GeoCert, MatchMode, RevocationRecord, TrustPreference, Validation};
use crate::cover::{circle_frustums, cover_volume, CoverError, RelativeGridSize, VolumeSpec};
use crate::crypto::{Hash32, PublicKey};
use crate::geo::{EarthModel, GeoPoint};
use crate::log::{sct_count, verify_smh, LogError, SignedMapHead};
use crate::smt::{verify_proof, ProofError};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Cover(#[from] CoverError),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error("only {verified} of the required {required} map servers returned a verifiable response")]
    Quorum { verified: usize, required: usize, failures: Vec<ServerFailure> },
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEntry {
    pub url: String,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub servers: Vec<ServerEntry>,
    /// Verified responses required (M).
    #[serde(default = "one")]
    pub quorum: usize,
    pub log_keys: BTreeMap<String, PublicKey>,
    /// Valid SCTs from distinct trusted logs required per certificate (N).
    #[serde(default = "one")]
    pub sct_quorum: usize,
    /// Issuer keys by CA id. Empty disables issuer signature checks.
    #[serde(default)]
    pub ca_keys: BTreeMap<String, PublicKey>,
    #[serde(default)]
    pub trust_preference: Option<PathBuf>,
    #[serde(default = "one_f")]
    pub f_query: f64,
    #[serde(default)]
    pub match_mode: MatchMode,
}

impl ClientConfig {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ClientConfig = serde_json::from_str(&text).map_err(|e| ClientError::Config(e.to_string()))?;
        if let (Some(dir), Some(tp)) = (path.parent(), cfg.trust_preference.as_mut()) {
            if tp.is_relative() {
                *tp = dir.join(&*tp);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.quorum == 0 || self.sct_quorum == 0 {
            return Err(ClientError::Config("quorum and sct_quorum must be at least 1".into()));
        }
        if self.servers.len() < self.quorum {
            return Err(ClientError::Config(format!("{} servers configured but quorum is {}", self.servers.len(), self.quorum)));
        }
        RelativeGridSize::new(self.f_query).map_err(|e| ClientError::Config(format!("f_query: {e}")))?;
        Ok(())
    }

    pub fn load_trust_preference(&self) -> Result<TrustPreference, ClientError> {
        let path = self.trust_preference.as_ref().ok_or_else(|| ClientError::Config("no trust preference file configured".into()))?;
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        TrustPreference::from_json(&text).map_err(|e| ClientError::Config(format!("trust preference: {e}")))
    }
}

/// Why a server's response was discarded.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ResponseError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("map head does not verify: {0}")]
    MapHead(String),
    #[error("proof answers a different query")]
    QueryMismatch,
    #[error("proof does not verify: {0}")]
    Proof(String),
    #[error("certificate {0} is in the proof but its body is missing")]
    MissingBody(Hash32),
    #[error("certificate {0} was returned but is not in the proof")]
    ExtraBody(Hash32),
    #[error("undecodable certificate body: {0}")]
    BadBody(String),
}

impl From<ApiError> for ResponseError {
    fn from(e: ApiError) -> Self {
        ResponseError::Transport(e.to_string())
    }
}

impl From<LogError> for ResponseError {
    fn from(e: LogError) -> Self {
        ResponseError::MapHead(e.to_string())
    }
}

impl From<ProofError> for ResponseError {
    fn from(e: ProofError) -> Self {
        ResponseError::Proof(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerFailure {
    pub server: String,
    pub error: ResponseError,
    /// The offending response, kept as evidence when one was received.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<Box<QueryResponse>>,
}

/// A response that passed every check against its server's key.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedResponse {
    pub smh: SignedMapHead,
    pub smh_index: u64,
    /// Every certificate hash proven for the query, with its body.
    pub certs: BTreeMap<Hash32, GeoCert>,
    pub revocations: Vec<RevocationRecord>,
}

/// Checks a response for `req` from a server holding `map_key`: head
/// signature and cited log heads, proof against the head's root, and
/// certificate bodies matching exactly the proven hash set.
pub fn verify_response(
    model: &EarthModel,
    req: &QueryRequest,
    resp: &QueryResponse,
    map_key: &PublicKey,
    log_keys: &BTreeMap<String, PublicKey>,
) -> Result<VerifiedResponse, ResponseError> {
    verify_smh(&resp.smh, map_key, log_keys)?;
    let mut asked = req.pairs.clone();
    asked.sort_by_key(|p| p.encode());
    asked.dedup();
    let mut answered = resp.proof.query_pairs.clone();
    answered.sort_by_key(|p| p.encode());
    if asked != answered {
        return Err(ResponseError::QueryMismatch);
    }
    let proven = verify_proof(model, &resp.proof, &resp.smh.smt_root)?;
    let mut certs = BTreeMap::new();
    for body in &resp.certificates {
        let c = GeoCert::decode(&body.0).map_err(|e| ResponseError::BadBody(e.to_string()))?;
        let h = c.cert_hash();
        if !proven.contains(&h) {
            return Err(ResponseError::ExtraBody(h));
        }
        certs.insert(h, c);
    }
    if let Some(missing) = proven.iter().find(|h| !certs.contains_key(h)) {
        return Err(ResponseError::MissingBody(*missing));
    }
    Ok(VerifiedResponse { smh: resp.smh.clone(), smh_index: resp.smh_index, certs, revocations: resp.revocations.clone() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootRecord {
    pub smh_index: u64,
    pub smh: SignedMapHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub cert_hash: Hash32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedResult {
    /// Union of verified certificates that passed the per-certificate
    /// checks, sorted by hash.
    pub certs: Vec<GeoCert>,
    /// Union of proven hashes before per-certificate checks.
    pub proven: BTreeSet<Hash32>,
    pub roots: BTreeMap<String, RootRecord>,
    pub failures: Vec<ServerFailure>,
    pub excluded: Vec<Exclusion>,
}

/// Keeps the certificates whose volume meets the query volume.
pub fn filter_exact(certs: &[GeoCert], query: &VolumeSpec) -> Vec<GeoCert> {
    certs.iter().filter(|c| c.volume.intersects(query)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub request: QueryRequest,
    pub verified: VerifiedResult,
    pub filtered: Vec<GeoCert>,
    pub validation: Validation,
}

impl CheckOutcome {
    pub fn decision(&self) -> Decision {
        self.validation.decision
    }

    /// Machine-readable evidence, one JSON object per line.
    pub fn evidence_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.push(serde_json::json!({"type": "query", "pairs": self.request.pairs}).to_string());
        for (server, r) in &self.verified.roots {
            out.push(serde_json::json!({"type": "root", "server": server, "smh_index": r.smh_index, "smh": r.smh}).to_string());
        }
        for f in &self.verified.failures {
            out.push(serde_json::json!({"type": "server_failure", "failure": f}).to_string());
        }
        let filtered: BTreeSet<Hash32> = self.filtered.iter().map(|c| c.cert_hash()).collect();
        for c in &self.verified.certs {
            let h = c.cert_hash();
            out.push(
                serde_json::json!({
                    "type": "cert",
                    "hash": h,
                    "subject": c.subject_uri,
                    "issuer": c.issuer_id,
                    "loc_verification": c.loc_verification,
                    "intersects_query": filtered.contains(&h),
                })
                .to_string(),
            );
        }
        for e in &self.verified.excluded {
            out.push(serde_json::json!({"type": "excluded", "hash": e.cert_hash, "reason": e.reason}).to_string());
        }
        out.push(serde_json::json!({"type": "decision", "validation": self.validation}).to_string());
        out
    }
}

/// Exit status conventions for the `check` command.
pub fn exit_code(d: Decision) -> i32 {
    match d {
        Decision::Accept => 0,
        Decision::Reject => 2,
        Decision::Conflict => 3,
    }
}

/// Exit status when no decision could be reached.
pub const EXIT_INFRASTRUCTURE: i32 = 4;

pub struct Client {
    model: EarthModel,
    servers: Vec<(Arc<dyn MapServerApi>, PublicKey)>,
    quorum: usize,
    log_keys: BTreeMap<String, PublicKey>,
    sct_quorum: usize,
    ca_keys: BTreeMap<String, PublicKey>,
    f_query: RelativeGridSize,
    mode: MatchMode,
    now: Option<Timestamp>,
}

impl Client {
    pub fn new(
        servers: Vec<(Arc<dyn MapServerApi>, PublicKey)>,
        quorum: usize,
        log_keys: BTreeMap<String, PublicKey>,
        sct_quorum: usize,
    ) -> Result<Self, ClientError> {
        if quorum == 0 || sct_quorum == 0 {
            return Err(ClientError::Config("quorum and sct_quorum must be at least 1".into()));
        }
        if servers.len() < quorum {
            return Err(ClientError::Config(format!("{} servers configured but quorum is {quorum}", servers.len())));
        }
        Ok(Client {
            model: EarthModel::WGS84,
            servers,
            quorum,
            log_keys,
            sct_quorum,
            ca_keys: BTreeMap::new(),
            f_query: RelativeGridSize::new(1.0).expect("positive"),
            mode: MatchMode::Host,
            now: None,
        })
    }

    pub fn from_config(cfg: &ClientConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let servers = cfg.servers.iter().map(|s| (Arc::new(RemoteMap::new(&s.url)) as Arc<dyn MapServerApi>, s.public_key)).collect();
        let c = Client::new(servers, cfg.quorum, cfg.log_keys.clone(), cfg.sct_quorum)?
            .with_ca_keys(cfg.ca_keys.clone())
            .with_f_query(RelativeGridSize::new(cfg.f_query)?)
            .with_match_mode(cfg.match_mode);
        Ok(c)
    }

    pub fn with_ca_keys(mut self, ca_keys: BTreeMap<String, PublicKey>) -> Self {
        self.ca_keys = ca_keys;
        self
    }

    pub fn with_f_query(mut self, f: RelativeGridSize) -> Self {
        self.f_query = f;
        self
    }

    pub fn with_match_mode(mut self, mode: MatchMode) -> Self {
        self.mode = mode;
        self
    }

    /// Fixes the time used for validity checks.
    pub fn with_now(mut self, now: Timestamp) -> Self {
        self.now = Some(now);
        self
    }

    pub fn model(&self) -> &EarthModel {
        &self.model
    }

    /// Covers the circle (or cylinder, with `alt`) around `center`.
    pub fn build_query(&self, center: &GeoPoint, radius: f64, alt: Option<(f64, f64)>) -> Result<(QueryRequest, VolumeSpec), ClientError> {
        let volume = VolumeSpec::new(circle_frustums(&self.model, center, radius, alt)?)?;
        let pairs = cover_volume(&self.model, &volume, self.f_query)?;
        Ok((QueryRequest::new(pairs), volume))
    }

    /// Queries every server, verifies each response and unions the
    /// verified sets. Fails unless at least `quorum` responses verify.
    pub fn fetch_verified(&self, req: &QueryRequest) -> Result<VerifiedResult, ClientError> {
        let outcomes: Vec<(String, Result<VerifiedResponse, ServerFailure>)> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .servers
                .iter()
                .map(|(api, key)| {
                    s.spawn(move || {
                        let name = api.name();
                        let r = match api.query(req) {
                            Err(e) => Err(ServerFailure { server: name.clone(), error: e.into(), response: None }),
                            Ok(resp) => verify_response(&self.model, req, &resp, key, &self.log_keys).map_err(|error| ServerFailure {
                                server: name.clone(),
                                error,
                                response: Some(Box::new(resp)),
                            }),
                        };
                        (name, r)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch thread")).collect()
        });

        let mut roots = BTreeMap::new();
        let mut failures = Vec::new();
        let mut union: BTreeMap<Hash32, GeoCert> = BTreeMap::new();
        let mut revocations: Vec<RevocationRecord> = Vec::new();
        for (name, r) in outcomes {
            match r {
                Ok(v) => {
                    roots.insert(name, RootRecord { smh_index: v.smh_index, smh: v.smh });
                    union.extend(v.certs);
                    revocations.extend(v.revocations);
                }
                Err(f) => {
                    log::warn!("discarding response from {}: {}", f.server, f.error);
                    failures.push(f);
                }
            }
        }
        if roots.len() < self.quorum {
            return Err(ClientError::Quorum { verified: roots.len(), required: self.quorum, failures });
        }

        let proven: BTreeSet<Hash32> = union.keys().copied().collect();
        let revoked = self.valid_revocations(&revocations, &union);
        let now = self.now.unwrap_or_else(Timestamp::now);
        let mut certs = Vec::new();
        let mut excluded = Vec::new();
        for (h, c) in union {
            match self.cert_problem(&c, &h, &revoked, now) {
                None => certs.push(c),
                Some(reason) => excluded.push(Exclusion { cert_hash: h, reason }),
            }
        }
        Ok(VerifiedResult { certs, proven, roots, failures, excluded })
    }

    fn valid_revocations(&self, recs: &[RevocationRecord], certs: &BTreeMap<Hash32, GeoCert>) -> BTreeSet<Hash32> {
        recs.iter()
            .filter(|r| {
                let issuer_matches = certs.get(&r.cert_hash).is_none_or(|c| c.issuer_id == r.issuer_id);
                let signed = match self.ca_keys.get(&r.issuer_id) {
                    Some(k) => r.verify(k).is_ok(),
                    None => self.ca_keys.is_empty(),
                };
                issuer_matches && signed
            })
            .map(|r| r.cert_hash)
            .collect()
    }

    fn cert_problem(&self, c: &GeoCert, h: &Hash32, revoked: &BTreeSet<Hash32>, now: Timestamp) -> Option<String> {
        if revoked.contains(h) {
            return Some("revoked".into());
        }
        let scts = sct_count(c, &self.log_keys);
        if scts < self.sct_quorum {
            return Some(format!("{scts} valid SCTs, {} required", self.sct_quorum));
        }
        if !self.ca_keys.is_empty() {
            match self.ca_keys.get(&c.issuer_id) {
                None => return Some(format!("unknown issuer {:?}", c.issuer_id)),
                Some(k) if c.verify_signature(k).is_err() => return Some("issuer signature does not verify".into()),
                Some(_) => {}
            }
        }
        if !c.is_valid_at(now) {
            return Some("outside its validity period".into());
        }
        None
    }

    /// Decides whether `object` may claim the space around `center`.
    pub fn check(
        &self,
        object: &str,
        center: &GeoPoint,
        radius: f64,
        alt: Option<(f64, f64)>,
        tp: &TrustPreference,
    ) -> Result<CheckOutcome, ClientError> {
        let (request, volume) = self.build_query(center, radius, alt)?;
        let verified = self.fetch_verified(&request)?;
        let filtered = filter_exact(&verified.certs, &volume);
        let validation = validate_object(object, &filtered, tp, &volume, self.mode)?;
        Ok(CheckOutcome { request, verified, filtered, validation })
    }
}
