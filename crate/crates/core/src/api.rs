//! Wire types shared by the map server, the log stub and their clients,
//! plus blocking HTTP clients for both.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cert::RevocationRecord;
use crate::crypto::Hash32;
use crate::geo::{BitStringPair, EarthModel, PAIR_ENCODED_LEN};
use crate::log::{LogError, LogSource, Sct, SignedConsistencyHead, SignedMapHead, Sth};
use crate::smt::Proof;

/// Upper bound on pairs per query.
pub const MAX_QUERY_PAIRS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("transport: {0}")]
    Transport(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::NotFound(_) => 404,
            ApiError::Server(_) | ApiError::Transport(_) => 500,
        }
    }
}

/// Opaque bytes carried as base64 in JSON.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct B64Bytes(pub Vec<u8>);

impl Serialize for B64Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for B64Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map(B64Bytes).map_err(serde::de::Error::custom)
    }
}

/// A set of node pairs covering the queried volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub pairs: Vec<BitStringPair>,
}

impl QueryRequest {
    /// Sorts pairs by their encoding and drops duplicates.
    pub fn new(mut pairs: Vec<BitStringPair>) -> Self {
        pairs.sort_by_key(|p| p.encode());
        pairs.dedup();
        QueryRequest { pairs }
    }

    pub fn validate(&self, model: &EarthModel) -> Result<(), ApiError> {
        if self.pairs.is_empty() {
            return Err(ApiError::BadRequest("no pairs".into()));
        }
        if self.pairs.len() > MAX_QUERY_PAIRS {
            return Err(ApiError::BadRequest(format!("{} pairs exceed the limit of {MAX_QUERY_PAIRS}", self.pairs.len())));
        }
        for p in &self.pairs {
            model.validate(p).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        }
        for (i, a) in self.pairs.iter().enumerate() {
            for b in &self.pairs[i + 1..] {
                if a.contains_volume(b) || b.contains_volume(a) {
                    return Err(ApiError::BadRequest(format!("pairs {a} and {b} are nested")));
                }
            }
        }
        Ok(())
    }

    /// One count byte followed by the 11-byte pair encodings.
    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.pairs.len() * PAIR_ENCODED_LEN);
        out.push(self.pairs.len() as u8);
        for p in &self.pairs {
            out.extend_from_slice(&p.encode());
        }
        out
    }

    pub fn decode_binary(b: &[u8]) -> Result<Self, ApiError> {
        let (&n, rest) = b.split_first().ok_or_else(|| ApiError::BadRequest("empty body".into()))?;
        if rest.len() != n as usize * PAIR_ENCODED_LEN {
            return Err(ApiError::BadRequest(format!("expected {n} pairs of {PAIR_ENCODED_LEN} bytes")));
        }
        let pairs = rest
            .chunks(PAIR_ENCODED_LEN)
            .map(BitStringPair::decode)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        Ok(QueryRequest { pairs })
    }
}

/// Proof, map head and the bodies of every certificate in the openings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub proof: Proof,
    pub smh: SignedMapHead,
    pub smh_index: u64,
    /// Canonical certificate encodings.
    pub certificates: Vec<B64Bytes>,
    pub revocations: Vec<RevocationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmhResponse {
    pub index: u64,
    pub smh: SignedMapHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyResponse {
    pub from: u64,
    pub to: u64,
    pub proof: Vec<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionResponse {
    pub index: u64,
    pub size: u64,
    pub proof: Vec<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitCertRequest {
    pub cert: B64Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitCertResponse {
    pub sct: Sct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRevocationResponse {
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntriesResponse {
    pub entries: Vec<B64Bytes>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Map server operations a client needs.
pub trait MapServerApi: Send + Sync {
    /// Human-readable name for evidence output.
    fn name(&self) -> String;
    fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ApiError>;
    fn smh(&self, index: Option<u64>) -> Result<SmhResponse, ApiError>;
    fn consistency(&self, from: u64, to: u64) -> Result<ConsistencyResponse, ApiError>;
    fn consistency_head(&self) -> Result<SignedConsistencyHead, ApiError>;
    fn cert(&self, hash: &Hash32) -> Result<Vec<u8>, ApiError>;
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into()
}

fn read<T: DeserializeOwned>(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T, ApiError> {
    read_sized(resp).map(|(v, _)| v)
}

fn read_sized<T: DeserializeOwned>(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<(T, usize), ApiError> {
    let mut resp = resp.map_err(|e| ApiError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let body = resp.body_mut().with_config().limit(256 << 20).read_to_vec().map_err(|e| ApiError::Transport(e.to_string()))?;
    if status != 200 {
        let msg = serde_json::from_slice::<ErrorBody>(&body).map(|e| e.error).unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
        return Err(match status {
            400..=499 if status == 404 => ApiError::NotFound(msg),
            400..=499 => ApiError::BadRequest(msg),
            _ => ApiError::Server(msg),
        });
    }
    let v = serde_json::from_slice(&body).map_err(|e| ApiError::Transport(format!("bad response body: {e}")))?;
    Ok((v, body.len()))
}

/// HTTP client for a map server.
pub struct RemoteMap {
    base: String,
    agent: ureq::Agent,
    binary: bool,
}

impl RemoteMap {
    pub fn new(base: &str) -> Self {
        RemoteMap { base: base.trim_end_matches('/').to_string(), agent: agent(Duration::from_secs(30)), binary: true }
    }

    /// Sends `req` and also returns the response body size in bytes.
    pub fn query_sized(&self, req: &QueryRequest) -> Result<(QueryResponse, usize), ApiError> {
        let url = format!("{}/v1/query", self.base);
        if self.binary {
            read_sized(self.agent.post(&url).header("content-type", "application/octet-stream").send(&req.encode_binary()[..]))
        } else {
            read_sized(self.agent.post(&url).send_json(req))
        }
    }

    /// Sends queries as JSON instead of the binary pair encoding.
    pub fn json_requests(mut self) -> Self {
        self.binary = false;
        self
    }
}

impl MapServerApi for RemoteMap {
    fn name(&self) -> String {
        self.base.clone()
    }

    fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
        self.query_sized(req).map(|(r, _)| r)
    }

    fn smh(&self, index: Option<u64>) -> Result<SmhResponse, ApiError> {
        let mut r = self.agent.get(format!("{}/v1/smh", self.base));
        if let Some(i) = index {
            r = r.query("index", i.to_string());
        }
        read(r.call())
    }

    fn consistency(&self, from: u64, to: u64) -> Result<ConsistencyResponse, ApiError> {
        read(self.agent.get(format!("{}/v1/consistency", self.base)).query("from", from.to_string()).query("to", to.to_string()).call())
    }

    fn consistency_head(&self) -> Result<SignedConsistencyHead, ApiError> {
        read(self.agent.get(format!("{}/v1/consistency-head", self.base)).call())
    }

    fn cert(&self, hash: &Hash32) -> Result<Vec<u8>, ApiError> {
        let b: B64Bytes = read(self.agent.get(format!("{}/v1/cert/{}", self.base, hash.to_hex())).call())?;
        Ok(b.0)
    }
}

/// HTTP client for a certificate log.
pub struct RemoteLog {
    id: String,
    base: String,
    agent: ureq::Agent,
}

impl RemoteLog {
    pub fn new(id: &str, base: &str) -> Self {
        RemoteLog { id: id.to_string(), base: base.trim_end_matches('/').to_string(), agent: agent(Duration::from_secs(30)) }
    }

    pub fn submit_cert(&self, canonical: &[u8]) -> Result<Sct, ApiError> {
        let body = SubmitCertRequest { cert: B64Bytes(canonical.to_vec()) };
        let r: SubmitCertResponse = read(self.agent.post(format!("{}/v1/log/submit-cert", self.base)).send_json(&body))?;
        Ok(r.sct)
    }

    pub fn submit_revocation(&self, rev: &RevocationRecord) -> Result<u64, ApiError> {
        let r: SubmitRevocationResponse = read(self.agent.post(format!("{}/v1/log/submit-revocation", self.base)).send_json(rev))?;
        Ok(r.index)
    }

    pub fn inclusion(&self, index: u64, size: u64) -> Result<InclusionResponse, ApiError> {
        read(self.agent.get(format!("{}/v1/log/inclusion", self.base)).query("index", index.to_string()).query("size", size.to_string()).call())
    }

    pub fn consistency(&self, from: u64, to: u64) -> Result<ConsistencyResponse, ApiError> {
        read(self.agent.get(format!("{}/v1/log/consistency", self.base)).query("from", from.to_string()).query("to", to.to_string()).call())
    }
}

impl LogSource for RemoteLog {
    fn log_id(&self) -> &str {
        &self.id
    }

    fn get_sth(&self) -> Result<Sth, LogError> {
        read(self.agent.get(format!("{}/v1/log/sth", self.base)).call()).map_err(|e: ApiError| LogError::Transport(e.to_string()))
    }

    fn get_entries(&self, start: u64, end: u64) -> Result<Vec<Vec<u8>>, LogError> {
        let r: EntriesResponse = read(
            self.agent.get(format!("{}/v1/log/entries", self.base)).query("start", start.to_string()).query("end", end.to_string()).call(),
        )
        .map_err(|e: ApiError| LogError::Transport(e.to_string()))?;
        Ok(r.entries.into_iter().map(|b| b.0).collect())
    }
}
