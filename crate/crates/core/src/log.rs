//! Append-only Merkle logs, signed heads, and the in-process certificate
//! log.
//!
//! Tree hashing follows RFC 6962: leaves are `H(0x00 ‖ data)`, interior
//! nodes `H(0x01 ‖ left ‖ right)` with the split at the largest power of
//! two below the size, and the empty tree hashes to `H("")`.

use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cert::{CertError, GeoCert, RevocationRecord};
use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{sha256, sha256_parts, CryptoError, Hash32, KeyPair, PublicKey, Signature};
use crate::time::Timestamp;

const STH_DOMAIN: &[u8] = b"geomap/sth/v1\0";
const SCT_DOMAIN: &[u8] = b"geomap/sct/v1\0";
const SMH_DOMAIN: &[u8] = b"geomap/smh/v1\0";
const SCH_DOMAIN: &[u8] = b"geomap/consistency-head/v1\0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("index {index} out of range for tree size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("invalid tree sizes {from} → {to} (current size {size})")]
    InvalidSizes { from: u64, to: u64, size: u64 },
    #[error("unknown log {0:?}")]
    UnknownLog(String),
    #[error("signature from {who} does not verify")]
    BadSignature { who: String },
    #[error("rejected entry: {0}")]
    Rejected(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("log {log} is inconsistent: {detail}")]
    Inconsistent { log: String, detail: String },
}

impl From<CryptoError> for LogError {
    fn from(e: CryptoError) -> Self {
        LogError::BadSignature { who: e.to_string() }
    }
}

pub fn leaf_hash(data: &[u8]) -> Hash32 {
    sha256_parts(&[&[0x00], data])
}

pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    sha256_parts(&[&[0x01], &left.0, &right.0])
}

pub fn empty_root() -> Hash32 {
    sha256(&[])
}

/// Largest power of two strictly below `n` (n ≥ 2).
fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1 << (63 - (n - 1).leading_zeros())
}

/// Hashes of every complete, aligned subtree of an append-only sequence
/// of leaf hashes.
#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    /// `levels[l][i]` hashes leaves `[i·2^l, (i+1)·2^l)`.
    levels: Vec<Vec<Hash32>>,
}

impl MerkleTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> u64 {
        self.levels.first().map_or(0, |l| l.len() as u64)
    }

    pub fn push(&mut self, leaf: Hash32) -> u64 {
        let index = self.size();
        let mut h = leaf;
        let mut level = 0;
        loop {
            if self.levels.len() == level {
                self.levels.push(Vec::new());
            }
            self.levels[level].push(h);
            let n = self.levels[level].len();
            if n % 2 == 1 {
                break;
            }
            h = node_hash(&self.levels[level][n - 2], &self.levels[level][n - 1]);
            level += 1;
        }
        index
    }

    pub fn leaf_hash(&self, index: u64) -> Option<Hash32> {
        self.levels.first().and_then(|l| l.get(index as usize).copied())
    }

    /// Hash of leaves `[start, end)`, following the RFC 6962 split.
    fn subtree(&self, start: u64, end: u64) -> Hash32 {
        let n = end - start;
        if n.is_power_of_two() && start.is_multiple_of(n) {
            let level = n.trailing_zeros() as usize;
            return self.levels[level][(start / n) as usize];
        }
        let k = split_point(n);
        node_hash(&self.subtree(start, start + k), &self.subtree(start + k, end))
    }

    /// Root of the first `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Hash32, LogError> {
        if size > self.size() {
            return Err(LogError::InvalidSizes { from: size, to: size, size: self.size() });
        }
        Ok(if size == 0 { empty_root() } else { self.subtree(0, size) })
    }

    pub fn root(&self) -> Hash32 {
        self.root_at(self.size()).expect("current size")
    }

    pub fn inclusion_proof(&self, index: u64, size: u64) -> Result<Vec<Hash32>, LogError> {
        if size > self.size() {
            return Err(LogError::InvalidSizes { from: index, to: size, size: self.size() });
        }
        if index >= size {
            return Err(LogError::IndexOutOfRange { index, size });
        }
        let mut path = Vec::new();
        self.path(index, 0, size, &mut path);
        Ok(path)
    }

    fn path(&self, m: u64, start: u64, end: u64, out: &mut Vec<Hash32>) {
        let n = end - start;
        if n == 1 {
            return;
        }
        let k = split_point(n);
        if m < k {
            self.path(m, start, start + k, out);
            out.push(self.subtree(start + k, end));
        } else {
            self.path(m - k, start + k, end, out);
            out.push(self.subtree(start, start + k));
        }
    }

    pub fn consistency_proof(&self, from: u64, to: u64) -> Result<Vec<Hash32>, LogError> {
        if from > to || to > self.size() {
            return Err(LogError::InvalidSizes { from, to, size: self.size() });
        }
        let mut out = Vec::new();
        if from > 0 && from < to {
            self.subproof(from, 0, to, true, &mut out);
        }
        Ok(out)
    }

    fn subproof(&self, m: u64, start: u64, end: u64, whole: bool, out: &mut Vec<Hash32>) {
        let n = end - start;
        if m == n {
            if !whole {
                out.push(self.subtree(start, end));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.subproof(m, start, start + k, whole, out);
            out.push(self.subtree(start + k, end));
        } else {
            self.subproof(m - k, start + k, end, false, out);
            out.push(self.subtree(start, start + k));
        }
    }
}

/// Leaf bytes together with their Merkle tree.
#[derive(Debug, Clone, Default)]
pub struct AppendOnlyLog {
    leaves: Vec<Vec<u8>>,
    tree: MerkleTree,
}

impl AppendOnlyLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn leaf(&self, index: u64) -> Option<&[u8]> {
        self.leaves.get(index as usize).map(|v| v.as_slice())
    }

    pub fn append(&mut self, data: Vec<u8>) -> u64 {
        self.tree.push(leaf_hash(&data));
        self.leaves.push(data);
        self.size() - 1
    }

    pub fn tree(&self) -> &MerkleTree {
        &self.tree
    }

    pub fn root_at(&self, size: u64) -> Result<Hash32, LogError> {
        self.tree.root_at(size)
    }

    pub fn root(&self) -> Hash32 {
        self.tree.root()
    }

    pub fn inclusion_proof(&self, index: u64, size: u64) -> Result<Vec<Hash32>, LogError> {
        self.tree.inclusion_proof(index, size)
    }

    pub fn consistency_proof(&self, from: u64, to: u64) -> Result<Vec<Hash32>, LogError> {
        self.tree.consistency_proof(from, to)
    }
}

pub fn verify_inclusion(leaf: &Hash32, index: u64, size: u64, path: &[Hash32], root: &Hash32) -> bool {
    if index >= size {
        return false;
    }
    let (mut f, mut s) = (index, size - 1);
    let mut r = *leaf;
    for p in path {
        if s == 0 {
            return false;
        }
        if f & 1 == 1 || f == s {
            r = node_hash(p, &r);
            while f & 1 == 0 && f != 0 {
                f >>= 1;
                s >>= 1;
            }
        } else {
            r = node_hash(&r, p);
        }
        f >>= 1;
        s >>= 1;
    }
    s == 0 && r == *root
}

pub fn verify_consistency(root_a: &Hash32, size_a: u64, root_b: &Hash32, size_b: u64, proof: &[Hash32]) -> bool {
    if size_a > size_b {
        return false;
    }
    if size_a == size_b {
        return proof.is_empty() && root_a == root_b;
    }
    if size_a == 0 {
        return proof.is_empty() && *root_a == empty_root();
    }
    let mut nodes: Vec<Hash32> = Vec::with_capacity(proof.len() + 1);
    if size_a.is_power_of_two() {
        nodes.push(*root_a);
    }
    nodes.extend_from_slice(proof);
    let Some((first, rest)) = nodes.split_first() else {
        return false;
    };
    let (mut f, mut s) = (size_a - 1, size_b - 1);
    while f & 1 == 1 {
        f >>= 1;
        s >>= 1;
    }
    let (mut fr, mut sr) = (*first, *first);
    for c in rest {
        if s == 0 {
            return false;
        }
        if f & 1 == 1 || f == s {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            while f & 1 == 0 && f != 0 {
                f >>= 1;
                s >>= 1;
            }
        } else {
            sr = node_hash(&sr, c);
        }
        f >>= 1;
        s >>= 1;
    }
    fr == *root_a && sr == *root_b && s == 0
}

/// Signed tree head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sth {
    pub timestamp: Timestamp,
    pub tree_size: u64,
    pub root: Hash32,
    pub signature: Signature,
}

impl Sth {
    fn signed_bytes(timestamp: Timestamp, tree_size: u64, root: &Hash32) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(STH_DOMAIN).u64(timestamp.0).u64(tree_size).hash(root);
        w.finish()
    }

    pub fn sign(timestamp: Timestamp, tree_size: u64, root: Hash32, key: &KeyPair) -> Self {
        let signature = key.sign(&Self::signed_bytes(timestamp, tree_size, &root));
        Sth { timestamp, tree_size, root, signature }
    }

    pub fn verify(&self, key: &PublicKey) -> Result<(), CryptoError> {
        key.verify(&Self::signed_bytes(self.timestamp, self.tree_size, &self.root), &self.signature)
    }

    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.timestamp.0).u64(self.tree_size).hash(&self.root).bytes(&self.signature.0);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Sth {
            timestamp: Timestamp(r.u64("sth timestamp")?),
            tree_size: r.u64("sth tree_size")?,
            root: r.hash("sth root")?,
            signature: Signature(r.bytes("sth signature")?.to_vec()),
        })
    }
}

/// Signed certificate timestamp: a log's promise to incorporate a
/// certificate body (identified by its to-be-signed hash).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sct {
    pub log_id: String,
    pub timestamp: Timestamp,
    pub cert_hash: Hash32,
    pub signature: Signature,
}

impl Sct {
    pub const MIN_ENCODED_LEN: usize = 4 + 8 + 32 + 4;

    fn signed_bytes(log_id: &str, timestamp: Timestamp, cert_hash: &Hash32) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(SCT_DOMAIN).str(log_id).u64(timestamp.0).hash(cert_hash);
        w.finish()
    }

    pub fn sign(log_id: &str, timestamp: Timestamp, cert_hash: Hash32, key: &KeyPair) -> Self {
        let signature = key.sign(&Self::signed_bytes(log_id, timestamp, &cert_hash));
        Sct { log_id: log_id.to_string(), timestamp, cert_hash, signature }
    }

    pub fn verify(&self, key: &PublicKey) -> Result<(), CryptoError> {
        key.verify(&Self::signed_bytes(&self.log_id, self.timestamp, &self.cert_hash), &self.signature)
    }

    /// Valid for `cert` under one of `log_keys`.
    pub fn verify_for(&self, cert: &GeoCert, log_keys: &BTreeMap<String, PublicKey>) -> bool {
        self.cert_hash == cert.precert_hash()
            && log_keys.get(&self.log_id).is_some_and(|k| self.verify(k).is_ok())
    }

    pub(crate) fn encode_into(&self, w: &mut Writer) {
        w.str(&self.log_id).u64(self.timestamp.0).hash(&self.cert_hash).bytes(&self.signature.0);
    }

    pub(crate) fn decode_from(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Sct {
            log_id: r.str("sct log_id")?.to_string(),
            timestamp: Timestamp(r.u64("sct timestamp")?),
            cert_hash: r.hash("sct cert_hash")?,
            signature: Signature(r.bytes("sct signature")?.to_vec()),
        })
    }
}

/// Number of distinct logs with a valid SCT for `cert`.
pub fn sct_count(cert: &GeoCert, log_keys: &BTreeMap<String, PublicKey>) -> usize {
    let mut logs: Vec<&str> = cert.scts.iter().filter(|s| s.verify_for(cert, log_keys)).map(|s| s.log_id.as_str()).collect();
    logs.sort_unstable();
    logs.dedup();
    logs.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmhSource {
    pub log_id: String,
    pub sth: Sth,
}

/// Signed map head: the tree root at one version together with the log
/// heads it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedMapHead {
    pub smt_root: Hash32,
    pub timestamp: Timestamp,
    pub sources: Vec<SmhSource>,
    pub signature: Signature,
}

impl SignedMapHead {
    fn body(smt_root: &Hash32, timestamp: Timestamp, sources: &[SmhSource]) -> Vec<u8> {
        let mut w = Writer::new();
        w.hash(smt_root).u64(timestamp.0).u32(sources.len() as u32);
        for s in sources {
            w.str(&s.log_id);
            s.sth.encode_into(&mut w);
        }
        w.finish()
    }

    pub fn sign(smt_root: Hash32, timestamp: Timestamp, mut sources: Vec<SmhSource>, key: &KeyPair) -> Self {
        sources.sort_by(|a, b| a.log_id.cmp(&b.log_id));
        let signature = key.sign(&[SMH_DOMAIN, &Self::body(&smt_root, timestamp, &sources)].concat());
        SignedMapHead { smt_root, timestamp, sources, signature }
    }

    /// Canonical bytes including the signature; the consistency-tree leaf.
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&Self::body(&self.smt_root, self.timestamp, &self.sources)).bytes(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let smt_root = r.hash("smt_root")?;
        let timestamp = Timestamp(r.u64("timestamp")?);
        let n = r.count(4 + 8 + 8 + 32 + 4, "sources")?;
        let mut sources = Vec::with_capacity(n);
        for _ in 0..n {
            let log_id = r.str("log_id")?.to_string();
            sources.push(SmhSource { log_id, sth: Sth::decode_from(&mut r)? });
        }
        let signature = Signature(r.bytes("signature")?.to_vec());
        r.finish()?;
        Ok(SignedMapHead { smt_root, timestamp, sources, signature })
    }
}

/// Checks the map server's signature and every cited STH.
pub fn verify_smh(smh: &SignedMapHead, map_key: &PublicKey, log_keys: &BTreeMap<String, PublicKey>) -> Result<(), LogError> {
    let body = SignedMapHead::body(&smh.smt_root, smh.timestamp, &smh.sources);
    map_key
        .verify(&[SMH_DOMAIN, &body].concat(), &smh.signature)
        .map_err(|_| LogError::BadSignature { who: "map server".into() })?;
    for s in &smh.sources {
        let key = log_keys.get(&s.log_id).ok_or_else(|| LogError::UnknownLog(s.log_id.clone()))?;
        s.sth.verify(key).map_err(|_| LogError::BadSignature { who: format!("log {}", s.log_id) })?;
    }
    Ok(())
}

/// Signed head of a map server's consistency tree (its SMH history).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedConsistencyHead {
    pub root: Hash32,
    pub size: u64,
    pub signature: Signature,
}

impl SignedConsistencyHead {
    fn signed_bytes(root: &Hash32, size: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(SCH_DOMAIN).hash(root).u64(size);
        w.finish()
    }

    pub fn sign(root: Hash32, size: u64, key: &KeyPair) -> Self {
        SignedConsistencyHead { root, size, signature: key.sign(&Self::signed_bytes(&root, size)) }
    }

    pub fn verify(&self, key: &PublicKey) -> Result<(), CryptoError> {
        key.verify(&Self::signed_bytes(&self.root, self.size), &self.signature)
    }
}

/// What a certificate log stores.
#[derive(Debug, Clone, PartialEq)]
pub enum LogEntry {
    Cert(GeoCert),
    Revocation(RevocationRecord),
}

impl LogEntry {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            LogEntry::Cert(c) => [&[0u8][..], &c.canonical_encode()].concat(),
            LogEntry::Revocation(r) => [&[1u8][..], &r.canonical_encode()].concat(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LogError> {
        match bytes.split_first() {
            Some((0, rest)) => Ok(LogEntry::Cert(GeoCert::decode(rest)?)),
            Some((1, rest)) => Ok(LogEntry::Revocation(RevocationRecord::decode(rest)?)),
            Some((t, _)) => Err(CodecError::invalid("entry tag", format!("unknown tag {t}")).into()),
            None => Err(CodecError::Truncated("entry tag").into()),
        }
    }
}

/// A source of log entries for ingestion, local or remote.
pub trait LogSource: Send + Sync {
    fn log_id(&self) -> &str;
    fn get_sth(&self) -> Result<Sth, LogError>;
    /// Entries `[start, end)`.
    fn get_entries(&self, start: u64, end: u64) -> Result<Vec<Vec<u8>>, LogError>;
}

#[derive(Debug, Default)]
struct LogState {
    tree: AppendOnlyLog,
}

/// A certificate log held in memory.
pub struct LogStub {
    id: String,
    key: KeyPair,
    mmd: Duration,
    issuers: BTreeMap<String, PublicKey>,
    state: RwLock<LogState>,
}

impl LogStub {
    /// Default maximum merge delay for desk testing.
    pub const DEFAULT_MMD: Duration = Duration::from_secs(3600);

    pub fn new(id: impl Into<String>, key: KeyPair) -> Self {
        LogStub { id: id.into(), key, mmd: Self::DEFAULT_MMD, issuers: BTreeMap::new(), state: RwLock::new(LogState::default()) }
    }

    /// Restricts submissions to certificates signed by these issuers.
    pub fn with_issuers(mut self, issuers: BTreeMap<String, PublicKey>) -> Self {
        self.issuers = issuers;
        self
    }

    pub fn with_mmd(mut self, mmd: Duration) -> Self {
        self.mmd = mmd;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    pub fn mmd(&self) -> Duration {
        self.mmd
    }

    pub fn size(&self) -> u64 {
        self.state.read().tree.size()
    }

    fn check_issuer(&self, issuer_id: &str, verify: impl FnOnce(&PublicKey) -> Result<(), CertError>) -> Result<(), LogError> {
        if self.issuers.is_empty() {
            return Ok(());
        }
        let key = self.issuers.get(issuer_id).ok_or_else(|| LogError::Rejected(format!("unknown issuer {issuer_id:?}")))?;
        verify(key).map_err(|e| LogError::Rejected(e.to_string()))
    }

    /// Appends the certificate and returns an SCT over its body.
    pub fn submit_cert(&self, cert: &GeoCert) -> Result<Sct, LogError> {
        cert.validate().map_err(|e| LogError::Rejected(e.to_string()))?;
        self.check_issuer(&cert.issuer_id, |k| cert.verify_signature(k))?;
        let sct = Sct::sign(&self.id, Timestamp::now(), cert.precert_hash(), &self.key);
        self.state.write().tree.append(LogEntry::Cert(cert.clone()).encode());
        Ok(sct)
    }

    pub fn submit_revocation(&self, rev: &RevocationRecord) -> Result<u64, LogError> {
        self.check_issuer(&rev.issuer_id, |k| rev.verify(k))?;
        Ok(self.state.write().tree.append(LogEntry::Revocation(rev.clone()).encode()))
    }

    /// Appends an already encoded entry without checks.
    pub fn append_raw(&self, entry: Vec<u8>) -> u64 {
        self.state.write().tree.append(entry)
    }

    pub fn sth(&self) -> Sth {
        let st = self.state.read();
        Sth::sign(Timestamp::now(), st.tree.size(), st.tree.root(), &self.key)
    }

    pub fn entries(&self, start: u64, end: u64) -> Result<Vec<Vec<u8>>, LogError> {
        let st = self.state.read();
        let size = st.tree.size();
        if start > end || end > size {
            return Err(LogError::InvalidSizes { from: start, to: end, size });
        }
        Ok((start..end).map(|i| st.tree.leaf(i).expect("in range").to_vec()).collect())
    }

    pub fn inclusion_proof(&self, index: u64, size: u64) -> Result<Vec<Hash32>, LogError> {
        self.state.read().tree.inclusion_proof(index, size)
    }

    pub fn consistency_proof(&self, from: u64, to: u64) -> Result<Vec<Hash32>, LogError> {
        self.state.read().tree.consistency_proof(from, to)
    }
}

impl LogSource for LogStub {
    fn log_id(&self) -> &str {
        &self.id
    }

    fn get_sth(&self) -> Result<Sth, LogError> {
        Ok(self.sth())
    }

    fn get_entries(&self, start: u64, end: u64) -> Result<Vec<Vec<u8>>, LogError> {
        self.entries(start, end)
    }
}
