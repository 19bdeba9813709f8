//! The geographically structured sparse Merkle tree.
//!
//! Certificates hang off arbitrary nodes (not only leaves). Only non-sparse
//! nodes are stored; every missing node hashes to [`default_hash`].
//!
//! * leaf (altitude string full length): `H(0x00 ‖ c₀ ‖ … ‖ c_{L−1})`
//! * intermediate: `H(0x01 ‖ h₁ ‖ h₂ ‖ h₃ ‖ h₄ [‖ H(c₀ ‖ … ‖ c_{L−1})])`
//!   with children in slot order surface·0, surface·1, altitude·0,
//!   altitude·1 and the certificate part present only when L > 0.
//!
//! Nodes with a non-empty altitude string have no surface children, so
//! their first two slots are always the default hash.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{sha256, sha256_parts, Hash32};
use crate::geo::{BitString, BitStringPair, EarthModel, GeoError, PAIR_ENCODED_LEN};

#[derive(Debug, Error)]
pub enum SmtError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("certificate hash list is not strictly sorted")]
    Unsorted,
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<std::io::Error> for SmtError {
    fn from(e: std::io::Error) -> Self {
        SmtError::Storage(e.to_string())
    }
}

/// `H(0x00)`: the hash of every sparse node.
pub fn default_hash() -> Hash32 {
    sha256(&[0x00])
}

/// Leaf hash over a strictly sorted certificate hash list.
pub fn hash_leaf(certs: &[Hash32]) -> Result<Hash32, SmtError> {
    check_sorted(certs)?;
    if certs.is_empty() {
        return Ok(default_hash());
    }
    let mut parts: Vec<&[u8]> = Vec::with_capacity(certs.len() + 1);
    parts.push(&[0x00]);
    parts.extend(certs.iter().map(|c| c.0.as_slice()));
    Ok(sha256_parts(&parts))
}

/// Intermediate-node preimage hash. Callers must emit [`default_hash`] for
/// sparse nodes instead.
pub fn hash_intermediate(children: &[Hash32; 4], certs: &[Hash32]) -> Hash32 {
    let h5;
    let mut parts: Vec<&[u8]> = vec![&[0x01], &children[0].0, &children[1].0, &children[2].0, &children[3].0];
    if !certs.is_empty() {
        let list: Vec<&[u8]> = certs.iter().map(|c| c.0.as_slice()).collect();
        h5 = sha256_parts(&list);
        parts.push(&h5.0);
    }
    sha256_parts(&parts)
}

fn check_sorted(certs: &[Hash32]) -> Result<(), SmtError> {
    if certs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SmtError::Unsorted);
    }
    Ok(())
}

/// Hash of a node given its child hashes and certificates, collapsing to
/// the default for sparse nodes.
pub fn node_hash(model: &EarthModel, pair: &BitStringPair, children: &[Hash32; 4], certs: &[Hash32]) -> Result<Hash32, SmtError> {
    if model.is_leaf(pair) {
        return hash_leaf(certs);
    }
    check_sorted(certs)?;
    let d = default_hash();
    if certs.is_empty() && children.iter().all(|c| *c == d) {
        return Ok(d);
    }
    Ok(hash_intermediate(children, certs))
}

/// A stored (non-sparse) node.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SmtNode {
    pub cert_hashes: Box<[Hash32]>,
    /// Bit `i` set when child slot `i` is stored.
    pub child_flags: u8,
    pub hash: Hash32,
}

/// Key-value storage for tree nodes keyed by pair.
pub trait NodeStore: Send + Sync {
    fn get(&self, pair: &BitStringPair) -> Option<&SmtNode>;
    fn put(&mut self, pair: BitStringPair, node: SmtNode);
    fn delete(&mut self, pair: &BitStringPair);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn for_each(&self, f: &mut dyn FnMut(BitStringPair, &SmtNode));
}

/// In-memory store. Keys are packed into 16 bytes since large trees hold
/// tens of millions of nodes.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    nodes: HashMap<u128, SmtNode>,
}

fn pack(p: &BitStringPair) -> u128 {
    (p.surface.value() as u128) << 64 | (p.surface.len() as u128) << 56 | (p.altitude.value() as u128) << 8 | p.altitude.len() as u128
}

fn unpack(k: u128) -> BitStringPair {
    BitStringPair::new(
        BitString::from_bits((k >> 64) as u64, (k >> 56) as u8),
        BitString::from_bits(((k >> 8) & 0xFFFF_FFFF_FFFF) as u64, k as u8),
    )
}

impl NodeStore for MemStore {
    fn get(&self, pair: &BitStringPair) -> Option<&SmtNode> {
        self.nodes.get(&pack(pair))
    }

    fn put(&mut self, pair: BitStringPair, node: SmtNode) {
        self.nodes.insert(pack(&pair), node);
    }

    fn delete(&mut self, pair: &BitStringPair) {
        self.nodes.remove(&pack(pair));
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn for_each(&self, f: &mut dyn FnMut(BitStringPair, &SmtNode)) {
        for (k, v) in &self.nodes {
            f(unpack(*k), v);
        }
    }
}

/// One certificate and the nodes it is attached to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub cert_hash: Hash32,
    pub pairs: Vec<BitStringPair>,
}

#[derive(Debug, Clone)]
pub struct Smt<S: NodeStore = MemStore> {
    model: EarthModel,
    store: S,
}

impl Smt<MemStore> {
    pub fn new(model: EarthModel) -> Self {
        Smt { model, store: MemStore::default() }
    }
}

impl<S: NodeStore> Smt<S> {
    pub fn with_store(model: EarthModel, store: S) -> Self {
        Smt { model, store }
    }

    pub fn model(&self) -> &EarthModel {
        &self.model
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn root(&self) -> Hash32 {
        self.hash_of(&BitStringPair::ROOT)
    }

    pub fn hash_of(&self, pair: &BitStringPair) -> Hash32 {
        self.store.get(pair).map(|n| n.hash).unwrap_or_else(default_hash)
    }

    pub fn certs_at(&self, pair: &BitStringPair) -> &[Hash32] {
        self.store.get(pair).map(|n| &*n.cert_hashes).unwrap_or(&[])
    }

    pub fn node_count(&self) -> usize {
        self.store.len()
    }

    pub fn insert(&mut self, cert_hash: Hash32, pairs: &[BitStringPair]) -> Result<Hash32, SmtError> {
        self.batch_update(&[Placement { cert_hash, pairs: pairs.to_vec() }], &[])
    }

    /// Applies insertions then removals and recomputes each touched node
    /// once, deepest first. Returns the new root.
    pub fn batch_update(&mut self, inserts: &[Placement], removals: &[Placement]) -> Result<Hash32, SmtError> {
        for p in inserts.iter().chain(removals) {
            for pair in &p.pairs {
                self.model.validate(pair)?;
            }
        }
        let mut touched: BTreeMap<BitStringPair, Vec<Hash32>> = BTreeMap::new();
        let list_of = |store: &S, pair: &BitStringPair| -> Vec<Hash32> {
            store.get(pair).map(|n| n.cert_hashes.to_vec()).unwrap_or_default()
        };
        for p in inserts {
            for pair in &p.pairs {
                let list = touched.entry(*pair).or_insert_with(|| list_of(&self.store, pair));
                if let Err(i) = list.binary_search(&p.cert_hash) {
                    list.insert(i, p.cert_hash);
                }
            }
        }
        for p in removals {
            for pair in &p.pairs {
                let list = touched.entry(*pair).or_insert_with(|| list_of(&self.store, pair));
                match list.binary_search(&p.cert_hash) {
                    Ok(i) => {
                        list.remove(i);
                    }
                    Err(_) => log::warn!("removal of {} at {pair}: not present", p.cert_hash),
                }
            }
        }

        // Every touched node plus all ancestors, grouped by depth.
        let mut dirty: BTreeSet<(u32, BitStringPair)> = BTreeSet::new();
        for pair in touched.keys() {
            if !dirty.insert((pair.depth(), *pair)) {
                continue;
            }
            for a in pair.ancestors() {
                if !dirty.insert((a.depth(), a)) {
                    break;
                }
            }
        }
        let d = default_hash();
        for &(_, pair) in dirty.iter().rev() {
            let certs = match touched.remove(&pair) {
                Some(c) => c,
                None => list_of(&self.store, &pair),
            };
            let mut children = [d; 4];
            let mut flags = 0u8;
            for (i, slot) in self.model.child_slots(&pair).iter().enumerate() {
                if let Some(c) = slot {
                    if let Some(n) = self.store.get(c) {
                        children[i] = n.hash;
                        flags |= 1 << i;
                    }
                }
            }
            let hash = node_hash(&self.model, &pair, &children, &certs)?;
            if hash == d {
                self.store.delete(&pair);
            } else {
                self.store.put(pair, SmtNode { cert_hashes: certs.into_boxed_slice(), child_flags: flags, hash });
            }
        }
        Ok(self.root())
    }

    /// Opens every stored node whose volume meets a query pair, and lists
    /// the non-default hashes of their unopened children.
    pub fn generate_proof(&self, query_pairs: &[BitStringPair]) -> Proof {
        let mut openings = Vec::new();
        let mut boundary = Vec::new();
        let related = |p: &BitStringPair| query_pairs.iter().any(|q| q.intersects_volume(p));
        let mut stack = Vec::new();
        if self.store.get(&BitStringPair::ROOT).is_some() {
            stack.push(BitStringPair::ROOT);
        }
        while let Some(pair) = stack.pop() {
            let node = self.store.get(&pair).expect("stack holds stored nodes");
            openings.push((pair, node.cert_hashes.to_vec()));
            for c in self.model.child_slots(&pair).into_iter().flatten() {
                if let Some(child) = self.store.get(&c) {
                    if related(&c) {
                        stack.push(c);
                    } else {
                        boundary.push((c, child.hash));
                    }
                }
            }
        }
        let mut proof = Proof { query_pairs: query_pairs.to_vec(), openings, boundary_hashes: boundary };
        proof.sort();
        proof
    }

    /// Writes every stored node to a snapshot file.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), SmtError> {
        let mut nodes: Vec<(BitStringPair, SmtNode)> = Vec::with_capacity(self.store.len());
        self.store.for_each(&mut |k, v| nodes.push((k, v.clone())));
        nodes.sort_by_key(|(k, _)| k.encode());
        let mut w = Writer::new();
        w.raw(SNAPSHOT_MAGIC).u64(nodes.len() as u64);
        for (k, v) in &nodes {
            w.raw(&k.encode()).u8(v.child_flags).hash(&v.hash).u32(v.cert_hashes.len() as u32);
            for h in v.cert_hashes.iter() {
                w.hash(h);
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&w.finish())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads a snapshot into this tree's store, replacing nothing that is
    /// not in the file. The stored hashes are recomputed and checked.
    pub fn load_snapshot(&mut self, path: &Path) -> Result<(), SmtError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader::new(&bytes);
        if r.take(SNAPSHOT_MAGIC.len(), "magic")? != SNAPSHOT_MAGIC {
            return Err(CodecError::invalid("magic", "not a tree snapshot").into());
        }
        let n = r.u64("node count")?;
        let mut nodes = Vec::new();
        for _ in 0..n {
            let pair = BitStringPair::decode(r.take(PAIR_ENCODED_LEN, "pair")?)?;
            let child_flags = r.u8("child flags")?;
            let hash = r.hash("hash")?;
            let m = r.count(32, "cert hashes")?;
            let mut certs = Vec::with_capacity(m);
            for _ in 0..m {
                certs.push(r.hash("cert hash")?);
            }
            check_sorted(&certs)?;
            nodes.push((pair, SmtNode { cert_hashes: certs.into_boxed_slice(), child_flags, hash }));
        }
        r.finish()?;
        nodes.sort_by_key(|(k, _)| std::cmp::Reverse(k.depth()));
        let d = default_hash();
        for (pair, node) in nodes {
            self.model.validate(&pair)?;
            let mut children = [d; 4];
            for (i, slot) in self.model.child_slots(&pair).iter().enumerate() {
                if let Some(c) = slot {
                    children[i] = self.hash_of(c);
                }
            }
            if node_hash(&self.model, &pair, &children, &node.cert_hashes)? != node.hash {
                return Err(SmtError::Storage(format!("snapshot node {pair} has a wrong hash")));
            }
            self.store.put(pair, node);
        }
        Ok(())
    }
}

const SNAPSHOT_MAGIC: &[u8] = b"GEOMAP-SMT\x01";

/// Node openings and boundary hashes proving the complete set of
/// certificates attached to nodes that meet the query pairs.
///
/// Children of opened nodes that are neither opened nor listed in
/// `boundary_hashes` hash to the default value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub query_pairs: Vec<BitStringPair>,
    pub openings: Vec<(BitStringPair, Vec<Hash32>)>,
    pub boundary_hashes: Vec<(BitStringPair, Hash32)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofError {
    #[error("computed root {computed} does not match {expected}")]
    RootMismatch { computed: Hash32, expected: Hash32 },
    #[error("malformed proof: {0}")]
    Malformed(String),
    #[error("node {0} meets the query but its non-default hash was given instead of an opening")]
    Withheld(BitStringPair),
    #[error("opening {0} is unrelated to the query")]
    Unrelated(BitStringPair),
    #[error("opening {0} has no opened parent")]
    Orphan(BitStringPair),
}

fn malformed(s: impl Into<String>) -> ProofError {
    ProofError::Malformed(s.into())
}

impl Proof {
    fn sort(&mut self) {
        self.openings.sort_by_key(|(p, _)| p.encode());
        self.boundary_hashes.sort_by_key(|(p, _)| p.encode());
    }

    pub fn cert_hashes(&self) -> BTreeSet<Hash32> {
        self.openings.iter().flat_map(|(_, l)| l.iter().copied()).collect()
    }

    /// Compact binary form: counts are u32, pairs 11 bytes, hashes 32.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.query_pairs.len() as u32);
        for q in &self.query_pairs {
            w.raw(&q.encode());
        }
        w.u32(self.openings.len() as u32);
        for (p, l) in &self.openings {
            w.raw(&p.encode()).u32(l.len() as u32);
            for h in l {
                w.hash(h);
            }
        }
        w.u32(self.boundary_hashes.len() as u32);
        for (p, h) in &self.boundary_hashes {
            w.raw(&p.encode()).hash(h);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProofError> {
        let err = |e: CodecError| malformed(e.to_string());
        let pair = |r: &mut Reader| -> Result<BitStringPair, ProofError> {
            BitStringPair::decode(r.take(PAIR_ENCODED_LEN, "pair").map_err(err)?).map_err(|e| malformed(e.to_string()))
        };
        let mut r = Reader::new(bytes);
        let n = r.count(PAIR_ENCODED_LEN, "query pairs").map_err(err)?;
        let mut query_pairs = Vec::with_capacity(n);
        for _ in 0..n {
            query_pairs.push(pair(&mut r)?);
        }
        let n = r.count(PAIR_ENCODED_LEN + 4, "openings").map_err(err)?;
        let mut openings = Vec::with_capacity(n);
        for _ in 0..n {
            let p = pair(&mut r)?;
            let m = r.count(32, "cert hashes").map_err(err)?;
            let mut l = Vec::with_capacity(m);
            for _ in 0..m {
                l.push(r.hash("cert hash").map_err(err)?);
            }
            openings.push((p, l));
        }
        let n = r.count(PAIR_ENCODED_LEN + 32, "boundary").map_err(err)?;
        let mut boundary_hashes = Vec::with_capacity(n);
        for _ in 0..n {
            let p = pair(&mut r)?;
            boundary_hashes.push((p, r.hash("boundary hash").map_err(err)?));
        }
        r.finish().map_err(err)?;
        Ok(Proof { query_pairs, openings, boundary_hashes })
    }
}

/// Recomputes the root from the proof and returns the certificate hashes
/// of all openings. Any structural problem fails the whole proof.
pub fn verify_proof(model: &EarthModel, proof: &Proof, root: &Hash32) -> Result<BTreeSet<Hash32>, ProofError> {
    if proof.query_pairs.is_empty() {
        return Err(malformed("no query pairs"));
    }
    for q in &proof.query_pairs {
        model.validate(q).map_err(|e| malformed(e.to_string()))?;
    }
    let related = |p: &BitStringPair| proof.query_pairs.iter().any(|q| q.intersects_volume(p));

    let mut opened: HashMap<BitStringPair, &[Hash32]> = HashMap::with_capacity(proof.openings.len());
    let mut prev: Option<[u8; PAIR_ENCODED_LEN]> = None;
    for (p, certs) in &proof.openings {
        model.validate(p).map_err(|e| malformed(e.to_string()))?;
        let enc = p.encode();
        if prev.is_some_and(|q| q >= enc) {
            return Err(malformed("openings not strictly sorted"));
        }
        prev = Some(enc);
        if certs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed(format!("cert list at {p} not strictly sorted")));
        }
        if !related(p) {
            return Err(ProofError::Unrelated(*p));
        }
        opened.insert(*p, certs);
    }
    for p in opened.keys() {
        if let Ok(parent) = p.parent() {
            if !opened.contains_key(&parent) {
                return Err(ProofError::Orphan(*p));
            }
        }
    }

    let d = default_hash();
    let mut boundary: HashMap<BitStringPair, Hash32> = HashMap::with_capacity(proof.boundary_hashes.len());
    let mut prev: Option<[u8; PAIR_ENCODED_LEN]> = None;
    for (p, h) in &proof.boundary_hashes {
        let enc = p.encode();
        if prev.is_some_and(|q| q >= enc) {
            return Err(malformed("boundary hashes not strictly sorted"));
        }
        prev = Some(enc);
        if opened.contains_key(p) {
            return Err(malformed(format!("boundary hash given for opened node {p}")));
        }
        let parent = p.parent().map_err(|_| malformed("boundary hash for the root"))?;
        if !opened.contains_key(&parent) || !model.child_slots(&parent).contains(&Some(*p)) {
            return Err(malformed(format!("boundary node {p} is not a child of an opening")));
        }
        if *h != d && related(p) {
            return Err(ProofError::Withheld(*p));
        }
        boundary.insert(*p, *h);
    }

    let computed = if opened.is_empty() {
        d
    } else {
        if !opened.contains_key(&BitStringPair::ROOT) {
            return Err(ProofError::Orphan(proof.openings[0].0));
        }
        let mut order: Vec<&BitStringPair> = opened.keys().collect();
        order.sort_by_key(|p| std::cmp::Reverse(p.depth()));
        let mut hashes: HashMap<BitStringPair, Hash32> = HashMap::with_capacity(order.len());
        for p in order {
            let mut children = [d; 4];
            for (i, slot) in model.child_slots(p).iter().enumerate() {
                if let Some(c) = slot {
                    children[i] = hashes.get(c).or_else(|| boundary.get(c)).copied().unwrap_or(d);
                }
            }
            let h = node_hash(model, p, &children, opened[p]).map_err(|e| malformed(e.to_string()))?;
            hashes.insert(*p, h);
        }
        hashes[&BitStringPair::ROOT]
    };
    if computed != *root {
        return Err(ProofError::RootMismatch { computed, expected: *root });
    }
    Ok(proof.openings.iter().flat_map(|(_, l)| l.iter().copied()).collect())
}
