//! Location-bound certificates, chains, revocations and trust preferences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::cover::{planar, CoverError, LonLat, PolygonFrustum, VolumeSpec};
use crate::crypto::{sha256, CryptoError, Hash32, KeyPair, PublicKey, Signature};
use crate::geo::EarthModel;
use crate::log::Sct;
use crate::time::Timestamp;

pub const GECKO_SCHEME: &str = "gecko";

/// Minimum interior samples per child frustum in [`contains_volume`].
pub const CONTAINMENT_SAMPLES: usize = 10_000;

const CERT_VERSION: u8 = 1;
const CERT_SIG_DOMAIN: &[u8] = b"geomap/cert/v1\0";
const REVOCATION_SIG_DOMAIN: &[u8] = b"geomap/revocation/v1\0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid gecko URI {0:?}: {1}")]
    Uri(String, String),
    #[error("not_before {0} is not before not_after {1}")]
    Validity(Timestamp, Timestamp),
    #[error("invalid volume: {0}")]
    Volume(#[from] CoverError),
    #[error("attributes must be sorted by key and value without duplicates")]
    UnsortedAttributes,
    #[error("signature check failed: {0}")]
    Signature(#[from] CryptoError),
    #[error("trust preference has no entries")]
    EmptyTrustPreference,
}

/// How the issuing CA checked the subject's location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocVerification {
    InPerson,
    Delegated,
    Postal,
    Wireless,
    SelfDeclared,
}

impl LocVerification {
    pub const ALL: [LocVerification; 5] = [
        LocVerification::InPerson,
        LocVerification::Delegated,
        LocVerification::Postal,
        LocVerification::Wireless,
        LocVerification::SelfDeclared,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LocVerification::InPerson => "in_person",
            LocVerification::Delegated => "delegated",
            LocVerification::Postal => "postal",
            LocVerification::Wireless => "wireless",
            LocVerification::SelfDeclared => "self_declared",
        }
    }
}

impl fmt::Display for LocVerification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LocVerification {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown verification method {s:?}"))
    }
}

/// A parsed `gecko://host/path` URI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeckoUri {
    url: url::Url,
}

impl GeckoUri {
    pub fn parse(s: &str) -> Result<Self, CertError> {
        let url = url::Url::parse(s).map_err(|e| CertError::Uri(s.into(), e.to_string()))?;
        if url.scheme() != GECKO_SCHEME {
            return Err(CertError::Uri(s.into(), format!("scheme must be {GECKO_SCHEME}")));
        }
        match url.host_str() {
            Some(h) if !h.is_empty() => Ok(GeckoUri { url }),
            _ => Err(CertError::Uri(s.into(), "missing host".into())),
        }
    }

    /// Lower-cased host part.
    pub fn host(&self) -> String {
        self.url.host_str().unwrap_or_default().to_ascii_lowercase()
    }

    pub fn as_str(&self) -> &str {
        self.url.as_str()
    }
}

/// The identity presented by an object being validated: a gecko URI, any
/// other URI with a host, or a bare host name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectIdentity {
    pub host: String,
    pub full: String,
}

impl ObjectIdentity {
    pub fn parse(s: &str) -> Result<Self, CertError> {
        let s = s.trim();
        if s.contains("://") {
            let url = url::Url::parse(s).map_err(|e| CertError::Uri(s.into(), e.to_string()))?;
            let host = url.host_str().filter(|h| !h.is_empty()).ok_or_else(|| CertError::Uri(s.into(), "missing host".into()))?;
            Ok(ObjectIdentity { host: host.to_ascii_lowercase(), full: url.as_str().to_string() })
        } else if s.is_empty() {
            Err(CertError::Uri(s.into(), "empty identity".into()))
        } else {
            Ok(ObjectIdentity { host: s.to_ascii_lowercase(), full: s.to_string() })
        }
    }
}

/// Whether identities are compared on the host part or the whole URI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Host,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoCert {
    pub subject_uri: String,
    pub issuer_id: String,
    pub serial: u64,
    pub volume: VolumeSpec,
    pub attributes: Vec<(String, String)>,
    pub loc_verification: LocVerification,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
    #[serde(default)]
    pub scts: Vec<Sct>,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl GeoCert {
    /// Sorts attributes into canonical order.
    pub fn normalize(&mut self) {
        self.attributes.sort();
        self.attributes.dedup();
    }

    pub fn validate(&self) -> Result<(), CertError> {
        if self.not_before >= self.not_after {
            return Err(CertError::Validity(self.not_before, self.not_after));
        }
        GeckoUri::parse(&self.subject_uri)?;
        self.volume.validate(&EarthModel::WGS84)?;
        Ok(())
    }

    pub fn subject(&self) -> Result<GeckoUri, CertError> {
        GeckoUri::parse(&self.subject_uri)
    }

    fn encode_fields(&self, w: &mut Writer, full: bool) {
        let mut attrs: Vec<&(String, String)> = self.attributes.iter().collect();
        attrs.sort();
        attrs.dedup();
        w.u8(CERT_VERSION).str(&self.subject_uri).str(&self.issuer_id).u64(self.serial);
        encode_volume(w, &self.volume);
        w.u32(attrs.len() as u32);
        for (k, v) in attrs {
            w.str(k).str(v);
        }
        w.u8(self.loc_verification.code()).u64(self.not_before.0).u64(self.not_after.0);
        if full {
            w.u32(self.scts.len() as u32);
            for s in &self.scts {
                s.encode_into(w);
            }
        }
        w.bytes(&self.public_key);
        if full {
            w.bytes(&self.signature);
        }
    }

    /// Deterministic binary form; the input to [`GeoCert::cert_hash`].
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_fields(&mut w, true);
        w.finish()
    }

    /// Everything except the SCTs and the issuer signature.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_fields(&mut w, false);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<GeoCert, CertError> {
        let mut r = Reader::new(bytes);
        let version = r.u8("version")?;
        if version != CERT_VERSION {
            return Err(CodecError::invalid("version", format!("unsupported version {version}")).into());
        }
        let subject_uri = r.str("subject_uri")?.to_string();
        let issuer_id = r.str("issuer_id")?.to_string();
        let serial = r.u64("serial")?;
        let volume = decode_volume(&mut r)?;
        let n = r.count(8, "attributes")?;
        let mut attributes = Vec::with_capacity(n);
        for _ in 0..n {
            let k = r.str("attribute key")?.to_string();
            let v = r.str("attribute value")?.to_string();
            attributes.push((k, v));
        }
        if attributes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CertError::UnsortedAttributes);
        }
        let code = r.u8("loc_verification")?;
        let loc_verification = LocVerification::from_code(code)
            .ok_or_else(|| CodecError::invalid("loc_verification", format!("unknown code {code}")))?;
        let not_before = Timestamp(r.u64("not_before")?);
        let not_after = Timestamp(r.u64("not_after")?);
        let n = r.count(Sct::MIN_ENCODED_LEN, "scts")?;
        let mut scts = Vec::with_capacity(n);
        for _ in 0..n {
            scts.push(Sct::decode_from(&mut r)?);
        }
        let public_key = r.bytes("public_key")?.to_vec();
        let signature = r.bytes("signature")?.to_vec();
        r.finish()?;
        let cert = GeoCert {
            subject_uri,
            issuer_id,
            serial,
            volume,
            attributes,
            loc_verification,
            not_before,
            not_after,
            scts,
            public_key,
            signature,
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn cert_hash(&self) -> Hash32 {
        sha256(&self.canonical_encode())
    }

    /// Hash of the to-be-signed part; what SCTs commit to.
    pub fn precert_hash(&self) -> Hash32 {
        sha256(&self.tbs_bytes())
    }

    fn signing_input(&self) -> Vec<u8> {
        [CERT_SIG_DOMAIN, &self.tbs_bytes()].concat()
    }

    /// Signs as issuer. Existing SCTs are dropped since they commit to the
    /// unsigned body only and a re-signed body needs fresh logging.
    pub fn sign(&mut self, issuer: &KeyPair) {
        self.normalize();
        self.scts.clear();
        self.signature = issuer.sign(&self.signing_input()).0;
    }

    pub fn verify_signature(&self, issuer: &PublicKey) -> Result<(), CertError> {
        issuer.verify(&self.signing_input(), &Signature(self.signature.clone()))?;
        Ok(())
    }

    pub fn is_valid_at(&self, now: Timestamp) -> bool {
        self.not_before <= now && now < self.not_after
    }

    pub fn subject_public_key(&self) -> Result<PublicKey, CertError> {
        Ok(PublicKey::from_slice(&self.public_key)?)
    }

    fn identity(&self, mode: MatchMode) -> String {
        match (mode, self.subject()) {
            (MatchMode::Host, Ok(u)) => u.host(),
            (MatchMode::Exact, Ok(u)) => u.as_str().to_string(),
            (_, Err(_)) => self.subject_uri.clone(),
        }
    }

    /// Whether the object's identity appears as this cert's subject or as
    /// one of its attribute values.
    pub fn names(&self, obj: &ObjectIdentity, mode: MatchMode) -> bool {
        let wanted = match mode {
            MatchMode::Host => &obj.host,
            MatchMode::Exact => &obj.full,
        };
        if self.identity(mode) == *wanted {
            return true;
        }
        self.attributes.iter().any(|(_, v)| {
            let v = v.trim();
            match mode {
                MatchMode::Host => v.eq_ignore_ascii_case(&obj.host) || v == obj.full,
                MatchMode::Exact => v == obj.full,
            }
        })
    }
}

fn encode_volume(w: &mut Writer, v: &VolumeSpec) {
    w.u32(v.frustums.len() as u32);
    for f in &v.frustums {
        w.u32(f.ring.len() as u32);
        for p in &f.ring {
            w.f64(p.lon).f64(p.lat);
        }
        w.f64(f.alt_min).f64(f.alt_max);
    }
}

fn decode_volume(r: &mut Reader) -> Result<VolumeSpec, CertError> {
    let n = r.count(4 + 16, "frustums")?;
    let mut frustums = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.count(16, "ring")?;
        let mut ring = Vec::with_capacity(m);
        for _ in 0..m {
            let lon = r.f64("lon")?;
            let lat = r.f64("lat")?;
            ring.push(LonLat::new(lon, lat));
        }
        let alt_min = r.f64("alt_min")?;
        let alt_max = r.f64("alt_max")?;
        frustums.push(PolygonFrustum { ring, alt_min, alt_max });
    }
    Ok(VolumeSpec { frustums })
}

/// Conservative containment: every sample of every child frustum must lie
/// in a parent frustum whose altitude range encloses the child's.
pub fn contains_volume(parent: &VolumeSpec, child: &VolumeSpec) -> bool {
    child.frustums.iter().all(|c| {
        let hosts: Vec<&PolygonFrustum> = parent
            .frustums
            .iter()
            .filter(|p| p.alt_min <= c.alt_min && c.alt_max <= p.alt_max)
            .filter(|p| p.bounds().overlaps(&c.bounds()))
            .collect();
        if hosts.is_empty() {
            return false;
        }
        c.grid_samples(CONTAINMENT_SAMPLES)
            .iter()
            .all(|s| hosts.iter().any(|p| planar::contains_point(&p.ring, LonLat::new(s.lon, s.lat))))
    })
}

/// Certificates ordered root first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertChain(pub Vec<GeoCert>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Malformed,
    Signature,
    Issuer,
    Validity,
    Containment,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("chain is empty")]
    Empty,
    #[error("{kind:?} violation at chain position {index}: {detail}")]
    Violation { index: usize, kind: ViolationKind, detail: String },
}

/// Checks signatures parent to child (the root signs itself), issuer names,
/// validity windows and volume nesting. Reports the first violation.
pub fn verify_chain(chain: &CertChain, now: Timestamp) -> Result<(), ChainError> {
    let certs = &chain.0;
    if certs.is_empty() {
        return Err(ChainError::Empty);
    }
    let violation = |index, kind, detail: String| ChainError::Violation { index, kind, detail };
    for (i, c) in certs.iter().enumerate() {
        c.validate().map_err(|e| violation(i, ViolationKind::Malformed, e.to_string()))?;
        let parent = if i == 0 { c } else { &certs[i - 1] };
        let key = parent.subject_public_key().map_err(|e| violation(i, ViolationKind::Signature, e.to_string()))?;
        c.verify_signature(&key).map_err(|e| violation(i, ViolationKind::Signature, e.to_string()))?;
        if i > 0 {
            let parent_id = parent.subject().map(|u| u.host()).unwrap_or_default();
            if c.issuer_id != parent_id {
                return Err(violation(i, ViolationKind::Issuer, format!("issuer {:?} but parent is {:?}", c.issuer_id, parent_id)));
            }
        }
        if !c.is_valid_at(now) {
            return Err(violation(i, ViolationKind::Validity, format!("not valid at {now} (window {} to {})", c.not_before, c.not_after)));
        }
        if i > 0 && !contains_volume(&parent.volume, &c.volume) {
            return Err(violation(i, ViolationKind::Containment, "volume not contained in parent".into()));
        }
    }
    Ok(())
}

/// Issuer-signed statement that a logged certificate is revoked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationRecord {
    pub cert_hash: Hash32,
    pub revoked_at: Timestamp,
    pub issuer_id: String,
    pub signature: Signature,
}

impl RevocationRecord {
    pub fn new(cert: &GeoCert, revoked_at: Timestamp, issuer: &KeyPair) -> Self {
        let mut r = RevocationRecord {
            cert_hash: cert.cert_hash(),
            revoked_at,
            issuer_id: cert.issuer_id.clone(),
            signature: Signature(Vec::new()),
        };
        r.signature = issuer.sign(&r.signing_input());
        r
    }

    fn signing_input(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(REVOCATION_SIG_DOMAIN).hash(&self.cert_hash).u64(self.revoked_at.0).str(&self.issuer_id);
        w.finish()
    }

    pub fn verify(&self, issuer: &PublicKey) -> Result<(), CertError> {
        issuer.verify(&self.signing_input(), &self.signature)?;
        Ok(())
    }

    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.hash(&self.cert_hash).u64(self.revoked_at.0).str(&self.issuer_id).bytes(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CertError> {
        let mut r = Reader::new(bytes);
        let rec = RevocationRecord {
            cert_hash: r.hash("cert_hash")?,
            revoked_at: Timestamp(r.u64("revoked_at")?),
            issuer_id: r.str("issuer_id")?.to_string(),
            signature: Signature(r.bytes("signature")?.to_vec()),
        };
        r.finish()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustPreferenceEntry {
    pub ca_id: String,
    pub loc_verification_allowed: BTreeSet<LocVerification>,
    pub region: VolumeSpec,
    pub trust_level: u32,
}

/// A relying party's ranking of CAs per region.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrustPreference {
    pub entries: Vec<TrustPreferenceEntry>,
}

impl TrustPreference {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Problems that make entries unusable or ambiguous.
    pub fn lint(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.entries.is_empty() {
            out.push("no entries".to_string());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.ca_id.trim().is_empty() {
                out.push(format!("entry {i}: empty ca_id"));
            }
            if e.loc_verification_allowed.is_empty() {
                out.push(format!("entry {i}: no verification method allowed, entry never matches"));
            }
            if let Err(err) = e.region.validate(&EarthModel::WGS84) {
                out.push(format!("entry {i}: region: {err}"));
            }
        }
        let mut seen: BTreeMap<(&str, u32), usize> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(j) = seen.insert((e.ca_id.as_str(), e.trust_level), i) {
                out.push(format!("entries {j} and {i}: same CA at the same trust level"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub decision: Decision,
    /// Highest trust level among usable certificates.
    pub trust_level: Option<u32>,
    /// Usable certificates at that level.
    pub maximal: Vec<Hash32>,
    /// Certificates dropped by the trust preference.
    pub ignored: Vec<Hash32>,
    /// Distinct subject identities among the maximal certificates.
    pub claimants: Vec<String>,
}

/// Decides whether `object` may claim the queried space given the
/// verified candidate certificates and a trust preference.
pub fn validate_object(
    object: &str,
    candidates: &[GeoCert],
    tp: &TrustPreference,
    query_volume: &VolumeSpec,
    mode: MatchMode,
) -> Result<Validation, CertError> {
    if tp.entries.is_empty() {
        return Err(CertError::EmptyTrustPreference);
    }
    let obj = ObjectIdentity::parse(object)?;
    let covering: Vec<&TrustPreferenceEntry> = tp.entries.iter().filter(|e| contains_volume(&e.region, query_volume)).collect();

    let mut certs: Vec<(Hash32, &GeoCert)> = candidates.iter().map(|c| (c.cert_hash(), c)).collect();
    certs.sort_by_key(|(h, _)| *h);
    certs.dedup_by_key(|(h, _)| *h);

    let mut kept: Vec<(Hash32, &GeoCert, u32)> = Vec::new();
    let mut ignored = Vec::new();
    for (h, c) in certs {
        let level = covering
            .iter()
            .filter(|e| e.ca_id == c.issuer_id && e.loc_verification_allowed.contains(&c.loc_verification))
            .map(|e| e.trust_level)
            .max();
        match level {
            Some(l) => kept.push((h, c, l)),
            None => ignored.push(h),
        }
    }

    let Some(top) = kept.iter().map(|k| k.2).max() else {
        return Ok(Validation { decision: Decision::Reject, trust_level: None, maximal: vec![], ignored, claimants: vec![] });
    };
    let maximal: Vec<&(Hash32, &GeoCert, u32)> = kept.iter().filter(|k| k.2 == top).collect();
    let claimants: BTreeSet<String> = maximal.iter().map(|k| k.1.identity(mode)).collect();
    let decision = if claimants.len() > 1 {
        Decision::Conflict
    } else if maximal.iter().all(|k| k.1.names(&obj, mode)) {
        Decision::Accept
    } else {
        Decision::Reject
    };
    Ok(Validation {
        decision,
        trust_level: Some(top),
        maximal: maximal.iter().map(|k| k.0).collect(),
        ignored,
        claimants: claimants.into_iter().collect(),
    })
}
