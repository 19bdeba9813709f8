//! Geographic verifiable map for location-bound certificates.
//!
//! A sparse Merkle tree over a discretized WGS84 shell stores certificate
//! hashes at arbitrary nodes. Map servers ingest certificates from
//! append-only logs and answer location queries with completeness proofs;
//! clients verify those proofs against signed map heads, union the results
//! of several servers and validate an object against a trust preference.

pub mod api;
pub mod cert;
pub mod client;
pub mod codec;
pub mod cover;
pub mod crypto;
pub mod geo;
pub mod http;
pub mod log;
pub mod server;
pub mod smt;
pub mod time;

#[cfg(test)]
mod testutil;

pub use api::{ApiError, MapServerApi, QueryRequest, QueryResponse, RemoteLog, RemoteMap};
pub use cert::{Decision, GeoCert, LocVerification, MatchMode, RevocationRecord, TrustPreference, TrustPreferenceEntry};
pub use client::{filter_exact, Client, ClientConfig, VerifiedResult};
pub use cover::{cover_volume, LonLat, PolygonFrustum, RelativeGridSize, VolumeSpec};
pub use crypto::{Hash32, KeyPair, PublicKey};
pub use geo::{BitString, BitStringPair, EarthModel, GeoPoint};
pub use log::{LogSource, LogStub, SignedMapHead, Sth};
pub use server::{MapServer, MapServerOptions, ServerConfig};
pub use smt::{verify_proof, Proof, Smt};
pub use time::Timestamp;
