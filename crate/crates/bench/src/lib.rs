//! Synthetic corpora and the benchmark harness for geomap.

pub mod dataset;
pub mod harness;
pub mod plot;
pub mod report;

pub use dataset::{generate_dataset, DensityMap};
pub use harness::{bench_ingest, bench_latency, bench_throughput, BenchError, Deployment};
