use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use geomap_bench::dataset::{corpus_issuer, generate_dataset, DensityMap};
use geomap_bench::harness::{bench_ingest, bench_latency, bench_throughput, query_points, query_requests, Deployment, CORPUS_CA};
use geomap_bench::plot::{plot, PlotSpec, Table};
use geomap_bench::report::{write_csv, Environment};
use geomap_core::api::{MapServerApi, QueryRequest, QueryResponse, RemoteLog, RemoteMap};
use geomap_core::cert::GeoCert;
use geomap_core::client::{exit_code, verify_response, Client, ClientConfig, EXIT_INFRASTRUCTURE};
use geomap_core::crypto::{KeyFile, KeyPair, PublicKey};
use geomap_core::geo::{EarthModel, GeoPoint};
use geomap_core::log::{LogSource, LogStub};
use geomap_core::server::{MapServer, MapServerOptions, ServerConfig};
use geomap_core::TrustPreference;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "geomap", version, about = "Verifiable geographic certificate map")]
struct Cli {
    /// JSON config file (server config for `serve`, client config for queries).
    #[arg(long, global = true, env = "GEOMAP_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for anything generated (keys, corpora, query order).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a map server.
    Serve,
    /// Run an in-memory certificate log.
    LogServe {
        #[arg(long)]
        id: String,
        /// Key file written by `keygen`.
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8800")]
        listen: String,
        /// Accepted issuer as `ID=PUBKEY_HEX`; repeatable. None accepts any.
        #[arg(long = "issuer")]
        issuers: Vec<String>,
        /// Certificates (JSON lines) to log at startup.
        #[arg(long)]
        load: Option<PathBuf>,
    },
    /// Write a new key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch and verify the certificates around a point.
    Query {
        #[command(flatten)]
        area: Area,
        /// Also save the first server's raw response for `verify-proof`.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Decide whether an object may claim the space around a point.
    Check {
        /// Object identity, e.g. gecko://shop.example/
        #[arg(long)]
        object: String,
        #[command(flatten)]
        area: Area,
        /// Evidence output (JSON lines); stdout when absent.
        #[arg(long)]
        evidence: Option<PathBuf>,
    },
    /// Verify a response saved by `query --save` offline.
    VerifyProof { file: PathBuf },
    /// Trust preference tools.
    Trust {
        #[command(subcommand)]
        cmd: TrustCmd,
    },
    /// Write a synthetic certificate corpus as JSON lines.
    GenDataset {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Density CSV (lon_lo,lat_lo,lon_hi,lat_hi,weight); synthetic when absent.
        #[arg(long)]
        density: Option<PathBuf>,
        /// Also write the corpus issuer's key file here.
        #[arg(long)]
        ca_key_out: Option<PathBuf>,
    },
    /// Run a benchmark and write CSV results.
    Bench {
        #[arg(value_enum)]
        kind: BenchKind,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Corpus size for qps and latency.
        #[arg(long, default_value_t = 10_000)]
        certs: usize,
        /// Queries per measurement.
        #[arg(long, default_value_t = 2_000)]
        queries: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        batches: Vec<usize>,
    },
    /// Render a benchmark CSV as an SVG line chart.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Vec<String>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        log_x: bool,
    },
}

#[derive(Subcommand)]
enum TrustCmd {
    /// Report unusable or ambiguous entries; exits 1 if any.
    Lint { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Ingest,
    Qps,
    Latency,
}

#[derive(clap::Args)]
struct Area {
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    /// Radius in meters.
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    #[arg(long, allow_hyphen_values = true, requires = "alt_max")]
    alt_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "alt_min")]
    alt_max: Option<f64>,
}

impl Area {
    fn center(&self) -> GeoPoint {
        GeoPoint::new(self.lon, self.lat, self.alt_min.unwrap_or(0.0))
    }

    fn alt(&self) -> Option<(f64, f64)> {
        self.alt_min.zip(self.alt_max)
    }
}

/// A single server response kept for offline verification.
#[derive(Serialize, Deserialize)]
struct SavedResponse {
    server: String,
    public_key: PublicKey,
    request: QueryRequest,
    response: QueryResponse,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's own usage exit status (2) would read as "reject".
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let r = match &cli.cmd {
        Cmd::Check { object, area, evidence } => return check(&cli, object, area, evidence.as_deref()),
        Cmd::Serve => serve(&cli),
        Cmd::LogServe { id, key, listen, issuers, load } => log_serve(id, key, listen, issuers, load.as_deref()),
        Cmd::Keygen { out } => keygen(cli.seed, out),
        Cmd::Query { area, save } => query(&cli, area, save.as_deref()),
        Cmd::VerifyProof { file } => verify_saved(&cli, file),
        Cmd::Trust { cmd: TrustCmd::Lint { file } } => trust_lint(file),
        Cmd::GenDataset { count, out, density, ca_key_out } => gen_dataset(cli.seed.unwrap_or(1), *count, out, density.as_deref(), ca_key_out.as_deref()),
        Cmd::Bench { kind, out, certs, queries, workers, batches } => {
            bench(*kind, cli.seed.unwrap_or(1), out, *certs, *queries, workers, batches)
        }
        Cmd::Plot { csv, out, x, y, title, log_x } => plot_cmd(csv, out, x.as_deref(), y, title, *log_x),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn client_config(cli: &Cli) -> Result<ClientConfig> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("--config <client.json> is required"))?;
    Ok(ClientConfig::load(path)?)
}

fn read_keyfile(path: &Path) -> Result<KeyPair> {
    let kf: KeyFile = serde_json::from_str(&std::fs::read_to_string(path).with_context(|| path.display().to_string())?)
        .with_context(|| format!("{}: not a key file", path.display()))?;
    Ok(kf.keypair()?)
}

fn write_keyfile(path: &Path, k: &KeyPair) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&KeyFile::from_keypair(k))? + "\n").with_context(|| path.display().to_string())
}

fn announce(url: &str) {
    println!("listening on {url}");
    let _ = std::io::stdout().flush();
}

fn serve(cli: &Cli) -> Result<ExitCode> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("--config <server.json> is required"))?;
    let cfg = ServerConfig::load(path)?;
    let sources: Vec<Arc<dyn LogSource>> = cfg.sources.iter().map(|s| Arc::new(RemoteLog::new(&s.id, &s.url)) as Arc<dyn LogSource>).collect();
    let mut opts = MapServerOptions::new(cfg.log_keys());
    opts.f_ingest = geomap_core::cover::RelativeGridSize::new(cfg.f_ingest)?;
    opts.ca_keys = cfg.ca_keys.clone();
    opts.storage = cfg.storage.clone();
    let server = Arc::new(MapServer::new(cfg.signing_keypair()?, sources, opts)?);
    log::info!("map key {}", server.public_key().to_hex());
    match server.ingest_cycle() {
        Ok(r) => log::info!("initial cycle: {} inserted, map head {}", r.inserted, r.smh_index),
        Err(e) => log::warn!("initial cycle: {e}"),
    }
    let _ingest = server.spawn_ingest_loop(Duration::from_millis(cfg.ingest_interval_ms));
    let http = geomap_core::http::spawn(geomap_core::http::map_router(server), &cfg.listen, cfg.workers)?;
    announce(&http.url());
    http.join()?;
    Ok(ExitCode::SUCCESS)
}

fn log_serve(id: &str, key: &Path, listen: &str, issuers: &[String], load: Option<&Path>) -> Result<ExitCode> {
    let mut keys = BTreeMap::new();
    for s in issuers {
        let (ca, hex) = s.split_once('=').ok_or_else(|| anyhow!("--issuer expects ID=PUBKEY_HEX, got {s:?}"))?;
        keys.insert(ca.to_string(), PublicKey::from_hex(hex)?);
    }
    let log = Arc::new(LogStub::new(id, read_keyfile(key)?).with_issuers(keys));
    if let Some(path) = load {
        let mut n = 0;
        for line in BufReader::new(File::open(path).with_context(|| path.display().to_string())?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut c: GeoCert = serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), n + 1))?;
            if c.scts.is_empty() {
                c.scts.push(log.submit_cert(&c)?);
            }
            log.submit_cert(&c)?;
            n += 1;
        }
        log::info!("logged {n} certificates from {}", path.display());
    }
    log::info!("log {id} key {}", log.public_key().to_hex());
    let http = geomap_core::http::spawn(geomap_core::http::log_router(log), listen, 2)?;
    announce(&http.url());
    http.join()?;
    Ok(ExitCode::SUCCESS)
}

fn keygen(seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let k = match seed {
        Some(s) => KeyPair::from_seed(geomap_core::crypto::sha256_parts(&[b"geomap keygen", &s.to_be_bytes()]).0),
        None => KeyPair::generate(&mut rand::rngs::OsRng),
    };
    write_keyfile(out, &k)?;
    println!("{}", k.public_key().to_hex());
    Ok(ExitCode::SUCCESS)
}

fn query(cli: &Cli, area: &Area, save: Option<&Path>) -> Result<ExitCode> {
    let cfg = client_config(cli)?;
    let client = Client::from_config(&cfg)?;
    let (req, volume) = client.build_query(&area.center(), area.radius, area.alt())?;
    let v = client.fetch_verified(&req)?;
    let hits = geomap_core::client::filter_exact(&v.certs, &volume);
    for f in &v.failures {
        eprintln!("server {} rejected: {}", f.server, f.error);
    }
    for c in &v.certs {
        let line = serde_json::json!({
            "hash": c.cert_hash(),
            "subject": c.subject_uri,
            "issuer": c.issuer_id,
            "intersects_query": hits.iter().any(|h| h.cert_hash() == c.cert_hash()),
        });
        println!("{line}");
    }
    for e in &v.excluded {
        eprintln!("excluded {}: {}", e.cert_hash, e.reason);
    }
    if let Some(path) = save {
        let s = cfg.servers.first().ok_or_else(|| anyhow!("no servers configured"))?;
        let response = RemoteMap::new(&s.url).query(&req)?;
        let saved = SavedResponse { server: s.url.clone(), public_key: s.public_key, request: req, response };
        std::fs::write(path, serde_json::to_vec_pretty(&saved)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_saved(cli: &Cli, file: &Path) -> Result<ExitCode> {
    let cfg = client_config(cli)?;
    let saved: SavedResponse = serde_json::from_slice(&std::fs::read(file).with_context(|| file.display().to_string())?)?;
    match verify_response(&EarthModel::WGS84, &saved.request, &saved.response, &saved.public_key, &cfg.log_keys) {
        Ok(v) => {
            println!("verified: map head {} from {}, {} certificates", saved.response.smh_index, saved.server, v.certs.len());
            for (h, c) in &v.certs {
                println!("{} {}", h, c.subject_uri);
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("rejected: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn check(cli: &Cli, object: &str, area: &Area, evidence: Option<&Path>) -> ExitCode {
    let run = || -> Result<i32> {
        let cfg = client_config(cli)?;
        let tp: TrustPreference = cfg.load_trust_preference()?;
        let client = Client::from_config(&cfg)?;
        let outcome = client.check(object, &area.center(), area.radius, area.alt(), &tp)?;
        let lines = outcome.evidence_lines();
        match evidence {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p).with_context(|| p.display().to_string())?);
                for l in &lines {
                    writeln!(w, "{l}")?;
                }
                w.flush()?;
                println!("{}", serde_json::to_string(&outcome.decision())?.trim_matches('"'));
            }
            None => lines.iter().for_each(|l| println!("{l}")),
        }
        Ok(exit_code(outcome.decision()))
    };
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INFRASTRUCTURE as u8)
        }
    }
}

fn trust_lint(file: &Path) -> Result<ExitCode> {
    let tp = TrustPreference::from_json(&std::fs::read_to_string(file).with_context(|| file.display().to_string())?)?;
    let issues = tp.lint();
    for i in &issues {
        println!("{i}");
    }
    if issues.is_empty() {
        println!("ok: {} entries", tp.entries.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn gen_dataset(seed: u64, count: usize, out: &Path, density: Option<&Path>, ca_key_out: Option<&Path>) -> Result<ExitCode> {
    let density = match density {
        Some(p) => DensityMap::from_csv(File::open(p).with_context(|| p.display().to_string())?)?,
        None => DensityMap::synthetic(seed),
    };
    let ca = corpus_issuer(seed);
    let mut w = BufWriter::new(File::create(out).with_context(|| out.display().to_string())?);
    for c in generate_dataset(seed, count, &density, &ca, CORPUS_CA) {
        serde_json::to_writer(&mut w, &c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(p) = ca_key_out {
        write_keyfile(p, &ca)?;
    }
    println!("{CORPUS_CA}={}", ca.public_key().to_hex());
    Ok(ExitCode::SUCCESS)
}

fn bench(kind: BenchKind, seed: u64, out: &Path, certs: usize, queries: usize, workers: &[usize], batches: &[usize]) -> Result<ExitCode> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("environment.json"), serde_json::to_string_pretty(&Environment::capture(seed, certs))?)?;
    let density = DensityMap::synthetic(seed);
    if let BenchKind::Ingest = kind {
        let rows = bench_ingest(seed, batches, certs.min(batches.iter().max().copied().unwrap_or(1) * 2), &density)?;
        write_csv(&out.join("ingest.csv"), &rows)?;
        for r in &rows {
            println!("batch {:>5}: {:.3} ms/cert", r.batch_size, r.mean_ms_per_cert);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let d = Deployment::new(seed)?;
    let (corpus, _) = d.load_corpus(certs, &density)?;
    let points = query_points(&corpus, seed);
    match kind {
        BenchKind::Qps => {
            let reqs = query_requests(&EarthModel::WGS84, &points);
            let rows = bench_throughput(&d, &reqs, workers, queries)?;
            write_csv(&out.join("throughput.csv"), &rows)?;
            for r in &rows {
                println!("{:>3} workers: {:.0} queries/s", r.workers, r.qps);
            }
        }
        BenchKind::Latency => {
            let http = geomap_core::http::spawn(geomap_core::http::map_router(d.server.clone()), "127.0.0.1:0", 2)?;
            let rows = bench_latency(&RemoteMap::new(&http.url()), &points[..queries.min(points.len())], &d.map_key(), &d.log_keys())?;
            http.stop();
            write_csv(&out.join("latency.csv"), &rows)?;
            let total: Vec<f64> = rows.iter().map(|r| r.total_us / 1e3).collect();
            write_csv(&out.join("cdf_latency_total_ms.csv"), &geomap_bench::report::cdf(&total))?;
            println!("p50 {:.2} ms, p95 {:.2} ms", geomap_bench::report::percentile(&total, 50.0), geomap_bench::report::percentile(&total, 95.0));
        }
        BenchKind::Ingest => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn plot_cmd(csv: &Path, out: &Path, x: Option<&str>, ys: &[String], title: &str, log_x: bool) -> Result<ExitCode> {
    let t = Table::read(csv)?;
    let title = if title.is_empty() { csv.file_stem().and_then(|s| s.to_str()).unwrap_or("") } else { title };
    let mut spec = PlotSpec::guess(&t, title);
    if let Some(x) = x {
        spec.x = x;
    }
    if !ys.is_empty() {
        spec.ys = ys.iter().map(String::as_str).collect();
    }
    spec.log_x |= log_x;
    if t.rows.is_empty() {
        bail!("{}: no rows", csv.display());
    }
    plot(&t, &spec, out)?;
    Ok(ExitCode::SUCCESS)
}
