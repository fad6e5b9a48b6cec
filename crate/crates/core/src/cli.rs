//! The `capkv` command line.
//!
//! Every subcommand accepts `--config file.json`, a JSON object keyed by
//! long flag names whose entries fill in flags not given on the command
//! line. Exit codes: 0 success, 2 invalid flags, 3 I/O or unreadable input,
//! 4 domain error, 5 resource cap.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cache::{generate_synthetic, load_cache, save_cache, KvCache, QueryStream, SyntheticSpec};
use crate::error::Error;
use crate::harness::{
    capacity_performance_correlation, compression_sweep, derive_seed, exhaustive_logdet_select,
    greedy_logdet_select, one_shot_select, random_oracle_instance, runtime_bench, streaming_simulation,
    synthetic_sweep, tau_sweep, write_csv, write_jsonl, CorrelationRow, Stamp, StreamConfig, SweepConfig,
    SweepInput, SweepRow, TableRow, TokenGenerator,
};
use crate::linalg::Matrix;
use crate::policies::{budget_for_ratio, run_policy, NormDirection, PolicyConfig, PolicyKind};
use crate::proxies::report_for_subset;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DOMAIN: i32 = 4;
pub const EXIT_RESOURCE: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) => match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::BadMagic(_)
                | Error::VersionUnsupported(_)
                | Error::TruncatedPayload { .. }
                | Error::ShapeMismatch(_) => EXIT_IO,
                Error::CombinatorialExplosion(_) => EXIT_RESOURCE,
                _ => EXIT_DOMAIN,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "capkv", version, about = "Capacity-aware KV-cache eviction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads for the harness (defaults to all cores).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    High,
    Low,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clustered cache with a query stream.
    Gen(GenArgs),
    /// Score and evict one cache with a policy.
    Evict(EvictArgs),
    /// Capacity proxies of a retained subset.
    Capacity(CapacityArgs),
    /// Compression sweep over policies and ratios.
    Sweep(SweepArgs),
    /// Spearman correlation between capacity proxies and fidelity.
    Correlate(CorrelateArgs),
    /// Decoding-phase streaming eviction.
    Stream(StreamArgs),
    /// Greedy vs exhaustive log-det selection.
    Oracle(OracleArgs),
    /// Runtime scaling of scoring plus eviction.
    Bench(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Evict(_) => "evict",
            Command::Capacity(_) => "capacity",
            Command::Sweep(_) => "sweep",
            Command::Correlate(_) => "correlate",
            Command::Stream(_) => "stream",
            Command::Oracle(_) => "oracle",
            Command::Bench(_) => "bench",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen(a) => &a.common,
            Command::Evict(a) => &a.common,
            Command::Capacity(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Correlate(a) => &a.common,
            Command::Stream(a) => &a.common,
            Command::Oracle(a) => &a.common,
            Command::Bench(a) => &a.common,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Tokens in the cache.
    #[arg(long, default_value_t = 256, value_parser = positive)]
    pub n: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub d_key: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub d_value: usize,
    /// Number of Gaussian clusters.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub clusters: usize,
    /// Within-cluster spread relative to the center scale.
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Queries in the generated stream.
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub queries: usize,
    /// Per-query random-walk step of the query mean.
    #[arg(long, default_value_t = 0.0)]
    pub query_drift: f64,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_tokens: self.n,
            d_key: self.d_key,
            d_value: self.d_value,
            n_clusters: self.clusters,
            cluster_spread: self.spread,
            seed,
            n_queries: self.queries,
            query_drift: self.query_drift,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PolicyArgs {
    /// CapKV temperature.
    #[arg(long, default_value_t = crate::policies::DEFAULT_TAU)]
    pub tau: f64,
    /// SnapKV observation window.
    #[arg(long, default_value_t = crate::policies::DEFAULT_WINDOW)]
    pub window: usize,
    /// Sink: leading tokens always kept.
    #[arg(long, default_value_t = crate::policies::DEFAULT_SINK_INITIAL)]
    pub sink_initial: usize,
    /// Sink: recent tokens kept (must equal budget − sink-initial).
    #[arg(long)]
    pub sink_recent: Option<usize>,
    /// Knorm: keep the largest or smallest key norms.
    #[arg(long, value_enum, default_value_t = Direction::High)]
    pub knorm_direction: Direction,
}

impl PolicyArgs {
    fn config(&self, kind: PolicyKind) -> PolicyConfig {
        PolicyConfig {
            kind,
            tau: self.tau,
            window: self.window,
            sink_initial: self.sink_initial,
            sink_recent: self.sink_recent,
            knorm_direction: match self.knorm_direction {
                Direction::High => NormDirection::High,
                Direction::Low => NormDirection::Low,
            },
        }
    }
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("{s:?} is not a non-negative integer")),
    }
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(format!("ratio {r} must lie in (0, 1)"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TableArgs {
    /// Output file (standard output if absent).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Seed for all randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination KVPK file.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct EvictArgs {
    /// Input KVPK file.
    #[arg(long = "in")]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, default_value = "capkv", value_parser = parse_policy)]
    pub policy: PolicyKind,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
    /// Fraction of entries to evict, in (0, 1).
    #[arg(long, default_value_t = 0.5, value_parser = parse_ratio)]
    pub ratio: f64,
    /// Output JSON file (standard output if absent).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct CapacityArgs {
    #[arg(long = "in")]
    #[serde(skip)]
    pub input: PathBuf,
    /// JSON file holding an array of retained indices.
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    #[serde(skip)]
    pub indices: Option<PathBuf>,
    /// Use every entry.
    #[arg(long)]
    pub all: bool,
    /// JSON file holding the query covariance as an array of rows; adds the
    /// exact capacity.
    #[arg(long)]
    #[serde(skip)]
    pub query_cov: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Sweep a KVPK file (with queries) instead of synthetic caches.
    #[arg(long = "in")]
    #[serde(skip)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Compression ratios, each in (0, 1).
    #[arg(long, value_delimiter = ',', default_values_t = crate::harness::DEFAULT_RATIOS.to_vec(), value_parser = parse_ratio)]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "capkv,ea,keydiff,knorm,snapkv,sink", value_parser = parse_policy)]
    pub policies: Vec<PolicyKind>,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
    /// Trailing queries held out as probes.
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    /// Layers per synthetic replicate.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Heads per layer.
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Run CapKV at each of these temperatures instead of the policy grid.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Seed for all randomness.
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrelateArgs {
    /// Sweep tables (CSV or .jsonl) to pool.
    #[arg(long = "in", required = true, num_args = 1..)]
    #[serde(skip)]
    pub input: Vec<PathBuf>,
    /// Exact permutation p-values for samples of at most 10 points.
    #[arg(long)]
    pub exact: bool,
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct StreamArgs {
    /// Decoding steps between eviction checks.
    #[arg(long, default_value_t = 512)]
    pub period: usize,
    #[arg(long, default_value_t = 1024)]
    pub budget: usize,
    #[arg(long, default_value_t = 4096)]
    pub steps: usize,
    #[arg(long, default_value = "capkv", value_parser = parse_policy)]
    pub policy: PolicyKind,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
    #[arg(long, default_value_t = 64)]
    pub d_key: usize,
    #[arg(long, default_value_t = 64)]
    pub d_value: usize,
    /// Random-walk step of the token distribution, relative to its scale.
    #[arg(long, default_value_t = 0.01)]
    pub drift: f64,
    /// Trailing queries used to measure distortion at each event.
    #[arg(long, default_value_t = 8)]
    pub probe_window: usize,
    /// Seed for all randomness.
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    /// Also write per-step cache sizes to this file.
    #[arg(long)]
    #[serde(skip)]
    pub steps_out: Option<PathBuf>,
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub budget: usize,
    #[arg(long, default_value_t = 4)]
    pub d_key: usize,
    #[arg(long, default_value_t = 4)]
    pub d_value: usize,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Random instances to solve.
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Seed for all randomness.
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![4096usize, 8192])]
    pub sizes: Vec<usize>,
    /// Key, value and query dimension.
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value = "capkv", value_parser = parse_policy)]
    pub policy: PolicyKind,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
    #[arg(long, default_value_t = crate::harness::DEFAULT_REPEATS)]
    pub repeats: usize,
    /// Seed for all randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub common: Common,
}

/// Resolved configuration and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: u64,
    pub tool_version: String,
    pub config_hash: String,
}

impl RunManifest {
    /// `config_hash` is the SHA-256 of the canonical (key-sorted) JSON of the
    /// other four fields.
    pub fn new(subcommand: &str, config: Value, seed: u64) -> Self {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let canonical = json!({
            "subcommand": subcommand,
            "config": config,
            "seed": seed,
            "tool_version": tool_version,
        });
        let hash = Sha256::digest(canonical.to_string().as_bytes());
        Self {
            subcommand: subcommand.into(),
            config,
            seed,
            tool_version,
            config_hash: hex::encode(hash),
        }
    }

    fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }
}

fn file_digest(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Serialized flags plus digests of every input file.
fn config_value<T: Serialize>(args: &T, inputs: &[(&str, &Path)]) -> CliResult<Value> {
    let mut v = serde_json::to_value(args)?;
    if let Value::Object(map) = &mut v {
        map.remove("common");
        map.remove("table");
        for (name, path) in inputs {
            map.insert(format!("{name}_sha256"), file_digest(path)?.into());
        }
    }
    Ok(v)
}

/// Writes `bytes` to `path`, or to standard output when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn print_manifest(manifest: &RunManifest, table_on_stdout: bool) -> CliResult<()> {
    let text = serde_json::to_string(manifest)? + "\n";
    if table_on_stdout {
        io::stderr().write_all(text.as_bytes())?;
    } else {
        io::stdout().write_all(text.as_bytes())?;
    }
    Ok(())
}

fn write_table<R: TableRow>(table: &TableArgs, path: Option<&Path>, rows: &[R], manifest: &RunManifest) -> CliResult<()> {
    let mut buf = Vec::new();
    match table.format {
        Format::Csv => write_csv(&mut buf, rows, &manifest.stamp())?,
        Format::Jsonl => write_jsonl(&mut buf, rows, &manifest.stamp())?,
    }
    emit(path, &buf)
}

fn finish_table<R: TableRow>(table: &TableArgs, rows: &[R], manifest: &RunManifest) -> CliResult<()> {
    write_table(table, table.out.as_deref(), rows, manifest)?;
    print_manifest(manifest, table.out.is_none())
}

fn json_document<T: Serialize>(body: &T, manifest: &RunManifest) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_value(body)?;
    if let Value::Object(map) = &mut v {
        map.insert("manifest".into(), serde_json::to_value(manifest)?);
    }
    Ok((serde_json::to_string_pretty(&v)? + "\n").into_bytes())
}

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let spec = args.synth.spec(args.seed);
    spec.validate()?;
    let (cache, queries) = generate_synthetic(&spec)?;
    save_cache(&args.out, &cache, Some(&queries))?;
    let manifest = RunManifest::new("gen", config_value(args, &[])?, args.seed);
    print_manifest(&manifest, false)
}

#[derive(Serialize)]
struct EvictOutput<'a> {
    policy: &'a PolicyConfig,
    n: usize,
    budget: usize,
    retained: &'a [usize],
    retained_positions: Vec<u32>,
    scores: &'a [f64],
}

fn cmd_evict(args: &EvictArgs) -> CliResult<()> {
    let (cache, queries) = load_cache(&args.input)?;
    let cfg = args.policy_args.config(args.policy);
    let budget = budget_for_ratio(cache.len(), args.ratio);
    if budget == 0 {
        return Err(CliError::Usage(format!(
            "--ratio {} leaves no entries of {}",
            args.ratio,
            cache.len()
        )));
    }
    let result = run_policy(&cfg, &cache, queries.as_ref(), budget)?;
    let manifest = RunManifest::new("evict", config_value(args, &[("input", &args.input)])?, 0);
    let body = EvictOutput {
        policy: &cfg,
        n: cache.len(),
        budget,
        retained: &result.retained,
        retained_positions: result.retained.iter().map(|&i| cache.positions()[i]).collect(),
        scores: &result.scores,
    };
    emit(args.out.as_deref(), &json_document(&body, &manifest)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn cmd_capacity(args: &CapacityArgs) -> CliResult<()> {
    let (cache, _) = load_cache(&args.input)?;
    let indices: Vec<usize> = match &args.indices {
        Some(p) => read_json(p)?,
        None => (0..cache.len()).collect(),
    };
    let cov = match &args.query_cov {
        Some(p) => {
            let rows: Vec<Vec<f64>> = read_json(p)?;
            let cov = Matrix::from_rows(&rows, rows.first().map_or(0, Vec::len))?;
            if cov.rows() != cache.d_key() || cov.cols() != cache.d_key() {
                return Err(Error::DimensionMismatch {
                    expected: cache.d_key(),
                    actual: cov.rows(),
                    context: "query covariance",
                }
                .into());
            }
            Some(cov)
        }
        None => None,
    };
    let report = report_for_subset(&cache, &indices, indices.len(), cov.as_ref())?;
    let mut inputs: Vec<(&str, &Path)> = vec![("input", &args.input)];
    if let Some(p) = &args.indices {
        inputs.push(("indices", p));
    }
    if let Some(p) = &args.query_cov {
        inputs.push(("query_cov", p));
    }
    let manifest = RunManifest::new("capacity", config_value(args, &inputs)?, 0);
    emit(args.out.as_deref(), &json_document(&report, &manifest)?)
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let seed = args.seed.expect("clap enforces --seed");
    let mut cfg = SweepConfig {
        ratios: args.ratios.clone(),
        policies: args.policies.iter().map(|&k| args.policy_args.config(k)).collect(),
        probes_per_cache: args.probes,
        replicates: args.replicates,
        seed,
    };
    let inputs: Vec<(&str, &Path)> = args.input.iter().map(|p| ("input", p.as_path())).collect();
    let manifest = RunManifest::new("sweep", config_value(args, &inputs)?, seed);

    let file_input = match &args.input {
        Some(path) => {
            if args.replicates != 1 || args.layers != 1 || args.heads != 1 {
                return Err(CliError::Usage(
                    "--replicates, --layers and --heads apply to synthetic sweeps only".into(),
                ));
            }
            let (cache, queries) = load_cache(path)?;
            let queries = queries.ok_or_else(|| CliError::Usage("--in file carries no query stream".into()))?;
            Some(SweepInput::split(cache, &queries, args.probes)?)
        }
        None => None,
    };

    if let Some(taus) = &args.taus {
        let inputs: Vec<SweepInput> = match file_input {
            Some(input) => vec![input],
            None => synthetic_inputs(args, seed)?,
        };
        cfg.policies = vec![PolicyConfig::capkv(crate::policies::DEFAULT_TAU)];
        let rows = tau_sweep(&inputs, taus, &cfg)?;
        return finish_table(&args.table, &rows, &manifest);
    }
    let rows: Vec<SweepRow> = match file_input {
        Some(input) => compression_sweep(&input, &cfg)?,
        None => synthetic_sweep(&args.synth.spec(0), args.layers, args.heads, &cfg)?,
    };
    finish_table(&args.table, &rows, &manifest)
}

/// One cache per replicate × layer × head, seeded like `synthetic_sweep`.
fn synthetic_inputs(args: &SweepArgs, seed: u64) -> CliResult<Vec<SweepInput>> {
    let mut inputs = Vec::new();
    for rep in 0..args.replicates as u64 {
        for l in 0..args.layers as u64 {
            for h in 0..args.heads as u64 {
                let spec = args.synth.spec(derive_seed(seed, &[rep, l, h]));
                let (cache, queries): (KvCache, QueryStream) = generate_synthetic(&spec)?;
                inputs.push(SweepInput::split(cache, &queries, args.probes)?);
            }
        }
    }
    Ok(inputs)
}

#[derive(serde::Deserialize)]
struct StampedSweepRow {
    #[serde(flatten)]
    row: SweepRow,
}

fn read_sweep_table(path: &Path) -> CliResult<Vec<SweepRow>> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<StampedSweepRow>(l)?.row))
            .collect()
    } else {
        let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
        reader
            .deserialize::<SweepRow>()
            .map(|r| r.map_err(|e| CliError::Lib(e.into())))
            .collect()
    }
}

fn cmd_correlate(args: &CorrelateArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in &args.input {
        rows.extend(read_sweep_table(p)?);
    }
    let inputs: Vec<(&str, &Path)> = args.input.iter().map(|p| ("input", p.as_path())).collect();
    let mut config = config_value(args, &[])?;
    let digests: Vec<String> = inputs.iter().map(|(_, p)| file_digest(p)).collect::<CliResult<_>>()?;
    if let Value::Object(map) = &mut config {
        map.insert("input_sha256".into(), digests.into());
    }
    let manifest = RunManifest::new("correlate", config, 0);
    let result: Vec<CorrelationRow> = capacity_performance_correlation(&rows, args.exact)?.into();
    finish_table(&args.table, &result, &manifest)
}

fn cmd_stream(args: &StreamArgs) -> CliResult<()> {
    let seed = args.seed.expect("clap enforces --seed");
    let cfg = StreamConfig {
        eviction_period: args.period,
        budget: args.budget,
        total_steps: args.steps,
        policy: args.policy_args.config(args.policy),
        probe_window: args.probe_window,
    };
    let generator = TokenGenerator {
        d_key: args.d_key,
        d_value: args.d_value,
        drift: args.drift,
        seed,
    };
    let trace = streaming_simulation(&generator, &cfg)?;
    let manifest = RunManifest::new("stream", config_value(args, &[])?, seed);
    if let Some(p) = &args.steps_out {
        write_table(&args.table, Some(p), &trace.steps, &manifest)?;
    }
    finish_table(&args.table, &trace.events, &manifest)
}

#[derive(Debug, Serialize)]
struct OracleRow {
    instance: usize,
    n: usize,
    budget: usize,
    greedy_objective: f64,
    exhaustive_objective: f64,
    one_shot_objective: f64,
    greedy_ratio: f64,
    one_shot_ratio: f64,
    greedy_indices: String,
    exhaustive_indices: String,
    one_shot_indices: String,
}

impl TableRow for OracleRow {
    fn header() -> &'static [&'static str] {
        &[
            "instance",
            "n",
            "budget",
            "greedy_objective",
            "exhaustive_objective",
            "one_shot_objective",
            "greedy_ratio",
            "one_shot_ratio",
            "greedy_indices",
            "exhaustive_indices",
            "one_shot_indices",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.instance.to_string(),
            self.n.to_string(),
            self.budget.to_string(),
            self.greedy_objective.to_string(),
            self.exhaustive_objective.to_string(),
            self.one_shot_objective.to_string(),
            self.greedy_ratio.to_string(),
            self.one_shot_ratio.to_string(),
            self.greedy_indices.clone(),
            self.exhaustive_indices.clone(),
            self.one_shot_indices.clone(),
        ]
    }
}

/// `a / b`, with `0/0 = 1` so empty selections compare as equal.
fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

fn join(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn cmd_oracle(args: &OracleArgs) -> CliResult<()> {
    let seed = args.seed.expect("clap enforces --seed");
    if args.budget > args.n {
        return Err(CliError::Usage(format!("--budget {} exceeds --n {}", args.budget, args.n)));
    }
    let manifest = RunManifest::new("oracle", config_value(args, &[])?, seed);
    let rows = (0..args.instances)
        .map(|i| {
            let (cache, stats) = random_oracle_instance(args.n, args.d_key, args.d_value, derive_seed(seed, &[i as u64]))?;
            let e = exhaustive_logdet_select(&cache, &stats, args.tau, args.budget)?;
            let g = greedy_logdet_select(&cache, &stats, args.tau, args.budget)?;
            let o = one_shot_select(&cache, &stats, args.tau, args.budget)?;
            Ok(OracleRow {
                instance: i,
                n: args.n,
                budget: args.budget,
                greedy_objective: g.objective,
                exhaustive_objective: e.objective,
                one_shot_objective: o.objective,
                greedy_ratio: ratio(g.objective, e.objective),
                one_shot_ratio: ratio(o.objective, g.objective),
                greedy_indices: join(&g.indices),
                exhaustive_indices: join(&e.indices),
                one_shot_indices: join(&o.indices),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    finish_table(&args.table, &rows, &manifest)
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let cfg = args.policy_args.config(args.policy);
    let rows = runtime_bench(&args.sizes, args.d, &cfg, args.repeats, args.seed)?;
    let manifest = RunManifest::new("bench", config_value(args, &[])?, args.seed);
    finish_table(&args.table, &rows, &manifest)
}

/// Long flag names given explicitly on the command line.
fn explicit_flags(argv: &[String]) -> Vec<String> {
    argv.iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).replace('_', "-"))
        .collect()
}

/// Appends flags from a `--config` JSON object for every flag of the chosen
/// subcommand that was not given explicitly.
fn apply_config_overlay(argv: Vec<String>) -> CliResult<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => argv
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| CliError::Usage("--config needs a file path".into()))?,
    };
    let overlay: Value = read_json(Path::new(&path))?;
    let Value::Object(entries) = overlay else {
        return Err(CliError::Usage("--config file must hold a JSON object".into()));
    };
    let command = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| command.find_subcommand(a))
        .ok_or_else(|| CliError::Usage("--config needs a subcommand".into()))?;
    let given = explicit_flags(&argv);
    let mut out = argv.clone();
    for (key, value) in entries {
        let flag = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| CliError::Usage(format!("--config: unknown flag {key:?} for {}", sub.get_name())))?;
        if flag == "config" || given.contains(&flag) {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        let text = match (&value, takes_value) {
            (Value::Bool(b), false) => {
                if *b {
                    out.push(format!("--{flag}"));
                }
                continue;
            }
            (Value::Array(items), true) => items.iter().map(scalar_text).collect::<CliResult<Vec<_>>>()?.join(","),
            (v, true) => scalar_text(v)?,
            _ => return Err(CliError::Usage(format!("--config: {key:?} expects true or false"))),
        };
        out.push(format!("--{flag}={text}"));
    }
    Ok(out)
}

fn scalar_text(v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(CliError::Usage(format!("--config: unsupported value {other}"))),
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Evict(a) => cmd_evict(a),
        Command::Capacity(a) => cmd_capacity(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses `argv` and runs the chosen subcommand, returning the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match apply_config_overlay(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = cli.command.common().threads;
    let result = match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Usage(format!("--threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
