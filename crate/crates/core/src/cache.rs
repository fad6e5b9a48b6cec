//! Per-head KV cache snapshots, synthetic generators, the attention oracle
//! and the `KVPK` interchange format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Keys, values and token positions for one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Matrix,
    values: Matrix,
    positions: Vec<u32>,
    pub layer: u32,
    pub head: u32,
}

impl KvCache {
    pub fn new(keys: Matrix, values: Matrix, positions: Vec<u32>) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(Error::DimensionMismatch {
                expected: keys.rows(),
                actual: values.rows(),
                context: "value rows vs key rows",
            });
        }
        if positions.len() != keys.rows() {
            return Err(Error::DimensionMismatch {
                expected: keys.rows(),
                actual: positions.len(),
                context: "positions vs key rows",
            });
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("positions must be strictly ascending".into()));
        }
        Ok(Self {
            keys,
            values,
            positions,
            layer: 0,
            head: 0,
        })
    }

    /// Cache with positions `0..N`.
    pub fn from_kv(keys: Matrix, values: Matrix) -> Result<Self> {
        let n = keys.rows() as u32;
        Self::new(keys, values, (0..n).collect())
    }

    pub fn with_location(mut self, layer: u32, head: u32) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_key(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_value(&self) -> usize {
        self.values.cols()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn key(&self, i: usize) -> &[f64] {
        self.keys.row(i)
    }

    pub fn value(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Entries at `indices` (unique, in range), kept in positional order.
    pub fn subset(&self, indices: &[usize]) -> Result<KvCache> {
        validate_index_set(indices, self.len())?;
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        Ok(KvCache {
            keys: self.keys.select_rows(&sorted),
            values: self.values.select_rows(&sorted),
            positions: sorted.iter().map(|&i| self.positions[i]).collect(),
            layer: self.layer,
            head: self.head,
        })
    }

    /// Appends one entry; `position` must exceed every stored position.
    pub fn push(&mut self, key: &[f64], value: &[f64], position: u32) -> Result<()> {
        if key.len() != self.d_key() || value.len() != self.d_value() {
            return Err(Error::DimensionMismatch {
                expected: self.d_key() + self.d_value(),
                actual: key.len() + value.len(),
                context: "appended entry",
            });
        }
        if self.positions.last().is_some_and(|&p| p >= position) {
            return Err(Error::InvalidConfig("appended position must be the newest".into()));
        }
        if let Some(i) = key.iter().chain(value).position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        self.keys.push_row(key);
        self.values.push_row(value);
        self.positions.push(position);
        Ok(())
    }
}

/// Checks that `indices` are unique and below `n`. Order is not required.
pub fn validate_index_set(indices: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    Ok(())
}

/// Observed or probe queries, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryStream {
    pub queries: Matrix,
}

impl QueryStream {
    pub fn new(queries: Matrix) -> Self {
        Self { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn query(&self, t: usize) -> &[f64] {
        self.queries.row(t)
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> QueryStream {
        let idx: Vec<usize> = (start..end).collect();
        QueryStream::new(self.queries.select_rows(&idx))
    }

    /// The trailing `window` queries, or all of them if fewer exist.
    pub fn last(&self, window: usize) -> QueryStream {
        let start = self.len().saturating_sub(window);
        self.slice(start, self.len())
    }
}

fn default_queries() -> usize {
    64
}

/// Gaussian-mixture cache generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tokens: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub n_clusters: usize,
    /// Within-cluster standard deviation, as a fraction of the unit center
    /// scale (each coordinate gets `cluster_spread / √d`).
    pub cluster_spread: f64,
    pub seed: u64,
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    /// Per-step standard deviation of the random walk on the query mean.
    #[serde(default)]
    pub query_drift: f64,
}

impl SyntheticSpec {
    pub fn new(n_tokens: usize, d_key: usize, d_value: usize, n_clusters: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            d_key,
            d_value,
            n_clusters,
            cluster_spread: 0.5,
            seed,
            n_queries: default_queries(),
            query_drift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_tokens == 0 {
            return bad("n_tokens must be positive");
        }
        if self.d_key == 0 || self.d_value == 0 {
            return bad("d_key and d_value must be positive");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_tokens {
            return bad("n_clusters must lie in [1, n_tokens]");
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return bad("cluster_spread must be positive");
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive");
        }
        if !(self.query_drift >= 0.0) || !self.query_drift.is_finite() {
            return bad("query_drift must be non-negative");
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generated entries are rounded through `f32` so caches survive a `KVPK`
/// round trip unchanged.
fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Draws a clustered cache and a query stream.
///
/// Key and value cluster centers are `N(0, I/d)`; every cluster gets at
/// least one token. The query mean points along the average of a random
/// quarter of the key centers, scaled to norm `2√d_key`, and then follows a
/// random walk of per-coordinate step `query_drift`. Query noise is unit
/// variance per coordinate.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(KvCache, QueryStream)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, dk, dv, c) = (spec.n_tokens, spec.d_key, spec.d_value, spec.n_clusters);
    let sk = 1.0 / (dk as f64).sqrt();
    let sv = 1.0 / (dv as f64).sqrt();

    let key_centers = Matrix::from_fn(c, dk, |_, _| normal(&mut rng) * sk);
    let value_centers = Matrix::from_fn(c, dv, |_, _| normal(&mut rng) * sv);

    let mut assignment: Vec<usize> = (0..n).map(|i| i % c).collect();
    assignment.shuffle(&mut rng);

    let spread = spec.cluster_spread;
    let mut keys = Vec::with_capacity(n * dk);
    let mut values = Vec::with_capacity(n * dv);
    for &a in &assignment {
        for j in 0..dk {
            let x = key_centers.get(a, j) + spread * sk * normal(&mut rng);
            keys.push(to_f32_grid(x));
        }
        for j in 0..dv {
            let x = value_centers.get(a, j) + spread * sv * normal(&mut rng);
            values.push(to_f32_grid(x));
        }
    }

    let mut centers: Vec<usize> = (0..c).collect();
    centers.shuffle(&mut rng);
    let chosen = &centers[..(c / 4).max(1)];
    let mut mean = vec![0.0; dk];
    for &i in chosen {
        for (m, x) in mean.iter_mut().zip(key_centers.row(i)) {
            *m += x;
        }
    }
    let norm = dot(&mean, &mean).sqrt();
    let target = 2.0 * (dk as f64).sqrt();
    if norm > 0.0 {
        mean.iter_mut().for_each(|m| *m *= target / norm);
    }

    let mut queries = Vec::with_capacity(spec.n_queries * dk);
    for _ in 0..spec.n_queries {
        for m in mean.iter() {
            queries.push(to_f32_grid(m + normal(&mut rng)));
        }
        if spec.query_drift > 0.0 {
            for m in mean.iter_mut() {
                *m += spec.query_drift * normal(&mut rng);
            }
        }
    }

    let cache = KvCache::from_kv(Matrix::new(n, dk, keys)?, Matrix::new(n, dv, values)?)?;
    Ok((cache, QueryStream::new(Matrix::new(spec.n_queries, dk, queries)?)))
}

/// Softmax of `qᵀk_i / √d_key` over the cache.
pub fn attention_weights(cache: &KvCache, query: &[f64]) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if query.len() != cache.d_key() {
        return Err(Error::DimensionMismatch {
            expected: cache.d_key(),
            actual: query.len(),
            context: "query dimension",
        });
    }
    let scale = 1.0 / (cache.d_key() as f64).sqrt();
    let logits: Vec<f64> = cache.keys.row_iter().map(|k| dot(query, k) * scale).collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `Σ_i softmax(qᵀk_i/√d)_i · v_i`, with no output projection.
pub fn attention_output(cache: &KvCache, query: &[f64]) -> Result<Vec<f64>> {
    let weights = attention_weights(cache, query)?;
    let mut out = vec![0.0; cache.d_value()];
    for (a, v) in weights.iter().zip(cache.values.row_iter()) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok(out)
}

const DISTORTION_FLOOR: f64 = 1e-12;

/// Mean relative deviation of the retained-cache attention output from the
/// full-cache output over `probes`.
pub fn output_distortion(full: &KvCache, retained: &[usize], probes: &QueryStream) -> Result<f64> {
    if retained.is_empty() {
        return Err(Error::EmptySubset);
    }
    if probes.is_empty() {
        return Err(Error::EmptySequence);
    }
    let sub = full.subset(retained)?;
    let mut total = 0.0;
    for q in probes.queries.row_iter() {
        let a = attention_output(full, q)?;
        let b = attention_output(&sub, q)?;
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        total += diff / dot(&a, &a).sqrt().max(DISTORTION_FLOOR);
    }
    Ok(total / probes.len() as f64)
}

pub const KVPK_MAGIC: [u8; 4] = *b"KVPK";
pub const KVPK_VERSION: u8 = 1;
const PREAMBLE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvpkHeader {
    pub n: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub layer: u32,
    pub head: u32,
    pub dtype: String,
    pub has_queries: bool,
    pub t_queries: usize,
}

impl KvpkHeader {
    fn payload_len(&self) -> usize {
        let t = if self.has_queries { self.t_queries } else { 0 };
        4 * (self.n * self.d_key + self.n * self.d_value + self.n + t * self.d_key)
    }
}

/// Serializes a cache (and optional queries) to `KVPK` bytes.
pub fn encode_cache(cache: &KvCache, queries: Option<&QueryStream>) -> Result<Vec<u8>> {
    if let Some(q) = queries {
        if q.dim() != cache.d_key() {
            return Err(Error::DimensionMismatch {
                expected: cache.d_key(),
                actual: q.dim(),
                context: "query dimension",
            });
        }
    }
    let header = KvpkHeader {
        n: cache.len(),
        d_key: cache.d_key(),
        d_value: cache.d_value(),
        layer: cache.layer,
        head: cache.head,
        dtype: "f32".into(),
        has_queries: queries.is_some(),
        t_queries: queries.map_or(0, QueryStream::len),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + header.payload_len());
    out.extend_from_slice(&KVPK_MAGIC);
    out.extend_from_slice(&[KVPK_VERSION, 0, 0, 0]);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    put(cache.keys.data());
    put(cache.values.data());
    for &p in &cache.positions {
        out.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(q) = queries {
        for &x in q.queries.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `KVPK` bytes. The byte length must match the header exactly: a
/// short file is `TruncatedPayload`, trailing bytes are `ShapeMismatch`.
pub fn decode_cache(bytes: &[u8]) -> Result<(KvCache, Option<QueryStream>)> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && bytes[..4] != KVPK_MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(Error::TruncatedPayload {
            expected: PREAMBLE_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != KVPK_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != KVPK_VERSION {
        return Err(Error::VersionUnsupported(bytes[4]));
    }
    if bytes[5] != 0 || bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::ShapeMismatch("flags and reserved bytes must be zero".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = PREAMBLE_LEN + header_len;
    if bytes.len() < header_end {
        return Err(Error::TruncatedPayload {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let header: KvpkHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::ShapeMismatch(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::ShapeMismatch(format!("unsupported dtype {}", header.dtype)));
    }
    if !header.has_queries && header.t_queries != 0 {
        return Err(Error::ShapeMismatch("t_queries set without queries".into()));
    }
    let expected = header_end + header.payload_len();
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "header declares {expected} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut cursor = header_end;
    let mut take_f32 = |count: usize| -> Vec<f64> {
        let out = bytes[cursor..cursor + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        cursor += 4 * count;
        out
    };
    let keys = take_f32(header.n * header.d_key);
    let values = take_f32(header.n * header.d_value);
    let pos_bytes = &bytes[cursor..cursor + 4 * header.n];
    let positions: Vec<u32> = pos_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    cursor += 4 * header.n;
    let queries = if header.has_queries {
        let data: Vec<f64> = bytes[cursor..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let m = Matrix::new(header.t_queries, header.d_key, data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Some(QueryStream::new(m))
    } else {
        None
    };
    let shape = |e: Error| Error::ShapeMismatch(e.to_string());
    let cache = KvCache::new(
        Matrix::new(header.n, header.d_key, keys).map_err(shape)?,
        Matrix::new(header.n, header.d_value, values).map_err(shape)?,
        positions,
    )
    .map_err(shape)?
    .with_location(header.layer, header.head);
    Ok((cache, queries))
}

pub fn save_cache(path: &Path, cache: &KvCache, queries: Option<&QueryStream>) -> Result<()> {
    let bytes = encode_cache(cache, queries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(KvCache, Option<QueryStream>)> {
    decode_cache(&fs::read(path)?)
}
