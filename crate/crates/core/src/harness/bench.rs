use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::derive_seed;
use super::output::{opt_cell, TableRow};
use crate::cache::{KvCache, QueryStream};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policies::{evict, score_policy, PolicyConfig};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub policy: String,
    pub median_secs: f64,
    /// `time(n) / time(n/2)` when `n/2` was also measured.
    pub doubling_ratio: Option<f64>,
}

impl TableRow for BenchRow {
    fn header() -> &'static [&'static str] {
        &["n", "d", "policy", "median_secs", "doubling_ratio"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.d.to_string(),
            self.policy.clone(),
            self.median_secs.to_string(),
            opt_cell(self.doubling_ratio),
        ]
    }
}

fn bench_inputs(n: usize, d: usize, seed: u64) -> Result<(KvCache, QueryStream)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    let mut draw = |rows: usize, scale: f64| {
        Matrix::from_fn(rows, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    };
    let keys = draw(n, s);
    let values = draw(n, s);
    let queries = draw(64, 1.0);
    Ok((KvCache::from_kv(keys, values)?, QueryStream::new(queries)))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median wall time of scoring plus eviction to `n/2` entries, per size.
///
/// Each size gets one untimed warm-up run followed by `repeats` timed runs,
/// all on a single worker thread. Key, value and query dimensions all equal
/// `d`.
pub fn runtime_bench(sizes: &[usize], d: usize, policy: &PolicyConfig, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::InvalidConfig("repeats must be at least 3".into()));
    }
    if d == 0 || sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidConfig("sizes and d must be positive".into()));
    }
    policy.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (cache, queries) = bench_inputs(n, d, derive_seed(seed, &[n as u64]))?;
        let budget = (n / 2).max(1);
        let once = || -> Result<f64> {
            let start = Instant::now();
            let scores = score_policy(policy, &cache, Some(&queries), budget)?;
            std::hint::black_box(evict(&scores, budget)?);
            Ok(start.elapsed().as_secs_f64())
        };
        let mut times = pool.install(|| -> Result<Vec<f64>> {
            once()?;
            (0..repeats).map(|_| once()).collect()
        })?;
        let median_secs = median(&mut times);
        let doubling_ratio = (n % 2 == 0)
            .then(|| rows.iter().find(|r| r.n == n / 2))
            .flatten()
            .map(|half| median_secs / half.median_secs);
        rows.push(BenchRow {
            n,
            d,
            policy: policy.kind.name().into(),
            median_secs,
            doubling_ratio,
        });
    }
    Ok(rows)
}
