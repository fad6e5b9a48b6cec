use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::factorial::ln_binomial;

use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::linalg::{log_det_identity_plus_gram, rank_one_logdet_gain, SpdFactor, cholesky_factorize, Matrix};
use crate::policies::{capkv_weights, evict, score_capkv, QueryStats};

/// Upper bound on `C(N, budget)` for exhaustive search.
pub const MAX_EXHAUSTIVE_SUBSETS: u128 = 1_000_000;

/// A retained set and its objective `log det(I + Σ_C wᵢvᵢvᵢᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Ascending indices.
    pub indices: Vec<usize>,
    /// Indices in the order they were chosen (equal to `indices` for
    /// non-incremental methods).
    pub order: Vec<usize>,
    pub objective: f64,
}

impl Selection {
    fn new(order: Vec<usize>, objective: f64) -> Self {
        let mut indices = order.clone();
        indices.sort_unstable();
        Self {
            indices,
            order,
            objective,
        }
    }
}

fn is_better(candidate: f64, best: f64) -> bool {
    candidate > best + 1e-12 * (1.0 + best.abs())
}

fn check_budget(cache: &KvCache, stats: &QueryStats, budget: usize) -> Result<()> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if budget > cache.len() {
        return Err(Error::BudgetExceedsCache { budget, n: cache.len() });
    }
    stats.check_dim(cache.d_key())
}

fn oracle_weights(cache: &KvCache, stats: &QueryStats, tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig("tau must be non-negative".into()));
    }
    Ok(capkv_weights(cache, &stats.mean, tau))
}

/// `log det(I + Σ_{i∈C} wᵢvᵢvᵢᵀ)` with CapKV weights taken over the whole
/// cache.
pub fn logdet_objective(cache: &KvCache, weights: &[f64], indices: &[usize]) -> Result<f64> {
    crate::cache::validate_index_set(indices, cache.len())?;
    let dv = cache.d_value();
    let scaled = Matrix::from_fn(indices.len(), dv, |r, c| {
        let i = indices[r];
        weights[i].sqrt() * cache.value(i)[c]
    });
    log_det_identity_plus_gram(&scaled)
}

/// Greedy D-optimal selection: `budget` times, add the entry with the
/// largest exact gain `log(1 + wᵢvᵢᵀA⁻¹vᵢ)` against the running `A`.
/// Near-ties go to the lower index.
pub fn greedy_logdet_select(cache: &KvCache, stats: &QueryStats, tau: f64, budget: usize) -> Result<Selection> {
    check_budget(cache, stats, budget)?;
    let w = oracle_weights(cache, stats, tau)?;
    let mut factor: SpdFactor = cholesky_factorize(&Matrix::identity(cache.d_value()), 0.0)?;
    let mut taken = vec![false; cache.len()];
    let mut order = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..cache.len()).filter(|&i| !taken[i]) {
            let gain = rank_one_logdet_gain(&factor, cache.value(i), w[i])?;
            if best.is_none_or(|(_, b)| is_better(gain, b)) {
                best = Some((i, gain));
            }
        }
        let (i, _) = best.expect("budget ≤ N leaves a candidate");
        factor.rank_one_update(cache.value(i), w[i])?;
        taken[i] = true;
        order.push(i);
    }
    let objective = logdet_objective(cache, &w, &order)?;
    Ok(Selection::new(order, objective))
}

/// Brute-force maximizer over all size-`budget` subsets, enumerated in
/// lexicographic order; a later subset replaces the incumbent only when
/// strictly better, so ties resolve to the lexicographically smallest set.
pub fn exhaustive_logdet_select(cache: &KvCache, stats: &QueryStats, tau: f64, budget: usize) -> Result<Selection> {
    check_budget(cache, stats, budget)?;
    let n = cache.len();
    let count = ln_binomial(n as u64, budget as u64).exp().round();
    if count > MAX_EXHAUSTIVE_SUBSETS as f64 {
        return Err(Error::CombinatorialExplosion(count as u128));
    }
    let w = oracle_weights(cache, stats, tau)?;
    let mut subset: Vec<usize> = (0..budget).collect();
    let mut best = (subset.clone(), logdet_objective(cache, &w, &subset)?);
    // Advance to the next combination in lexicographic order.
    while let Some(pos) = (0..budget).rev().find(|&p| subset[p] < n - budget + p) {
        subset[pos] += 1;
        for p in pos + 1..budget {
            subset[p] = subset[p - 1] + 1;
        }
        let value = logdet_objective(cache, &w, &subset)?;
        if is_better(value, best.1) {
            best = (subset.clone(), value);
        }
    }
    Ok(Selection::new(best.0, best.1))
}

/// A random isotropic instance: keys `N(0, I/d_key)`, values `N(0, I)` and
/// a query mean drawn like a key.
pub fn random_oracle_instance(n: usize, d_key: usize, d_value: usize, seed: u64) -> Result<(KvCache, QueryStats)> {
    if n == 0 || d_key == 0 || d_value == 0 {
        return Err(Error::InvalidConfig("n, d_key and d_value must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sk = 1.0 / (d_key as f64).sqrt();
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let keys = Matrix::from_fn(n, d_key, |_, _| normal(sk));
    let values = Matrix::from_fn(n, d_value, |_, _| normal(1.0));
    let mut stats = QueryStats::zero(d_key);
    stats.mean = (0..d_key).map(|_| normal(sk)).collect();
    Ok((KvCache::from_kv(keys, values)?, stats))
}

/// One-shot CapKV: score every entry against `A` built over the whole cache
/// and keep the top `budget`.
pub fn one_shot_select(cache: &KvCache, stats: &QueryStats, tau: f64, budget: usize) -> Result<Selection> {
    check_budget(cache, stats, budget)?;
    let w = oracle_weights(cache, stats, tau)?;
    if budget == 0 {
        return Ok(Selection::new(Vec::new(), 0.0));
    }
    let kept = evict(&score_capkv(cache, stats, tau)?, budget)?;
    let objective = logdet_objective(cache, &w, &kept)?;
    Ok(Selection::new(kept, objective))
}
