//! Eviction policies: CapKV and five baselines behind [`score_policy`] /
//! [`run_policy`].
//!
//! Every policy maps a cache to one score per entry; [`evict`] keeps the
//! `budget` highest scores. Structural policies (Sink) emit 1/0 membership
//! indicators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{attention_weights, KvCache, QueryStream};
use crate::error::{Error, Result};
use crate::linalg::{add_outer_lower, dot, factorize_escalating, mirror_lower, norm_sq, quadratic_form, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Capkv,
    #[serde(alias = "ea")]
    ExpectedAttention,
    Keydiff,
    Knorm,
    Snapkv,
    Sink,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Capkv,
        PolicyKind::ExpectedAttention,
        PolicyKind::Keydiff,
        PolicyKind::Knorm,
        PolicyKind::Snapkv,
        PolicyKind::Sink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Capkv => "capkv",
            PolicyKind::ExpectedAttention => "expected_attention",
            PolicyKind::Keydiff => "keydiff",
            PolicyKind::Knorm => "knorm",
            PolicyKind::Snapkv => "snapkv",
            PolicyKind::Sink => "sink",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "capkv" => PolicyKind::Capkv,
            "ea" | "expected_attention" | "expected-attention" => PolicyKind::ExpectedAttention,
            "keydiff" => PolicyKind::Keydiff,
            "knorm" => PolicyKind::Knorm,
            "snapkv" => PolicyKind::Snapkv,
            "sink" => PolicyKind::Sink,
            other => return Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
        })
    }
}

/// Which end of the key-norm ranking Knorm keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormDirection {
    #[default]
    High,
    Low,
}

impl NormDirection {
    fn is_high(&self) -> bool {
        *self == NormDirection::High
    }
}

pub const DEFAULT_TAU: f64 = 5.0;
pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_SINK_INITIAL: usize = 4;

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_sink_initial() -> usize {
    DEFAULT_SINK_INITIAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_sink_initial")]
    pub sink_initial: usize,
    /// Defaults to `budget − sink_initial`; if set it must equal that value.
    #[serde(default)]
    pub sink_recent: Option<usize>,
    #[serde(default, skip_serializing_if = "NormDirection::is_high")]
    pub knorm_direction: NormDirection,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            sink_initial: DEFAULT_SINK_INITIAL,
            sink_recent: None,
            knorm_direction: NormDirection::High,
        }
    }

    pub fn capkv(tau: f64) -> Self {
        Self {
            tau,
            ..Self::new(PolicyKind::Capkv)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of queries the policy needs to score.
    pub fn queries_needed(&self) -> usize {
        match self.kind {
            PolicyKind::Capkv if self.tau > 0.0 => 1,
            PolicyKind::ExpectedAttention => 2,
            PolicyKind::Snapkv => 1,
            _ => 0,
        }
    }
}

/// Empirical mean and covariance of observed queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryStats {
    pub mean: Vec<f64>,
    /// Unbiased sample covariance; `None` when fewer than two queries.
    pub cov: Option<Matrix>,
    pub count: usize,
}

impl QueryStats {
    /// Zero mean, no covariance, count 0. Only meaningful for query-agnostic
    /// scoring (CapKV at `τ = 0`).
    pub fn zero(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            cov: None,
            count: 0,
        }
    }

    pub fn from_queries(queries: &QueryStream) -> Result<Self> {
        let t = queries.len();
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        let d = queries.dim();
        let mut mean = vec![0.0; d];
        for q in queries.queries.row_iter() {
            for (m, x) in mean.iter_mut().zip(q) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let cov = (t >= 2).then(|| {
            let mut c = Matrix::zeros(d, d);
            let mut centered = vec![0.0; d];
            for q in queries.queries.row_iter() {
                for ((c, x), m) in centered.iter_mut().zip(q).zip(&mean) {
                    *c = x - m;
                }
                add_outer_lower(&mut c, &centered, 1.0 / (t - 1) as f64);
            }
            mirror_lower(&mut c);
            c
        });
        Ok(Self { mean, cov, count: t })
    }

    pub fn with_cov(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: cov.rows(),
                context: "query covariance",
            });
        }
        cov.check_symmetric()?;
        Ok(Self { mean, cov: Some(cov), count: 2 })
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.mean.len(),
                context: "query mean vs key dimension",
            });
        }
        Ok(())
    }
}

/// Query-alignment weights `exp(τ·kᵢᵀμ − max_j τ·k_jᵀμ)`; the largest weight
/// is exactly 1.
pub fn capkv_weights(cache: &KvCache, mean: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = cache.keys().row_iter().map(|k| tau * dot(k, mean)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|l| (l - max).exp()).collect()
}

/// Capacity matrix `I + Σᵢ wᵢ vᵢ vᵢᵀ` over every entry, accumulated in index
/// order.
pub fn capacity_matrix(cache: &KvCache, weights: &[f64]) -> Matrix {
    let dv = cache.d_value();
    let mut a = Matrix::identity(dv);
    for (v, &w) in cache.values().row_iter().zip(weights) {
        add_outer_lower(&mut a, v, w);
    }
    mirror_lower(&mut a);
    a
}

/// CapKV leverage scores `sᵢ = wᵢ·vᵢᵀA⁻¹vᵢ` with `A` built over all entries
/// and `uᵢ = vᵢ`.
pub fn score_capkv(cache: &KvCache, stats: &QueryStats, tau: f64) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig("tau must be non-negative".into()));
    }
    stats.check_dim(cache.d_key())?;
    let w = capkv_weights(cache, &stats.mean, tau);
    let f = factorize_escalating(&capacity_matrix(cache, &w))?;
    cache
        .values()
        .row_iter()
        .zip(&w)
        .map(|(v, &wi)| Ok(wi * quadratic_form(&f, v)?))
        .collect()
}

/// Squared key norms, negated for [`NormDirection::Low`].
pub fn score_knorm(cache: &KvCache, direction: NormDirection) -> Vec<f64> {
    let sign = if direction.is_high() { 1.0 } else { -1.0 };
    cache.keys().row_iter().map(|k| sign * norm_sq(k)).collect()
}

/// `−cos(kᵢ, k̄)` against the mean key. Zero keys score 0.
pub fn score_keydiff(cache: &KvCache) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let d = cache.d_key();
    let mut anchor = vec![0.0; d];
    for k in cache.keys().row_iter() {
        for (a, x) in anchor.iter_mut().zip(k) {
            *a += x;
        }
    }
    anchor.iter_mut().for_each(|a| *a /= cache.len() as f64);
    let anchor_norm = norm_sq(&anchor).sqrt();
    if anchor_norm == 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    Ok(cache
        .keys()
        .row_iter()
        .map(|k| {
            let kn = norm_sq(k).sqrt();
            if kn == 0.0 {
                0.0
            } else {
                -dot(k, &anchor) / (kn * anchor_norm)
            }
        })
        .collect())
}

/// Mean attention over the last `window` queries.
pub fn score_snapkv(cache: &KvCache, recent: &QueryStream, window: usize) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let obs = recent.last(window);
    if obs.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut scores = vec![0.0; cache.len()];
    for q in obs.queries.row_iter() {
        for (s, a) in scores.iter_mut().zip(attention_weights(cache, q)?) {
            *s += a;
        }
    }
    let t = obs.len() as f64;
    scores.iter_mut().for_each(|s| *s /= t);
    Ok(scores)
}

/// Log-domain expected attention `kᵢᵀμ + ½ kᵢᵀΛkᵢ`.
pub fn score_expected_attention(cache: &KvCache, stats: &QueryStats) -> Result<Vec<f64>> {
    stats.check_dim(cache.d_key())?;
    let cov = stats.cov.as_ref().ok_or_else(|| Error::MissingQueries {
        policy: PolicyKind::ExpectedAttention.name().into(),
        needed: 2,
        available: stats.count,
    })?;
    if cov.rows() != cache.d_key() {
        return Err(Error::DimensionMismatch {
            expected: cache.d_key(),
            actual: cov.rows(),
            context: "query covariance",
        });
    }
    cache
        .keys()
        .row_iter()
        .map(|k| Ok(dot(k, &stats.mean) + 0.5 * dot(k, &cov.mul_vec(k)?)))
        .collect()
}

/// 1 for the first `min(sink_initial, budget)` positions and the most recent
/// remainder of the budget, 0 elsewhere.
pub fn score_sink(n: usize, budget: usize, sink_initial: usize) -> Result<Vec<f64>> {
    if budget > n {
        return Err(Error::BudgetExceedsCache { budget, n });
    }
    let head = sink_initial.min(budget);
    let tail = budget - head;
    Ok((0..n)
        .map(|i| if i < head || i >= n - tail { 1.0 } else { 0.0 })
        .collect())
}

/// Indices of the `budget` highest scores, ties to the lower index, returned
/// in ascending order.
pub fn evict(scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be at least 1".into()));
    }
    if budget > n {
        return Err(Error::BudgetExceedsCache { budget, n });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..budget].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// `round((1 − ratio)·n)`.
pub fn budget_for_ratio(n: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * n as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionResult {
    pub retained: Vec<usize>,
    pub scores: Vec<f64>,
    pub policy: PolicyConfig,
}

fn require_queries<'a>(cfg: &PolicyConfig, queries: Option<&'a QueryStream>) -> Result<&'a QueryStream> {
    let needed = cfg.queries_needed();
    match queries {
        Some(q) if q.len() >= needed => Ok(q),
        other => Err(Error::MissingQueries {
            policy: cfg.kind.name().into(),
            needed,
            available: other.map_or(0, QueryStream::len),
        }),
    }
}

/// Per-entry scores for `cfg` on `cache`. `queries` holds the observed
/// query history; `budget` is only used by Sink.
pub fn score_policy(
    cfg: &PolicyConfig,
    cache: &KvCache,
    queries: Option<&QueryStream>,
    budget: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    match cfg.kind {
        PolicyKind::Capkv => {
            let stats = if cfg.tau == 0.0 {
                QueryStats::zero(cache.d_key())
            } else {
                QueryStats::from_queries(require_queries(cfg, queries)?)?
            };
            score_capkv(cache, &stats, cfg.tau)
        }
        PolicyKind::ExpectedAttention => {
            let stats = QueryStats::from_queries(require_queries(cfg, queries)?)?;
            score_expected_attention(cache, &stats)
        }
        PolicyKind::Keydiff => match score_keydiff(cache) {
            Err(Error::DegenerateAnchor) => Ok(vec![0.0; cache.len()]),
            other => other,
        },
        PolicyKind::Knorm => Ok(score_knorm(cache, cfg.knorm_direction)),
        PolicyKind::Snapkv => score_snapkv(cache, require_queries(cfg, queries)?, cfg.window),
        PolicyKind::Sink => {
            let head = cfg.sink_initial.min(budget);
            if let Some(recent) = cfg.sink_recent {
                if recent != budget.saturating_sub(head) {
                    return Err(Error::InvalidConfig(format!(
                        "sink_recent {recent} must equal budget − sink_initial = {}",
                        budget.saturating_sub(head)
                    )));
                }
            }
            score_sink(cache.len(), budget, cfg.sink_initial)
        }
    }
}

/// Scores and evicts in one step.
pub fn run_policy(
    cfg: &PolicyConfig,
    cache: &KvCache,
    queries: Option<&QueryStream>,
    budget: usize,
) -> Result<EvictionResult> {
    if budget > cache.len() {
        return Err(Error::BudgetExceedsCache {
            budget,
            n: cache.len(),
        });
    }
    let scores = score_policy(cfg, cache, queries, budget)?;
    let retained = evict(&scores, budget)?;
    Ok(EvictionResult {
        retained,
        scores,
        policy: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky_factorize, rank_one_logdet_gain, testutil::random_matrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cache_from(keys: &[Vec<f64>], values: &[Vec<f64>]) -> KvCache {
        let dk = keys[0].len();
        let dv = values[0].len();
        KvCache::from_kv(Matrix::from_rows(keys, dk).unwrap(), Matrix::from_rows(values, dv).unwrap()).unwrap()
    }

    fn random_cache(rng: &mut ChaCha8Rng, n: usize, dk: usize, dv: usize) -> KvCache {
        KvCache::from_kv(random_matrix(rng, n, dk), random_matrix(rng, n, dv)).unwrap()
    }

    fn random_queries(rng: &mut ChaCha8Rng, t: usize, d: usize) -> QueryStream {
        QueryStream::new(random_matrix(rng, t, d).scaled(0.5))
    }

    #[test]
    fn capkv_symmetric_duplicates() {
        let c = cache_from(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![0.3, 0.4], vec![0.3, 0.4]]);
        let s = score_capkv(&c, &QueryStats::zero(2), 0.0).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn capkv_orthonormal_values() {
        let c = cache_from(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = score_capkv(&c, &QueryStats::zero(1), 0.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn capkv_suppresses_duplicated_direction() {
        let c = cache_from(
            &[vec![1.0], vec![1.0], vec![1.0]],
            &[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        );
        let s = score_capkv(&c, &QueryStats::zero(1), 0.0).unwrap();
        // A = diag(3, 2, 1)
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[2] - 0.5).abs() < 1e-15);
        assert!(s[2] > s[0]);
    }

    #[test]
    fn capkv_weights_are_max_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cache(&mut rng, 30, 4, 4);
        let mean = vec![400.0, -300.0, 0.0, 10.0];
        let w = capkv_weights(&c, &mean, 5.0);
        assert_eq!(w.iter().copied().fold(0.0, f64::max), 1.0);
        let s = score_capkv(&c, &QueryStats { mean, cov: None, count: 1 }, 5.0).unwrap();
        assert!(s.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn capkv_dimension_mismatch() {
        let c = cache_from(&[vec![1.0, 0.0]], &[vec![1.0]]);
        assert!(matches!(
            score_capkv(&c, &QueryStats::zero(3), 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn capkv_leave_one_out_bracketing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(2..15);
            let dv = rng.random_range(1..6);
            let c = random_cache(&mut rng, n, 3, dv);
            let q = random_queries(&mut rng, 5, 3);
            let stats = QueryStats::from_queries(&q).unwrap();
            let tau = rng.random_range(0.0..3.0);
            let s = score_capkv(&c, &stats, tau).unwrap();
            let w = capkv_weights(&c, &stats.mean, tau);
            for i in 0..n {
                let mut wl = w.clone();
                wl[i] = 0.0;
                let f = cholesky_factorize(&capacity_matrix(&c, &wl), 0.0).unwrap();
                let loo = w[i] * quadratic_form(&f, c.value(i)).unwrap();
                assert!(s[i] <= loo + 1e-12);
                // Sherman–Morrison: sᵢ = x/(1+x), and the exact gain is −log(1 − sᵢ)
                let gain = rank_one_logdet_gain(&f, c.value(i), w[i]).unwrap();
                assert!((gain + (-s[i]).ln_1p()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn capkv_tau_zero_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cache(&mut rng, 20, 5, 5);
        let a = QueryStats::from_queries(&random_queries(&mut rng, 10, 5)).unwrap();
        let b = QueryStats::from_queries(&random_queries(&mut rng, 3, 5)).unwrap();
        assert_eq!(score_capkv(&c, &a, 0.0).unwrap(), score_capkv(&c, &b, 0.0).unwrap());
    }

    #[test]
    fn capkv_duplicates_lower_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in [2usize, 3, 4] {
            let c = random_cache(&mut rng, 8, 3, 4);
            let stats = QueryStats::zero(3);
            let base = score_capkv(&c, &stats, 0.0).unwrap();
            let target = 2;
            let mut idx: Vec<usize> = (0..8).collect();
            idx.extend(std::iter::repeat_n(target, m - 1));
            let dup = KvCache::from_kv(c.keys().select_rows(&idx), c.values().select_rows(&idx)).unwrap();
            let s = score_capkv(&dup, &stats, 0.0).unwrap();
            for (j, &i) in idx.iter().enumerate() {
                if i == target {
                    assert!(s[j] < base[target]);
                }
            }
        }
    }

    #[test]
    fn knorm_examples() {
        let c = cache_from(&[vec![3.0, 4.0], vec![0.0, 0.0]], &[vec![1.0], vec![2.0]]);
        assert_eq!(score_knorm(&c, NormDirection::High), vec![25.0, 0.0]);
        assert_eq!(score_knorm(&c, NormDirection::Low), vec![-25.0, -0.0]);
        let other = cache_from(&[vec![3.0, 4.0], vec![0.0, 0.0]], &[vec![-7.0], vec![9.0]]);
        assert_eq!(score_knorm(&c, NormDirection::High), score_knorm(&other, NormDirection::High));
    }

    #[test]
    fn keydiff_examples() {
        let same = cache_from(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[vec![0.0], vec![0.0]]);
        for s in score_keydiff(&same).unwrap() {
            assert!((s + 1.0).abs() < 1e-12);
        }
        let c = cache_from(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]], &vec![vec![0.0]; 3]);
        let s = score_keydiff(&c).unwrap();
        assert_eq!(s, vec![-1.0, -1.0, 1.0]);
        assert_eq!(evict(&s, 1).unwrap(), vec![2]);

        let scaled = cache_from(&[vec![7.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]], &vec![vec![0.0]; 3]);
        let t = score_keydiff(&scaled).unwrap();
        assert_eq!(t, s);

        let cancel = cache_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &vec![vec![0.0]; 2]);
        assert!(matches!(score_keydiff(&cancel), Err(Error::DegenerateAnchor)));
        let cfg = PolicyConfig::new(PolicyKind::Keydiff);
        assert_eq!(score_policy(&cfg, &cancel, None, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn snapkv_examples() {
        let c = cache_from(
            &[vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]],
            &vec![vec![0.0]; 3],
        );
        let flat = QueryStream::new(Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 1.0]], 4).unwrap());
        let s = score_snapkv(&c, &flat, 32).unwrap();
        for x in &s {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // ‖k₁‖² = 4, d = 4: logit 4/√4 = 2
        let q = QueryStream::new(Matrix::from_rows(&[vec![2.0, 0.0, 0.0, 0.0]], 4).unwrap());
        let s = score_snapkv(&c, &q, 32).unwrap();
        let e2 = 2f64.exp();
        assert!((s[0] - e2 / (e2 + 2.0)).abs() < 1e-12);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let empty = QueryStream::new(Matrix::zeros(0, 4));
        assert!(matches!(score_snapkv(&c, &empty, 4), Err(Error::EmptyWindow)));
    }

    #[test]
    fn snapkv_is_mean_of_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cache(&mut rng, 12, 4, 2);
        let q = random_queries(&mut rng, 10, 4);
        let s = score_snapkv(&c, &q, 3).unwrap();
        let per: Vec<Vec<f64>> = (7..10).map(|t| attention_weights(&c, q.query(t)).unwrap()).collect();
        for i in 0..12 {
            let lo = per.iter().map(|a| a[i]).fold(f64::INFINITY, f64::min);
            let hi = per.iter().map(|a| a[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(s[i] >= lo - 1e-15 && s[i] <= hi + 1e-15);
        }
    }

    #[test]
    fn expected_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cache(&mut rng, 10, 3, 2);
        let iso = QueryStats::with_cov(vec![0.0; 3], Matrix::identity(3)).unwrap();
        let s = score_expected_attention(&c, &iso).unwrap();
        for (x, k) in s.iter().zip(score_knorm(&c, NormDirection::High)) {
            assert!((x - 0.5 * k).abs() < 1e-12);
        }
        let zero_key = cache_from(&[vec![0.0, 0.0, 0.0]], &[vec![1.0]]);
        assert_eq!(score_expected_attention(&zero_key, &iso).unwrap(), vec![0.0]);

        let mean = vec![0.3, -1.0, 2.0];
        let flat = QueryStats::with_cov(mean.clone(), Matrix::zeros(3, 3)).unwrap();
        let s = score_expected_attention(&c, &flat).unwrap();
        let dots: Vec<f64> = c.keys().row_iter().map(|k| dot(k, &mean)).collect();
        assert_eq!(evict(&s, 4).unwrap(), evict(&dots, 4).unwrap());

        let no_cov = QueryStats { mean, cov: None, count: 1 };
        assert!(matches!(score_expected_attention(&c, &no_cov), Err(Error::MissingQueries { .. })));
    }

    #[test]
    fn sink_examples() {
        let s = score_sink(10, 5, 2).unwrap();
        assert_eq!(evict(&s, 5).unwrap(), vec![0, 1, 7, 8, 9]);
        assert_eq!(score_sink(6, 6, 2).unwrap(), vec![1.0; 6]);
        assert_eq!(score_sink(6, 2, 0).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(score_sink(3, 4, 1), Err(Error::BudgetExceedsCache { .. })));
    }

    #[test]
    fn sink_recent_must_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cache(&mut rng, 10, 2, 2);
        let mut cfg = PolicyConfig::new(PolicyKind::Sink);
        cfg.sink_initial = 2;
        cfg.sink_recent = Some(3);
        assert!(run_policy(&cfg, &c, None, 5).is_ok());
        cfg.sink_recent = Some(2);
        assert!(matches!(run_policy(&cfg, &c, None, 5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn evict_examples() {
        assert_eq!(evict(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(evict(&[1.0; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(evict(&[3.0, -1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(evict(&[1.0], 2), Err(Error::BudgetExceedsCache { .. })));
        assert!(evict(&[1.0], 0).is_err());
        assert!(matches!(evict(&[1.0, f64::NAN], 1), Err(Error::NonFinite(1))));
    }

    #[test]
    fn compression_ratio_budgets() {
        for (n, r, want) in [(256, 0.25, 192), (256, 0.5, 128), (256, 0.75, 64), (256, 0.9, 26), (16, 0.75, 4)] {
            assert_eq!(budget_for_ratio(n, r), want);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cache(&mut rng, 100, 4, 4);
        let q = random_queries(&mut rng, 8, 4);
        for r in [0.25, 0.5, 0.75, 0.9] {
            for kind in PolicyKind::ALL {
                let b = budget_for_ratio(100, r);
                let res = run_policy(&PolicyConfig::new(kind), &c, Some(&q), b).unwrap();
                assert_eq!(res.retained.len(), b);
            }
        }
    }

    #[test]
    fn missing_queries_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_cache(&mut rng, 6, 2, 2);
        for kind in [PolicyKind::Snapkv, PolicyKind::ExpectedAttention, PolicyKind::Capkv] {
            let err = run_policy(&PolicyConfig::new(kind), &c, None, 3).unwrap_err();
            assert!(matches!(err, Error::MissingQueries { .. }), "{kind}");
        }
        assert!(run_policy(&PolicyConfig::capkv(0.0), &c, None, 3).is_ok());
    }

    #[test]
    fn config_json_shape() {
        let cfg = PolicyConfig::new(PolicyKind::Capkv);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(json, r#"{"kind":"capkv","tau":5.0,"window":32,"sink_initial":4,"sink_recent":null}"#);
        let back: PolicyConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let ea: PolicyConfig = serde_json::from_str(r#"{"kind":"ea"}"#).unwrap();
        assert_eq!(ea.kind, PolicyKind::ExpectedAttention);
        assert!(serde_json::from_str::<PolicyConfig>(r#"{"kind":"knorm","extra":1}"#).is_err());
        let mut low = PolicyConfig::new(PolicyKind::Knorm);
        low.knorm_direction = NormDirection::Low;
        assert!(serde_json::to_string(&low).unwrap().contains(r#""knorm_direction":"low""#));
        assert!(PolicyConfig { tau: -1.0, ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn scores_are_permutation_equivariant(seed in any::<u64>(), n in 3usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cache(&mut rng, n, 4, 3);
            let q = random_queries(&mut rng, 6, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(n / 3);
            perm.swap(0, n - 1);
            let p = KvCache::from_kv(c.keys().select_rows(&perm), c.values().select_rows(&perm)).unwrap();
            for kind in [PolicyKind::Capkv, PolicyKind::ExpectedAttention, PolicyKind::Keydiff, PolicyKind::Knorm, PolicyKind::Snapkv] {
                let cfg = PolicyConfig::new(kind);
                let a = score_policy(&cfg, &c, Some(&q), 2).unwrap();
                let b = score_policy(&cfg, &p, Some(&q), 2).unwrap();
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((a[i] - b[j]).abs() <= 1e-9 * (1.0 + a[i].abs()), "{kind}");
                }
            }
        }

        #[test]
        fn eviction_is_deterministic(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) * 0.5).collect();
            let b = rng.random_range(1..=n);
            let a = evict(&scores, b).unwrap();
            prop_assert_eq!(&a, &evict(&scores, b).unwrap());
            prop_assert_eq!(a.len(), b);
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            let min_kept = a.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in 0..n {
                if !a.contains(&i) {
                    prop_assert!(scores[i] <= min_kept);
                }
            }
        }
    }
}
