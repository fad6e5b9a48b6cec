use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::output::TableRow;
use crate::cache::{output_distortion, KvCache, QueryStream};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policies::{evict, score_policy, PolicyConfig, PolicyKind};

fn default_period() -> usize {
    512
}

fn default_probe_window() -> usize {
    8
}

fn default_drift() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default = "default_period")]
    pub eviction_period: usize,
    pub budget: usize,
    pub total_steps: usize,
    pub policy: PolicyConfig,
    /// Trailing observed queries used to measure distortion at each event.
    #[serde(default = "default_probe_window")]
    pub probe_window: usize,
}

impl StreamConfig {
    pub fn new(budget: usize, total_steps: usize, policy: PolicyConfig) -> Self {
        Self {
            eviction_period: default_period(),
            budget,
            total_steps,
            policy,
            probe_window: default_probe_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy.kind == PolicyKind::Snapkv {
            return Err(Error::PolicyUnsupportedInStreaming(self.policy.kind.name().into()));
        }
        self.policy.validate()?;
        if self.eviction_period == 0 {
            return Err(Error::InvalidConfig("eviction_period must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget must be at least 1".into()));
        }
        if self.probe_window == 0 {
            return Err(Error::InvalidConfig("probe_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drifting-Gaussian source of decoding-step tokens.
///
/// Each step emits `k = m_k + ξ`, `v = m_v + η` and a query `q = m_q + ζ`,
/// with `ξ ~ N(0, I/d_key)`, `η ~ N(0, I/d_value)` and `ζ ~ N(0, I)`. After
/// every step each mean takes a random-walk step whose size is `drift` times
/// its own per-coordinate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGenerator {
    pub d_key: usize,
    pub d_value: usize,
    #[serde(default = "default_drift")]
    pub drift: f64,
    pub seed: u64,
}

impl TokenGenerator {
    pub fn new(d_key: usize, d_value: usize, seed: u64) -> Self {
        Self {
            d_key,
            d_value,
            drift: default_drift(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_key == 0 || self.d_value == 0 {
            return Err(Error::InvalidConfig("d_key and d_value must be positive".into()));
        }
        if !(self.drift >= 0.0) || !self.drift.is_finite() {
            return Err(Error::InvalidConfig("drift must be non-negative".into()));
        }
        Ok(())
    }
}

struct TokenSource {
    rng: ChaCha8Rng,
    drift: f64,
    key_mean: Vec<f64>,
    value_mean: Vec<f64>,
    query_mean: Vec<f64>,
    key_scale: f64,
    value_scale: f64,
    query_scale: f64,
}

struct Token {
    key: Vec<f64>,
    value: Vec<f64>,
    query: Vec<f64>,
}

impl TokenSource {
    fn new(g: &TokenGenerator) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
        let key_scale = 1.0 / (g.d_key as f64).sqrt();
        let value_scale = 1.0 / (g.d_value as f64).sqrt();
        let key_mean = gaussian(&mut rng, g.d_key, key_scale);
        let value_mean = gaussian(&mut rng, g.d_value, value_scale);
        // Queries lean toward the initial key direction with norm 2√d_key.
        let kn = key_mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let target = 2.0 * (g.d_key as f64).sqrt();
        let query_mean = key_mean.iter().map(|x| x * target / kn).collect();
        Self {
            rng,
            drift: g.drift,
            key_mean,
            value_mean,
            query_mean,
            key_scale,
            value_scale,
            query_scale: 2.0,
        }
    }

    fn next(&mut self) -> Token {
        let rng = &mut self.rng;
        let key = jitter(rng, &self.key_mean, self.key_scale);
        let value = jitter(rng, &self.value_mean, self.value_scale);
        let query = jitter(rng, &self.query_mean, 1.0);
        if self.drift > 0.0 {
            walk(rng, &mut self.key_mean, self.drift * self.key_scale);
            walk(rng, &mut self.value_mean, self.drift * self.value_scale);
            walk(rng, &mut self.query_mean, self.drift * self.query_scale);
        }
        Token { key, value, query }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * normal(rng)).collect()
}

fn jitter(rng: &mut ChaCha8Rng, mean: &[f64], scale: f64) -> Vec<f64> {
    mean.iter().map(|m| m + scale * normal(rng)).collect()
}

fn walk(rng: &mut ChaCha8Rng, mean: &mut [f64], step: f64) {
    for m in mean {
        *m += step * normal(rng);
    }
}

/// Cache size around one decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Size right after appending this step's token.
    pub size_before: usize,
    /// Size at the end of the step.
    pub size_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvictionEvent {
    pub step: usize,
    pub size_before: usize,
    pub size_after: usize,
    /// Positions kept, ascending.
    pub retained_positions: Vec<u32>,
    /// Output distortion of the retained cache against every token seen so
    /// far, on the trailing probe window.
    pub distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamTrace {
    pub steps: Vec<StepRecord>,
    pub events: Vec<EvictionEvent>,
}

impl TableRow for StepRecord {
    fn header() -> &'static [&'static str] {
        &["step", "size_before", "size_after"]
    }

    fn fields(&self) -> Vec<String> {
        vec![self.step.to_string(), self.size_before.to_string(), self.size_after.to_string()]
    }
}

impl TableRow for EvictionEvent {
    fn header() -> &'static [&'static str] {
        &["step", "size_before", "size_after", "distortion", "retained_positions"]
    }

    fn fields(&self) -> Vec<String> {
        let positions: Vec<String> = self.retained_positions.iter().map(u32::to_string).collect();
        vec![
            self.step.to_string(),
            self.size_before.to_string(),
            self.size_after.to_string(),
            self.distortion.to_string(),
            positions.join(" "),
        ]
    }
}

/// Simulates decoding with periodic eviction.
///
/// Steps are numbered from 0 and the token generated at step `s` sits at
/// position `s`. Each step appends one token; then, if `s` is a multiple of
/// `eviction_period` and the cache holds more than `budget` entries, the
/// policy re-scores the cache against every query observed so far and
/// evicts down to `budget`. Evicted tokens are gone for good.
pub fn streaming_simulation(generator: &TokenGenerator, cfg: &StreamConfig) -> Result<StreamTrace> {
    cfg.validate()?;
    generator.validate()?;
    let (dk, dv) = (generator.d_key, generator.d_value);
    let mut source = TokenSource::new(generator);
    let mut cache = KvCache::new(Matrix::zeros(0, dk), Matrix::zeros(0, dv), Vec::new())?;
    let mut history = cache.clone();
    let mut queries = Matrix::zeros(0, dk);
    let mut steps = Vec::with_capacity(cfg.total_steps);
    let mut events = Vec::new();

    for s in 0..cfg.total_steps {
        let pos = u32::try_from(s).map_err(|_| Error::InvalidConfig("total_steps exceeds u32 positions".into()))?;
        let token = source.next();
        cache.push(&token.key, &token.value, pos)?;
        history.push(&token.key, &token.value, pos)?;
        queries.push_row(&token.query);

        let size_before = cache.len();
        if s % cfg.eviction_period == 0 && size_before > cfg.budget {
            let observed = QueryStream::new(queries.clone());
            let scores = score_policy(&cfg.policy, &cache, Some(&observed), cfg.budget)?;
            let kept = evict(&scores, cfg.budget)?;
            cache = cache.subset(&kept)?;
            let retained: Vec<usize> = cache.positions().iter().map(|&p| p as usize).collect();
            events.push(EvictionEvent {
                step: s,
                size_before,
                size_after: cache.len(),
                retained_positions: cache.positions().to_vec(),
                distortion: output_distortion(&history, &retained, &observed.last(cfg.probe_window))?,
            });
        }
        steps.push(StepRecord {
            step: s,
            size_before,
            size_after: cache.len(),
        });
    }
    Ok(StreamTrace { steps, events })
}
