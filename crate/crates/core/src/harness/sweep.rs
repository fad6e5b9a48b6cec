use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::output::{opt_cell, TableRow};
use crate::cache::{generate_synthetic, output_distortion, KvCache, QueryStream, SyntheticSpec};
use crate::error::{Error, Result};
use crate::policies::{budget_for_ratio, run_policy, PolicyConfig, PolicyKind};
use crate::proxies::{aggregate_heads_then_layers, report_for_subset, CapacityReport};

pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_TAUS: [f64; 5] = [0.0, 1.0, 5.0, 7.0, 10.0];
/// Policy label of the full-cache reference row.
pub const REFERENCE_POLICY: &str = "full";

fn default_ratios() -> Vec<f64> {
    DEFAULT_RATIOS.to_vec()
}

fn default_policies() -> Vec<PolicyConfig> {
    PolicyKind::ALL.iter().map(|&k| PolicyConfig::new(k)).collect()
}

fn default_probes() -> usize {
    16
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyConfig>,
    /// Trailing queries of each synthetic stream held out as probes.
    #[serde(default = "default_probes")]
    pub probes_per_cache: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub seed: u64,
}

impl SweepConfig {
    /// Default grid: four ratios, all six policies, 16 probes, one replicate.
    pub fn new(seed: u64) -> Self {
        Self {
            ratios: default_ratios(),
            policies: default_policies(),
            probes_per_cache: default_probes(),
            replicates: default_replicates(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::InvalidConfig("ratios must be nonempty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::InvalidConfig(format!("ratio {r} must lie in (0, 1)")));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("policies must be nonempty".into()));
        }
        for p in &self.policies {
            p.validate()?;
        }
        if self.probes_per_cache == 0 {
            return Err(Error::InvalidConfig("probes_per_cache must be positive".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be at least 1".into()));
        }
        Ok(())
    }
}

/// One cache with its observed query history and held-out probes.
#[derive(Debug, Clone)]
pub struct SweepInput {
    pub cache: KvCache,
    pub history: Option<QueryStream>,
    pub probes: QueryStream,
}

impl SweepInput {
    /// Splits a generated stream: the last `probes` queries are held out.
    pub fn split(cache: KvCache, queries: &QueryStream, probes: usize) -> Result<Self> {
        if probes >= queries.len() {
            return Err(Error::InvalidConfig(format!(
                "need more than {probes} queries to hold out {probes} probes, have {}",
                queries.len()
            )));
        }
        let cut = queries.len() - probes;
        Ok(Self {
            cache,
            history: Some(queries.slice(0, cut)),
            probes: queries.slice(cut, queries.len()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub replicate: usize,
    pub policy: String,
    /// Temperature, for CapKV rows only.
    pub tau: Option<f64>,
    /// Compression ratio; 0 on the reference row.
    pub ratio: f64,
    pub n: usize,
    pub budget: usize,
    pub k_capacity: f64,
    pub u_capacity: f64,
    pub ku_capacity: f64,
    pub distortion: f64,
}

impl SweepRow {
    pub fn is_reference(&self) -> bool {
        self.policy == REFERENCE_POLICY
    }

    fn new(replicate: usize, policy: &PolicyConfig, ratio: f64, n: usize, report: &CapacityReport, distortion: f64) -> Self {
        Self {
            replicate,
            policy: policy.kind.name().into(),
            tau: (policy.kind == PolicyKind::Capkv).then_some(policy.tau),
            ratio,
            n,
            budget: report.budget,
            k_capacity: report.k_capacity,
            u_capacity: report.u_capacity,
            ku_capacity: report.ku_capacity,
            distortion,
        }
    }

    fn reference(replicate: usize, n: usize, report: &CapacityReport) -> Self {
        Self {
            replicate,
            policy: REFERENCE_POLICY.into(),
            tau: None,
            ratio: 0.0,
            n,
            budget: n,
            k_capacity: report.k_capacity,
            u_capacity: report.u_capacity,
            ku_capacity: report.ku_capacity,
            distortion: 0.0,
        }
    }
}

impl TableRow for SweepRow {
    fn header() -> &'static [&'static str] {
        &[
            "replicate",
            "policy",
            "tau",
            "ratio",
            "n",
            "budget",
            "k_capacity",
            "u_capacity",
            "ku_capacity",
            "distortion",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.replicate.to_string(),
            self.policy.clone(),
            opt_cell(self.tau),
            self.ratio.to_string(),
            self.n.to_string(),
            self.budget.to_string(),
            self.k_capacity.to_string(),
            self.u_capacity.to_string(),
            self.ku_capacity.to_string(),
            self.distortion.to_string(),
        ]
    }
}

struct Cell {
    report: CapacityReport,
    distortion: f64,
}

fn run_cell(input: &SweepInput, policy: &PolicyConfig, ratio: f64) -> Result<Cell> {
    let n = input.cache.len();
    let budget = budget_for_ratio(n, ratio);
    if budget == 0 {
        return Err(Error::InvalidConfig(format!("ratio {ratio} leaves no entries of {n}")));
    }
    let result = run_policy(policy, &input.cache, input.history.as_ref(), budget)?;
    Ok(Cell {
        report: report_for_subset(&input.cache, &result.retained, budget, None)?,
        distortion: output_distortion(&input.cache, &result.retained, &input.probes)?,
    })
}

/// Reference cell followed by every `(policy, ratio)` cell in config order.
fn sweep_cells(input: &SweepInput, cfg: &SweepConfig) -> Result<(CapacityReport, Vec<Cell>)> {
    let n = input.cache.len();
    let all: Vec<usize> = (0..n).collect();
    let reference = report_for_subset(&input.cache, &all, n, None)?;
    let grid: Vec<(&PolicyConfig, f64)> = cfg
        .policies
        .iter()
        .flat_map(|p| cfg.ratios.iter().map(move |&r| (p, r)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|(p, r)| run_cell(input, p, *r))
        .collect::<Result<Vec<_>>>()?;
    Ok((reference, cells))
}

/// Scores, evicts and measures one cache at every `(policy, ratio)`.
///
/// Scores are recomputed at each ratio, so retained sets need not nest
/// across budgets. The first row is the full-cache reference (distortion 0),
/// followed by policies in config order with ratios innermost.
pub fn compression_sweep(input: &SweepInput, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (reference, cells) = sweep_cells(input, cfg)?;
    Ok(assemble(0, input.cache.len(), cfg, &reference, &cells))
}

fn assemble(replicate: usize, n: usize, cfg: &SweepConfig, reference: &CapacityReport, cells: &[Cell]) -> Vec<SweepRow> {
    let mut rows = vec![SweepRow::reference(replicate, n, reference)];
    let grid = cfg.policies.iter().flat_map(|p| cfg.ratios.iter().map(move |&r| (p, r)));
    for ((p, r), cell) in grid.zip(cells) {
        rows.push(SweepRow::new(replicate, p, r, n, &cell.report, cell.distortion));
    }
    rows
}

/// Mean over heads within a layer, then over layers.
fn layered_mean(values: &[(u32, f64)]) -> f64 {
    let mut layers: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    for &(l, v) in values {
        let e = layers.entry(l).or_default();
        e.0 += v;
        e.1 += 1;
    }
    layers.values().map(|(s, c)| s / *c as f64).sum::<f64>() / layers.len() as f64
}

/// Generates `layers × heads` caches per replicate and sweeps each.
///
/// Each cache is drawn from `base` with its seed replaced by
/// `derive_seed(cfg.seed, [replicate, layer, head])`, and its trailing
/// `probes_per_cache` queries are held out. Capacities and distortions are
/// averaged over heads first, then layers.
pub fn synthetic_sweep(base: &SyntheticSpec, layers: usize, heads: usize, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    base.validate()?;
    if layers == 0 || heads == 0 {
        return Err(Error::InvalidConfig("layers and heads must be positive".into()));
    }
    let per_replicate = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let locations: Vec<(u32, u32)> = (0..layers as u32)
                .flat_map(|l| (0..heads as u32).map(move |h| (l, h)))
                .collect();
            let sweeps = locations
                .par_iter()
                .map(|&(l, h)| {
                    let spec = SyntheticSpec {
                        seed: derive_seed(cfg.seed, &[rep as u64, l as u64, h as u64]),
                        ..base.clone()
                    };
                    let (cache, queries) = generate_synthetic(&spec)?;
                    let input = SweepInput::split(cache.with_location(l, h), &queries, cfg.probes_per_cache)?;
                    sweep_cells(&input, cfg)
                })
                .collect::<Result<Vec<_>>>()?;

            let tag = |r: &CapacityReport, i: usize| (locations[i].0, r.clone());
            let refs: Vec<_> = sweeps.iter().enumerate().map(|(i, s)| tag(&s.0, i)).collect();
            let reference = aggregate_heads_then_layers(&refs)?;
            let n_cells = sweeps[0].1.len();
            let cells = (0..n_cells)
                .map(|c| {
                    let reports: Vec<_> = sweeps.iter().enumerate().map(|(i, s)| tag(&s.1[c].report, i)).collect();
                    let dist: Vec<_> = sweeps
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (locations[i].0, s.1[c].distortion))
                        .collect();
                    Ok(Cell {
                        report: aggregate_heads_then_layers(&reports)?,
                        distortion: layered_mean(&dist),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(assemble(rep, base.n_tokens, cfg, &reference, &cells))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_replicate.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub tau: f64,
    pub ratio: f64,
    pub mean_distortion: f64,
    pub mean_ku_capacity: f64,
    /// Marks the τ = 0 reference.
    pub query_agnostic: bool,
}

impl TableRow for TauRow {
    fn header() -> &'static [&'static str] {
        &["tau", "ratio", "mean_distortion", "mean_ku_capacity", "query_agnostic"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.tau.to_string(),
            self.ratio.to_string(),
            self.mean_distortion.to_string(),
            self.mean_ku_capacity.to_string(),
            self.query_agnostic.to_string(),
        ]
    }
}

/// CapKV at each τ over a set of caches; one row per `(τ, ratio)` with τ
/// outermost. `cfg.policies` is ignored.
pub fn tau_sweep(inputs: &[SweepInput], taus: &[f64], cfg: &SweepConfig) -> Result<Vec<TauRow>> {
    if taus.is_empty() {
        return Err(Error::InvalidConfig("taus must be nonempty".into()));
    }
    if inputs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per_tau = taus
        .par_iter()
        .map(|&tau| {
            let cfg = SweepConfig {
                policies: vec![PolicyConfig::capkv(tau)],
                ..cfg.clone()
            };
            cfg.validate()?;
            let sweeps = inputs
                .par_iter()
                .map(|input| sweep_cells(input, &cfg).map(|(_, cells)| cells))
                .collect::<Result<Vec<_>>>()?;
            let k = inputs.len() as f64;
            Ok(cfg
                .ratios
                .iter()
                .enumerate()
                .map(|(j, &ratio)| TauRow {
                    tau,
                    ratio,
                    mean_distortion: sweeps.iter().map(|s| s[j].distortion).sum::<f64>() / k,
                    mean_ku_capacity: sweeps.iter().map(|s| s[j].report.ku_capacity).sum::<f64>() / k,
                    query_agnostic: tau == 0.0,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_tau.into_iter().flatten().collect())
}
