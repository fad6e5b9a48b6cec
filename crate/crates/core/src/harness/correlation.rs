use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::output::TableRow;
use super::sweep::SweepRow;
use crate::error::{Error, Result};

/// Largest sample size for which the exact permutation p-value is offered.
pub const MAX_EXACT_PERMUTATION_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n_points: usize,
}

/// 1-based ranks; tied values share their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn ranked_pair(x: &[f64], y: &[f64], what: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
            context: "paired samples",
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidConfig(format!("{what} needs at least 3 points, got {}", x.len())));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(x) {
        return Err(Error::DegenerateRanks("first variable is constant"));
    }
    if constant(y) {
        return Err(Error::DegenerateRanks("second variable is constant"));
    }
    Ok((average_ranks(x), average_ranks(y)))
}

/// Spearman ρ with a two-sided p-value from the t approximation
/// `t = ρ·√((n−2)/(1−ρ²))` on `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    let (rx, ry) = ranked_pair(x, y, "Spearman correlation")?;
    let n = x.len();
    let rho = pearson(&rx, &ry);
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(CorrelationResult {
        rho,
        p_value,
        n_points: n,
    })
}

/// Exact two-sided permutation p-value for Spearman ρ: the fraction of all
/// `n!` reorderings of `y` whose |ρ| reaches the observed |ρ|.
pub fn permutation_p_value(x: &[f64], y: &[f64]) -> Result<f64> {
    let (rx, mut ry) = ranked_pair(x, y, "permutation test")?;
    let n = rx.len();
    if n > MAX_EXACT_PERMUTATION_POINTS {
        return Err(Error::InvalidConfig(format!(
            "exact permutation test is limited to {MAX_EXACT_PERMUTATION_POINTS} points, got {n}"
        )));
    }
    let observed = pearson(&rx, &ry).abs() - 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    let mut count = |perm: &[f64]| {
        total += 1;
        if pearson(&rx, perm).abs() >= observed {
            hits += 1;
        }
    };
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    count(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            count(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Correlation of each proxy with performance (negated distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProxyCorrelations {
    pub k: CorrelationResult,
    pub u: CorrelationResult,
    pub ku: CorrelationResult,
}

impl ProxyCorrelations {
    pub fn rows(&self) -> [(&'static str, CorrelationResult); 3] {
        [("k_capacity", self.k), ("u_capacity", self.u), ("ku_capacity", self.ku)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub proxy: &'static str,
    pub rho: f64,
    pub p_value: f64,
    pub n_points: usize,
}

impl From<ProxyCorrelations> for Vec<CorrelationRow> {
    fn from(c: ProxyCorrelations) -> Self {
        c.rows()
            .into_iter()
            .map(|(proxy, r)| CorrelationRow {
                proxy,
                rho: r.rho,
                p_value: r.p_value,
                n_points: r.n_points,
            })
            .collect()
    }
}

impl TableRow for CorrelationRow {
    fn header() -> &'static [&'static str] {
        &["proxy", "rho", "p_value", "n_points"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.proxy.into(),
            self.rho.to_string(),
            self.p_value.to_string(),
            self.n_points.to_string(),
        ]
    }
}

/// Spearman ρ between each proxy and `−distortion` over the non-reference
/// rows of a sweep. With `exact`, small samples use the permutation
/// p-value instead of the t approximation.
pub fn capacity_performance_correlation(rows: &[SweepRow], exact: bool) -> Result<ProxyCorrelations> {
    let rows: Vec<&SweepRow> = rows.iter().filter(|r| !r.is_reference()).collect();
    let perf: Vec<f64> = rows.iter().map(|r| -r.distortion).collect();
    let one = |f: fn(&SweepRow) -> f64| -> Result<CorrelationResult> {
        let cap: Vec<f64> = rows.iter().map(|r| f(r)).collect();
        let mut res = spearman(&cap, &perf)?;
        if exact && cap.len() <= MAX_EXACT_PERMUTATION_POINTS {
            res.p_value = permutation_p_value(&cap, &perf)?;
        }
        Ok(res)
    };
    Ok(ProxyCorrelations {
        k: one(|r| r.k_capacity)?,
        u: one(|r| r.u_capacity)?,
        ku: one(|r| r.ku_capacity)?,
    })
}
