//! K-, U- and KU-capacity proxies: isotropic-query diagnostics of how much
//! information a retained subset keeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::channel::{exact_capacity, ChannelSpec};
use crate::error::{Error, Result};
use crate::linalg::{log_det_identity_plus_gram, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub k_capacity: f64,
    pub u_capacity: f64,
    pub ku_capacity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_capacity: Option<f64>,
    pub retained: usize,
    pub budget: usize,
}

/// `log det(I + K_C K_Cᵀ)`.
pub fn k_capacity(keys: &Matrix) -> Result<f64> {
    Ok(log_det_identity_plus_gram(keys)?.max(0.0))
}

/// `log det(I + U_C U_Cᵀ)` for `m × |C|` outputs.
pub fn u_capacity(outputs: &Matrix) -> Result<f64> {
    Ok(log_det_identity_plus_gram(outputs)?.max(0.0))
}

/// `log det(I + U_C K_C K_Cᵀ U_Cᵀ)`.
///
/// This is twice the channel capacity with identity query and noise
/// covariances (no `½` factor).
pub fn ku_capacity(keys: &Matrix, outputs: &Matrix) -> Result<f64> {
    if outputs.cols() != keys.rows() {
        return Err(Error::DimensionMismatch {
            expected: keys.rows(),
            actual: outputs.cols(),
            context: "output columns vs retained keys",
        });
    }
    if keys.rows() == 0 {
        return Ok(0.0);
    }
    Ok(log_det_identity_plus_gram(&outputs.matmul(keys)?)?.max(0.0))
}

/// Retained-subset matrices `(K_C, U_C)` with `u_i = v_i`, so `U_C = V_Cᵀ`.
pub fn subset_channel(cache: &KvCache, indices: &[usize]) -> Result<(Matrix, Matrix)> {
    let sub = cache.subset(indices)?;
    Ok((sub.keys().clone(), sub.values().transpose()))
}

/// All three proxies for `indices`, plus the exact capacity when a query
/// covariance is supplied (noise covariance is the identity).
pub fn report_for_subset(
    cache: &KvCache,
    indices: &[usize],
    budget: usize,
    query_cov: Option<&Matrix>,
) -> Result<CapacityReport> {
    let (keys, outputs) = subset_channel(cache, indices)?;
    let exact = match query_cov {
        Some(cov) => {
            let mut spec = ChannelSpec::isotropic(keys.clone(), outputs.clone())?;
            spec.query_cov = cov.clone();
            Some(exact_capacity(&spec)?)
        }
        None => None,
    };
    Ok(CapacityReport {
        k_capacity: k_capacity(&keys)?,
        u_capacity: u_capacity(&outputs)?,
        ku_capacity: ku_capacity(&keys, &outputs)?,
        exact_capacity: exact,
        retained: indices.len(),
        budget: budget.max(indices.len()),
    })
}

/// Field-wise arithmetic mean. `retained`/`budget` are copied when uniform
/// and otherwise replaced by their rounded means; `exact_capacity` is kept
/// only if every input has it.
pub fn aggregate_layers(reports: &[CapacityReport]) -> Result<CapacityReport> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mean = |f: fn(&CapacityReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let count = |f: fn(&CapacityReport) -> usize| {
        let first = f(&reports[0]);
        if reports.iter().all(|r| f(r) == first) {
            first
        } else {
            (reports.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64).round() as usize
        }
    };
    let exact = reports
        .iter()
        .map(|r| r.exact_capacity)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n as f64);
    Ok(CapacityReport {
        k_capacity: mean(|r| r.k_capacity),
        u_capacity: mean(|r| r.u_capacity),
        ku_capacity: mean(|r| r.ku_capacity),
        exact_capacity: exact,
        retained: count(|r| r.retained),
        budget: count(|r| r.budget),
    })
}

/// Averages over heads within each layer, then over layers.
pub fn aggregate_heads_then_layers(reports: &[(u32, CapacityReport)]) -> Result<CapacityReport> {
    let mut by_layer: BTreeMap<u32, Vec<CapacityReport>> = BTreeMap::new();
    for (layer, r) in reports {
        by_layer.entry(*layer).or_default().push(r.clone());
    }
    let layers = by_layer
        .values()
        .map(|heads| aggregate_layers(heads))
        .collect::<Result<Vec<_>>>()?;
    aggregate_layers(&layers)
}
