//! Linear–Gaussian surrogate channel `Y = U_C K_C q + ε`.
//!
//! `q ~ N(μ_Q, Λ_Q)` and `ε ~ N(0, Σ_noise)` are independent. The mutual
//! information `I(q; Y)` has a closed form ([`exact_capacity`]); a sampling
//! estimator ([`mc_capacity`]) and the isotropic eigenvalue form
//! ([`small_noise_capacity`]) serve as independent cross-checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_factorize, factorize_escalating, gram, log_det, symmetric_eigenvalues, Matrix,
    SpdFactor,
};

/// Samples per RNG stream in [`mc_capacity`]. Chunk boundaries are fixed so
/// the estimate does not depend on how chunks are spread over threads.
const MC_CHUNK: usize = 8192;

pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// `|C| × d` retained keys.
    pub keys: Matrix,
    /// `m × |C|` value-induced output directions.
    pub outputs: Matrix,
    /// `d × d` query covariance.
    pub query_cov: Matrix,
    /// `m × m` noise covariance.
    pub noise_cov: Matrix,
    /// `d` query mean.
    pub query_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub standard_error: f64,
    pub samples: usize,
}

impl ChannelSpec {
    /// Spec with identity query and noise covariances and zero query mean.
    pub fn isotropic(keys: Matrix, outputs: Matrix) -> Result<Self> {
        let spec = Self {
            query_cov: Matrix::identity(keys.cols()),
            noise_cov: Matrix::identity(outputs.rows()),
            query_mean: vec![0.0; keys.cols()],
            keys,
            outputs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn query_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.keys.cols();
        let m = self.outputs.rows();
        let check = |expected: usize, actual: usize, context: &'static str| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected,
                    actual,
                    context,
                })
            }
        };
        check(self.keys.rows(), self.outputs.cols(), "output columns vs retained keys")?;
        check(d, self.query_cov.rows(), "query covariance rows")?;
        check(d, self.query_cov.cols(), "query covariance cols")?;
        check(d, self.query_mean.len(), "query mean length")?;
        check(m, self.noise_cov.rows(), "noise covariance rows")?;
        check(m, self.noise_cov.cols(), "noise covariance cols")?;
        if let Some(i) = self.query_mean.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        self.query_cov.check_symmetric()?;
        self.noise_cov.check_symmetric()
    }

    /// `U_C · K_C`, the `m × d` map from query to noiseless output.
    pub fn effective_channel(&self) -> Result<Matrix> {
        self.validate()?;
        if self.keys.rows() == 0 {
            return Ok(Matrix::zeros(self.output_dim(), self.query_dim()));
        }
        self.outputs.matmul(&self.keys)
    }

    /// `Σ_Y = G Λ_Q Gᵀ + Σ_noise` with `G` the effective channel.
    pub fn output_covariance(&self) -> Result<Matrix> {
        let g = self.effective_channel()?;
        let signal = g.matmul(&self.query_cov)?.matmul(&g.transpose())?;
        Ok(symmetrized(&signal.add(&self.noise_cov)?))
    }
}

fn symmetrized(a: &Matrix) -> Matrix {
    let n = a.rows();
    Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)))
}

/// `½ log det(I + Σ_noise⁻¹ G Λ_Q Gᵀ)` in nats.
///
/// Evaluated in the noise-whitened basis: with `Σ_noise = L Lᵀ` and
/// `W = L⁻¹G`, the determinant equals `det(I + W Λ_Q Wᵀ)`.
pub fn exact_capacity(spec: &ChannelSpec) -> Result<f64> {
    let g = spec.effective_channel()?;
    let m = g.rows();
    let d = g.cols();
    if m == 0 || spec.keys.rows() == 0 {
        return Ok(0.0);
    }
    let noise = factorize_escalating(&spec.noise_cov)?;
    // columns of G whitened one at a time
    let mut w = Matrix::zeros(m, d);
    let mut col = vec![0.0; m];
    for j in 0..d {
        for (i, c) in col.iter_mut().enumerate() {
            *c = g.get(i, j);
        }
        noise.forward_solve_in_place(&mut col);
        for (i, &c) in col.iter().enumerate() {
            w.set(i, j, c);
        }
    }
    let mut t = symmetrized(&w.matmul(&spec.query_cov)?.matmul(&w.transpose())?);
    t.add_to_diagonal(1.0);
    let f = factorize_escalating(&t)?;
    Ok((0.5 * log_det(&f)).max(0.0))
}

/// Differential entropy `½ (n·log(2πe) + log det Σ)` of `N(·, Σ)`.
pub fn gaussian_entropy(cov_factor: &SpdFactor) -> f64 {
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    0.5 * (cov_factor.dim() as f64 * two_pi_e.ln() + log_det(cov_factor))
}

#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    mean: Vec<f64>,
    /// Lower triangle of the centered scatter matrix.
    scatter: Matrix,
}

impl Moments {
    fn merge(mut self, other: &Moments) -> Moments {
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let m = self.mean.len();
        let coef = n_a * n_b / n;
        for i in 0..m {
            for j in 0..=i {
                let v = self.scatter.get(i, j) + other.scatter.get(i, j) + coef * delta[i] * delta[j];
                self.scatter.set(i, j, v);
            }
        }
        for (a, d) in self.mean.iter_mut().zip(&delta) {
            *a += d * n_b / n;
        }
        self.count += other.count;
        self
    }
}

/// Monte-Carlo estimate of `I(q; Y)` from sampled outputs.
///
/// Because `Y` is exactly Gaussian, `I(q; Y) = H(Y) − H(ε)` and the plug-in
/// `½ log det Σ̂_Y − ½ log det Σ_noise` is used. The standard error is the
/// large-sample Wishart value `√(m / 2n)`.
///
/// Samples are drawn in fixed chunks, chunk `c` from ChaCha8 stream `c`
/// under `seed`, so the result is independent of the rayon pool size.
pub fn mc_capacity(spec: &ChannelSpec, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "mc_capacity needs at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let g = spec.effective_channel()?;
    let m = g.rows();
    if m == 0 {
        return Ok(McEstimate {
            value: 0.0,
            standard_error: 0.0,
            samples,
        });
    }
    let query = factorize_escalating(&spec.query_cov)?;
    let noise = factorize_escalating(&spec.noise_cov)?;

    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            sample_chunk(&g, &spec.query_mean, &query, &noise, len, &mut rng)
        })
        .collect();
    let mut it = parts.into_iter();
    let first = it.next().expect("at least one chunk");
    let total = it.fold(first, |acc, p| acc.merge(&p));

    let n = total.count as f64;
    let cov = Matrix::from_fn(m, m, |i, j| {
        let (a, b) = if j <= i { (i, j) } else { (j, i) };
        total.scatter.get(a, b) / (n - 1.0)
    });
    let y_factor = cholesky_factorize(&cov, 0.0)?;
    let value = 0.5 * (log_det(&y_factor) - log_det(&noise));
    Ok(McEstimate {
        value,
        standard_error: (m as f64 / (2.0 * n)).sqrt(),
        samples,
    })
}

fn sample_chunk(
    g: &Matrix,
    mean: &[f64],
    query: &SpdFactor,
    noise: &SpdFactor,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Moments {
    let m = g.rows();
    let d = g.cols();
    let mut z_q = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut z_e = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut mom = Moments {
        count: 0,
        mean: vec![0.0; m],
        scatter: Matrix::zeros(m, m),
    };
    for _ in 0..len {
        for z in z_q.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        for z in z_e.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        query.lower_mul(&z_q, &mut q);
        for (qi, mi) in q.iter_mut().zip(mean) {
            *qi += mi;
        }
        noise.lower_mul(&z_e, &mut y);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += crate::linalg::dot(g.row(i), &q);
        }
        // Welford update
        mom.count += 1;
        let k = mom.count as f64;
        let delta: Vec<f64> = y.iter().zip(&mom.mean).map(|(a, b)| a - b).collect();
        for (mu, dl) in mom.mean.iter_mut().zip(&delta) {
            *mu += dl / k;
        }
        for i in 0..m {
            let di = delta[i] * (k - 1.0) / k;
            for j in 0..=i {
                let v = mom.scatter.get(i, j) + di * delta[j];
                mom.scatter.set(i, j, v);
            }
        }
    }
    mom
}

/// `½ Σ_j log(1 + (σ²/ε) λ_j)` over the eigenvalues of `a·aᵀ`.
///
/// `sigma_q` is the query standard deviation, `epsilon` the noise variance.
pub fn small_noise_capacity(a: &Matrix, sigma_q: f64, epsilon: f64) -> Result<f64> {
    if !(sigma_q > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(
            "sigma_q and epsilon must be positive".into(),
        ));
    }
    let snr = sigma_q * sigma_q / epsilon;
    let ev = symmetric_eigenvalues(&gram(a))?;
    Ok(0.5 * ev.iter().map(|&l| (snr * l.max(0.0)).ln_1p()).sum::<f64>())
}
