//! Sparse Bayesian learning for the transmitter vector `ω`.
//!
//! Each column of the sensing matrix carries its own prior precision `α_i`;
//! evidence maximization drives the precisions of unused voxels to infinity,
//! at which point the column is pruned. The posterior is always evaluated
//! through the M×M matrix `Ω = Φ A⁻¹ Φᵀ + β⁻¹ I`, so the cost per iteration is
//! `O(M² N')` rather than `O(N'³)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, RemError, Result};
use crate::linalg::{cholesky_jittered, log_det_chol, mean_diag, symmetrize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SblConfig {
    /// Gamma hyperprior on each `α_i` (shape, rate).
    pub a_gam: f64,
    pub b_gam: f64,
    /// Gamma hyperprior on `β`.
    pub c_gam: f64,
    pub d_gam: f64,
    /// Columns with `α_i` above this are pruned.
    pub thre_alpha: f64,
    pub iter_max: usize,
    /// Stop once the evidence changes by less than this between iterations.
    pub tol: f64,
    /// Upper bound on `β · mean(t²)`; keeps `β` finite on noiseless data.
    pub beta_ceiling: f64,
}

impl Default for SblConfig {
    fn default() -> Self {
        SblConfig {
            a_gam: 0.0,
            b_gam: 0.0,
            c_gam: 0.0,
            d_gam: 0.0,
            thre_alpha: 1e10,
            iter_max: 1000,
            tol: 1e-4,
            beta_ceiling: 1e12,
        }
    }
}

impl SblConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a_gam", self.a_gam),
            ("b_gam", self.b_gam),
            ("c_gam", self.c_gam),
            ("d_gam", self.d_gam),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RemError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.thre_alpha > 0.0) {
            return Err(RemError::InvalidParameter("thre_alpha must be > 0".into()));
        }
        if self.iter_max == 0 {
            return Err(RemError::InvalidParameter("iter_max must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(RemError::InvalidParameter("tol must be > 0".into()));
        }
        if !(self.beta_ceiling > 0.0) {
            return Err(RemError::InvalidParameter("beta_ceiling must be > 0".into()));
        }
        Ok(())
    }
}

/// Posterior of `ω` for fixed `(α, β)`.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

fn check_hyper(phi: &DMatrix<f64>, t: &[f64], alpha: &[f64], beta: f64) -> Result<()> {
    check_len("observations", phi.nrows(), t.len())?;
    check_len("alpha", phi.ncols(), alpha.len())?;
    if let Some(i) = alpha.iter().position(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(RemError::InvalidParameter(format!(
            "alpha[{i}] must be positive and finite, got {}",
            alpha[i]
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(RemError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `Φ A⁻¹` and `Ω = Φ A⁻¹ Φᵀ + β⁻¹ I`.
fn omega_matrix(phi: &DMatrix<f64>, alpha: &[f64], beta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut b = phi.clone();
    for (j, a) in alpha.iter().enumerate() {
        b.column_mut(j).scale_mut(1.0 / a);
    }
    let mut omega = &b * phi.transpose();
    for i in 0..omega.nrows() {
        omega[(i, i)] += 1.0 / beta;
    }
    symmetrize(&mut omega);
    (b, omega)
}

/// Full posterior via the matrix inversion lemma:
/// `Σ = A⁻¹ − A⁻¹Φᵀ Ω⁻¹ Φ A⁻¹`, `μ = β Σ Φᵀ t`.
pub fn posterior(phi: &DMatrix<f64>, t: &[f64], alpha: &[f64], beta: f64) -> Result<Posterior> {
    check_hyper(phi, t, alpha, beta)?;
    let (b, omega) = omega_matrix(phi, alpha, beta);
    let (chol, _) = cholesky_jittered(&omega, mean_diag(&omega)).ok_or(RemError::IllConditioned)?;
    let solved = chol.solve(&b);
    let mut sigma = -(b.transpose() * solved);
    for (i, a) in alpha.iter().enumerate() {
        sigma[(i, i)] += 1.0 / a;
    }
    symmetrize(&mut sigma);
    let tv = DVector::from_column_slice(t);
    let mu = &sigma * (phi.transpose() * tv) * beta;
    Ok(Posterior { mu, sigma })
}

/// Fast fixed-point precision update `α_i ← (Υ_i + 2a)/(μ_i² + 2b)`.
/// A zero denominator yields `+∞` (prune).
pub fn update_alpha(mu: &[f64], gamma: &[f64], config: &SblConfig) -> Vec<f64> {
    mu.iter()
        .zip(gamma)
        .map(|(m, g)| {
            let num = g + 2.0 * config.a_gam;
            let den = m * m + 2.0 * config.b_gam;
            if den > 0.0 {
                num / den
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Noise precision update `β ← (M − ΣΥ + 2c)/(‖t − Φμ‖² + 2d)`.
pub fn update_beta(m: usize, gamma_sum: f64, residual_sq: f64, config: &SblConfig) -> Result<f64> {
    let den = residual_sq + 2.0 * config.d_gam;
    if !(den > 0.0) {
        return Err(RemError::DegenerateResidual);
    }
    Ok((m as f64 - gamma_sum + 2.0 * config.c_gam) / den)
}

/// Log-evidence `−½(log|Λ| + tᵀΛ⁻¹t) + Σ(a log α − b α) + c log β − d β`
/// with `Λ = β⁻¹I + ΦA⁻¹Φᵀ`. The `−(M/2) log 2π` constant is left out.
pub fn evidence(t: &[f64], phi: &DMatrix<f64>, alpha: &[f64], beta: f64, config: &SblConfig) -> Result<f64> {
    check_hyper(phi, t, alpha, beta)?;
    let (_, lambda) = omega_matrix(phi, alpha, beta);
    let chol = lambda.cholesky().ok_or(RemError::CovarianceNotPd {
        context: Some("evidence".into()),
    })?;
    let tv = DVector::from_column_slice(t);
    let quad = tv.dot(&chol.solve(&tv));
    Ok(gaussian_term(log_det_chol(&chol), quad) + hyper_term(alpha, beta, config))
}

fn gaussian_term(log_det: f64, quad: f64) -> f64 {
    -0.5 * (log_det + quad)
}

fn hyper_term(alpha: &[f64], beta: f64, config: &SblConfig) -> f64 {
    let mut s = 0.0;
    if config.a_gam != 0.0 || config.b_gam != 0.0 {
        s += alpha
            .iter()
            .map(|a| config.a_gam * a.ln() - config.b_gam * a)
            .sum::<f64>();
    }
    if config.c_gam != 0.0 || config.d_gam != 0.0 {
        s += config.c_gam * beta.ln() - config.d_gam * beta;
    }
    s
}

/// Posterior quantities needed by one iteration, without the full `Σ`.
struct Step {
    mu: Vec<f64>,
    gamma: Vec<f64>,
    evidence: f64,
    residual_sq: f64,
}

fn step(phi: &DMatrix<f64>, t: &DVector<f64>, alpha: &[f64], beta: f64, config: &SblConfig) -> Result<Step> {
    let (b, omega) = omega_matrix(phi, alpha, beta);
    let (chol, _) = cholesky_jittered(&omega, mean_diag(&omega)).ok_or(RemError::IllConditioned)?;
    let u = chol.solve(t);
    let mu_v = b.transpose() * &u;
    // Υ_i = 1 − α_i Σ_ii = φ_iᵀ Ω⁻¹ φ_i / α_i, read off ‖L⁻¹ φ_i‖².
    let w = chol
        .l_dirty()
        .solve_lower_triangular(phi)
        .ok_or(RemError::IllConditioned)?;
    let gamma = (0..phi.ncols())
        .map(|j| (w.column(j).norm_squared() / alpha[j]).clamp(0.0, 1.0))
        .collect();
    let resid = t - phi * &mu_v;
    let evidence = gaussian_term(log_det_chol(&chol), t.dot(&u)) + hyper_term(alpha, beta, config);
    Ok(Step {
        mu: mu_v.as_slice().to_vec(),
        gamma,
        evidence,
        residual_sq: resid.norm_squared(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SblState {
    /// Total column count N of the sensing matrix.
    pub n_total: usize,
    /// Surviving column indices, ascending.
    pub active: Vec<usize>,
    /// Precisions of the active columns.
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// Posterior mean over the active columns.
    pub mu: Vec<f64>,
    /// `Υ_i = 1 − α_i Σ_ii` over the active columns.
    pub gamma: Vec<f64>,
    pub evidence_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Initial `β` before any update.
    pub beta_init: f64,
}

/// The serialized subset of [`SblState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SblReport {
    pub active: Vec<usize>,
    pub mu: Vec<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub converged: bool,
    pub evidence_history: Vec<f64>,
}

impl SblState {
    /// `μ` scattered back to length N, zero at pruned columns.
    pub fn omega_hat(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_total];
        for (&i, &m) in self.active.iter().zip(&self.mu) {
            w[i] = m;
        }
        w
    }

    /// Full posterior over the active columns at the final `(α, β)`.
    pub fn posterior(&self, phi: &DMatrix<f64>, t: &[f64]) -> Result<Posterior> {
        let sub = phi.select_columns(self.active.iter());
        posterior(&sub, t, &self.alpha, self.beta)
    }

    pub fn report(&self) -> SblReport {
        SblReport {
            active: self.active.clone(),
            mu: self.mu.clone(),
            beta: self.beta,
            iterations: self.iterations,
            converged: self.converged,
            evidence_history: self.evidence_history.clone(),
        }
    }
}

fn initial_beta(t: &[f64]) -> f64 {
    let m = t.len() as f64;
    let mean = t.iter().sum::<f64>() / m;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let scale = if var > 0.0 {
        var
    } else {
        t.iter().map(|v| v * v).sum::<f64>() / m
    };
    100.0 / scale
}

/// Runs the full SBL loop on `t ≈ Φ ω`.
pub fn sbl_recover(phi: &DMatrix<f64>, t: &[f64], config: &SblConfig) -> Result<SblState> {
    config.validate()?;
    check_len("observations", phi.nrows(), t.len())?;
    let m = t.len();
    let n = phi.ncols();
    if m == 0 {
        return Err(RemError::InvalidParameter("SBL needs at least one observation".into()));
    }
    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
        return Err(RemError::InvalidParameter(format!("observation {i} is not finite")));
    }
    let mean_sq = t.iter().map(|v| v * v).sum::<f64>() / m as f64;
    if mean_sq == 0.0 {
        return Ok(SblState {
            n_total: n,
            active: Vec::new(),
            alpha: Vec::new(),
            beta: f64::INFINITY,
            mu: Vec::new(),
            gamma: Vec::new(),
            evidence_history: Vec::new(),
            iterations: 0,
            converged: true,
            beta_init: f64::INFINITY,
        });
    }
    let beta_max = config.beta_ceiling / mean_sq;
    let tv = DVector::from_column_slice(t);

    let mut active: Vec<usize> = (0..n).collect();
    let mut alpha = vec![1.0; n];
    let beta_init = initial_beta(t).min(beta_max);
    let mut beta = beta_init;
    let mut sub = phi.clone();
    let mut history = Vec::new();
    let mut mu = vec![0.0; n];
    let mut gamma = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.iter_max {
        iterations = iter + 1;
        let s = step(&sub, &tv, &alpha, beta, config).map_err(|e| e.at_iteration(iter))?;
        let delta = history.last().map(|prev: &f64| (s.evidence - prev).abs());
        history.push(s.evidence);
        mu = s.mu;
        gamma = s.gamma;
        if delta.is_some_and(|d| d < config.tol) {
            converged = true;
            break;
        }

        let new_alpha = update_alpha(&mu, &gamma, config);
        let gamma_sum: f64 = gamma.iter().sum();
        // An exact fit leaves no residual (or no spare degrees of freedom);
        // the ceiling stands in for +∞ there.
        let dof = (m as f64 - gamma_sum).max(1e-9 * m as f64);
        beta = match update_beta(m, m as f64 - dof, s.residual_sq, config) {
            Ok(b) => b.min(beta_max),
            Err(RemError::DegenerateResidual) => beta_max,
            Err(e) => return Err(e.at_iteration(iter)),
        };

        let keep: Vec<usize> = (0..active.len())
            .filter(|&j| new_alpha[j] <= config.thre_alpha)
            .collect();
        if keep.len() < active.len() {
            active = keep.iter().map(|&j| active[j]).collect();
            alpha = keep.iter().map(|&j| new_alpha[j]).collect();
            mu = keep.iter().map(|&j| mu[j]).collect();
            gamma = keep.iter().map(|&j| gamma[j]).collect();
            sub = phi.select_columns(active.iter());
        } else {
            alpha = new_alpha;
        }
        if active.is_empty() {
            converged = true;
            break;
        }
    }

    Ok(SblState {
        n_total: n,
        active,
        alpha,
        beta,
        mu,
        gamma,
        evidence_history: history,
        iterations,
        converged,
        beta_init,
    })
}
