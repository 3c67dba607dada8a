//! Shadow-fading regression with a Matérn-3/2 Gaussian process.
//!
//! Residuals `ξ̄ = 10 log10(t / t̂)` at the sampled voxels are treated as noisy
//! observations of a zero-mean GP; hyperparameters `η = [ρ, σ², σ_GP²]` are
//! fitted by minimizing the negative log marginal likelihood in log space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::matern32_kernel;
use crate::error::{check_len, RemError, Result};
use crate::grid::{distance, Point3};
use crate::linalg::{cholesky_jittered, log_det_chol};
use crate::par::{map_range, Execution};
use crate::rng::{rng_for, stage};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Predictive variances in `[−NEG_VAR_TOL, 0)` are rounding noise and are
/// clipped to zero; anything below is an error.
pub const NEG_VAR_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Decay length in meters.
    pub rho: f64,
    /// Signal variance in dB².
    pub sigma2: f64,
    /// Observation-noise variance in dB².
    pub sigma_gp2: f64,
}

impl GpHyper {
    pub fn to_array(self) -> [f64; 3] {
        [self.rho, self.sigma2, self.sigma_gp2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        GpHyper { rho: a[0], sigma2: a[1], sigma_gp2: a[2] }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) || !(self.sigma2 >= 0.0) || !(self.sigma_gp2 >= 0.0) {
            return Err(RemError::InvalidParameter(format!("invalid GP hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Extracts `10·log10(t_m / (Φ ω̂)_m)` at every sample.
pub fn extract_shadow(t: &[f64], omega_hat: &[f64], phi_sel: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_len("observations", phi_sel.nrows(), t.len())?;
    check_len("omega_hat", phi_sel.ncols(), omega_hat.len())?;
    let w = DVector::from_column_slice(omega_hat);
    let pred = phi_sel * w;
    let bad: Vec<usize> = (0..t.len())
        .filter(|&m| !(t[m] > 0.0 && pred[m] > 0.0))
        .collect();
    if !bad.is_empty() {
        return Err(RemError::NonPositiveRss(bad));
    }
    Ok(t.iter().zip(pred.iter()).map(|(a, b)| 10.0 * (a / b).log10()).collect())
}

fn distances(x: &[Point3]) -> DMatrix<f64> {
    let m = x.len();
    DMatrix::from_fn(m, m, |i, j| distance(&x[i], &x[j]))
}

fn covariance(d: &DMatrix<f64>, eta: &GpHyper) -> DMatrix<f64> {
    let mut k = d.map(|v| matern32_kernel(eta.sigma2, eta.rho, v));
    for i in 0..k.nrows() {
        k[(i, i)] += eta.sigma_gp2;
    }
    k
}

fn factor(k: &DMatrix<f64>, eta: &GpHyper) -> Result<Cholesky<f64, Dyn>> {
    cholesky_jittered(k, eta.sigma2 + eta.sigma_gp2)
        .map(|(c, _)| c)
        .ok_or(RemError::CovarianceNotPd { context: Some("GP training covariance".into()) })
}

fn nlml_from(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let a = chol.solve(y);
    0.5 * y.dot(&a) + 0.5 * log_det_chol(chol) + 0.5 * y.len() as f64 * LN_2PI
}

/// `½ yᵀΣ⁻¹y + ½ log|Σ| + (M/2) log 2π`, `Σ = C(s, s) + σ_GP² I`.
pub fn nlml(eta: &GpHyper, train_x: &[Point3], train_y: &[f64]) -> Result<f64> {
    eta.validate()?;
    check_len("GP targets", train_x.len(), train_y.len())?;
    let k = covariance(&distances(train_x), eta);
    let chol = factor(&k, eta)?;
    Ok(nlml_from(&chol, &DVector::from_column_slice(train_y)))
}

fn nlml_and_grad_with(d: &DMatrix<f64>, eta: &GpHyper, y: &DVector<f64>) -> Result<(f64, [f64; 3])> {
    let m = y.len();
    let k = covariance(d, eta);
    let chol = factor(&k, eta)?;
    let value = nlml_from(&chol, y);
    let a = chol.solve(y);
    let k_inv = chol.inverse();
    // ∂C/∂ρ = σ² u² e^{−u} / ρ with u = √3 d/ρ; ∂C/∂σ² = C/σ²; ∂Σ/∂σ_GP² = I.
    let s3 = 3f64.sqrt();
    let mut g = [0.0; 3];
    for i in 0..m {
        for j in 0..m {
            let u = s3 * d[(i, j)] / eta.rho;
            let e = (-u).exp();
            let d_rho = eta.sigma2 * u * u * e / eta.rho;
            let d_sig = (1.0 + u) * e;
            let w = 0.5 * (k_inv[(i, j)] - a[i] * a[j]);
            g[0] += w * d_rho;
            g[1] += w * d_sig;
        }
        g[2] += 0.5 * (k_inv[(i, i)] - a[i] * a[i]);
    }
    Ok((value, g))
}

/// Analytic gradient of [`nlml`] with respect to `[ρ, σ², σ_GP²]`.
pub fn nlml_grad(eta: &GpHyper, train_x: &[Point3], train_y: &[f64]) -> Result<[f64; 3]> {
    eta.validate()?;
    check_len("GP targets", train_x.len(), train_y.len())?;
    nlml_and_grad_with(&distances(train_x), eta, &DVector::from_column_slice(train_y)).map(|(_, g)| g)
}

/// Box constraints of the hyperparameter search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpBounds {
    pub rho: (f64, f64),
    pub sigma2: (f64, f64),
    pub sigma_gp2: (f64, f64),
}

impl GpBounds {
    /// `ρ ∈ [0.1·min spacing, 10·diagonal]`, variances in `[1e-6, 1e4]` dB².
    pub fn for_grid(min_spacing: f64, diagonal: f64) -> Self {
        GpBounds {
            rho: (0.1 * min_spacing, 10.0 * diagonal),
            sigma2: (1e-6, 1e4),
            sigma_gp2: (1e-6, 1e4),
        }
    }

    fn log_box(&self) -> ([f64; 3], [f64; 3]) {
        (
            [self.rho.0.ln(), self.sigma2.0.ln(), self.sigma_gp2.0.ln()],
            [self.rho.1.ln(), self.sigma2.1.ln(), self.sigma_gp2.1.ln()],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { n_starts: 5, seed: 0, max_iter: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub eta: GpHyper,
    pub train_x: Vec<Point3>,
    pub train_y: Vec<f64>,
    pub nlml: f64,
    /// NLML at each start point, in start order (`None` where it failed).
    pub start_nlml: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowPrediction {
    /// Posterior mean of the latent shadowing, dB.
    pub mean: Vec<f64>,
    /// Latent-field variance, dB².
    pub variance: Vec<f64>,
    /// `variance + σ_GP²`: the spread of a fresh noisy measurement.
    pub noisy_variance: Vec<f64>,
}

struct Local {
    x: [f64; 3],
    f: f64,
    g: [f64; 3],
}

/// Box-projected BFGS on `f(θ)` with `θ = ln η`.
fn minimize_log<F>(f: &F, x0: [f64; 3], lo: [f64; 3], hi: [f64; 3], max_iter: usize) -> Option<Local>
where
    F: Fn([f64; 3]) -> Option<(f64, [f64; 3])>,
{
    let clamp = |x: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| x[i].clamp(lo[i], hi[i])) };
    let x = clamp(x0);
    let (fx, gx) = f(x)?;
    let mut cur = Local { x, f: fx, g: gx };
    let mut hinv = [[0.0; 3]; 3];
    let reset = |h: &mut [[f64; 3]; 3]| {
        *h = [[0.0; 3]; 3];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
    };
    reset(&mut hinv);

    for _ in 0..max_iter {
        // Coordinates pinned at a bound with the gradient pointing outward.
        let free: [bool; 3] = std::array::from_fn(|i| {
            !((cur.x[i] <= lo[i] && cur.g[i] > 0.0) || (cur.x[i] >= hi[i] && cur.g[i] < 0.0))
        });
        let pg: f64 = (0..3).filter(|&i| free[i]).map(|i| cur.g[i] * cur.g[i]).sum::<f64>().sqrt();
        if pg < 1e-9 {
            break;
        }
        let mut dir = [0.0; 3];
        for i in 0..3 {
            if free[i] {
                dir[i] = -(0..3).filter(|&j| free[j]).map(|j| hinv[i][j] * cur.g[j]).sum::<f64>();
            }
        }
        let slope: f64 = (0..3).map(|i| dir[i] * cur.g[i]).sum();
        if !(slope < 0.0) {
            reset(&mut hinv);
            for i in 0..3 {
                dir[i] = if free[i] { -cur.g[i] } else { 0.0 };
            }
        }
        // Cap the step at a factor e^3 per coordinate.
        let big = dir.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let mut step = if big > 3.0 { 3.0 / big } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let trial = clamp(std::array::from_fn(|i| cur.x[i] + step * dir[i]));
            if let Some((ft, gt)) = f(trial) {
                let moved: f64 = (0..3).map(|i| (trial[i] - cur.x[i]) * cur.g[i]).sum();
                if ft.is_finite() && ft <= cur.f + 1e-4 * moved {
                    accepted = Some(Local { x: trial, f: ft, g: gt });
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        let s: [f64; 3] = std::array::from_fn(|i| next.x[i] - cur.x[i]);
        let yv: [f64; 3] = std::array::from_fn(|i| next.g[i] - cur.g[i]);
        let sy: f64 = (0..3).map(|i| s[i] * yv[i]).sum();
        let df = cur.f - next.f;
        cur = next;
        if df.abs() <= 1e-12 * (1.0 + cur.f.abs()) && s.iter().all(|v| v.abs() < 1e-10) {
            break;
        }
        if sy > 1e-12 {
            // BFGS inverse-Hessian update.
            let hy: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| hinv[i][j] * yv[j]).sum());
            let yhy: f64 = (0..3).map(|i| yv[i] * hy[i]).sum();
            for i in 0..3 {
                for j in 0..3 {
                    hinv[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        } else {
            reset(&mut hinv);
        }
    }
    Some(cur)
}

/// Default first start: half the data variance as signal and a tenth as noise.
pub fn default_init(train_y: &[f64], bounds: &GpBounds) -> GpHyper {
    let m = train_y.len().max(1) as f64;
    let mean = train_y.iter().sum::<f64>() / m;
    let var = (train_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).max(1e-3);
    let rho = (bounds.rho.0 * bounds.rho.1).sqrt();
    GpHyper {
        rho: rho.clamp(bounds.rho.0, bounds.rho.1),
        sigma2: var.clamp(bounds.sigma2.0, bounds.sigma2.1),
        sigma_gp2: (0.1 * var).clamp(bounds.sigma_gp2.0, bounds.sigma_gp2.1),
    }
}

/// Multi-start NLML minimization. The first start is `init`; the remaining
/// starts are log-uniform draws inside `bounds`.
pub fn fit(
    train_x: &[Point3],
    train_y: &[f64],
    init: Option<GpHyper>,
    bounds: &GpBounds,
    opts: &FitOptions,
    exec: Execution,
) -> Result<GpState> {
    check_len("GP targets", train_x.len(), train_y.len())?;
    if train_x.len() < 2 {
        return Err(RemError::InvalidParameter(format!(
            "GP fit needs at least 2 training points, got {}",
            train_x.len()
        )));
    }
    if let Some(i) = train_y.iter().position(|v| !v.is_finite()) {
        return Err(RemError::InvalidParameter(format!("GP target {i} is not finite")));
    }
    let (lo, hi) = bounds.log_box();
    if (0..3).any(|i| !(lo[i] <= hi[i]) || !lo[i].is_finite() || !hi[i].is_finite()) {
        return Err(RemError::InvalidParameter(format!("invalid GP bounds {bounds:?}")));
    }
    let d = distances(train_x);
    let y = DVector::from_column_slice(train_y);
    let objective = |theta: [f64; 3]| -> Option<(f64, [f64; 3])> {
        let eta = GpHyper::from_array(theta.map(f64::exp));
        let (v, g) = nlml_and_grad_with(&d, &eta, &y).ok()?;
        let e = eta.to_array();
        Some((v, std::array::from_fn(|i| g[i] * e[i])))
    };

    let first = init.unwrap_or_else(|| default_init(train_y, bounds)).to_array().map(f64::ln);
    let mut rng = rng_for(opts.seed, stage::GPR);
    let mut starts = vec![first];
    for _ in 1..opts.n_starts.max(1) {
        starts.push(std::array::from_fn(|i| rng.random_range(lo[i]..=hi[i])));
    }

    let results = map_range(exec, starts.len(), |k| {
        let clamped: [f64; 3] = std::array::from_fn(|i| starts[k][i].clamp(lo[i], hi[i]));
        let start_val = objective(clamped).map(|(v, _)| v);
        (start_val, minimize_log(&objective, starts[k], lo, hi, opts.max_iter))
    });

    let mut best: Option<&Local> = None;
    for (_, r) in &results {
        if let Some(loc) = r {
            if best.is_none_or(|b| loc.f < b.f) {
                best = Some(loc);
            }
        }
    }
    let best = best.ok_or(RemError::CovarianceNotPd {
        context: Some("every GP start failed".into()),
    })?;
    Ok(GpState {
        eta: GpHyper::from_array(best.x.map(f64::exp)),
        train_x: train_x.to_vec(),
        train_y: train_y.to_vec(),
        nlml: best.f,
        start_nlml: results.iter().map(|(s, _)| *s).collect(),
    })
}

/// Posterior mean and variance of the latent shadowing at `test_x`.
pub fn predict(state: &GpState, test_x: &[Point3]) -> Result<ShadowPrediction> {
    let eta = &state.eta;
    eta.validate()?;
    check_len("GP targets", state.train_x.len(), state.train_y.len())?;
    let k = covariance(&distances(&state.train_x), eta);
    let chol = factor(&k, eta)?;
    let y = DVector::from_column_slice(&state.train_y);
    let a = chol.solve(&y);
    let m = state.train_x.len();
    let kstar = DMatrix::from_fn(m, test_x.len(), |i, j| {
        matern32_kernel(eta.sigma2, eta.rho, distance(&state.train_x[i], &test_x[j]))
    });
    let mean = (kstar.transpose() * &a).as_slice().to_vec();
    let v = chol
        .l_dirty()
        .solve_lower_triangular(&kstar)
        .ok_or(RemError::CovarianceNotPd { context: Some("GP prediction".into()) })?;
    let mut variance = Vec::with_capacity(test_x.len());
    for j in 0..test_x.len() {
        let var = eta.sigma2 - v.column(j).norm_squared();
        if var < -NEG_VAR_TOL {
            return Err(RemError::NegativeVariance { index: j, value: var });
        }
        variance.push(var.max(0.0));
    }
    let noisy_variance = variance.iter().map(|v| v + eta.sigma_gp2).collect();
    Ok(ShadowPrediction { mean, variance, noisy_variance })
}

/// [`predict`] over batches of test points, possibly in parallel.
pub fn predict_batched(state: &GpState, test_x: &[Point3], batch: usize, exec: Execution) -> Result<ShadowPrediction> {
    let chunks: Vec<&[Point3]> = test_x.chunks(batch.max(1)).collect();
    let parts = map_range(exec, chunks.len(), |i| predict(state, chunks[i]));
    let mut out = ShadowPrediction { mean: Vec::new(), variance: Vec::new(), noisy_variance: Vec::new() };
    for (i, p) in parts.into_iter().enumerate() {
        let p = p.map_err(|e| match e {
            RemError::NegativeVariance { index, value } => RemError::NegativeVariance {
                index: index + i * batch.max(1),
                value,
            },
            other => other,
        })?;
        out.mean.extend(p.mean);
        out.variance.extend(p.variance);
        out.noisy_variance.extend(p.noisy_variance);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(m: usize, step: f64) -> Vec<Point3> {
        (0..m).map(|i| [i as f64 * step, 0.0, 0.0]).collect()
    }

    #[test]
    fn extract_trivial() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.25, 1.0]);
        let w = [2.0, 0.0];
        let t = [2.0, 5.0];
        let xi = extract_shadow(&t, &w, &phi).unwrap();
        assert!(xi[0].abs() < 1e-15);
        assert_relative_eq!(xi[1], 10.0, max_relative = 1e-12);
    }

    #[test]
    fn extract_lists_bad_samples() {
        let phi = DMatrix::identity(3, 3);
        let err = extract_shadow(&[1.0, -1.0, 1.0], &[1.0, 1.0, 0.0], &phi).unwrap_err();
        match err {
            RemError::NonPositiveRss(v) => assert_eq!(v, vec![1, 2]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn nlml_single_point() {
        let eta = GpHyper { rho: 1.0, sigma2: 0.5, sigma_gp2: 0.5 };
        let v = nlml(&eta, &[[0.0; 3]], &[0.0]).unwrap();
        assert_relative_eq!(v, 0.918_938_533_204_672_7, max_relative = 1e-12);
    }

    #[test]
    fn nlml_doubling_cov() {
        let x = line(4, 1.3);
        let e1 = GpHyper { rho: 2.0, sigma2: 1.0, sigma_gp2: 0.2 };
        let e2 = GpHyper { rho: 2.0, sigma2: 2.0, sigma_gp2: 0.4 };
        let a = nlml(&e1, &x, &[0.0; 4]).unwrap();
        let b = nlml(&e2, &x, &[0.0; 4]).unwrap();
        assert_relative_eq!(b - a, 2.0 * 2f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn nlml_matches_dense_solve() {
        let x = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, -1.0, 2.0]];
        let y = [0.3, -1.2, 0.8];
        let eta = GpHyper { rho: 2.5, sigma2: 1.7, sigma_gp2: 0.3 };
        let k = DMatrix::from_fn(3, 3, |i, j| {
            let d = distance(&x[i], &x[j]);
            let u = 3f64.sqrt() * d / eta.rho;
            eta.sigma2 * (1.0 + u) * (-u).exp() + if i == j { eta.sigma_gp2 } else { 0.0 }
        });
        let yv = DVector::from_column_slice(&y);
        let inv = k.clone().try_inverse().unwrap();
        let oracle = 0.5 * (yv.transpose() * inv * &yv)[(0, 0)]
            + 0.5 * k.determinant().ln()
            + 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(nlml(&eta, &x, &y).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn noise_gradient_with_zero_data() {
        let x = line(5, 0.7);
        let eta = GpHyper { rho: 1.1, sigma2: 0.9, sigma_gp2: 0.05 };
        let g = nlml_grad(&eta, &x, &[0.0; 5]).unwrap();
        let k = covariance(&distances(&x), &eta);
        let tr = k.try_inverse().unwrap().trace();
        assert_relative_eq!(g[2], 0.5 * tr, max_relative = 1e-10);
    }

    #[test]
    fn fit_zero_data_hits_lower_bound() {
        let x = line(6, 3.0);
        let b = GpBounds::for_grid(1.0, 30.0);
        let st = fit(&x, &[0.0; 6], None, &b, &FitOptions::default(), Execution::Sequential).unwrap();
        assert_relative_eq!(st.eta.sigma2, b.sigma2.0, max_relative = 1e-6);
    }

    #[test]
    fn fit_result_beats_starts() {
        let x = line(12, 2.0);
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.6).sin() * 2.0).collect();
        let st = fit(&x, &y, None, &GpBounds::for_grid(1.0, 40.0), &FitOptions::default(), Execution::Parallel)
            .unwrap();
        for s in st.start_nlml.iter().flatten() {
            assert!(st.nlml <= *s + 1e-12);
        }
        assert!(fit(&x[..1], &y[..1], None, &GpBounds::for_grid(1.0, 40.0), &FitOptions::default(), Execution::Sequential).is_err());
    }

    #[test]
    fn fit_permutation_invariant() {
        let x = line(10, 1.5);
        let y: Vec<f64> = (0..10).map(|i| ((i * i) % 7) as f64 - 3.0).collect();
        let mut order: Vec<usize> = (0..10).collect();
        order.reverse();
        order.swap(2, 7);
        let xp: Vec<Point3> = order.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let b = GpBounds::for_grid(1.0, 20.0);
        let a = fit(&x, &y, None, &b, &FitOptions::default(), Execution::Sequential).unwrap();
        let c = fit(&xp, &yp, None, &b, &FitOptions::default(), Execution::Sequential).unwrap();
        for (u, v) in a.eta.to_array().iter().zip(c.eta.to_array()) {
            assert_relative_eq!(*u, v, max_relative = 1e-5);
        }
    }

    #[test]
    fn interpolates_without_noise() {
        let x = line(4, 2.0);
        let y = [1.0, -0.5, 2.0, 0.25];
        let st = GpState {
            eta: GpHyper { rho: 3.0, sigma2: 2.0, sigma_gp2: 1e-12 },
            train_x: x.clone(),
            train_y: y.to_vec(),
            nlml: 0.0,
            start_nlml: vec![],
        };
        let p = predict(&st, &x).unwrap();
        for i in 0..4 {
            assert!((p.mean[i] - y[i]).abs() < 1e-6);
            assert!(p.variance[i] < 1e-8);
        }
    }

    #[test]
    fn far_points_revert_to_prior() {
        let st = GpState {
            eta: GpHyper { rho: 1.0, sigma2: 2.0, sigma_gp2: 0.1 },
            train_x: line(3, 1.0),
            train_y: vec![1.0, 2.0, 3.0],
            nlml: 0.0,
            start_nlml: vec![],
        };
        let p = predict(&st, &[[500.0, 0.0, 0.0]]).unwrap();
        assert!(p.mean[0].abs() < 1e-6);
        assert!((p.noisy_variance[0] - 2.1).abs() < 1e-6);
        assert!((p.variance[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn two_point_closed_form() {
        let x = vec![[0.0; 3], [2.0, 0.0, 0.0]];
        let y = [1.0, 3.0];
        let eta = GpHyper { rho: 4.0, sigma2: 1.5, sigma_gp2: 0.2 };
        let st = GpState { eta, train_x: x, train_y: y.to_vec(), nlml: 0.0, start_nlml: vec![] };
        let q = [1.0, 0.0, 0.0];
        let c = |d: f64| {
            let u = 3f64.sqrt() * d / 4.0;
            1.5 * (1.0 + u) * (-u).exp()
        };
        // Hand-inverted 2×2 system.
        let (a, b) = (1.5 + 0.2, c(2.0));
        let det = a * a - b * b;
        let inv = [[a / det, -b / det], [-b / det, a / det]];
        let k = [c(1.0), c(1.0)];
        let w = [inv[0][0] * y[0] + inv[0][1] * y[1], inv[1][0] * y[0] + inv[1][1] * y[1]];
        let mean = k[0] * w[0] + k[1] * w[1];
        let quad = k[0] * (inv[0][0] * k[0] + inv[0][1] * k[1]) + k[1] * (inv[1][0] * k[0] + inv[1][1] * k[1]);
        let p = predict(&st, &[q]).unwrap();
        assert_relative_eq!(p.mean[0], mean, max_relative = 1e-12);
        assert_relative_eq!(p.variance[0], 1.5 - quad, max_relative = 1e-10);
    }

    #[test]
    fn batched_prediction_matches() {
        let st = GpState {
            eta: GpHyper { rho: 2.0, sigma2: 1.0, sigma_gp2: 0.1 },
            train_x: line(5, 1.0),
            train_y: vec![0.1, 0.5, -0.3, 0.2, 0.0],
            nlml: 0.0,
            start_nlml: vec![],
        };
        let test: Vec<Point3> = (0..23).map(|i| [i as f64 * 0.3, 0.5, 0.0]).collect();
        let a = predict(&st, &test).unwrap();
        let b = predict_batched(&st, &test, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
