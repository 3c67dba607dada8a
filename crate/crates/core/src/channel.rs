//! Channel model: path-loss dictionary, Matérn shadowing and the synthetic
//! ground truth `x = ξ ∘ (φ ω)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, RemError, Result};
use crate::grid::{distance, GridSpec, Point3, RemTensor};
use crate::linalg::cholesky_jittered;
use crate::par::{fill_rows, Execution};
use crate::rng::{rng_for, stage};

/// Largest voxel count for which dense N×N matrices are built.
pub const DENSE_CAP: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub gt: f64,
    pub gr: f64,
    /// Carrier frequency in Hz.
    pub fc: f64,
    pub c_light: f64,
    pub eta: f64,
    /// Reference distance in meters; gain is 1 inside it.
    pub d_ref: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            gt: 1.0,
            gr: 1.0,
            fc: 2.45e9,
            c_light: 3.0e8,
            eta: 2.0,
            d_ref: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.gt) && ok(self.gr)) {
            return Err(RemError::InvalidParameter("antenna gains must be positive".into()));
        }
        if !ok(self.fc) || !ok(self.c_light) {
            return Err(RemError::InvalidParameter(
                "carrier frequency and light speed must be positive".into(),
            ));
        }
        if !ok(self.d_ref) {
            return Err(RemError::InvalidParameter("d_ref must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(RemError::InvalidParameter("path-loss exponent must be >= 0".into()));
        }
        Ok(())
    }

    /// The far-field constant `Gt·Gr·c²/(4π fc²)`.
    pub fn far_field_gain(&self) -> f64 {
        self.gt * self.gr * self.c_light * self.c_light
            / (4.0 * std::f64::consts::PI * self.fc * self.fc)
    }

    pub fn gain_at(&self, d: f64) -> f64 {
        if d <= self.d_ref {
            1.0
        } else {
            self.far_field_gain() * (self.d_ref / d).powf(self.eta)
        }
    }
}

pub fn path_loss(params: &ChannelParams, a: &Point3, b: &Point3) -> f64 {
    params.gain_at(distance(a, b))
}

fn check_dense(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(RemError::MemoryBudget { n, cap })
    } else {
        Ok(())
    }
}

/// Dense symmetric matrix `m[i][j] = f(ν_i, ν_j)` over all voxel centers.
fn pairwise<F>(grid: &GridSpec, cap: usize, exec: Execution, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&Point3, &Point3) -> f64 + Sync + Send,
{
    let n = grid.len();
    check_dense(n, cap)?;
    let centers = grid.centers();
    let mut buf = vec![0.0; n * n];
    // Row i of a row-major buffer; the matrix is symmetric so the column-major
    // reinterpretation below is the same matrix.
    fill_rows(exec, &mut buf, n, |i, row| {
        let ci = &centers[i];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = f(ci, &centers[j]);
        }
    });
    Ok(DMatrix::from_vec(n, n, buf))
}

/// Path-loss dictionary `φ`, N×N.
pub fn build_dictionary(grid: &GridSpec, params: &ChannelParams, exec: Execution) -> Result<DMatrix<f64>> {
    build_dictionary_capped(grid, params, DENSE_CAP, exec)
}

pub fn build_dictionary_capped(
    grid: &GridSpec,
    params: &ChannelParams,
    cap: usize,
    exec: Execution,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    pairwise(grid, cap, exec, |a, b| path_loss(params, a, b))
}

/// Matérn-3/2 log-shadowing covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowModel {
    /// Marginal variance in dB².
    pub sigma2: f64,
    /// Decay length in meters. `f64::INFINITY` gives a fully correlated field.
    pub rho: f64,
}

impl ShadowModel {
    pub fn from_sigma_db(sigma_db: f64, rho: f64) -> Self {
        ShadowModel { sigma2: sigma_db * sigma_db, rho }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(RemError::InvalidParameter("shadow sigma2 must be >= 0".into()));
        }
        if !(self.rho > 0.0) {
            return Err(RemError::InvalidParameter("shadow rho must be > 0".into()));
        }
        Ok(())
    }
}

pub fn matern32(model: &ShadowModel, d: f64) -> f64 {
    matern32_kernel(model.sigma2, model.rho, d)
}

pub(crate) fn matern32_kernel(sigma2: f64, rho: f64, d: f64) -> f64 {
    let u = 3f64.sqrt() * d / rho;
    sigma2 * (1.0 + u) * (-u).exp()
}

/// Factored shadowing covariance for one grid, reusable across seeds.
#[derive(Clone, Debug)]
pub struct ShadowSampler {
    n: usize,
    sigma: f64,
    /// Lower Cholesky factor; `None` for the constant and the fully
    /// correlated cases.
    l: Option<DMatrix<f64>>,
}

impl ShadowSampler {
    pub fn new(grid: &GridSpec, model: &ShadowModel, exec: Execution) -> Result<Self> {
        model.validate()?;
        let n = grid.len();
        let sigma = model.sigma2.sqrt();
        if model.sigma2 == 0.0 || model.rho.is_infinite() {
            return Ok(ShadowSampler { n, sigma, l: None });
        }
        let cov = pairwise(grid, DENSE_CAP, exec, |a, b| matern32(model, distance(a, b)))?;
        let (chol, _) = cholesky_jittered(&cov, model.sigma2).ok_or(RemError::CovarianceNotPd {
            context: Some("shadow synthesis".into()),
        })?;
        Ok(ShadowSampler { n, sigma, l: Some(chol.l()) })
    }

    /// One field in dB for `seed`.
    pub fn draw(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, stage::SHADOW);
        if self.sigma == 0.0 {
            return vec![0.0; self.n];
        }
        match &self.l {
            None => {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![self.sigma * z; self.n]
            }
            Some(l) => {
                let z = DVector::from_fn(self.n, |_, _| StandardNormal.sample(&mut rng));
                (l * z).as_slice().to_vec()
            }
        }
    }
}

/// Draws `ξ̄ ~ N(0, C)` over voxel centers, in dB.
pub fn sample_shadow_db(grid: &GridSpec, model: &ShadowModel, seed: u64, exec: Execution) -> Result<Vec<f64>> {
    Ok(ShadowSampler::new(grid, model, exec)?.draw(seed))
}

/// Linear shadow field `ξ^v = 10^(ξ̄/10)`.
pub fn sample_shadow_field(grid: &GridSpec, model: &ShadowModel, seed: u64, exec: Execution) -> Result<Vec<f64>> {
    Ok(db_to_linear(&sample_shadow_db(grid, model, seed, exec)?))
}

pub fn db_to_linear(db: &[f64]) -> Vec<f64> {
    db.iter().map(|v| 10f64.powf(v / 10.0)).collect()
}

/// Sparse transmitter vector `ω` (mW).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceField {
    pub omega: Vec<f64>,
    pub support: Vec<usize>,
    pub positions: Vec<Point3>,
    pub powers_mw: Vec<f64>,
}

impl SourceField {
    pub fn new(grid: &GridSpec, support: Vec<usize>, powers_mw: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        check_len("source powers", support.len(), powers_mw.len())?;
        if support.len() >= n {
            return Err(RemError::InvalidParameter(format!(
                "need fewer sources than voxels, got K = {} for N = {n}",
                support.len()
            )));
        }
        let mut omega = vec![0.0; n];
        let mut positions = Vec::with_capacity(support.len());
        for (&s, &p) in support.iter().zip(&powers_mw) {
            if !(p > 0.0 && p.is_finite()) {
                return Err(RemError::InvalidParameter(format!(
                    "source power at voxel {s} must be positive, got {p}"
                )));
            }
            positions.push(grid.voxel_center(s)?);
            if omega[s] != 0.0 {
                return Err(RemError::InvalidParameter(format!("duplicate source voxel {s}")));
            }
            omega[s] = p;
        }
        Ok(SourceField { omega, support, positions, powers_mw })
    }

    /// `count` distinct voxels drawn uniformly, all at `power_mw`.
    pub fn random(grid: &GridSpec, count: usize, power_mw: f64, seed: u64) -> Result<Self> {
        if count >= grid.len() {
            return Err(RemError::InvalidParameter(format!(
                "need fewer sources than voxels, got K = {count} for N = {}",
                grid.len()
            )));
        }
        let mut rng = rng_for(seed, stage::SOURCES);
        let mut support = index::sample(&mut rng, grid.len(), count).into_vec();
        support.sort_unstable();
        SourceField::new(grid, support, vec![power_mw; count])
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// `φ ω` restricted to the nonzero entries of `omega`.
pub fn apply_dictionary(phi: &DMatrix<f64>, omega: &[f64]) -> Result<Vec<f64>> {
    check_len("omega", phi.ncols(), omega.len())?;
    let mut out = vec![0.0; phi.nrows()];
    for (j, &w) in omega.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(phi.column(j).iter()) {
            *o += p * w;
        }
    }
    Ok(out)
}

pub fn synthesize_truth(
    grid: &GridSpec,
    phi: &DMatrix<f64>,
    sources: &SourceField,
    shadow: &[f64],
) -> Result<RemTensor> {
    let n = grid.len();
    check_len("dictionary rows", n, phi.nrows())?;
    check_len("source vector", n, sources.omega.len())?;
    check_len("shadow field", n, shadow.len())?;
    let mut x = apply_dictionary(phi, &sources.omega)?;
    for (v, s) in x.iter_mut().zip(shadow) {
        *v *= s;
    }
    RemTensor::new(grid.clone(), x)
}

/// Noisy point samples of a REM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub t: Vec<f64>,
    pub sigma0_2: f64,
    pub sample_indices: Vec<usize>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `t_m = x[s_m] + ε_m`, `ε ~ N(0, σ0²)` i.i.d.
pub fn measure(truth: &RemTensor, sample_indices: &[usize], sigma0_2: f64, seed: u64) -> Result<Observations> {
    if !(sigma0_2 >= 0.0 && sigma0_2.is_finite()) {
        return Err(RemError::InvalidParameter(format!(
            "noise variance must be finite and >= 0, got {sigma0_2}"
        )));
    }
    let n = truth.values.len();
    let mut rng = rng_for(seed, stage::NOISE);
    let sd = sigma0_2.sqrt();
    let mut t = Vec::with_capacity(sample_indices.len());
    for &s in sample_indices {
        if s >= n {
            return Err(RemError::IndexOutOfGrid { index: s, len: n });
        }
        let noise = if sd > 0.0 {
            sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        } else {
            0.0
        };
        t.push(truth.values[s] + noise);
    }
    Ok(Observations { t, sigma0_2, sample_indices: sample_indices.to_vec() })
}

/// Noise variance that puts `10·log10(mean(x_s)/σ0²)` at `snr_db`.
pub fn sigma0_2_for_snr(truth: &RemTensor, sample_indices: &[usize], snr_db: f64) -> f64 {
    if sample_indices.is_empty() {
        return 0.0;
    }
    let mean = sample_indices.iter().map(|&s| truth.values[s]).sum::<f64>() / sample_indices.len() as f64;
    mean / 10f64.powf(snr_db / 10.0)
}
