//! Sample-location design: PCA reduction of the dictionary and the greedy
//! worst-case-variance selection, plus the uniform random baseline.
//!
//! The greedy search has two phases. While fewer than `n` rows are chosen,
//! the candidate with the largest component outside the span of the chosen
//! rows wins (this keeps `H^p = Φpᵀ Φp` gaining rank). Afterwards the
//! candidate most aligned with the current weakest eigen-direction of `H^p`
//! wins. Selection stops once `λ_min(H^p) ≥ λ_WCEV` or at the row cap.

use nalgebra::{DMatrix, SVD};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{RemError, Result};
use crate::linalg::{dot, sym_eigen_desc};
use crate::par::{argmax_lowest_index, map_range, Execution};
use crate::rng::{rng_for, stage};

/// Relative score tolerance treated as a tie; the lower voxel index wins.
pub const TIE_REL_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Dictionary {
    /// Full N×N path-loss matrix.
    pub phi: DMatrix<f64>,
    /// Top-n right singular directions (N×n, orthonormal columns).
    pub basis: DMatrix<f64>,
    /// `φ · basis`, N×n. Row `i` is the reduced atom of voxel `i`.
    pub phi_p: DMatrix<f64>,
    pub n_components: usize,
    pub per_thr: f64,
    /// All singular values of `φ`, descending.
    pub singular_values: Vec<f64>,
}

impl Dictionary {
    /// The dictionary taken as is: identity basis, `n = N`.
    pub fn unreduced(phi: DMatrix<f64>) -> Self {
        let n = phi.ncols();
        Dictionary {
            basis: DMatrix::identity(n, n),
            phi_p: phi.clone(),
            phi,
            n_components: n,
            per_thr: 1.0,
            singular_values: Vec::new(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.phi.nrows()
    }

    /// Row-major copy of `φ^p`.
    fn reduced_rows(&self) -> Vec<f64> {
        let (n_rows, n_cols) = self.phi_p.shape();
        let mut rows = vec![0.0; n_rows * n_cols];
        for c in 0..n_cols {
            for (r, v) in self.phi_p.column(c).iter().enumerate() {
                rows[r * n_cols + c] = *v;
            }
        }
        rows
    }
}

/// Singular values and right singular vectors (as columns), descending.
fn right_singular(phi: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if phi.is_square() && phi == &phi.transpose() {
        // Symmetric: singular values are |λ| and the eigenvectors serve as
        // right singular vectors.
        let (vals, vecs) = sym_eigen_desc(phi);
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()).then(a.cmp(&b)));
        let sv = order.iter().map(|&i| vals[i].abs()).collect();
        let v = DMatrix::from_fn(vecs.nrows(), order.len(), |r, c| vecs[(r, order[c])]);
        return Ok((sv, v));
    }
    let svd = SVD::try_new(phi.clone(), false, true, f64::EPSILON, 0)
        .ok_or_else(|| RemError::Decomposition("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    Ok((sv, v))
}

/// Number of singular values above `max(N)·ε·σ_max`.
pub fn numerical_rank(singular_values: &[f64], dim: usize) -> usize {
    let top = singular_values.first().copied().unwrap_or(0.0);
    let tol = dim as f64 * f64::EPSILON * top;
    singular_values.iter().filter(|&&s| s > tol).count()
}

/// Smallest `n` whose cumulative `σ²` reaches `per_thr` of the total,
/// capped at the numerical rank.
pub fn components_for(singular_values: &[f64], per_thr: f64, dim: usize) -> usize {
    let energy: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    let rank = numerical_rank(singular_values, dim).max(1);
    let target = per_thr * total;
    let mut acc = 0.0;
    for (i, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= target {
            return (i + 1).min(rank);
        }
    }
    rank
}

/// Uncentered PCA of `φ`: project its rows on the leading right singular
/// directions holding `per_thr` of the squared singular-value energy.
pub fn pca_reduce(phi: &DMatrix<f64>, per_thr: f64) -> Result<Dictionary> {
    if !(per_thr > 0.0 && per_thr <= 1.0) {
        return Err(RemError::InvalidParameter(format!(
            "per_thr must lie in (0, 1], got {per_thr}"
        )));
    }
    if phi.is_empty() {
        return Err(RemError::InvalidParameter("empty dictionary".into()));
    }
    let (sv, v) = right_singular(phi)?;
    Ok(reduce_with(phi, per_thr, sv, &v))
}

/// PCA at several thresholds from a single decomposition.
pub fn pca_reduce_many(phi: &DMatrix<f64>, per_thrs: &[f64]) -> Result<Vec<Dictionary>> {
    for &p in per_thrs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(RemError::InvalidParameter(format!("per_thr must lie in (0, 1], got {p}")));
        }
    }
    let (sv, v) = right_singular(phi)?;
    Ok(per_thrs.iter().map(|&p| reduce_with(phi, p, sv.clone(), &v)).collect())
}

fn reduce_with(phi: &DMatrix<f64>, per_thr: f64, sv: Vec<f64>, v: &DMatrix<f64>) -> Dictionary {
    let dim = phi.nrows().max(phi.ncols());
    let n = components_for(&sv, per_thr, dim);
    let basis = v.columns(0, n).into_owned();
    let phi_p = phi * &basis;
    Dictionary {
        phi: phi.clone(),
        basis,
        phi_p,
        n_components: n,
        per_thr,
        singular_values: sv,
    }
}

/// Worst-case error variance `1/λ_min(H)`; `+∞` when `H` is singular.
pub fn wcev(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return f64::INFINITY;
    }
    let (vals, _) = sym_eigen_desc(h);
    let max = vals[0];
    let min = *vals.last().unwrap();
    let tol = h.nrows() as f64 * f64::EPSILON * max.abs();
    if max <= 0.0 || min <= tol {
        f64::INFINITY
    } else {
        1.0 / min
    }
}

/// `β⁻¹ Σ 1/λ_i` over the eigenvalues of `H = ΦᵀΦ`; `+∞` if any is zero.
pub fn mse_trace(phi_sel: &DMatrix<f64>, beta: f64) -> f64 {
    let cols = phi_sel.ncols();
    if cols == 0 {
        return 0.0;
    }
    if phi_sel.nrows() < cols {
        return f64::INFINITY;
    }
    let h = phi_sel.transpose() * phi_sel;
    let (vals, _) = sym_eigen_desc(&h);
    let tol = cols as f64 * f64::EPSILON * vals[0].abs();
    if vals[0] <= 0.0 || vals.iter().any(|&l| l <= tol) {
        return f64::INFINITY;
    }
    vals.iter().map(|l| 1.0 / l).sum::<f64>() / beta
}

/// WC-SBL-V of a row selection measured on the full dictionary:
/// `1/λ` for the smallest nonzero eigenvalue of `H = ΦᵀΦ`, computed from the
/// M×M Gram matrix `ΦΦᵀ` which shares its nonzero spectrum.
pub fn wc_sbl_v(phi_sel: &DMatrix<f64>) -> f64 {
    if phi_sel.nrows() == 0 {
        return f64::INFINITY;
    }
    let gram = phi_sel * phi_sel.transpose();
    let (vals, _) = sym_eigen_desc(&gram);
    let tol = gram.nrows().max(phi_sel.ncols()) as f64 * f64::EPSILON * vals[0].abs();
    vals.iter()
        .rev()
        .find(|&&l| l > tol)
        .map_or(f64::INFINITY, |l| 1.0 / l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMethod {
    Snlo,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    #[serde(rename = "N")]
    pub n_voxels: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub method: PlanMethod,
    /// PCA threshold of the dictionary (greedy plans only).
    pub per_thr: Option<f64>,
    /// Eigenvalue floor (threshold-mode greedy plans only).
    pub lambda_wcev: Option<f64>,
    pub n_components: usize,
    pub selected: Vec<usize>,
    /// `λ_min(H^p_t)` after each pick; 0 while `t < n`.
    pub lambda_min_history: Vec<f64>,
    /// Threshold reached (threshold mode) or requested count placed (fixed-M mode).
    pub satisfied: bool,
}

impl MeasurementPlan {
    pub fn rate(&self) -> f64 {
        self.m as f64 / self.n_voxels as f64
    }

    /// M×N binary selection matrix.
    pub fn psi(&self) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.m, self.n_voxels);
        for (row, &s) in self.selected.iter().enumerate() {
            psi[(row, s)] = 1.0;
        }
        psi
    }

    /// Rows of `mat` at the selected voxels, in selection order.
    pub fn select_rows(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        mat.select_rows(self.selected.iter())
    }
}

/// Scratch state of one greedy run.
#[derive(Clone, Debug)]
pub struct GreedyWorkspace {
    dim: usize,
    /// Orthonormal basis `Θ` of the chosen reduced rows (phase 1).
    theta: Vec<Vec<f64>>,
    /// `H^p_t` accumulated as a sum of rank-one terms.
    h: DMatrix<f64>,
    /// Weakest eigen-direction `π_n` of `H^p_t` (phase 2).
    pi_min: Option<Vec<f64>>,
}

impl GreedyWorkspace {
    fn new(dim: usize) -> Self {
        GreedyWorkspace {
            dim,
            theta: Vec::new(),
            h: DMatrix::zeros(dim, dim),
            pi_min: None,
        }
    }

    /// `O = I − ΘΘᵀ`, the phase-1 projector.
    pub fn complement_projector(&self) -> DMatrix<f64> {
        let mut o = DMatrix::identity(self.dim, self.dim);
        for th in &self.theta {
            for r in 0..self.dim {
                for c in 0..self.dim {
                    o[(r, c)] -= th[r] * th[c];
                }
            }
        }
        o
    }

    /// `R = π π ᵀ`, the phase-2 projector (zero before phase 2).
    pub fn weakest_projector(&self) -> DMatrix<f64> {
        match &self.pi_min {
            Some(p) => DMatrix::from_fn(self.dim, self.dim, |r, c| p[r] * p[c]),
            None => DMatrix::zeros(self.dim, self.dim),
        }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    fn add_row(&mut self, row: &[f64]) {
        for r in 0..self.dim {
            for c in 0..self.dim {
                self.h[(r, c)] += row[r] * row[c];
            }
        }
    }

    /// Orthonormalizes `row` against `Θ` (two Gram-Schmidt passes). Returns
    /// false when nothing of it is left.
    fn extend_basis(&mut self, row: &[f64]) -> bool {
        let norm0 = dot(row, row).sqrt();
        let mut v = row.to_vec();
        for _ in 0..2 {
            for th in &self.theta {
                let c = dot(th, &v);
                for (vi, ti) in v.iter_mut().zip(th) {
                    *vi -= c * ti;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > 1e-12 * norm0) || norm0 == 0.0 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        self.theta.push(v);
        true
    }

    /// Eigen-decomposes `H^p`, stores `π_n`, returns `λ_min`.
    fn refresh_eigen(&mut self) -> f64 {
        let (vals, vecs) = sym_eigen_desc(&self.h);
        let last = vals.len() - 1;
        self.pi_min = Some(vecs.column(last).iter().copied().collect());
        vals[last]
    }
}

/// Greedy selection (threshold mode): stops at the first `t ≥ n` with
/// `λ_min(H^p_t) ≥ lambda_wcev`, or after `m_max` picks with
/// `satisfied = false`.
pub fn greedy_select(dict: &Dictionary, lambda_wcev: f64, m_max: usize, exec: Execution) -> Result<MeasurementPlan> {
    if !(lambda_wcev > 0.0) {
        return Err(RemError::InvalidParameter(format!(
            "lambda_wcev must be > 0, got {lambda_wcev}"
        )));
    }
    greedy_run(dict, lambda_wcev, m_max, exec).map(|(plan, _)| plan)
}

/// Greedy selection of exactly `m` rows (no threshold).
pub fn greedy_fixed(dict: &Dictionary, m: usize, exec: Execution) -> Result<MeasurementPlan> {
    let (mut plan, _) = greedy_run(dict, f64::INFINITY, m, exec)?;
    plan.satisfied = plan.m == m;
    Ok(plan)
}

/// Greedy selection that also hands back the final workspace.
pub fn greedy_run(
    dict: &Dictionary,
    lambda_wcev: f64,
    m_max: usize,
    exec: Execution,
) -> Result<(MeasurementPlan, GreedyWorkspace)> {
    let n_vox = dict.n_voxels();
    if m_max > n_vox {
        return Err(RemError::InvalidParameter(format!(
            "m_max = {m_max} exceeds the voxel count {n_vox}"
        )));
    }
    let dim = dict.phi_p.ncols();
    let n = dict.n_components.min(dim);
    let rows = dict.reduced_rows();
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];

    let mut ws = GreedyWorkspace::new(dim);
    let mut chosen = vec![false; n_vox];
    let mut selected = Vec::new();
    let mut history = Vec::new();
    // Phase-1 scores ||O φ_i||², updated incrementally as Θ grows.
    let mut residual: Vec<f64> = map_range(exec, n_vox, |i| dot(row(i), row(i)));
    let mut satisfied = false;

    while selected.len() < m_max && selected.len() < n {
        let best = argmax_lowest_index(exec, n_vox, TIE_REL_TOL, |i| (!chosen[i]).then(|| residual[i]));
        let Some((pick, score)) = best else { break };
        if !(score > 0.0) || !ws.extend_basis(row(pick)) {
            // The reduced rows span fewer than n directions; hand over to
            // phase 2 early.
            break;
        }
        chosen[pick] = true;
        selected.push(pick);
        ws.add_row(row(pick));
        let theta = ws.theta.last().unwrap();
        let drops = map_range(exec, n_vox, |i| {
            let c = dot(theta, row(i));
            c * c
        });
        for (r, d) in residual.iter_mut().zip(drops) {
            *r -= d;
        }
        history.push(0.0);
    }

    if !selected.is_empty() && (ws.theta.len() == n || selected.len() < m_max) {
        let lam = ws.refresh_eigen();
        let full = ws.theta.len() == n;
        if full {
            *history.last_mut().unwrap() = lam.max(0.0);
        }
        satisfied = full && lam >= lambda_wcev;
        while !satisfied && selected.len() < m_max {
            let pi = ws.pi_min.clone().unwrap();
            let best = argmax_lowest_index(exec, n_vox, TIE_REL_TOL, |i| {
                (!chosen[i]).then(|| {
                    let c = dot(&pi, row(i));
                    c * c
                })
            });
            let Some((pick, _)) = best else { break };
            chosen[pick] = true;
            selected.push(pick);
            ws.add_row(row(pick));
            let lam = ws.refresh_eigen();
            history.push(lam.max(0.0));
            satisfied = lam >= lambda_wcev;
        }
    }

    let plan = MeasurementPlan {
        n_voxels: n_vox,
        m: selected.len(),
        method: PlanMethod::Snlo,
        per_thr: Some(dict.per_thr),
        lambda_wcev: lambda_wcev.is_finite().then_some(lambda_wcev),
        n_components: n,
        selected,
        lambda_min_history: history,
        satisfied,
    };
    Ok((plan, ws))
}

/// Uniform sample of `m` of `n_voxels` indices without replacement.
pub fn random_plan(n_voxels: usize, m: usize, seed: u64) -> Result<MeasurementPlan> {
    if m > n_voxels {
        return Err(RemError::InvalidParameter(format!(
            "cannot draw M = {m} samples from N = {n_voxels} voxels"
        )));
    }
    let mut rng = rng_for(seed, stage::PLAN);
    let selected = index::sample(&mut rng, n_voxels, m).into_vec();
    Ok(MeasurementPlan {
        n_voxels,
        m,
        method: PlanMethod::Random,
        per_thr: None,
        lambda_wcev: None,
        n_components: 0,
        selected,
        lambda_min_history: Vec::new(),
        satisfied: true,
    })
}

/// `λ_min(H^p)` for an arbitrary selection on a reduced dictionary.
pub fn lambda_min_reduced(dict: &Dictionary, selected: &[usize]) -> f64 {
    let sel = dict.phi_p.select_rows(selected.iter());
    let h = sel.transpose() * &sel;
    if h.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen_desc(&h);
    *vals.last().unwrap()
}
