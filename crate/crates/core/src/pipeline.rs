//! End-to-end runs: synthesize, plan, measure, recover, reconstruct, score.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{self, apply_dictionary, SourceField};
use crate::config::{ExperimentConfig, SampleBudget};
use crate::error::{check_len, RemError, Result};
use crate::gpr::{self, FitOptions, GpBounds, GpHyper};
use crate::grid::{GridSpec, RemTensor};
use crate::par::{map_range, Execution};
use crate::sampling::{self, Dictionary, MeasurementPlan, PlanMethod};
use crate::sbl::{self, SblReport};

/// Floor applied to linear values before dB conversion.
pub const MAE_FLOOR_MW: f64 = 1e-15;

/// `x̂ = ξ̂ ∘ (φ ω̂)`.
pub fn reconstruct(grid: &GridSpec, phi: &DMatrix<f64>, omega_hat: &[f64], shadow_est: &[f64]) -> Result<RemTensor> {
    check_len("dictionary rows", grid.len(), phi.nrows())?;
    check_len("shadow estimate", grid.len(), shadow_est.len())?;
    let mut x = apply_dictionary(phi, omega_hat)?;
    for (v, s) in x.iter_mut().zip(shadow_est) {
        *v *= s;
    }
    // Negative entries can only come from negative ω̂ components and are not
    // representable as power.
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
    RemTensor::new(grid.clone(), x)
}

fn to_db_floored(v: f64) -> f64 {
    10.0 * v.max(MAE_FLOOR_MW).log10()
}

/// Mean absolute dB error between two maps on the same grid.
pub fn mae(truth: &RemTensor, estimate: &RemTensor) -> Result<f64> {
    if truth.grid != estimate.grid {
        return Err(RemError::InvalidParameter("truth and estimate grids differ".into()));
    }
    let n = truth.values.len();
    let total: f64 = truth
        .values
        .iter()
        .zip(&estimate.values)
        .map(|(a, b)| (to_db_floored(*b) - to_db_floored(*a)).abs())
        .sum();
    Ok(total / n as f64)
}

/// Grid, dictionary and PCA reductions shared by every run of a scenario.
pub struct Prepared {
    pub grid: GridSpec,
    pub phi: Arc<DMatrix<f64>>,
    per_thrs: Vec<f64>,
    dicts: OnceLock<std::result::Result<Vec<Arc<Dictionary>>, String>>,
    shadow: channel::ShadowSampler,
}

impl Prepared {
    /// Builds `φ` once; PCA for each of `per_thrs` happens lazily on the
    /// first request.
    pub fn new(config: &ExperimentConfig, per_thrs: &[f64], exec: Execution) -> Result<Self> {
        let grid = config.grid.to_spec()?;
        let phi = channel::build_dictionary(&grid, &config.channel.to_params(), exec)?;
        let mut per_thrs = per_thrs.to_vec();
        if !per_thrs.iter().any(|p| p.to_bits() == config.sampling.per_thr.to_bits()) {
            per_thrs.push(config.sampling.per_thr);
        }
        let shadow = channel::ShadowSampler::new(&grid, &config.shadow.to_model(), exec)?;
        Ok(Prepared { grid, phi: Arc::new(phi), per_thrs, dicts: OnceLock::new(), shadow })
    }

    pub fn dictionary(&self, per_thr: f64) -> Result<Arc<Dictionary>> {
        let dicts = self.dicts.get_or_init(|| {
            sampling::pca_reduce_many(&self.phi, &self.per_thrs)
                .map(|v| v.into_iter().map(Arc::new).collect())
                .map_err(|e| e.to_string())
        });
        let dicts = dicts.as_ref().map_err(|e| RemError::Decomposition(e.clone()))?;
        self.per_thrs
            .iter()
            .position(|p| p.to_bits() == per_thr.to_bits())
            .map(|i| dicts[i].clone())
            .ok_or_else(|| RemError::InvalidParameter(format!("per_thr {per_thr} was not prepared")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub synthesize_ms: f64,
    pub plan_ms: f64,
    pub sbl_ms: f64,
    pub gpr_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSummary {
    pub eta: GpHyper,
    pub nlml: f64,
    pub n_train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub truth: RemTensor,
    pub estimate: RemTensor,
    pub sources: SourceField,
    pub omega_hat: Vec<f64>,
    /// Estimated shadowing per voxel, dB.
    pub shadow_est_db: Vec<f64>,
    pub plan: MeasurementPlan,
    pub sigma0_2: f64,
    pub sbl: SblReport,
    pub gp: Option<GpSummary>,
    /// Sampled voxels left out of the shadowing fit (nonpositive RSS).
    pub shadow_excluded: Vec<usize>,
    pub mae_db: f64,
    /// MAE of the same run with the shadowing estimate forced to 0 dB.
    pub mae_no_gpr_db: f64,
    /// `1/λ_min⁺(ΦᵀΦ)` of the sensing matrix.
    #[serde(with = "crate::config::finite_or_null")]
    pub wc_sbl_v: f64,
    #[serde(skip)]
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One run from scratch.
pub fn run_once(config: &ExperimentConfig, seed: u64, exec: Execution) -> Result<RunResult> {
    config.validate()?;
    let prep = Prepared::new(config, &[], exec).map_err(|e| e.in_stage("dictionary"))?;
    run_prepared(&prep, config, seed, exec)
}

pub fn make_sources(config: &ExperimentConfig, grid: &GridSpec, seed: u64) -> Result<SourceField> {
    let powers = config.source_powers_mw();
    if config.sources.list.is_empty() {
        let seed = config.sources.seed.unwrap_or(seed);
        SourceField::random(grid, config.sources.count, powers[0], seed)
    } else {
        let support = config.sources.list.iter().map(|s| s.voxel).collect();
        SourceField::new(grid, support, powers)
    }
}

/// Ground truth for `(config, seed)`. The shadowing model is the one `prep`
/// was built with.
pub fn synthesize(prep: &Prepared, config: &ExperimentConfig, seed: u64) -> Result<(SourceField, Vec<f64>, RemTensor)> {
    let grid = &prep.grid;
    let sources = make_sources(config, grid, seed)?;
    let shadow_db = prep.shadow.draw(seed);
    let truth = channel::synthesize_truth(grid, &prep.phi, &sources, &channel::db_to_linear(&shadow_db))?;
    Ok((sources, shadow_db, truth))
}

/// Measurement plan for a configuration.
pub fn make_plan(prep: &Prepared, config: &ExperimentConfig, seed: u64, exec: Execution) -> Result<MeasurementPlan> {
    let n = prep.grid.len();
    let budget = config.sampling.budget(n)?;
    match (config.sampling.method, budget) {
        (PlanMethod::Random, SampleBudget::Fixed(m)) => sampling::random_plan(n, m, seed),
        (PlanMethod::Random, SampleBudget::Threshold { .. }) => Err(RemError::InvalidParameter(
            "random sampling needs a fixed sample count".into(),
        )),
        (PlanMethod::Snlo, SampleBudget::Fixed(m)) => {
            sampling::greedy_fixed(&*prep.dictionary(config.sampling.per_thr)?, m, exec)
        }
        (PlanMethod::Snlo, SampleBudget::Threshold { lambda_wcev, m_max }) => {
            sampling::greedy_select(&*prep.dictionary(config.sampling.per_thr)?, lambda_wcev, m_max, exec)
        }
    }
}

/// Recovery from observations: SBL, then (optionally) GP shadowing.
pub struct Recovery {
    pub omega_hat: Vec<f64>,
    pub shadow_est_db: Vec<f64>,
    pub sbl: SblReport,
    pub gp: Option<GpSummary>,
    pub shadow_excluded: Vec<usize>,
    pub sbl_ms: f64,
    pub gpr_ms: f64,
}

pub fn recover(
    prep: &Prepared,
    config: &ExperimentConfig,
    sample_indices: &[usize],
    t: &[f64],
    exec: Execution,
) -> Result<Recovery> {
    let grid = &prep.grid;
    let n = grid.len();
    let phi_sel = prep.phi.select_rows(sample_indices.iter());

    let t0 = Instant::now();
    let state = sbl::sbl_recover(&phi_sel, t, &config.sbl).map_err(|e| e.in_stage("sbl"))?;
    // Transmit powers are nonnegative.
    let omega_hat: Vec<f64> = state.omega_hat().into_iter().map(|w| w.max(0.0)).collect();
    let sbl_ms = ms(t0);

    let t1 = Instant::now();
    let mut shadow_db = vec![0.0; n];
    let mut gp_summary = None;
    let mut excluded = Vec::new();
    if config.gpr.enabled {
        let pred = phi_sel.clone() * nalgebra::DVector::from_column_slice(&omega_hat);
        let usable: Vec<usize> = (0..t.len()).filter(|&m| t[m] > 0.0 && pred[m] > 0.0).collect();
        excluded = (0..t.len())
            .filter(|m| !usable.contains(m))
            .map(|m| sample_indices[m])
            .collect();
        if usable.len() >= 2 {
            let t_use: Vec<f64> = usable.iter().map(|&m| t[m]).collect();
            let sel_use = phi_sel.select_rows(usable.iter());
            let y = gpr::extract_shadow(&t_use, &omega_hat, &sel_use).map_err(|e| e.in_stage("gpr"))?;
            let train_idx: Vec<usize> = usable.iter().map(|&m| sample_indices[m]).collect();
            let train_x: Vec<_> = train_idx.iter().map(|&s| grid.voxel_center(s).unwrap()).collect();
            let bounds = GpBounds::for_grid(grid.min_spacing(), grid.diagonal());
            let opts = FitOptions { n_starts: config.gpr.n_starts, seed: config.gpr.seed, max_iter: config.gpr.max_iter };
            let gp = gpr::fit(&train_x, &y, None, &bounds, &opts, exec).map_err(|e| e.in_stage("gpr"))?;
            let mut is_train = vec![false; n];
            for (&s, &v) in train_idx.iter().zip(&y) {
                is_train[s] = true;
                shadow_db[s] = v;
            }
            let test: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();
            let test_x: Vec<_> = test.iter().map(|&i| grid.voxel_center(i).unwrap()).collect();
            let p = gpr::predict_batched(&gp, &test_x, 256, exec).map_err(|e| e.in_stage("gpr"))?;
            for (&i, m) in test.iter().zip(p.mean) {
                shadow_db[i] = m;
            }
            gp_summary = Some(GpSummary { eta: gp.eta, nlml: gp.nlml, n_train: train_idx.len() });
        }
    }
    Ok(Recovery {
        omega_hat,
        shadow_est_db: shadow_db,
        sbl: state.report(),
        gp: gp_summary,
        shadow_excluded: excluded,
        sbl_ms,
        gpr_ms: ms(t1),
    })
}

/// Everything a run produces downstream of the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: RemTensor,
    pub omega_hat: Vec<f64>,
    pub shadow_est_db: Vec<f64>,
    pub sigma0_2: f64,
    pub sbl: SblReport,
    pub gp: Option<GpSummary>,
    pub shadow_excluded: Vec<usize>,
    pub mae_db: f64,
    pub mae_no_gpr_db: f64,
    #[serde(with = "crate::config::finite_or_null")]
    pub wc_sbl_v: f64,
}

/// Noise level implied by the configuration for a given truth and plan.
pub fn noise_variance(config: &ExperimentConfig, truth: &RemTensor, plan: &MeasurementPlan) -> f64 {
    match (config.noise.snr_db, config.noise.sigma0_2) {
        (Some(snr), _) => channel::sigma0_2_for_snr(truth, &plan.selected, snr),
        (None, Some(v)) => v,
        (None, None) => 0.0,
    }
}

/// Measure `truth` along `plan`, recover, reconstruct and score.
pub fn estimate_from_truth(
    prep: &Prepared,
    config: &ExperimentConfig,
    truth: &RemTensor,
    plan: &MeasurementPlan,
    seed: u64,
    exec: Execution,
) -> Result<(Estimate, (f64, f64))> {
    let grid = &prep.grid;
    if truth.grid != *grid {
        return Err(RemError::InvalidParameter("truth grid differs from the configured grid".into()));
    }
    check_len("plan voxel count", grid.len(), plan.n_voxels)?;
    let sigma0_2 = noise_variance(config, truth, plan);
    let obs = channel::measure(truth, &plan.selected, sigma0_2, seed).map_err(|e| e.in_stage("measure"))?;

    let rec = recover(prep, config, &plan.selected, &obs.t, exec)?;
    let shadow_lin = channel::db_to_linear(&rec.shadow_est_db);
    let estimate = reconstruct(grid, &prep.phi, &rec.omega_hat, &shadow_lin).map_err(|e| e.in_stage("reconstruct"))?;
    let plain = reconstruct(grid, &prep.phi, &rec.omega_hat, &vec![1.0; grid.len()])
        .map_err(|e| e.in_stage("reconstruct"))?;
    let mae_db = mae(truth, &estimate).map_err(|e| e.in_stage("score"))?;
    let mae_no_gpr_db = mae(truth, &plain).map_err(|e| e.in_stage("score"))?;
    let wc_sbl_v = sampling::wc_sbl_v(&plan.select_rows(&prep.phi));

    let est = Estimate {
        estimate,
        omega_hat: rec.omega_hat,
        shadow_est_db: rec.shadow_est_db,
        sigma0_2,
        sbl: rec.sbl,
        gp: rec.gp,
        shadow_excluded: rec.shadow_excluded,
        mae_db,
        mae_no_gpr_db,
        wc_sbl_v,
    };
    Ok((est, (rec.sbl_ms, rec.gpr_ms)))
}

/// One run on a prepared scenario.
pub fn run_prepared(prep: &Prepared, config: &ExperimentConfig, seed: u64, exec: Execution) -> Result<RunResult> {
    let start = Instant::now();

    let t0 = Instant::now();
    let (sources, _shadow_db, truth) = synthesize(prep, config, seed).map_err(|e| e.in_stage("synthesize"))?;
    let synthesize_ms = ms(t0);

    let t0 = Instant::now();
    let plan = make_plan(prep, config, seed, exec).map_err(|e| e.in_stage("plan"))?;
    let plan_ms = ms(t0);

    let (est, (sbl_ms, gpr_ms)) = estimate_from_truth(prep, config, &truth, &plan, seed, exec)?;

    Ok(RunResult {
        seed,
        truth,
        estimate: est.estimate,
        sources,
        omega_hat: est.omega_hat,
        shadow_est_db: est.shadow_est_db,
        plan,
        sigma0_2: est.sigma0_2,
        sbl: est.sbl,
        gp: est.gp,
        shadow_excluded: est.shadow_excluded,
        mae_db: est.mae_db,
        mae_no_gpr_db: est.mae_no_gpr_db,
        wc_sbl_v: est.wc_sbl_v,
        timings: Timings {
            synthesize_ms,
            plan_ms,
            sbl_ms,
            gpr_ms,
            total_ms: ms(start),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    R,
    SnrDb,
    PerThr,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::R => "r",
            SweepVariable::SnrDb => "snr_db",
            SweepVariable::PerThr => "per_thr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(SweepVariable::R),
            "snr_db" | "snr" => Ok(SweepVariable::SnrDb),
            "per_thr" => Ok(SweepVariable::PerThr),
            other => Err(RemError::InvalidParameter(format!(
                "unknown sweep variable {other:?} (expected r, snr_db or per_thr)"
            ))),
        }
    }

    /// `config` with this variable set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = config.clone();
        match self {
            SweepVariable::R => {
                c.sampling.r = Some(value);
                c.sampling.m = None;
            }
            SweepVariable::SnrDb => {
                c.noise.snr_db = Some(value);
                c.noise.sigma0_2 = None;
            }
            SweepVariable::PerThr => c.sampling.per_thr = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variable: String,
    pub value: f64,
    pub seed: u64,
    pub mae_db: f64,
    /// MAE of the same cell with the shadowing layer skipped.
    pub mae_no_gpr_db: f64,
    pub wc_sbl_v: f64,
    pub m_samples: usize,
    pub wall_ms: f64,
    pub converged: bool,
    /// Set when the cell failed; numeric fields are NaN then.
    pub error: Option<String>,
}

/// Full factorial `values × seeds`. Cells run in parallel and share the
/// dictionary; a failed cell is recorded and the sweep carries on. Rows come
/// back sorted by `(value, seed)`.
pub fn sweep(
    config: &ExperimentConfig,
    variable: SweepVariable,
    values: &[f64],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(RemError::InvalidParameter("sweep needs at least one value and one seed".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| variable.apply(config, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let per_thrs: Vec<f64> = configs.iter().map(|c| c.sampling.per_thr).collect();
    let prep = Prepared::new(config, &per_thrs, exec).map_err(|e| e.in_stage("dictionary"))?;
    let prep = &prep;
    let cells: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut rows = map_range(exec, cells.len(), |k| {
        let (vi, seed) = cells[k];
        let start = Instant::now();
        let out = run_prepared(prep, &configs[vi], seed, exec);
        let wall_ms = ms(start);
        match out {
            Ok(r) => SweepRow {
                variable: variable.name().into(),
                value: values[vi],
                seed,
                mae_db: r.mae_db,
                mae_no_gpr_db: r.mae_no_gpr_db,
                wc_sbl_v: r.wc_sbl_v,
                m_samples: r.plan.m,
                wall_ms,
                converged: r.sbl.converged,
                error: None,
            },
            Err(e) => SweepRow {
                variable: variable.name().into(),
                value: values[vi],
                seed,
                mae_db: f64::NAN,
                mae_no_gpr_db: f64::NAN,
                wc_sbl_v: f64::NAN,
                m_samples: 0,
                wall_ms,
                converged: false,
                error: Some(e.to_string()),
            },
        }
    });
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

/// Median of the finite entries; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}
