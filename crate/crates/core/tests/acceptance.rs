//! Acceptance gates. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero when any of them fails.
//!
//! Scenario defaults (16×16×4 grid, K=3, σ=4 dB, ρ=50 m) come from
//! `ExperimentConfig::default()`; criteria that need other settings apply
//! them as overrides so the exact setting shows up in the output.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rem_forge::config::ExperimentConfig;
use rem_forge::gpr::{self, GpHyper};
use rem_forge::pipeline::{self, Prepared};
use rem_forge::sampling::{self, Dictionary};
use rem_forge::sbl::{self, SblConfig};
use rem_forge::{Execution, SweepRow, SweepVariable};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str("", &o).expect("acceptance config")
}

fn woodbury() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=30);
        let phi = DMatrix::from_fn(m, n, |_, _| gauss(&mut rng));
        let t: Vec<f64> = (0..m).map(|_| gauss(&mut rng)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| log_uniform(&mut rng, 0.1, 10.0)).collect();
        let beta = log_uniform(&mut rng, 0.1, 100.0);

        let post = sbl::posterior(&phi, &t, &alpha, beta).unwrap();
        // Direct form: Σ = (A + βΦᵀΦ)⁻¹, μ = βΣΦᵀt.
        let mut prec = phi.transpose() * &phi * beta;
        for (i, a) in alpha.iter().enumerate() {
            prec[(i, i)] += a;
        }
        let sigma = prec.try_inverse().unwrap();
        let mu = &sigma * phi.transpose() * DVector::from_column_slice(&t) * beta;
        let mu_err = (&post.mu - &mu).norm() / mu.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel_err(&post.sigma, &sigma)).max(mu_err);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "woodbury equivalence",
        worst <= 1e-8 && secs < 10.0,
        format!("100 instances, worst rel err {worst:.2e} (tol 1e-8), {secs:.2} s (limit 10 s)"),
    )
}

fn evidence_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = SblConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let m = rng.random_range(1..=30);
        let phi = DMatrix::from_fn(m, n, |_, _| gauss(&mut rng));
        let tv = DVector::from_fn(m, |_, _| gauss(&mut rng));
        let alpha: Vec<f64> = (0..n).map(|_| log_uniform(&mut rng, 0.1, 10.0)).collect();
        let beta = log_uniform(&mut rng, 0.1, 100.0);

        // (μ, Σ) form: ½M log β + ½Σ log α + ½ log|Σ| − ½β tᵀ(t − Φμ).
        let mut prec = phi.transpose() * &phi * beta;
        for (i, a) in alpha.iter().enumerate() {
            prec[(i, i)] += a;
        }
        let sigma = prec.clone().try_inverse().unwrap();
        let mu = &sigma * phi.transpose() * &tv * beta;
        let log_det_sigma = -prec.determinant().ln();
        let via_mu = 0.5 * m as f64 * beta.ln() + 0.5 * alpha.iter().map(|a| a.ln()).sum::<f64>() + 0.5 * log_det_sigma
            - 0.5 * beta * tv.dot(&(&tv - &phi * &mu));

        let via_lambda = sbl::evidence(tv.as_slice(), &phi, &alpha, beta, &cfg).unwrap();
        worst = worst.max((via_mu - via_lambda).abs() / via_lambda.abs().max(1.0));
    }
    outcome(
        "evidence (mu, Sigma) form equals Lambda form",
        worst <= 1e-8,
        format!("50 instances, worst rel err {worst:.2e} (tol 1e-8)"),
    )
}

fn gp_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(3..=25);
        let x: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), rng.random_range(0.0..40.0)])
            .collect();
        let y: Vec<f64> = (0..m).map(|_| 3.0 * gauss(&mut rng)).collect();
        let eta = [
            log_uniform(&mut rng, 5.0, 100.0),
            log_uniform(&mut rng, 0.5, 30.0),
            log_uniform(&mut rng, 0.05, 5.0),
        ];
        let g = gpr::nlml_grad(&GpHyper::from_array(eta), &x, &y).unwrap();
        let mut fd = [0.0; 3];
        for i in 0..3 {
            let h = 1e-5 * eta[i];
            let mut up = eta;
            let mut dn = eta;
            up[i] += h;
            dn[i] -= h;
            let fu = gpr::nlml(&GpHyper::from_array(up), &x, &y).unwrap();
            let fl = gpr::nlml(&GpHyper::from_array(dn), &x, &y).unwrap();
            fd[i] = (fu - fl) / (2.0 * h);
        }
        let num: f64 = (0..3).map(|i| (g[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den.max(1e-12));
    }
    outcome(
        "GP NLML gradient matches central differences",
        worst <= 1e-5,
        format!("100 draws, worst rel err {worst:.2e} (tol 1e-5)"),
    )
}

/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoid rule, which
/// converges geometrically for this integrand.
fn bessel_k(nu: f64, x: f64) -> f64 {
    let h = 1e-3;
    let f = |t: f64| (-x * t.cosh()).exp() * (nu * t).cosh();
    let mut sum = 0.5 * f(0.0);
    let mut t = h;
    loop {
        let v = f(t);
        sum += v;
        if v < 1e-300 || (t > 1.0 && v < sum * 1e-18) {
            break;
        }
        t += h;
    }
    sum * h
}

fn matern_identity() -> Outcome {
    let g: f64 = 1.5;
    let gamma_g = std::f64::consts::PI.sqrt() / 2.0;
    let (sigma2, rho) = (16.0, 50.0);
    let model = rem_forge::ShadowModel { sigma2, rho };
    let mut worst: f64 = 0.0;
    for k in 0..=60 {
        let d = rho * 10f64.powf(-3.0 + 4.0 * k as f64 / 60.0);
        let s = (2.0 * g).sqrt() * d / rho;
        let general = sigma2 * 2f64.powf(1.0 - g) / gamma_g * s.powf(g) * bessel_k(g, s);
        let closed = rem_forge::channel::matern32(&model, d);
        worst = worst.max((closed - general).abs() / general.abs());
    }
    outcome(
        "Matern 3/2 closed form equals Bessel form",
        worst <= 1e-10,
        format!("61 log-spaced distances in [1e-3, 10]·rho, worst rel err {worst:.2e} (tol 1e-10)"),
    )
}

fn toy_dictionary(seed: u64) -> Dictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..1.0));
    let svd = nalgebra::SVD::new(phi.clone(), false, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let v_t = svd.v_t.unwrap();
    let basis = DMatrix::from_fn(6, 3, |r, c| v_t[(order[c], r)]);
    Dictionary {
        phi_p: &phi * &basis,
        phi,
        basis,
        n_components: 3,
        per_thr: 0.9,
        singular_values: order.iter().map(|&i| sv[i]).collect(),
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut with: Vec<Vec<usize>> = combinations(n - 1, k - 1);
    for c in &mut with {
        c.push(n - 1);
    }
    with.extend(combinations(n - 1, k));
    with
}

fn greedy_quality() -> Outcome {
    let mut worst_ratio = f64::INFINITY;
    let mut deterministic = true;
    for seed in 0..10 {
        let dict = toy_dictionary(seed);
        for m in 3..=5 {
            let a = sampling::greedy_fixed(&dict, m, Execution::Parallel).unwrap();
            let b = sampling::greedy_fixed(&dict, m, Execution::Sequential).unwrap();
            let c = sampling::greedy_fixed(&dict, m, Execution::Parallel).unwrap();
            let bits = |p: &sampling::MeasurementPlan| {
                (p.selected.clone(), p.lambda_min_history.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            deterministic &= bits(&a) == bits(&b) && bits(&a) == bits(&c);
            let achieved = sampling::lambda_min_reduced(&dict, &a.selected);
            let best = combinations(6, m)
                .iter()
                .map(|s| sampling::lambda_min_reduced(&dict, s))
                .fold(f64::NEG_INFINITY, f64::max);
            worst_ratio = worst_ratio.min(achieved / best);
        }
    }
    outcome(
        "greedy lambda_min versus exhaustive optimum (N=6, n=3)",
        worst_ratio >= 0.5 && deterministic,
        format!(
            "10 dictionaries x M in 3..=5, worst ratio {worst_ratio:.4} (floor 0.5), bitwise deterministic: {deterministic}"
        ),
    )
}

fn snlo_variance_ordering() -> Outcome {
    let cfg = config(&["sampling.r=0.1"]);
    let prep = Prepared::new(&cfg, &[], Execution::Parallel).unwrap();
    let snlo = pipeline::make_plan(&prep, &cfg, 0, Execution::Parallel).unwrap();
    let v_snlo = sampling::wc_sbl_v(&snlo.select_rows(&prep.phi));
    let mut wins = 0;
    let mut worst_random = f64::INFINITY;
    for seed in 0..20 {
        let plan = sampling::random_plan(prep.grid.len(), snlo.m, seed).unwrap();
        let v = sampling::wc_sbl_v(&plan.select_rows(&prep.phi));
        worst_random = worst_random.min(v);
        if v_snlo <= v {
            wins += 1;
        }
    }
    outcome(
        "plan variance: WC-SBL-V(SNLO) <= WC-SBL-V(random)",
        wins >= 19,
        format!("M = {}, {wins}/20 trials (need 19), SNLO {v_snlo:.4e}, best random {worst_random:.4e}", snlo.m),
    )
}

fn rows_at(rows: &[SweepRow], value: f64) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.value == value).collect()
}

struct RateSweep {
    rates: Vec<f64>,
    snlo: Vec<SweepRow>,
    random: Vec<SweepRow>,
    secs: f64,
}

fn rate_sweep() -> RateSweep {
    let rates = vec![0.02, 0.05, 0.10, 0.20];
    let seeds: Vec<u64> = (0..20).collect();
    let start = Instant::now();
    let run = |method: &str| {
        let cfg = config(&["noise.snr_db=20.0", &format!("sampling.method=\"{method}\"")]);
        pipeline::sweep(&cfg, SweepVariable::R, &rates, &seeds, Execution::Parallel).unwrap()
    };
    let snlo = run("snlo");
    let random = run("random");
    RateSweep { rates, snlo, random, secs: start.elapsed().as_secs_f64() }
}

fn rate_trend(data: &RateSweep) -> Outcome {
    let medians: Vec<f64> = data
        .rates
        .iter()
        .map(|&r| {
            let v: Vec<f64> = rows_at(&data.snlo, r).iter().filter(|x| x.seed < 10).map(|x| x.mae_db).collect();
            pipeline::median(&v)
        })
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let snlo = rows_at(&data.snlo, 0.05);
    let random = rows_at(&data.random, 0.05);
    let wins = snlo
        .iter()
        .filter(|a| {
            let b = random.iter().find(|b| b.seed == a.seed).unwrap();
            a.mae_db <= b.mae_db
        })
        .count();
    let failed = data.snlo.iter().chain(&data.random).filter(|r| r.error.is_some()).count();
    let med: Vec<String> = medians.iter().map(|m| format!("{m:.3}")).collect();
    outcome(
        "MAE vs rate: median MAE non-increasing in r, SNLO beats random at r=0.05",
        monotone && wins >= 15 && data.secs < 300.0 && failed == 0,
        format!(
            "SNR 20 dB, medians over 10 seeds at r={:?}: [{}] dB; SNLO <= random {wins}/20 (need 15); failed cells {failed}; sweep {:.1} s (limit 300 s)",
            data.rates,
            med.join(", "),
            data.secs
        ),
    )
}

fn shadow_ablation(data: &RateSweep) -> Outcome {
    let rows = rows_at(&data.snlo, 0.10);
    let wins = rows.iter().filter(|r| r.mae_db < r.mae_no_gpr_db).count();
    let with: Vec<f64> = rows.iter().map(|r| r.mae_db).collect();
    let without: Vec<f64> = rows.iter().map(|r| r.mae_no_gpr_db).collect();
    outcome(
        "shadowing ablation: GPR layer beats shadow = 1",
        wins >= 18,
        format!(
            "sigma 4 dB, SNR 20 dB, r=0.10, SNLO: {wins}/20 seeds (need 18), median MAE {:.3} dB vs {:.3} dB",
            pipeline::median(&with),
            pipeline::median(&without)
        ),
    )
}

fn model_exact() -> Outcome {
    let cfg = config(&["shadow.sigma_db=0.0", "noise.sigma0_2=0.0", "sources.count=1"]);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let r = pipeline::run_once(&cfg, seed, Execution::Parallel).unwrap();
        worst = worst.max(r.mae_db);
    }
    outcome(
        "model-exact regime: MAE < 1e-6 dB",
        worst < 1e-6,
        format!("sigma = 0, sigma0^2 = 0, K = 1, r = 0.10, 5 seeds, worst MAE {worst:.3e} dB"),
    )
}

fn per_thr_trend() -> Outcome {
    let thresholds = [0.8, 0.9, 0.99, 1.0];
    let cfg = config(&["sampling.r=0.1"]);
    let exec = Execution::Parallel;
    let prep = Prepared::new(&cfg, &thresholds, exec).unwrap();
    let mut values = Vec::new();
    let mut comps = Vec::new();
    let mut plan_full = None;
    for &p in &thresholds {
        let c = SweepVariable::PerThr.apply(&cfg, p);
        // The SNLO plan does not depend on the run seed, so the median over
        // seeds is the single-plan value.
        let plan = pipeline::make_plan(&prep, &c, 0, exec).unwrap();
        values.push(sampling::wc_sbl_v(&plan.select_rows(&prep.phi)));
        comps.push(plan.n_components);
        if p == 1.0 {
            plan_full = Some(plan);
        }
    }
    let plan_full = plan_full.unwrap();
    let unreduced = Dictionary::unreduced((*prep.phi).clone());
    let plan_raw = sampling::greedy_fixed(&unreduced, plan_full.m, exec).unwrap();
    let identical = plan_raw.selected == plan_full.selected;
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = values.iter().map(|v| format!("{v:.5e}")).collect();
    outcome(
        "PCA threshold: WC-SBL-V non-increasing in per_thr; per_thr=1 plan equals unreduced plan",
        monotone && identical,
        format!(
            "M = {}, per_thr {:?} -> n {:?}, WC-SBL-V [{}]; non-increasing: {monotone}; identical plan: {identical}",
            plan_full.m,
            thresholds,
            comps,
            shown.join(", ")
        ),
    )
}

fn main() {
    let start = Instant::now();
    let rates = rate_sweep();
    let outcomes = vec![
        woodbury(),
        evidence_forms(),
        gp_gradient(),
        matern_identity(),
        greedy_quality(),
        snlo_variance_ordering(),
        rate_trend(&rates),
        shadow_ablation(&rates),
        model_exact(),
        per_thr_trend(),
    ];
    println!();
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!(
        "\nacceptance: {} passed, {failed} failed ({:.1} s)",
        outcomes.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
