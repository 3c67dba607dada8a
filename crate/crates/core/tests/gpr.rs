use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rem_forge::channel::{self, matern32};
use rem_forge::gpr::{self, FitOptions, GpBounds, GpHyper, GpState};
use rem_forge::grid::{distance, GridSpec, Point3};
use rem_forge::{ChannelParams, Execution, ShadowModel, SourceField};

fn random_points(rng: &mut ChaCha8Rng, m: usize) -> Vec<Point3> {
    (0..m)
        .map(|_| [rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), rng.random_range(0.0..40.0)])
        .collect()
}

fn kernel_matrix(a: &[Point3], b: &[Point3], model: &ShadowModel) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| matern32(model, distance(&a[i], &b[j])))
}

/// Draws `y ~ N(0, C + σ_GP² I)` through an eigendecomposition.
fn draw(rng: &mut ChaCha8Rng, x: &[Point3], eta: &GpHyper) -> Vec<f64> {
    let model = ShadowModel { sigma2: eta.sigma2, rho: eta.rho };
    let mut k = kernel_matrix(x, x, &model);
    for i in 0..x.len() {
        k[(i, i)] += eta.sigma_gp2;
    }
    let eig = k.symmetric_eigen();
    let z = DVector::from_fn(x.len(), |i, _| eig.eigenvalues[i].max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal));
    (eig.eigenvectors * z).as_slice().to_vec()
}

fn state(x: Vec<Point3>, y: Vec<f64>, eta: GpHyper) -> GpState {
    GpState { eta, train_x: x, train_y: y, nlml: f64::NAN, start_nlml: Vec::new() }
}

#[test]
fn refit_recovers_generating_hyperparameters() {
    let truth = GpHyper { rho: 50.0, sigma2: 4.0, sigma_gp2: 0.01 };
    let bounds = GpBounds::for_grid(5.0, 120.0);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, 200);
        let y = draw(&mut rng, &x, &truth);
        let fit = gpr::fit(&x, &y, None, &bounds, &FitOptions::default(), Execution::Parallel).unwrap();
        let e = fit.eta;
        assert!(e.sigma2 / truth.sigma2 < 2.0 && truth.sigma2 / e.sigma2 < 2.0, "seed {seed}: {e:?}");
        assert!(e.rho / truth.rho < 2.0 && truth.rho / e.rho < 2.0, "seed {seed}: {e:?}");
    }
}

#[test]
fn fitted_point_is_stationary() {
    let truth = GpHyper { rho: 30.0, sigma2: 9.0, sigma_gp2: 0.5 };
    let bounds = GpBounds::for_grid(5.0, 120.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_points(&mut rng, 60);
    let y = draw(&mut rng, &x, &truth);
    let fit = gpr::fit(&x, &y, None, &bounds, &FitOptions::default(), Execution::Sequential).unwrap();
    let g = gpr::nlml_grad(&fit.eta, &x, &y).unwrap();
    // Chain rule to log space, where the optimizer works.
    let e = fit.eta.to_array();
    let norm = (0..3).map(|i| (g[i] * e[i]).powi(2)).sum::<f64>().sqrt();
    assert!(norm < 1e-4, "gradient norm {norm} at {:?}", fit.eta);
    for s in fit.start_nlml.iter().flatten() {
        assert!(fit.nlml <= s + 1e-12);
    }
}

#[test]
fn prediction_matches_generic_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eta = GpHyper { rho: 25.0, sigma2: 6.0, sigma_gp2: 0.3 };
    let model = ShadowModel { sigma2: eta.sigma2, rho: eta.rho };
    let x = random_points(&mut rng, 15);
    let xs = random_points(&mut rng, 7);
    let y = draw(&mut rng, &x, &eta);
    let pred = gpr::predict(&state(x.clone(), y.clone(), eta), &xs).unwrap();

    // Joint covariance of (y, f*) in one block matrix, conditioned by LU.
    let all: Vec<Point3> = x.iter().chain(&xs).copied().collect();
    let mut joint = kernel_matrix(&all, &all, &model);
    for i in 0..x.len() {
        joint[(i, i)] += eta.sigma_gp2;
    }
    let m = x.len();
    let kyy = joint.view((0, 0), (m, m)).clone_owned();
    let kys = joint.view((0, m), (m, xs.len())).clone_owned();
    let kss = joint.view((m, m), (xs.len(), xs.len())).clone_owned();
    let inv = kyy.lu().try_inverse().unwrap();
    let mean = kys.transpose() * &inv * DVector::from_vec(y);
    let cov = kss - kys.transpose() * &inv * &kys;
    for j in 0..xs.len() {
        assert!((pred.mean[j] - mean[j]).abs() < 1e-8, "mean {j}");
        assert!((pred.variance[j] - cov[(j, j)]).abs() < 1e-8, "variance {j}");
        assert!((pred.noisy_variance[j] - cov[(j, j)] - eta.sigma_gp2).abs() < 1e-8);
    }
}

#[test]
fn posterior_variance_never_exceeds_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let eta = GpHyper {
            rho: rng.random_range(5.0..100.0),
            sigma2: rng.random_range(0.5..20.0),
            sigma_gp2: rng.random_range(1e-4..2.0),
        };
        let x = random_points(&mut rng, 20);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
        let xs = random_points(&mut rng, 50);
        let p = gpr::predict(&state(x, y, eta), &xs).unwrap();
        for v in &p.noisy_variance {
            assert!(*v <= eta.sigma2 + eta.sigma_gp2 + 1e-9);
        }
        for v in &p.variance {
            assert!(*v >= 0.0 && *v <= eta.sigma2 + 1e-9);
        }
    }
}

#[test]
fn noise_free_prediction_interpolates() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_points(&mut rng, 12);
    let y: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..4.0)).collect();
    let eta = GpHyper { rho: 10.0, sigma2: 4.0, sigma_gp2: 1e-12 };
    let p = gpr::predict(&state(x.clone(), y.clone(), eta), &x).unwrap();
    for (a, b) in p.mean.iter().zip(&y) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn residuals_recover_planted_shadowing() {
    let g = GridSpec::new([6, 6, 2], [5.0, 5.0, 10.0], [0.0; 3]).unwrap();
    let params = ChannelParams { d_ref: 20.0, ..ChannelParams::default() };
    let phi = channel::build_dictionary(&g, &params, Execution::Parallel).unwrap();
    let sources = SourceField::random(&g, 2, 100.0, 4).unwrap();
    let shadow_db = channel::sample_shadow_db(&g, &ShadowModel::from_sigma_db(4.0, 30.0), 4, Execution::Parallel).unwrap();
    let truth = channel::synthesize_truth(&g, &phi, &sources, &channel::db_to_linear(&shadow_db)).unwrap();
    let idx: Vec<usize> = (0..g.len()).step_by(5).collect();
    let obs = channel::measure(&truth, &idx, 0.0, 4).unwrap();
    let sel = phi.select_rows(idx.iter());
    let xi = gpr::extract_shadow(&obs.t, &sources.omega, &sel).unwrap();
    for (k, &i) in idx.iter().enumerate() {
        assert!((xi[k] - shadow_db[i]).abs() < 1e-9, "voxel {i}");
    }
}

#[test]
fn batched_parallel_prediction_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_points(&mut rng, 30);
    let y: Vec<f64> = (0..30).map(|_| rng.random_range(-4.0..4.0)).collect();
    let st = state(x, y, GpHyper { rho: 20.0, sigma2: 4.0, sigma_gp2: 0.1 });
    let xs = random_points(&mut rng, 101);
    let a = gpr::predict_batched(&st, &xs, 16, Execution::Parallel).unwrap();
    let b = gpr::predict_batched(&st, &xs, 16, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}
