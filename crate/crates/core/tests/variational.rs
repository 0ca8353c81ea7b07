mod common;

use gibbs_core::expfamily::LatentFamily;
use gibbs_core::nets::{Architecture, Model};
use gibbs_core::rng::{self, Purpose};
use gibbs_core::variational::{
    cross_entropy_export, estimate_dvar, estimate_from_samples, full_cross_entropy, DvarMethod,
    GibbsView, LinearGaussian, DEFAULT_RIDGE, DEFAULT_SAMPLES,
};
use gibbs_core::{Error, Tensor};

const METHODS: [DvarMethod; 2] = [DvarMethod::MonteCarloLogMeanExp, DvarMethod::GaussianClosedForm];

#[test]
fn exact_fixture_values() {
    let m = LinearGaussian::new(1.0, 1.0);
    // c = ½ → ½ − ½ log 2.
    assert!((m.exact_dvar() - (0.5 - 0.5 * 2f64.ln())).abs() < 1e-15);
    assert!((m.exact_posterior_variance() - 0.5).abs() < 1e-15);
}

#[test]
fn linear_gaussian_within_three_standard_errors() {
    let model = LinearGaussian::new(0.8, 1.0);
    let exact = model.exact_dvar();
    for seed in 0..20 {
        let e = estimate_dvar(&model, &[0.7], DEFAULT_SAMPLES, DvarMethod::MonteCarloLogMeanExp, seed, 0)
            .unwrap();
        let z = (e.dvar - exact) / e.std_error;
        assert!(z.abs() < 3.0, "seed {seed}: {} vs {exact}, z {z}", e.dvar);
    }
}

#[test]
fn closed_form_targets_half_the_residual_variance() {
    // The residual is −c(ε² − 1), whose variance is 2c²; the closed form
    // reports half of it.
    let model = LinearGaussian::new(0.8, 1.0);
    let c = 0.8f64 * 0.8 / 2.0;
    for seed in 0..20 {
        let e = estimate_dvar(&model, &[0.7], DEFAULT_SAMPLES, DvarMethod::GaussianClosedForm, seed, 0)
            .unwrap();
        let z = (e.dvar - c * c) / e.std_error;
        assert!(z.abs() < 3.5, "seed {seed}: {} vs {}, z {z}", e.dvar, c * c);
    }
    assert!(c * c > model.exact_dvar());
}

#[test]
fn linear_residual_gives_zero_error() {
    // log-likelihood exactly linear in the statistics leaves no residual.
    let mut r = rng::stream(1, Purpose::Fixture, 0, 0);
    let z = rng::normals(&mut r, 200);
    let y: Vec<f64> = z.iter().map(|v| 1.5 - 2.0 * v).collect();
    let x: Vec<Vec<f64>> = z.iter().map(|v| vec![*v]).collect();
    for method in METHODS {
        let e = estimate_from_samples(&y, &x, method, DEFAULT_RIDGE).unwrap();
        assert!(e.dvar.abs() < 1e-9, "{method:?}: {}", e.dvar);
        assert!((e.intercept - 1.5).abs() < 1e-9);
        assert!((e.coefficients[0] + 2.0).abs() < 1e-9);
        assert!(e.warning.is_none());
    }
}

#[test]
fn residuals_are_centered() {
    let mut r = rng::stream(2, Purpose::Fixture, 0, 0);
    let z = rng::normals(&mut r, 300);
    let y: Vec<f64> = z.iter().map(|v| -v * v + 0.3 * v).collect();
    let x: Vec<Vec<f64>> = z.iter().map(|v| vec![*v]).collect();
    let e = estimate_from_samples(&y, &x, DvarMethod::MonteCarloLogMeanExp, DEFAULT_RIDGE).unwrap();
    assert!(e.residuals.iter().sum::<f64>().abs() < 1e-9);
    assert!(e.dvar > 0.0);
}

#[test]
fn collinear_regressors_warn() {
    let z: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
    let y: Vec<f64> = z.iter().map(|v| v.sin()).collect();
    let x: Vec<Vec<f64>> = z.iter().map(|v| vec![*v, 2.0 * v]).collect();
    let e = estimate_from_samples(&y, &x, DvarMethod::GaussianClosedForm, 0.0).unwrap();
    assert!(e.warning.is_some());
    assert!(e.dvar.is_finite());
}

#[test]
fn too_few_samples_rejected() {
    let model = LinearGaussian::new(1.0, 1.0);
    let r = estimate_dvar(&model, &[0.0], 10, DvarMethod::GaussianClosedForm, 0, 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn cross_entropy_recovers_the_marginal() {
    let model = LinearGaussian::new(0.8, 1.0);
    let xs = Tensor::new(vec![5, 1], vec![-1.0, -0.2, 0.0, 0.6, 1.4]).unwrap();
    let rows = full_cross_entropy(&model, &xs, 2000, DvarMethod::MonteCarloLogMeanExp, 3).unwrap();
    for r in &rows {
        let exact = model.exact_neg_log_q(xs.data()[r.index]);
        assert!((r.neg_log_q - exact).abs() < 4.0 * r.std_error + 1e-9, "{r:?} vs {exact}");
        assert!(r.bound >= r.neg_log_q - 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ce.csv");
    cross_entropy_export(&rows, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 6);
}

#[test]
fn estimator_runs_on_a_trained_network_view() {
    for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
        let arch = Architecture::vae(6, vec![5], 2, vec![4], family);
        let model = Model::new(arch, 1).unwrap();
        let view = GibbsView { model: &model, class: 0 };
        let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let e = estimate_dvar(&view, &x, 100, DvarMethod::MonteCarloLogMeanExp, 0, 0).unwrap();
        assert!(e.dvar.is_finite() && e.dvar >= -1e-9 && e.std_error.is_finite());
        assert_eq!(e.coefficients.len(), 4);
    }
}
