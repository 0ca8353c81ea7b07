//! Regression estimate of the variational error.
//!
//! For latents `z_s ~ p(z|x)` the reconstruction log-likelihood is regressed
//! on the posterior's sufficient statistics,
//! `log p(x|z) = α − λ·M(z) + ε(x, z)`, by ordinary least squares with an
//! intercept. The variational error is `log E[e^ε]`, estimated either by the
//! log-mean-exp of the re-centered residuals or, assuming Gaussian residuals,
//! by `Var(ε)/2`. Subtracting it from the bound gives `−log q(x)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::PROB_CLAMP;
use crate::error::{dim_err, Error, Result};
use crate::expfamily::{generative_error, LatentDensity, LatentFamily};
use crate::nets::Model;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 500;
pub const MIN_SAMPLES: usize = 50;
pub const DEFAULT_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvarMethod {
    MonteCarloLogMeanExp,
    GaussianClosedForm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarErrorEstimate {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Re-centered regression residuals, one per sample.
    pub residuals: Vec<f64>,
    pub dvar: f64,
    /// Delta-method Monte-Carlo standard error of `dvar`.
    pub std_error: f64,
    pub method: DvarMethod,
    /// Set when the normal equations needed more than the default ridge.
    pub warning: Option<String>,
}

/// OLS of `y` on `[1, X]` through ridged normal equations. Returns the
/// coefficients (intercept first) and an optional warning.
fn ols(y: &[f64], x: &[Vec<f64>], ridge: f64) -> Result<(Vec<f64>, Option<String>)> {
    let s = y.len();
    let k = x.first().map(Vec::len).unwrap_or(0) + 1;
    if x.len() != s {
        return dim_err(format!("{} regressor rows for {s} responses", x.len()));
    }
    if x.iter().any(|r| r.len() + 1 != k) {
        return dim_err("regressor rows differ in length");
    }
    let design = DMatrix::from_fn(s, k, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * yv;
    let scale = xtx.diagonal().amax().max(1.0);
    for r in [ridge, 1e-8 * scale, 1e-6 * scale, 1e-4 * scale] {
        let mut a = xtx.clone();
        for i in 0..k {
            a[(i, i)] += r;
        }
        if let Some(ch) = a.cholesky() {
            let min_pivot = ch.l_dirty().diagonal().amin();
            if min_pivot * min_pivot > 1e-14 * scale {
                let beta = ch.solve(&xty);
                let warning = (r != ridge).then(|| {
                    format!("regressor matrix is rank-deficient; solved with ridge {r:.1e}")
                });
                return Ok((beta.iter().copied().collect(), warning));
            }
        }
    }
    Err(Error::Numeric("regression normal equations are singular".into()))
}

/// Variational-error estimate from samples of `log p(x|z)` and the
/// regressors `M(z)`.
pub fn estimate_from_samples(
    log_rec: &[f64],
    regressors: &[Vec<f64>],
    method: DvarMethod,
    ridge: f64,
) -> Result<VarErrorEstimate> {
    let s = log_rec.len();
    if s < MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "need at least {MIN_SAMPLES} samples, got {s}"
        )));
    }
    if log_rec.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reconstruction log-likelihood".into()));
    }
    let (beta, warning) = ols(log_rec, regressors, ridge)?;
    let mut residuals: Vec<f64> = log_rec
        .iter()
        .zip(regressors)
        .map(|(y, m)| y - beta[0] - m.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mean = residuals.iter().sum::<f64>() / s as f64;
    residuals.iter_mut().for_each(|e| *e -= mean);

    let sf = s as f64;
    let (dvar, std_error) = match method {
        DvarMethod::MonteCarloLogMeanExp => {
            let max = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = residuals.iter().map(|e| (e - max).exp()).collect();
            let wm = w.iter().sum::<f64>() / sf;
            let wv = w.iter().map(|v| (v - wm).powi(2)).sum::<f64>() / (sf - 1.0);
            (max + wm.ln(), (wv / sf).sqrt() / wm)
        }
        DvarMethod::GaussianClosedForm => {
            let m2 = residuals.iter().map(|e| e * e).sum::<f64>() / sf;
            let m4 = residuals.iter().map(|e| e.powi(4)).sum::<f64>() / sf;
            (0.5 * m2, 0.5 * ((m4 - m2 * m2).max(0.0) / sf).sqrt())
        }
    };
    Ok(VarErrorEstimate {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        residuals,
        dvar,
        std_error,
        method,
        warning,
    })
}

/// A latent-variable model with an explicit posterior, as seen by the
/// estimator.
pub trait LatentModel {
    fn posterior(&self, x: &[f64]) -> Result<LatentDensity>;

    fn prior(&self) -> LatentDensity;

    /// `log p(x|z)` for every latent row.
    fn log_likelihoods(&self, x: &[f64], z: &[Vec<f64>]) -> Result<Vec<f64>>;

    /// Regressors for one latent sample.
    fn sufficient_stats(&self, posterior: &LatentDensity, z: &[f64]) -> Vec<f64> {
        default_stats(posterior, z)
    }
}

/// Gaussian: `(z, z²)` per coordinate. Laplacian: `(|z − μ|, |z|)` per
/// coordinate, the statistics of the posterior and of the centered prior.
pub fn default_stats(posterior: &LatentDensity, z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    for (&zj, &mj) in z.iter().zip(posterior.mean()) {
        match posterior.family() {
            LatentFamily::Gaussian => {
                out.push(zj);
                out.push(zj * zj);
            }
            LatentFamily::Laplacian => {
                out.push((zj - mj).abs());
                out.push(zj.abs());
            }
        }
    }
    out
}

/// Per-observation report of the full cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropyRow {
    pub index: usize,
    /// Generative plus reconstruction error.
    pub bound: f64,
    pub dvar: f64,
    /// `bound − dvar`.
    pub neg_log_q: f64,
    /// Combined standard error of `neg_log_q`.
    pub std_error: f64,
}

fn draw_latents(
    posterior: &LatentDensity,
    samples: usize,
    seed: u64,
    index: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::stream(seed, Purpose::Estimator, index, 0);
    (0..samples)
        .map(|_| posterior.sample_reparam(&rng::open_uniforms(&mut r, posterior.dim())))
        .collect()
}

/// Estimate for observation `x`, sampling from the stream of observation
/// `index` under `seed`.
pub fn estimate_dvar<M: LatentModel + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    method: DvarMethod,
    seed: u64,
    index: u64,
) -> Result<VarErrorEstimate> {
    Ok(cross_entropy_parts(model, x, samples, method, seed, index)?.0)
}

fn cross_entropy_parts<M: LatentModel + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    method: DvarMethod,
    seed: u64,
    index: u64,
) -> Result<(VarErrorEstimate, f64, f64)> {
    if samples < MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "need at least {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    let posterior = model.posterior(x)?;
    let z = draw_latents(&posterior, samples, seed, index)?;
    let log_rec = model.log_likelihoods(x, &z)?;
    let stats: Vec<Vec<f64>> = z.iter().map(|zs| model.sufficient_stats(&posterior, zs)).collect();
    let est = estimate_from_samples(&log_rec, &stats, method, DEFAULT_RIDGE)?;
    let sf = samples as f64;
    let mean_rec = log_rec.iter().sum::<f64>() / sf;
    let var_rec = log_rec.iter().map(|v| (v - mean_rec).powi(2)).sum::<f64>() / (sf - 1.0);
    let gen = generative_error(&posterior, &model.prior())?.value;
    Ok((est, gen - mean_rec, (var_rec / sf).sqrt()))
}

/// `−log q(x_μ) = B(x_μ) − D^var(x_μ)` for every row of `xs`.
pub fn full_cross_entropy<M: LatentModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    samples: usize,
    method: DvarMethod,
    seed: u64,
) -> Result<Vec<CrossEntropyRow>> {
    (0..xs.rows())
        .map(|i| {
            let (est, bound, bound_se) =
                cross_entropy_parts(model, xs.row(i), samples, method, seed, i as u64)?;
            Ok(CrossEntropyRow {
                index: i,
                bound,
                dvar: est.dvar,
                neg_log_q: bound - est.dvar,
                std_error: (bound_se * bound_se + est.std_error * est.std_error).sqrt(),
            })
        })
        .collect()
}

/// Writes `index,bound,dvar,neg_log_q,std_error` rows.
pub fn cross_entropy_export(rows: &[CrossEntropyRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,bound,dvar,neg_log_q,std_error")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.index, r.bound, r.dvar, r.neg_log_q, r.std_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One class decoder of a trained Gibbs machine.
pub struct GibbsView<'a> {
    pub model: &'a Model,
    pub class: usize,
}

impl LatentModel for GibbsView<'_> {
    fn posterior(&self, x: &[f64]) -> Result<LatentDensity> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        self.model
            .encode(&xt, self.class)?
            .density(self.model.arch().family, 0)
    }

    fn prior(&self) -> LatentDensity {
        let a = self.model.arch();
        LatentDensity::standard(a.family, a.latent_dim)
    }

    fn log_likelihoods(&self, x: &[f64], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let l = self.model.arch().latent_dim;
        let zt = Tensor::new(vec![z.len(), l], z.concat())?;
        let p = self.model.decode(&zt, self.class)?;
        Ok((0..z.len())
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(x)
                    .map(|(&q, &t)| {
                        let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        t * q.ln() + (1.0 - t) * (1.0 - q).ln()
                    })
                    .sum()
            })
            .collect())
    }
}

/// Conjugate linear-Gaussian model: prior `N(0,1)`, decoder
/// `x | z ~ N(a z, s²)`, posterior family `N(μ, 1)` with statistic `M(z) = z`.
///
/// At the optimal mean `μ* = E_q[z|x]` the variational error is
/// `KL(N(μ*,1) ‖ N(μ*, v))` with `v = 1/(1 + a²/s²)`, which equals
/// `c − ½ log(1 + 2c)` for `c = a²/(2s²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussian {
    pub a: f64,
    pub s: f64,
    /// Posterior mean used by the model; `None` selects the optimum.
    pub mean: Option<f64>,
}

impl LinearGaussian {
    pub fn new(a: f64, s: f64) -> Self {
        LinearGaussian { a, s, mean: None }
    }

    pub fn exact_posterior_variance(&self) -> f64 {
        1.0 / (1.0 + self.a * self.a / (self.s * self.s))
    }

    pub fn exact_posterior_mean(&self, x: f64) -> f64 {
        self.exact_posterior_variance() * self.a * x / (self.s * self.s)
    }

    /// `KL(N(μ*, 1) ‖ N(μ*, v))`.
    pub fn exact_dvar(&self) -> f64 {
        let c = self.a * self.a / (2.0 * self.s * self.s);
        c - 0.5 * (1.0 + 2.0 * c).ln()
    }

    /// `−log N(x; 0, a² + s²)`.
    pub fn exact_neg_log_q(&self, x: f64) -> f64 {
        let var = self.a * self.a + self.s * self.s;
        0.5 * (2.0 * std::f64::consts::PI * var).ln() + x * x / (2.0 * var)
    }
}

impl LatentModel for LinearGaussian {
    fn posterior(&self, x: &[f64]) -> Result<LatentDensity> {
        let [x] = x else {
            return dim_err("linear-Gaussian observations are scalars");
        };
        let mu = self.mean.unwrap_or_else(|| self.exact_posterior_mean(*x));
        LatentDensity::new(LatentFamily::Gaussian, vec![mu], vec![1.0])
    }

    fn prior(&self) -> LatentDensity {
        LatentDensity::standard(LatentFamily::Gaussian, 1)
    }

    fn log_likelihoods(&self, x: &[f64], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let [x] = x else {
            return dim_err("linear-Gaussian observations are scalars");
        };
        let norm = -0.5 * (2.0 * std::f64::consts::PI * self.s * self.s).ln();
        Ok(z
            .iter()
            .map(|zs| norm - (x - self.a * zs[0]).powi(2) / (2.0 * self.s * self.s))
            .collect())
    }

    fn sufficient_stats(&self, _posterior: &LatentDensity, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_log_likelihood_has_no_variational_error() {
        let m: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 * 0.1, (i as f64).sin()]).collect();
        let y: Vec<f64> = m.iter().map(|r| 2.0 - 0.5 * r[0] + 3.0 * r[1]).collect();
        let e = estimate_from_samples(&y, &m, DvarMethod::MonteCarloLogMeanExp, DEFAULT_RIDGE).unwrap();
        assert!(e.dvar.abs() < 1e-12);
        assert!((e.intercept - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_log_likelihood_has_no_variational_error() {
        let m: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64).cos()]).collect();
        let y = vec![-3.0; 60];
        for method in [DvarMethod::MonteCarloLogMeanExp, DvarMethod::GaussianClosedForm] {
            let e = estimate_from_samples(&y, &m, method, DEFAULT_RIDGE).unwrap();
            assert!(e.dvar.abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let m = vec![vec![0.0]; 10];
        assert!(estimate_from_samples(&[0.0; 10], &m, DvarMethod::MonteCarloLogMeanExp, 0.0).is_err());
    }

    #[test]
    fn duplicated_regressor_is_regularized() {
        let m: Vec<Vec<f64>> = (0..80).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..80).map(|i| (i as f64 * 0.3).sin()).collect();
        let e = estimate_from_samples(&y, &m, DvarMethod::MonteCarloLogMeanExp, DEFAULT_RIDGE).unwrap();
        assert!(e.warning.is_some());
        assert!(e.dvar.is_finite());
    }

    #[test]
    fn exact_fixture_values() {
        let f = LinearGaussian::new(1.0, 1.0);
        assert!((f.exact_posterior_variance() - 0.5).abs() < 1e-15);
        assert!((f.exact_dvar() - (0.5 - 0.5 * 2f64.ln())).abs() < 1e-15);
    }
}
