//! Exponential (Gibbs) densities used as latent conditionals and priors.
//!
//! A latent density is a product of independent one-dimensional coordinates,
//! each parametrized macroscopically by a mean `μ` and a standard deviation
//! `σ`. For the Laplacian the scale parameter is `b = σ·√½`, so `σ` is the
//! standard deviation in both families and `(μ, σ) = (0, 1)` is the
//! standardized prior.
//!
//! The Laplacian is not itself an exponential family, but on each side of its
//! mean it is one; its divergences and sampling use the exact closed forms.

mod natural;

pub use natural::{
    legendre_check, natural_divergence, pythagorean_check, solve_legendre, DiscreteFamily,
    GaussianFamily, GibbsFamily, LegendreCheck, LegendrePoint, PythagoreanTriple,
};

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, Stream};

/// Laplace scale of a unit-variance Laplacian, `√0.5`.
pub const LAPLACE_UNIT_SCALE: f64 = FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFamily {
    Gaussian,
    Laplacian,
}

impl fmt::Display for LatentFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentFamily::Gaussian => "gaussian",
            LatentFamily::Laplacian => "laplacian",
        })
    }
}

impl FromStr for LatentFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(LatentFamily::Gaussian),
            "laplacian" | "laplace" => Ok(LatentFamily::Laplacian),
            other => Err(Error::Contract(format!("unknown latent family '{other}'"))),
        }
    }
}

/// All families a density may belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Laplacian,
    DiscreteTabular,
}

impl From<LatentFamily> for Family {
    fn from(f: LatentFamily) -> Self {
        match f {
            LatentFamily::Gaussian => Family::Gaussian,
            LatentFamily::Laplacian => Family::Laplacian,
        }
    }
}

// ---------------------------------------------------------------------------
// One-dimensional closed forms
// ---------------------------------------------------------------------------

/// Log-density of one coordinate.
pub fn coordinate_log_density(family: LatentFamily, mean: f64, sd: f64, z: f64) -> f64 {
    match family {
        LatentFamily::Gaussian => {
            let u = (z - mean) / sd;
            -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * u * u
        }
        LatentFamily::Laplacian => {
            let b = sd * LAPLACE_UNIT_SCALE;
            -(z - mean).abs() / b - (2.0 * b).ln()
        }
    }
}

pub fn coordinate_cdf(family: LatentFamily, mean: f64, sd: f64, z: f64) -> f64 {
    match family {
        LatentFamily::Gaussian => 0.5 * statrs::function::erf::erfc(-(z - mean) / (sd * SQRT_2)),
        LatentFamily::Laplacian => {
            let b = sd * LAPLACE_UNIT_SCALE;
            if z < mean {
                0.5 * ((z - mean) / b).exp()
            } else {
                1.0 - 0.5 * (-(z - mean) / b).exp()
            }
        }
    }
}

/// Maps a uniform `u ∈ (0,1)` to a zero-mean, unit-variance draw of the family.
///
/// Gaussian: `Φ⁻¹(u)`. Laplacian: `−√½·sign(u−½)·ln(1−2|u−½|)`.
pub fn standard_noise(family: LatentFamily, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "reparameterization noise must lie in (0,1), got {u}"
        )));
    }
    Ok(match family {
        LatentFamily::Gaussian => {
            let n = Normal::standard();
            let z = n.inverse_cdf(u);
            // One Newton step against the CDF sharpens the library's inverse.
            let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
            if pdf > 0.0 {
                z - (n.cdf(z) - u) / pdf
            } else {
                z
            }
        }
        LatentFamily::Laplacian => {
            let c = u - 0.5;
            -LAPLACE_UNIT_SCALE * c.signum() * (1.0 - 2.0 * c.abs()).ln()
        }
    })
}

/// `KL(post ‖ prior)` for one coordinate of matching families.
pub fn coordinate_kl(
    family: LatentFamily,
    post_mean: f64,
    post_sd: f64,
    prior_mean: f64,
    prior_sd: f64,
) -> f64 {
    let delta = post_mean - prior_mean;
    let ratio = post_sd / prior_sd;
    match family {
        LatentFamily::Gaussian => 0.5 * (ratio * ratio + (delta / prior_sd).powi(2) - 1.0) - ratio.ln(),
        LatentFamily::Laplacian => {
            let b_post = post_sd * LAPLACE_UNIT_SCALE;
            let b_prior = prior_sd * LAPLACE_UNIT_SCALE;
            let a = delta.abs();
            -ratio.ln() + a / b_prior + ratio * (-a / b_post).exp() - 1.0
        }
    }
}

/// Generative error of one coordinate against the standardized prior and its
/// gradient with respect to `(μ, log σ)`.
///
/// Gaussian: `(μ² + σ² − 1)/2 − log σ`.
/// Laplacian: `−log σ + |μ|/√½ + σ·exp(−|μ|/(σ√½)) − 1`.
pub fn standardized_kl_with_grad(family: LatentFamily, mean: f64, log_sd: f64) -> (f64, f64, f64) {
    let sd = log_sd.exp();
    match family {
        LatentFamily::Gaussian => {
            let value = 0.5 * (mean * mean + sd * sd - 1.0) - log_sd;
            (value, mean, sd * sd - 1.0)
        }
        LatentFamily::Laplacian => {
            let a = mean.abs() * SQRT_2;
            let e = (-a / sd).exp();
            let value = -log_sd + a + sd * e - 1.0;
            let d_mean = mean.signum() * SQRT_2 * (1.0 - e);
            let d_log_sd = -1.0 + e * (sd + a);
            (value, d_mean, d_log_sd)
        }
    }
}

// ---------------------------------------------------------------------------
// Product densities over latent coordinates
// ---------------------------------------------------------------------------

/// Independent-coordinate Gaussian or Laplacian density.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDensity {
    family: LatentFamily,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl LatentDensity {
    pub fn new(family: LatentFamily, mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != sd.len() {
            return dim_err(format!(
                "mean has {} coordinates, scale has {}",
                mean.len(),
                sd.len()
            ));
        }
        if let Some(s) = sd.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("scale must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("mean must be finite".into()));
        }
        Ok(LatentDensity { family, mean, sd })
    }

    /// Laplacian from its Laplace scale `b` rather than its standard deviation.
    pub fn laplace_from_scale(mean: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let sd = b.into_iter().map(|b| b / LAPLACE_UNIT_SCALE).collect();
        Self::new(LatentFamily::Laplacian, mean, sd)
    }

    /// The standardized member: zero mean, unit variance.
    pub fn standard(family: LatentFamily, dim: usize) -> Self {
        LatentDensity {
            family,
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    pub fn family(&self) -> LatentFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return dim_err(format!("expected {} coordinates, got {n}", self.dim()));
        }
        Ok(())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        Ok(z
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(&z, (&m, &s))| coordinate_log_density(self.family, m, s, z))
            .sum())
    }

    /// Deterministic transform of uniform noise into a draw of this density;
    /// differentiable in `(μ, σ)`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(noise.len())?;
        noise
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(&u, (&m, &s))| Ok(m + s * standard_noise(self.family, u)?))
            .collect()
    }

    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let u = rng::open_uniforms(rng, self.dim());
        self.sample_reparam(&u).expect("open uniforms are in range")
    }
}

/// Closed-form generative error, summed over coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeErrorResult {
    pub value: f64,
    pub per_coordinate: Vec<f64>,
}

/// `D(posterior ‖ prior)` in closed form for two densities of one family.
pub fn generative_error(
    posterior: &LatentDensity,
    prior: &LatentDensity,
) -> Result<GenerativeErrorResult> {
    if posterior.family != prior.family {
        return Err(Error::Unsupported(format!(
            "no closed-form divergence between {} and {}",
            posterior.family, prior.family
        )));
    }
    prior.check_dim(posterior.dim())?;
    let per_coordinate: Vec<f64> = (0..posterior.dim())
        .map(|j| {
            // Round-off can leave -1e-17 at the minimum.
            coordinate_kl(
                posterior.family,
                posterior.mean[j],
                posterior.sd[j],
                prior.mean[j],
                prior.sd[j],
            )
            .max(0.0)
        })
        .collect();
    Ok(GenerativeErrorResult {
        value: per_coordinate.iter().sum(),
        per_coordinate,
    })
}

// ---------------------------------------------------------------------------
// Discrete tabular members and the umbrella type
// ---------------------------------------------------------------------------

/// `p_λ(k) = p(k)·exp(F(λ) − λ·M(k))` over a finite state space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDensity {
    family: DiscreteFamily,
    lambda: Vec<f64>,
}

impl DiscreteDensity {
    pub fn new(family: DiscreteFamily, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != family.num_params() {
            return dim_err(format!(
                "family has {} statistics, got {} natural parameters",
                family.num_params(),
                lambda.len()
            ));
        }
        Ok(DiscreteDensity { family, lambda })
    }

    pub fn family(&self) -> &DiscreteFamily {
        &self.family
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        self.family.probabilities(&self.lambda)
    }

    pub fn log_density(&self, state: usize) -> Result<f64> {
        let p = self.probabilities()?;
        p.get(state)
            .map(|p| p.ln())
            .ok_or_else(|| Error::Dimension(format!("state {state} out of range")))
    }
}

/// Any member the toolkit can evaluate.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpFamilyDensity {
    Latent(LatentDensity),
    Discrete(DiscreteDensity),
}

impl ExpFamilyDensity {
    pub fn family(&self) -> Family {
        match self {
            ExpFamilyDensity::Latent(d) => d.family().into(),
            ExpFamilyDensity::Discrete(_) => Family::DiscreteTabular,
        }
    }

    /// Log-density at `z`. Discrete members take a one-element state index.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        match self {
            ExpFamilyDensity::Latent(d) => d.log_density(z),
            ExpFamilyDensity::Discrete(d) => match z {
                [k] if *k >= 0.0 && k.fract() == 0.0 => d.log_density(*k as usize),
                _ => dim_err("discrete log-density takes one integer state"),
            },
        }
    }

    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        match self {
            ExpFamilyDensity::Latent(d) => d.sample_reparam(noise),
            ExpFamilyDensity::Discrete(_) => Err(Error::Unsupported(
                "reparameterized sampling of a discrete density".into(),
            )),
        }
    }
}

/// Generative error between two members of any supported family.
pub fn density_generative_error(
    posterior: &ExpFamilyDensity,
    prior: &ExpFamilyDensity,
) -> Result<GenerativeErrorResult> {
    match (posterior, prior) {
        (ExpFamilyDensity::Latent(a), ExpFamilyDensity::Latent(b)) => generative_error(a, b),
        (ExpFamilyDensity::Discrete(a), ExpFamilyDensity::Discrete(b)) => {
            let p = a.probabilities()?;
            let q = b.probabilities()?;
            let value = discrete_kl(&p, &q)?;
            Ok(GenerativeErrorResult {
                value,
                per_coordinate: vec![value],
            })
        }
        _ => Err(Error::Unsupported(format!(
            "no closed-form divergence between {:?} and {:?}",
            posterior.family(),
            prior.family()
        ))),
    }
}

/// Exact `KL(f ‖ g)` of two probability vectors; `0·log 0 = 0`.
pub fn discrete_kl(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return dim_err("probability vectors differ in length");
    }
    let mut s = 0.0;
    for (&a, &b) in f.iter().zip(g) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::Domain("KL is infinite: support not contained".into()));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

// ---------------------------------------------------------------------------
// Mixtures
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    components: Vec<LatentDensity>,
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, components: Vec<LatentDensity>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return dim_err("mixture needs one weight per component");
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Domain("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return dim_err("mixture components differ in dimension");
        }
        Ok(MixtureDensity {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[LatentDensity] {
        &self.components
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(c, w)| Ok(w.ln() + c.log_density(z)?))
            .collect::<Result<_>>()?;
        Ok(log_sum_exp(&logs))
    }

    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let u = rng::open_uniforms(rng, 1)[0];
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample(rng)
    }
}

/// `Σ_s ω_s D(post_s ‖ prior_s)`, which the log-sum inequality guarantees to
/// dominate the divergence between the two mixtures.
pub fn mixture_generative_error_bound(
    posterior: &MixtureDensity,
    prior: &MixtureDensity,
) -> Result<f64> {
    if posterior.weights.len() != prior.weights.len()
        || posterior
            .weights
            .iter()
            .zip(&prior.weights)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::Contract(
            "mixture bound needs identical weight vectors".into(),
        ));
    }
    posterior
        .components
        .iter()
        .zip(&prior.components)
        .zip(&posterior.weights)
        .map(|((p, q), w)| Ok(w * generative_error(p, q)?.value))
        .sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log 2`, handy for reconstruction-error reference values.
pub const LOG_TWO: f64 = LN_2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn standard_normal_mode() {
        let d = LatentDensity::standard(LatentFamily::Gaussian, 1);
        let v = d.log_density(&[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn unit_laplacian_mode() {
        let d = LatentDensity::laplace_from_scale(vec![0.0], vec![0.5f64.sqrt()]).unwrap();
        let v = d.log_density(&[0.0]).unwrap();
        assert!((v + (2.0 * 0.5f64.sqrt()).ln()).abs() < 1e-15);
        assert!((v + 0.346_573_590_279_972_6).abs() < 1e-12);
    }

    #[test]
    fn median_noise_returns_mean() {
        for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
            let d = LatentDensity::new(family, vec![1.5], vec![2.0]).unwrap();
            assert!((d.sample_reparam(&[0.5]).unwrap()[0] - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_at_the_edges_is_rejected() {
        let d = LatentDensity::standard(LatentFamily::Laplacian, 1);
        assert!(d.sample_reparam(&[0.0]).is_err());
        assert!(d.sample_reparam(&[1.0]).is_err());
    }

    #[test]
    fn noise_inverts_the_cdf() {
        for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
            for u in [1e-6, 0.01, 0.3, 0.5, 0.77, 0.999] {
                let z = standard_noise(family, u).unwrap();
                assert!((coordinate_cdf(family, 0.0, 1.0, z) - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_densities_have_zero_error() {
        for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
            let p = LatentDensity::standard(family, 3);
            let r = generative_error(&p, &p).unwrap();
            assert_eq!(r.value, 0.0);
        }
    }

    #[test]
    fn laplacian_unit_offset() {
        let post = LatentDensity::new(LatentFamily::Laplacian, vec![1.0], vec![1.0]).unwrap();
        let prior = LatentDensity::standard(LatentFamily::Laplacian, 1);
        let v = generative_error(&post, &prior).unwrap().value;
        let expected = 1.0 / 0.5f64.sqrt() + (-1.0 / 0.5f64.sqrt()).exp() - 1.0;
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_family_is_unsupported() {
        let a = LatentDensity::standard(LatentFamily::Gaussian, 1);
        let b = LatentDensity::standard(LatentFamily::Laplacian, 1);
        assert!(matches!(
            generative_error(&a, &b),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn standardized_kl_matches_general_form() {
        for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
            for (m, s) in [(0.3, 0.5), (-2.0, 1.7), (0.0, 1.0)] {
                let (v, _, _) = standardized_kl_with_grad(family, m, f64::ln(s));
                assert!((v - coordinate_kl(family, m, s, 0.0, 1.0)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn standardized_kl_gradient_matches_differences() {
        let h = 1e-6;
        for family in [LatentFamily::Gaussian, LatentFamily::Laplacian] {
            for (m, ls) in [(0.4, -0.3), (-1.2, 0.5), (2.0, 0.1)] {
                let (_, dm, dl) = standardized_kl_with_grad(family, m, ls);
                let f = |m: f64, ls: f64| standardized_kl_with_grad(family, m, ls).0;
                let fd_m = (f(m + h, ls) - f(m - h, ls)) / (2.0 * h);
                let fd_l = (f(m, ls + h) - f(m, ls - h)) / (2.0 * h);
                assert!((dm - fd_m).abs() < 1e-7, "{family} dm {dm} vs {fd_m}");
                assert!((dl - fd_l).abs() < 1e-7, "{family} dl {dl} vs {fd_l}");
            }
        }
    }

    #[test]
    fn one_component_mixture_bound_is_plain_error() {
        let post = LatentDensity::new(LatentFamily::Laplacian, vec![0.5, -1.0], vec![0.7, 1.3])
            .unwrap();
        let prior = LatentDensity::standard(LatentFamily::Laplacian, 2);
        let a = MixtureDensity::new(vec![1.0], vec![post.clone()]).unwrap();
        let b = MixtureDensity::new(vec![1.0], vec![prior.clone()]).unwrap();
        assert_eq!(
            mixture_generative_error_bound(&a, &b).unwrap(),
            generative_error(&post, &prior).unwrap().value
        );
    }

    #[test]
    fn mixture_of_priors_has_zero_bound() {
        let prior = LatentDensity::standard(LatentFamily::Laplacian, 2);
        let m = MixtureDensity::new(vec![0.2, 0.8], vec![prior.clone(), prior]).unwrap();
        assert_eq!(mixture_generative_error_bound(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn mixture_bound_rejects_different_weights() {
        let prior = LatentDensity::standard(LatentFamily::Gaussian, 1);
        let a = MixtureDensity::new(vec![0.5, 0.5], vec![prior.clone(), prior.clone()]).unwrap();
        let b = MixtureDensity::new(vec![0.4, 0.6], vec![prior.clone(), prior]).unwrap();
        assert!(matches!(
            mixture_generative_error_bound(&a, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let prior = LatentDensity::standard(LatentFamily::Gaussian, 1);
        assert!(MixtureDensity::new(vec![0.5, 0.6], vec![prior.clone(), prior]).is_err());
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(LatentDensity::new(LatentFamily::Gaussian, vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let d = LatentDensity::standard(LatentFamily::Laplacian, 4);
        let a = d.sample(&mut stream(5, Purpose::Fixture, 0, 0));
        let b = d.sample(&mut stream(5, Purpose::Fixture, 0, 0));
        assert_eq!(a, b);
    }
}
