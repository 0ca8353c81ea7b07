//! Natural parametrization `p_λ(z) = p(z)·exp(F(λ) − λ·M(z))` with
//! `F(λ) = −log Z(λ)`, so that `∂F/∂λ = m(λ) = E_λ[M]` and
//! `∂²F/∂λ² = −Cov_λ(M)`.
//!
//! The generative error of the member with moments `m` against its base is
//! `D(m) = F(λ) − λ·m`, and `−D(m) = min_λ {λ·m − F(λ)}`. The solvers here are
//! small damped-Newton programs used to check these identities numerically.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};

use super::{discrete_kl, log_sum_exp};

/// A family given by a base density and sufficient statistics.
pub trait GibbsFamily {
    /// Number of natural parameters.
    fn num_params(&self) -> usize;

    /// `F(λ) = −log Z(λ)`.
    fn free_energy(&self, lambda: &[f64]) -> Result<f64>;

    /// `m(λ) = E_λ[M]`.
    fn moments(&self, lambda: &[f64]) -> Result<Vec<f64>>;

    /// `Cov_λ(M)`, row-major `S×S`.
    fn moment_covariance(&self, lambda: &[f64]) -> Result<Vec<f64>>;

    /// Cheap rejection of moments outside the family's range, where known.
    fn check_attainable(&self, _m: &[f64]) -> Result<()> {
        Ok(())
    }

    fn check_len(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.num_params() {
            return dim_err(format!(
                "expected {} natural parameters, got {}",
                self.num_params(),
                lambda.len()
            ));
        }
        Ok(())
    }
}

/// `D = F(λ) − λ·m(λ)`, the divergence of `p_λ` from the base.
pub fn natural_divergence<F: GibbsFamily + ?Sized>(family: &F, lambda: &[f64]) -> Result<f64> {
    let f = family.free_energy(lambda)?;
    let m = family.moments(lambda)?;
    Ok(f - dot(lambda, &m))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Gaussian: base N(0,1) per coordinate, M = (z, z²)
// ---------------------------------------------------------------------------

/// Independent coordinates over a standard-normal base with statistics
/// `(z, z²)`; parameters are laid out `(λ₁, λ₂)` per coordinate.
///
/// `F = ½log(1+2λ₂) − λ₁²/(2(1+2λ₂))`, defined for `1+2λ₂ > 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaussianFamily {
    dim: usize,
}

impl GaussianFamily {
    pub fn new(dim: usize) -> Self {
        GaussianFamily { dim }
    }

    fn coordinate(lambda: &[f64], j: usize) -> Result<(f64, f64)> {
        let (l1, l2) = (lambda[2 * j], lambda[2 * j + 1]);
        let p = 1.0 + 2.0 * l2;
        if !(p > 0.0) || !p.is_finite() || !l1.is_finite() {
            return Err(Error::Domain(format!(
                "coordinate {j}: 1 + 2λ₂ = {p} is not positive"
            )));
        }
        // (mean, variance)
        Ok((-l1 / p, 1.0 / p))
    }

    /// Natural parameters of `N(μ, σ²)` relative to the `N(0,1)` base.
    pub fn natural_from_mean_sd(mean: &[f64], sd: &[f64]) -> Result<Vec<f64>> {
        if mean.len() != sd.len() {
            return dim_err("mean and scale differ in length");
        }
        let mut out = Vec::with_capacity(2 * mean.len());
        for (&m, &s) in mean.iter().zip(sd) {
            if !(s > 0.0) {
                return Err(Error::Domain(format!("scale must be positive, got {s}")));
            }
            let prec = 1.0 / (s * s);
            out.push(-m * prec);
            out.push(0.5 * (prec - 1.0));
        }
        Ok(out)
    }

    /// Natural parameters whose moments are `m = (E z, E z²)` per coordinate.
    pub fn natural_from_moments(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.check_attainable(m)?;
        let (mean, sd): (Vec<f64>, Vec<f64>) = m
            .chunks(2)
            .map(|c| (c[0], (c[1] - c[0] * c[0]).sqrt()))
            .unzip();
        Self::natural_from_mean_sd(&mean, &sd)
    }
}

impl GibbsFamily for GaussianFamily {
    fn num_params(&self) -> usize {
        2 * self.dim
    }

    fn free_energy(&self, lambda: &[f64]) -> Result<f64> {
        self.check_len(lambda)?;
        let mut f = 0.0;
        for j in 0..self.dim {
            Self::coordinate(lambda, j)?;
            let (l1, l2) = (lambda[2 * j], lambda[2 * j + 1]);
            let p = 1.0 + 2.0 * l2;
            f += 0.5 * p.ln() - l1 * l1 / (2.0 * p);
        }
        Ok(f)
    }

    fn moments(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_len(lambda)?;
        let mut m = Vec::with_capacity(2 * self.dim);
        for j in 0..self.dim {
            let (mu, var) = Self::coordinate(lambda, j)?;
            m.push(mu);
            m.push(mu * mu + var);
        }
        Ok(m)
    }

    fn moment_covariance(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_len(lambda)?;
        let s = 2 * self.dim;
        let mut c = vec![0.0; s * s];
        for j in 0..self.dim {
            let (mu, var) = Self::coordinate(lambda, j)?;
            let (a, b) = (2 * j, 2 * j + 1);
            c[a * s + a] = var;
            c[a * s + b] = 2.0 * mu * var;
            c[b * s + a] = 2.0 * mu * var;
            c[b * s + b] = 2.0 * var * var + 4.0 * mu * mu * var;
        }
        Ok(c)
    }

    fn check_attainable(&self, m: &[f64]) -> Result<()> {
        self.check_len(m)?;
        for (j, c) in m.chunks(2).enumerate() {
            if !(c[1] - c[0] * c[0] > 0.0) {
                return Err(Error::NoSolution(format!(
                    "coordinate {j}: E z² − (E z)² = {} is not positive",
                    c[1] - c[0] * c[0]
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Discrete tabular
// ---------------------------------------------------------------------------

/// Finite state space with base probabilities `p(k)` and statistics `M(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFamily {
    base: Vec<f64>,
    stats: Vec<Vec<f64>>,
    num_stats: usize,
}

impl DiscreteFamily {
    /// `stats[k]` is the statistic vector of state `k`.
    pub fn new(base: Vec<f64>, stats: Vec<Vec<f64>>) -> Result<Self> {
        if base.is_empty() || base.len() != stats.len() {
            return dim_err("need one statistic vector per state");
        }
        let num_stats = stats[0].len();
        if stats.iter().any(|s| s.len() != num_stats) {
            return dim_err("statistic vectors differ in length");
        }
        if base.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain("base probabilities must be non-negative".into()));
        }
        let total: f64 = base.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("base sums to {total}, not 1")));
        }
        Ok(DiscreteFamily {
            base,
            stats,
            num_stats,
        })
    }

    /// Indicator statistics of states `1..K` over a uniform base.
    pub fn indicators(states: usize) -> Result<Self> {
        if states < 2 {
            return Err(Error::Contract("need at least two states".into()));
        }
        let base = vec![1.0 / states as f64; states];
        let stats = (0..states)
            .map(|k| (1..states).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(base, stats)
    }

    pub fn num_states(&self) -> usize {
        self.base.len()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn stats(&self) -> &[Vec<f64>] {
        &self.stats
    }

    fn log_weights(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_len(lambda)?;
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain("natural parameters must be finite".into()));
        }
        Ok(self
            .base
            .iter()
            .zip(&self.stats)
            .map(|(&p, m)| {
                if p > 0.0 {
                    p.ln() - dot(lambda, m)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    /// `p_λ(k)` for every state.
    pub fn probabilities(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        let w = self.log_weights(lambda)?;
        let lz = log_sum_exp(&w);
        Ok(w.iter().map(|v| (v - lz).exp()).collect())
    }

    /// `E_f[M]` under an arbitrary probability vector.
    pub fn expected_stats(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.num_states() {
            return dim_err("probability vector length differs from state count");
        }
        let mut m = vec![0.0; self.num_stats];
        for (p, s) in f.iter().zip(&self.stats) {
            for (mi, si) in m.iter_mut().zip(s) {
                *mi += p * si;
            }
        }
        Ok(m)
    }
}

impl GibbsFamily for DiscreteFamily {
    fn num_params(&self) -> usize {
        self.num_stats
    }

    fn free_energy(&self, lambda: &[f64]) -> Result<f64> {
        Ok(-log_sum_exp(&self.log_weights(lambda)?))
    }

    fn moments(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        let p = self.probabilities(lambda)?;
        self.expected_stats(&p)
    }

    fn moment_covariance(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        let p = self.probabilities(lambda)?;
        let m = self.expected_stats(&p)?;
        let s = self.num_stats;
        let mut c = vec![0.0; s * s];
        for (pk, stat) in p.iter().zip(&self.stats) {
            for a in 0..s {
                let da = stat[a] - m[a];
                for b in 0..s {
                    c[a * s + b] += pk * da * (stat[b] - m[b]);
                }
            }
        }
        Ok(c)
    }

    fn check_attainable(&self, m: &[f64]) -> Result<()> {
        self.check_len(m)?;
        for j in 0..self.num_stats {
            let support = self.base.iter().zip(&self.stats).filter(|(p, _)| **p > 0.0);
            let (lo, hi) = support.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| {
                (lo.min(s[j]), hi.max(s[j]))
            });
            if !(m[j] > lo && m[j] < hi) && !(lo == hi && m[j] == lo) {
                return Err(Error::NoSolution(format!(
                    "statistic {j}: moment {} outside the open range ({lo}, {hi})",
                    m[j]
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Legendre program
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 200;

/// Solution of `min_λ {λ·m − F(λ)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LegendrePoint {
    pub lambda: Vec<f64>,
    /// `D(m) = −min_λ {λ·m − F(λ)}`.
    pub divergence: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Solves the Legendre program at `m` by damped Newton with backtracking.
pub fn solve_legendre<F: GibbsFamily + ?Sized>(family: &F, m: &[f64]) -> Result<LegendrePoint> {
    family.check_len(m)?;
    family.check_attainable(m)?;
    let s = family.num_params();
    let objective = |l: &[f64]| -> Result<f64> { Ok(dot(l, m) - family.free_energy(l)?) };

    let mut lambda = vec![0.0; s];
    let mut value = objective(&lambda)?;
    for iter in 0..MAX_ITERS {
        let mom = family.moments(&lambda)?;
        let grad: Vec<f64> = m.iter().zip(&mom).map(|(a, b)| a - b).collect();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < GRAD_TOL {
            return Ok(LegendrePoint {
                lambda,
                divergence: -value,
                gradient_norm: gnorm,
                iterations: iter,
            });
        }
        let cov = DMatrix::from_row_slice(s, s, &family.moment_covariance(&lambda)?);
        let step = newton_direction(cov, &grad);

        let slope = dot(&grad, &step);
        // Below float resolution of the objective the full Newton step is taken.
        if slope.abs() <= 1e-13 * (1.0 + value.abs()) {
            let trial: Vec<f64> = lambda.iter().zip(&step).map(|(l, d)| l + d).collect();
            if let Ok(v) = objective(&trial) {
                if v.is_finite() {
                    lambda = trial;
                    value = v;
                    continue;
                }
            }
        }
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = lambda.iter().zip(&step).map(|(l, d)| l + t * d).collect();
            if let Ok(v) = objective(&trial) {
                if v.is_finite() && v <= value + 1e-4 * t * slope {
                    lambda = trial;
                    value = v;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-16 {
                return Err(Error::NoSolution(format!(
                    "line search stalled with gradient norm {gnorm:.3e}"
                )));
            }
        }
    }
    let mom = family.moments(&lambda)?;
    let gnorm = m
        .iter()
        .zip(&mom)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Err(Error::NoSolution(format!(
        "no convergence after {MAX_ITERS} iterations, gradient norm {gnorm:.3e}"
    )))
}

/// Newton step `−H⁻¹g`, ridged if the covariance is singular and falling back
/// to steepest descent.
fn newton_direction(cov: DMatrix<f64>, grad: &[f64]) -> Vec<f64> {
    let g = DVector::from_column_slice(grad);
    let scale = cov.diagonal().amax().max(1e-300);
    for ridge in [0.0, 1e-12, 1e-8, 1e-4] {
        let mut h = cov.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += ridge * scale;
        }
        if let Some(ch) = h.cholesky() {
            let d = ch.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return d.iter().map(|v| -v).collect();
            }
        }
    }
    grad.iter().map(|v| -v).collect()
}

/// Legendre solution plus a finite-difference check of `−∂D/∂m = λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LegendreCheck {
    pub point: LegendrePoint,
    /// `−∂D/∂m` by central differences.
    pub dual_gradient: Vec<f64>,
    /// Largest `|−∂D/∂m − λ|` component.
    pub dual_gradient_error: f64,
}

/// Solves the Legendre program at `m` and checks its dual gradient.
pub fn legendre_check<F: GibbsFamily + ?Sized>(family: &F, m: &[f64]) -> Result<LegendreCheck> {
    let point = solve_legendre(family, m)?;
    let mut dual_gradient = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let h = 1e-5 * m[i].abs().max(1e-2);
        let mut up = m.to_vec();
        let mut down = m.to_vec();
        up[i] += h;
        down[i] -= h;
        let d_up = solve_legendre(family, &up)?.divergence;
        let d_down = solve_legendre(family, &down)?.divergence;
        dual_gradient.push(-(d_up - d_down) / (2.0 * h));
    }
    let dual_gradient_error = dual_gradient
        .iter()
        .zip(&point.lambda)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(LegendreCheck {
        point,
        dual_gradient,
        dual_gradient_error,
    })
}

// ---------------------------------------------------------------------------
// Pythagorean identity
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PythagoreanTriple {
    /// `D(f ‖ p)`.
    pub total: f64,
    /// `D(f ‖ p_λ)`.
    pub to_projection: f64,
    /// `D(p_λ ‖ p)`.
    pub projection_to_base: f64,
    /// Natural parameters of the moment-matched projection.
    pub lambda: Vec<f64>,
}

impl PythagoreanTriple {
    /// `|D(f‖p) − D(f‖p_λ) − D(p_λ‖p)|`.
    pub fn residual(&self) -> f64 {
        (self.total - self.to_projection - self.projection_to_base).abs()
    }
}

/// Projects `f` onto the family spanned by `stats` over `base` and returns the
/// three divergences of the identity `D(f‖p) = D(f‖p_λ) + D(p_λ‖p)`.
pub fn pythagorean_check(f: &[f64], family: &DiscreteFamily) -> Result<PythagoreanTriple> {
    if family.num_states() > 64 {
        return Err(Error::Contract(format!(
            "state space of {} exceeds 64 states",
            family.num_states()
        )));
    }
    if f.len() != family.num_states() {
        return dim_err("f and base differ in state count");
    }
    let total_mass: f64 = f.iter().sum();
    if f.iter().any(|p| *p < 0.0) || (total_mass - 1.0).abs() > 1e-12 {
        return Err(Error::Domain("f is not a probability vector".into()));
    }
    let m = family.expected_stats(f)?;
    let point = solve_legendre(family, &m).map_err(|e| match e {
        Error::NoSolution(msg) => Error::Numeric(format!("projection did not converge: {msg}")),
        other => other,
    })?;
    let p_lambda = family.probabilities(&point.lambda)?;
    Ok(PythagoreanTriple {
        total: discrete_kl(f, family.base())?,
        to_projection: discrete_kl(f, &p_lambda)?,
        projection_to_base: discrete_kl(&p_lambda, family.base())?,
        lambda: point.lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_zero_lambda_is_uniform() {
        let fam = DiscreteFamily::indicators(2).unwrap();
        assert_eq!(fam.moments(&[0.0]).unwrap(), vec![0.5]);
        assert!(fam.free_energy(&[0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn gaussian_moment_round_trip() {
        let fam = GaussianFamily::new(2);
        let m0 = [0.3, 1.2, -1.0, 1.5];
        let lambda = fam.natural_from_moments(&m0).unwrap();
        let m = fam.moments(&lambda).unwrap();
        for (a, b) in m.iter().zip(&m0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_domain_is_enforced() {
        let fam = GaussianFamily::new(1);
        assert!(matches!(fam.free_energy(&[0.0, -0.5]), Err(Error::Domain(_))));
        assert!(matches!(fam.moments(&[0.0, -1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn prior_moments_solve_to_zero() {
        let fam = GaussianFamily::new(1);
        let p = solve_legendre(&fam, &[0.0, 1.0]).unwrap();
        assert!(p.lambda.iter().all(|l| l.abs() < 1e-12));
        assert!(p.divergence.abs() < 1e-14);
    }

    #[test]
    fn gaussian_divergence_is_the_closed_form_kl() {
        let fam = GaussianFamily::new(1);
        let (mu, sd) = (0.7f64, 1.8f64);
        let lambda = GaussianFamily::natural_from_mean_sd(&[mu], &[sd]).unwrap();
        let d = natural_divergence(&fam, &lambda).unwrap();
        assert!((d - (0.5 * (mu * mu + sd * sd - 1.0) - sd.ln())).abs() < 1e-13);
    }

    #[test]
    fn unattainable_moments_have_no_solution() {
        let fam = GaussianFamily::new(1);
        assert!(matches!(
            solve_legendre(&fam, &[1.0, 0.5]),
            Err(Error::NoSolution(_))
        ));
        let disc = DiscreteFamily::indicators(3).unwrap();
        assert!(matches!(
            solve_legendre(&disc, &[0.7, 0.6]),
            Err(Error::NoSolution(_))
        ));
    }

    #[test]
    fn f_equal_to_base_gives_zeros() {
        let fam = DiscreteFamily::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let t = pythagorean_check(&[0.1, 0.2, 0.3, 0.4], &fam).unwrap();
        assert!(t.total.abs() < 1e-14);
        assert!(t.to_projection.abs() < 1e-14);
        assert!(t.projection_to_base.abs() < 1e-14);
    }

    #[test]
    fn member_of_family_projects_to_itself() {
        let fam = DiscreteFamily::new(
            vec![0.25; 4],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let f = fam.probabilities(&[0.4]).unwrap();
        let t = pythagorean_check(&f, &fam).unwrap();
        assert!(t.to_projection < 1e-12);
        assert!((t.total - t.projection_to_base).abs() < 1e-12);
    }
}
