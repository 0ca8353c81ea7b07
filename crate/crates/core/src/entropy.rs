//! Gaussian observation entropies and the analytics built on them.
//!
//! Each observation `x_μ` gets `−log p^G(x_μ) = ½ d C⁻¹ dᵀ + ½ log det(2πC)`
//! with `d = x_μ − mean` and `C` the (ridged) population covariance. Low
//! entropy means high negative log-likelihood; the lowest-entropy members of a
//! class are its "intricates".

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Relative ridge: `1e-6 · trace(C) / N`.
pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `1e-6 · trace(C) / N`.
    Default,
    /// Absolute value added to the diagonal; `0` demands an invertible `C`.
    Value(f64),
}

#[derive(Clone, Debug)]
pub struct EntropyReport {
    /// `−log p^G(x_μ)` per observation.
    pub neg_log_lik: Vec<f64>,
    /// `d C⁻¹ dᵀ` per observation.
    pub mahalanobis: Vec<f64>,
    /// Observation indices by descending `neg_log_lik`, i.e. ascending entropy.
    pub ranking: Vec<usize>,
    /// Mean of squared Mahalanobis norms.
    pub kurtosis: f64,
    /// Population covariance before the ridge, `N×N`.
    pub covariance: Tensor,
    pub mean: Vec<f64>,
    /// Ridge actually added to the diagonal.
    pub ridge: f64,
    /// `log det(C + ridge·I)`.
    pub log_det: f64,
}

/// Column means and the mean-centered copy of a `P×N` matrix.
pub fn center_columns(x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (p, n) = x.dims2()?;
    let mut mean = vec![0.0; n];
    for row in x.data().chunks(n.max(1)) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    let mut centered = x.clone();
    for row in centered.data_mut().chunks_mut(n.max(1)) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((mean, centered))
}

/// `XᵀX / P` of an already-centered matrix.
pub fn population_covariance(centered: &Tensor) -> Result<Tensor> {
    let p = centered.rows() as f64;
    let c = centered.matmul_tn(centered)?;
    Ok(c.map(|v| v / p))
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

fn ridged_cholesky(cov: &Tensor, ridge: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = cov.rows();
    let mut m = to_matrix(cov)?;
    for i in 0..n {
        m[(i, i)] += ridge;
    }
    let scale = m.diagonal().amax();
    let chol = Cholesky::new(m).ok_or_else(|| {
        Error::Numeric("covariance is not positive definite; add a ridge regularizer".into())
    })?;
    let min_pivot = chol.l_dirty().diagonal().amin();
    if !(min_pivot * min_pivot > 1e-13 * scale) {
        return Err(Error::Numeric(format!(
            "covariance is numerically singular (pivot {min_pivot:.3e}); add a ridge regularizer"
        )));
    }
    Ok(chol)
}

fn resolve_ridge(cov: &Tensor, ridge: Ridge) -> Result<f64> {
    match ridge {
        Ridge::Default => {
            let n = cov.rows();
            let trace: f64 = (0..n).map(|i| cov.get2(i, i)).sum();
            Ok(DEFAULT_RIDGE_FACTOR * trace / n as f64)
        }
        Ridge::Value(r) if r >= 0.0 && r.is_finite() => Ok(r),
        Ridge::Value(r) => Err(Error::Domain(format!("ridge must be non-negative, got {r}"))),
    }
}

/// Squared Mahalanobis norms of the rows of a centered `P×N` matrix.
fn mahalanobis_rows(chol: &Cholesky<f64, Dyn>, centered: &Tensor) -> Vec<f64> {
    let (p, n) = (centered.rows(), centered.cols());
    // Row-major P×N is column-major N×P: each column is one observation.
    let dt = DMatrix::from_column_slice(n, p, centered.data());
    let y = chol
        .l_dirty()
        .solve_lower_triangular(&dt)
        .expect("pivots checked positive");
    y.column_iter().map(|c| c.norm_squared()).collect()
}

/// Gaussian observation entropies of the rows of `x` (`P×N`).
pub fn einstein_entropy(x: &Tensor, ridge: Ridge) -> Result<EntropyReport> {
    let (p, n) = x.dims2()?;
    if p < 2 || n == 0 {
        return Err(Error::Contract(format!(
            "need at least 2 observations of at least 1 observable, got {p}×{n}"
        )));
    }
    let (mean, centered) = center_columns(x)?;
    let covariance = population_covariance(&centered)?;
    let ridge = resolve_ridge(&covariance, ridge)?;
    let chol = ridged_cholesky(&covariance, ridge)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let constant = 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);

    let mahalanobis = mahalanobis_rows(&chol, &centered);
    let neg_log_lik: Vec<f64> = mahalanobis.iter().map(|m| 0.5 * m + constant).collect();
    let kurtosis = mahalanobis.iter().map(|m| m * m).sum::<f64>() / p as f64;
    let ranking = rank_descending(&neg_log_lik, 0..p);
    Ok(EntropyReport {
        neg_log_lik,
        mahalanobis,
        ranking,
        kurtosis,
        covariance,
        mean,
        ridge,
        log_det,
    })
}

/// Stable sort of `indices` by descending `values`.
fn rank_descending(values: &[f64], indices: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = indices.collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Conjugate observation `x C⁻¹`.
pub fn conjugate(x: &[f64], cov: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = cov.dims2()?;
    if r != c || x.len() != r {
        return dim_err(format!(
            "conjugate of a length-{} row under a {r}×{c} covariance",
            x.len()
        ));
    }
    let chol = ridged_cholesky(cov, 0.0)?;
    let v = chol.solve(&nalgebra::DVector::from_column_slice(x));
    Ok(v.iter().copied().collect())
}

impl EntropyReport {
    /// Ridged covariance used for the log-likelihoods.
    pub fn regularized_covariance(&self) -> Tensor {
        let n = self.mean.len();
        let mut c = self.covariance.clone();
        for i in 0..n {
            c.data_mut()[i * n + i] += self.ridge;
        }
        c
    }

    /// Conjugate of the centered observation `i` of `x` under the ridged
    /// covariance.
    pub fn conjugate_of(&self, x: &Tensor, i: usize) -> Result<Vec<f64>> {
        if i >= x.rows() {
            return dim_err(format!("observation {i} out of range"));
        }
        let d: Vec<f64> = x.row(i).iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        conjugate(&d, &self.regularized_covariance())
    }
}

/// Projections of every centered observation of `x` onto the unit-normalized
/// conjugates of the observations `axes`, `[P×axes.len()]`.
pub fn conjugate_projections(report: &EntropyReport, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (p, n) = x.dims2()?;
    if n != report.mean.len() {
        return dim_err(format!("{n} observables, report has {}", report.mean.len()));
    }
    let mut units = Vec::with_capacity(axes.len());
    for &a in axes {
        let c = report.conjugate_of(x, a)?;
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Numeric(format!("conjugate of observation {a} vanishes")));
        }
        units.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let mut out = Vec::with_capacity(p * axes.len());
    for i in 0..p {
        for u in &units {
            out.push(
                x.row(i)
                    .iter()
                    .zip(&report.mean)
                    .zip(u)
                    .map(|((xi, m), ui)| (xi - m) * ui)
                    .sum(),
            );
        }
    }
    Tensor::new(vec![p, axes.len()], out)
}

/// Writes `index,label,p0,p1,…` rows of conjugate projections.
pub fn projections_export(projections: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    let (p, k) = projections.dims2()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let head: Vec<String> = (0..k).map(|j| format!("p{j}")).collect();
    writeln!(w, "index,label,{}", head.join(","))?;
    for i in 0..p {
        let label = labels.get(i).map(|l| l.to_string()).unwrap_or_default();
        let vals: Vec<String> = projections.row(i).iter().map(f64::to_string).collect();
        writeln!(w, "{i},{label},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// The `k` lowest-entropy members of class `class`, lowest first.
pub fn intricates(
    report: &EntropyReport,
    labels: &[usize],
    class: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if labels.len() != report.neg_log_lik.len() {
        return dim_err(format!(
            "{} labels for {} observations",
            labels.len(),
            report.neg_log_lik.len()
        ));
    }
    let members = (0..labels.len()).filter(|&i| labels[i] == class);
    let ranked = rank_descending(&report.neg_log_lik, members);
    if ranked.is_empty() {
        return Err(Error::Contract(format!("class {class} has no observations")));
    }
    if k > ranked.len() {
        return Err(Error::Contract(format!(
            "asked for {k} intricates of a class with {} members",
            ranked.len()
        )));
    }
    Ok(ranked.into_iter().take(k).collect())
}

/// Mean of squared Mahalanobis norms of the rows of `x`.
pub fn multivariate_kurtosis(x: &Tensor, ridge: Ridge) -> Result<f64> {
    Ok(einstein_entropy(x, ridge)?.kurtosis)
}

/// Matched Gaussian and empirical quantiles of the standardized `values`
/// on the probability grid `(i − ½)/n`.
pub fn qq_points(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = values.len();
    if n < 10 {
        return Err(Error::Contract(format!("Q-Q needs at least 10 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("Q-Q values must be finite".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut z: Vec<f64> = values
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    Ok(z
        .into_iter()
        .enumerate()
        .map(|(i, e)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), e))
        .collect())
}

/// Largest standardized value minus its Gaussian quantile.
pub fn qq_tail_departure(points: &[(f64, f64)]) -> f64 {
    points.last().map(|(g, e)| e - g).unwrap_or(0.0)
}

/// Writes `gaussian_quantile,empirical_quantile` rows.
pub fn qq_export(values: &[f64], path: &Path) -> Result<Vec<(f64, f64)>> {
    let points = qq_points(values)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "gaussian_quantile,empirical_quantile")?;
    for (g, e) in &points {
        writeln!(w, "{g},{e}")?;
    }
    w.flush()?;
    Ok(points)
}

/// Writes `index,label,neg_log_lik,rank` rows in observation order.
pub fn entropy_table_export(report: &EntropyReport, labels: &[usize], path: &Path) -> Result<()> {
    let mut rank = vec![0; report.ranking.len()];
    for (r, &i) in report.ranking.iter().enumerate() {
        rank[i] = r;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,label,neg_log_lik,rank")?;
    for (i, v) in report.neg_log_lik.iter().enumerate() {
        let label = labels.get(i).map(|l| l.to_string()).unwrap_or_default();
        writeln!(w, "{i},{label},{v},{}", rank[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Thin-SVD quantities of a centered `B×N` matrix `X = VΛWᵀ`.
#[derive(Clone, Debug)]
pub struct SvdIdentities {
    /// `VVᵀX`, which equals `X`.
    pub projected: Tensor,
    /// `B · (VVᵀ)_μμ`, which equals the Mahalanobis norm under `XᵀX/B`.
    pub scaled_leverage: Vec<f64>,
    pub rank: usize,
}

pub fn svd_identities(centered: &Tensor) -> Result<SvdIdentities> {
    let (b, n) = centered.dims2()?;
    let m = to_matrix(centered)?;
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let smax = svd.singular_values.amax();
    let tol = smax * (b.max(n) as f64) * f64::EPSILON;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    let v = u.select_columns(&keep);
    let projector = &v * v.transpose();
    let projected_m = &projector * &m;
    let mut data = Vec::with_capacity(b * n);
    for i in 0..b {
        for j in 0..n {
            data.push(projected_m[(i, j)]);
        }
    }
    Ok(SvdIdentities {
        projected: Tensor::new(vec![b, n], data)?,
        scaled_leverage: (0..b).map(|i| b as f64 * projector[(i, i)]).collect(),
        rank: keep.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_conjugate_divides() {
        let c = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conjugate(&[2.0, 3.0], &c).unwrap(), vec![0.5, 3.0]);
    }

    #[test]
    fn identity_conjugate_is_identity() {
        let c = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conjugate(&[-1.5, 3.0], &c).unwrap(), vec![-1.5, 3.0]);
    }

    #[test]
    fn duplicated_rows_share_entropy() {
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![0.0, 1.0],
            vec![1.0, 2.0],
            vec![3.0, -1.0],
            vec![2.0, 2.5],
        ])
        .unwrap();
        let r = einstein_entropy(&x, Ridge::Value(0.0)).unwrap();
        assert_eq!(r.neg_log_lik[0], r.neg_log_lik[2]);
    }

    #[test]
    fn singular_covariance_without_ridge_fails() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(
            einstein_entropy(&x, Ridge::Value(0.0)),
            Err(Error::Numeric(_))
        ));
        assert!(einstein_entropy(&x, Ridge::Default).is_ok());
    }

    #[test]
    fn intricates_of_two_put_larger_first() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![2.0]]).unwrap();
        let r = einstein_entropy(&x, Ridge::Value(0.0)).unwrap();
        let labels = [0, 1, 1, 0];
        let picked = intricates(&r, &labels, 1, 2).unwrap();
        assert_eq!(picked, vec![2, 1]);
        assert!(intricates(&r, &labels, 1, 3).is_err());
        assert!(intricates(&r, &labels, 7, 1).is_err());
    }

    #[test]
    fn constant_values_give_flat_qq() {
        let pts = qq_points(&[3.0; 12]).unwrap();
        assert!(pts.iter().all(|(_, e)| *e == 0.0));
        assert!(qq_points(&[1.0; 9]).is_err());
    }
}
