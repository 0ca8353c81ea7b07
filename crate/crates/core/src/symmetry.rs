//! Symmetry statistics of square images and the canonicalizing remap.
//!
//! Pixel `i` (0-based, row-major) of a `side×side` image sits at the 1-based
//! coordinates `h = i mod side + 1` (column) and `v = ⌊i / side⌋ + 1` (row).
//! The statistics are the intensity-weighted centroid `(h, v)` and the
//! weighted mean radius `r` and angle `φ` of the pixels in the centered frame.
//! The angle is a plain weighted mean of `atan2(v̂, ĥ)`, not a circular mean.
//!
//! Canonicalization maps every source pixel to
//! `(C/r)·(ĥ cos φ + v̂ sin φ, −ĥ sin φ + v̂ cos φ)`, rounds half away from zero,
//! shifts by `M + 1` and drops what falls outside the `(2M+1)²` frame.
//! Colliding pixels add up. The inverse splits each target cell equally among
//! its preimages.

use std::io::Write;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::expfamily::{LatentDensity, LatentFamily, LAPLACE_UNIT_SCALE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryStats {
    pub h: f64,
    pub v: f64,
    pub r: f64,
    pub phi: f64,
}

/// Parameters of the canonical frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalConfig {
    /// Source side length `√N`.
    pub side: usize,
    /// Target half width; the frame is `(2M+1)×(2M+1)`.
    pub half_width: usize,
    /// Target radius `C` a pixel at the mean radius lands on.
    pub scale_constant: f64,
    pub r_min: f64,
}

impl CanonicalConfig {
    /// `2M+1` is the smallest odd number `≥ side`, `C = side/4`, `r_min = 2`.
    pub fn for_side(side: usize) -> Self {
        CanonicalConfig {
            side,
            half_width: side / 2,
            scale_constant: side as f64 / 4.0,
            r_min: 2.0,
        }
    }

    pub fn target_side(&self) -> usize {
        2 * self.half_width + 1
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::Contract("image side must be positive".into()));
        }
        if !(self.scale_constant > 0.0) || !(self.r_min > 0.0) {
            return Err(Error::Contract(
                "scale constant and r_min must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Side length of a square image given as `[side, side]` or `[side²]`.
pub fn image_side(image: &Tensor) -> Result<usize> {
    match image.shape() {
        [a, b] if a == b => Ok(*a),
        [n] => {
            let s = (*n as f64).sqrt().round() as usize;
            if s * s == *n {
                Ok(s)
            } else {
                dim_err(format!("{n} pixels do not form a square image"))
            }
        }
        s => dim_err(format!("expected a square image, got shape {s:?}")),
    }
}

fn coords(i: usize, side: usize) -> (f64, f64) {
    ((i % side + 1) as f64, (i / side + 1) as f64)
}

/// Intensity-weighted centroid `(h, v)`.
pub fn center_of_mass(image: &Tensor) -> Result<(f64, f64)> {
    let side = image_side(image)?;
    if image.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain("pixels must be non-negative".into()));
    }
    let (mut mass, mut h, mut v) = (0.0, 0.0, 0.0);
    for (i, &x) in image.data().iter().enumerate() {
        if x != 0.0 {
            let (hi, vi) = coords(i, side);
            mass += x;
            h += x * hi;
            v += x * vi;
        }
    }
    if mass <= 0.0 {
        return Err(Error::Domain("centroid of an all-zero image is undefined".into()));
    }
    Ok((h / mass, v / mass))
}

/// Weighted mean radius and angle about `(h, v)`.
pub fn scale_angle(image: &Tensor, h: f64, v: f64) -> Result<(f64, f64)> {
    let side = image_side(image)?;
    let (mut mass, mut r, mut phi) = (0.0, 0.0, 0.0);
    for (i, &x) in image.data().iter().enumerate() {
        if x != 0.0 {
            let (hi, vi) = coords(i, side);
            let (dh, dv) = (hi - h, vi - v);
            mass += x;
            r += x * dh.hypot(dv);
            phi += x * dv.atan2(dh);
        }
    }
    if mass <= 0.0 {
        return Err(Error::Domain("scale of an all-zero image is undefined".into()));
    }
    let r = r / mass;
    if !(r > 1e-12) {
        return Err(Error::Domain("all mass sits at the centroid; scale is zero".into()));
    }
    Ok((r, phi / mass))
}

pub fn symmetry_stats(image: &Tensor) -> Result<SymmetryStats> {
    let (h, v) = center_of_mass(image)?;
    let (r, phi) = scale_angle(image, h, v)?;
    Ok(SymmetryStats { h, v, r, phi })
}

/// Target index of every source pixel, `None` where the map leaves the frame.
pub fn index_table(stats: &SymmetryStats, cfg: &CanonicalConfig) -> Result<Vec<Option<usize>>> {
    cfg.validate()?;
    if !(stats.r >= cfg.r_min) {
        return Err(Error::Domain(format!(
            "scale {} is below the minimum {}",
            stats.r, cfg.r_min
        )));
    }
    let side = cfg.side;
    let t = cfg.target_side() as i64;
    let shift = cfg.half_width as i64 + 1;
    let k = cfg.scale_constant / stats.r;
    let (s, c) = stats.phi.sin_cos();
    Ok((0..side * side)
        .map(|i| {
            let (hi, vi) = coords(i, side);
            let (dh, dv) = (hi - stats.h, vi - stats.v);
            let ht = (k * (dh * c + dv * s)).round() as i64 + shift;
            let vt = (k * (-dh * s + dv * c)).round() as i64 + shift;
            if (1..=t).contains(&ht) && (1..=t).contains(&vt) {
                Some(((ht - 1) + (vt - 1) * t) as usize)
            } else {
                None
            }
        })
        .collect())
}

/// Image in the translated, un-scaled and un-rotated frame, shape `[2M+1, 2M+1]`.
pub fn canonicalize(image: &Tensor, stats: &SymmetryStats, cfg: &CanonicalConfig) -> Result<Tensor> {
    let side = image_side(image)?;
    if side != cfg.side {
        return dim_err(format!("image side {side} differs from configured {}", cfg.side));
    }
    let table = index_table(stats, cfg)?;
    let t = cfg.target_side();
    let mut out = vec![0.0; t * t];
    for (&x, target) in image.data().iter().zip(&table) {
        if let Some(j) = target {
            out[*j] += x;
        }
    }
    Tensor::new(vec![t, t], out)
}

/// Maps a canonical image back to the source frame, shape `[side, side]`.
pub fn inverse_canonicalize(
    canonical: &Tensor,
    stats: &SymmetryStats,
    cfg: &CanonicalConfig,
) -> Result<Tensor> {
    let t = cfg.target_side();
    if canonical.len() != t * t {
        return dim_err(format!(
            "canonical image has {} cells, frame needs {}",
            canonical.len(),
            t * t
        ));
    }
    let table = index_table(stats, cfg)?;
    let mut count = vec![0usize; t * t];
    for j in table.iter().flatten() {
        count[*j] += 1;
    }
    let data = table
        .iter()
        .map(|target| match target {
            Some(j) => canonical.data()[*j] / count[*j] as f64,
            None => 0.0,
        })
        .collect();
    Tensor::new(vec![cfg.side, cfg.side], data)
}

/// Fraction `Σ min(a, b) / Σ a` of the mass of `a` present in `b`.
pub fn mass_recovered(original: &Tensor, recovered: &Tensor) -> Result<f64> {
    if original.len() != recovered.len() {
        return dim_err("images differ in size");
    }
    let total: f64 = original.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("original image has no mass".into()));
    }
    let kept: f64 = original
        .data()
        .iter()
        .zip(recovered.data())
        .map(|(a, b)| a.min(*b))
        .sum();
    Ok(kept / total)
}

/// Laplacian block of latent coordinates `(h, v, r, φ)` with the statistics as
/// means and free standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryBlock {
    pub density: LatentDensity,
    /// Inverted Laplace scales `1/(2b)`, one per coordinate.
    pub momenta: [f64; 4],
}

pub fn symmetry_latent_density(stats: &SymmetryStats, sd: [f64; 4]) -> Result<SymmetryBlock> {
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain(format!("symmetry scales must be positive, got {sd:?}")));
    }
    let density = LatentDensity::new(
        LatentFamily::Laplacian,
        vec![stats.h, stats.v, stats.r, stats.phi],
        sd.to_vec(),
    )?;
    let momenta = sd.map(|s| 1.0 / (2.0 * s * LAPLACE_UNIT_SCALE));
    Ok(SymmetryBlock { density, momenta })
}

/// Prior of the symmetry block: equal to its posterior, so its generative
/// error vanishes.
pub fn symmetry_prior(block: &SymmetryBlock) -> LatentDensity {
    block.density.clone()
}

/// Writes `index,h,v,r,phi` rows.
pub fn stats_export(stats: &[SymmetryStats], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,h,v,r,phi")?;
    for (i, s) in stats.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", s.h, s.v, s.r, s.phi)?;
    }
    w.flush()?;
    Ok(())
}
