#![allow(dead_code)]

use std::path::PathBuf;

use gibbs_core::autodiff::{Graph, Var};
use gibbs_core::data::DATA_DIR_ENV;
use gibbs_core::rng::{self, Purpose};
use gibbs_core::{Result, Tensor};

/// `|a − b| / max(|a|, |b|, floor)`
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, Purpose::Fixture, n as u64, shape.len() as u64);
    let data = rng::normals(&mut r, n).into_iter().map(|v| v * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest relative error between the analytic gradient of a scalar-valued
/// graph builder and central differences of step `h`, over every input.
pub fn check_graph_gradient<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-6));
        }
    }
    worst
}

/// MNIST directory from the environment or the workspace `data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .into_iter()
        .chain(std::iter::once(
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
        ));
    for dir in candidates {
        let has = |stem: &str| dir.join(stem).exists() || dir.join(format!("{stem}.gz")).exists();
        if has("train-images-idx3-ubyte") && has("t10k-labels-idx1-ubyte") {
            return Some(dir);
        }
    }
    None
}

fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Quadrature over the breakpoints `cuts`, each piece split into `panels`.
pub fn integrate_pieces(f: &dyn Fn(f64) -> f64, cuts: &[f64], panels: usize, tol: f64) -> f64 {
    let mut pts = cuts.to_vec();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut total = 0.0;
    for w in pts.windows(2) {
        let step = (w[1] - w[0]) / panels as f64;
        for k in 0..panels {
            let a = w[0] + k as f64 * step;
            total += integrate(f, a, a + step, tol);
        }
    }
    total
}

/// `KL(p ‖ q)` for two one-dimensional log-densities by quadrature, split at
/// the given kinks and truncated to `[lo, hi]`.
pub fn kl_by_quadrature(
    log_p: &dyn Fn(f64) -> f64,
    log_q: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    kinks: &[f64],
) -> f64 {
    let f = |z: f64| {
        let lp = log_p(z);
        let p = lp.exp();
        if p == 0.0 {
            0.0
        } else {
            p * (lp - log_q(z))
        }
    };
    let mut cuts = vec![lo, hi];
    cuts.extend(kinks.iter().copied().filter(|k| *k > lo && *k < hi));
    integrate_pieces(&f, &cuts, 32, 1e-14)
}

/// Smooth arc of radius `radius` and width `width` around `(ch, cv)` (1-based
/// pixel coordinates), open over `gap` radians facing angle π, rotated by
/// `theta`, sampled at pixel centers of a `side×side` image.
#[derive(Clone, Copy, Debug)]
pub struct Arc {
    pub ch: f64,
    pub cv: f64,
    pub radius: f64,
    pub width: f64,
    pub gap: f64,
}

impl Arc {
    pub fn random(seed: u64, side: usize) -> Arc {
        let mut r = rng::stream(seed, Purpose::Fixture, 77, 0);
        let u = rng::open_uniforms(&mut r, 5);
        let mid = (side as f64 + 1.0) / 2.0;
        Arc {
            ch: mid + (u[0] - 0.5) * 4.0,
            cv: mid + (u[1] - 0.5) * 4.0,
            radius: 3.0 + 1.5 * u[2],
            width: 0.7 + 0.3 * u[3],
            gap: 1.0 + 0.6 * u[4],
        }
    }

    pub fn render(&self, side: usize, theta: f64, scale: f64) -> Tensor {
        let (s, c) = theta.sin_cos();
        let half_open = std::f64::consts::PI - self.gap / 2.0;
        let mut data = vec![0.0; side * side];
        for (i, px) in data.iter_mut().enumerate() {
            let h = (i % side + 1) as f64 - self.ch;
            let v = (i / side + 1) as f64 - self.cv;
            // Undo the rotation and the scaling.
            let (x, y) = ((h * c + v * s) / scale, (-h * s + v * c) / scale);
            let rho = x.hypot(y);
            let ang = y.atan2(x).abs();
            let d = (rho - self.radius) / self.width;
            if d.abs() > 3.0 || ang > half_open {
                continue;
            }
            let edge = ((half_open - ang) / 0.3).min(1.0);
            *px = (-0.5 * d * d).exp() * edge * edge * (3.0 - 2.0 * edge);
        }
        Tensor::new(vec![side, side], data).unwrap()
    }
}

/// Copy of `image` shifted by `(dh, dv)` pixels on a zero background.
pub fn translate(image: &Tensor, dh: i64, dv: i64) -> Tensor {
    let side = image.shape()[0];
    let mut out = Tensor::zeros(&[side, side]);
    for r in 0..side {
        for c in 0..side {
            let (nr, nc) = (r as i64 + dv, c as i64 + dh);
            if (0..side as i64).contains(&nr) && (0..side as i64).contains(&nc) {
                out.data_mut()[nr as usize * side + nc as usize] = image.data()[r * side + c];
            }
        }
    }
    out
}
