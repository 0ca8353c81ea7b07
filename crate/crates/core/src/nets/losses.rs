//! Loss functions on plain tensors and their graph forms.

use crate::autodiff::{Graph, Var, PROB_CLAMP};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Batch mean of per-observation binary cross-entropies between
/// probabilities `xhat` and targets `x`, with `xhat` clamped to
/// `[1e-7, 1 − 1e-7]`. In binarized mode `x` must be `{0,1}`-valued.
pub fn reconstruction_error(xhat: &Tensor, x: &Tensor, binarized: bool) -> Result<f64> {
    let (b, _) = xhat.dims2()?;
    if xhat.shape() != x.shape() {
        return dim_err(format!(
            "reconstruction of shape {:?} for targets {:?}",
            xhat.shape(),
            x.shape()
        ));
    }
    if binarized && x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("binarized targets must be 0 or 1".into()));
    }
    let mut s = 0.0;
    for (&p, &t) in xhat.data().iter().zip(x.data()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(s / b as f64)
}

/// `(1/B) Σ BCE(x, sigmoid(H Hᵀ X / B))` on the graph.
pub(crate) fn dual_on_graph(g: &mut Graph, h: Var, x: &Tensor) -> Result<Var> {
    let (b, _) = g.value(h).dims2()?;
    if x.rows() != b {
        return dim_err(format!("{} hidden rows for {} observations", b, x.rows()));
    }
    let inv_b = 1.0 / b as f64;
    let xv = g.constant(x.clone());
    let ht = g.transpose(h)?;
    let htx = g.matmul(ht, xv)?;
    let hhtx = g.matmul(h, htx)?;
    let logits = g.scale(hhtx, inv_b)?;
    let rows = g.binary_cross_entropy(logits, x)?;
    let s = g.sum(rows)?;
    g.scale(s, inv_b)
}

/// Dual reconstruction error of observations `x` (`B×N`) from hidden
/// activations `h` (`B×K`).
pub fn dual_reconstruction_error(h: &Tensor, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let d = dual_on_graph(&mut g, hv, x)?;
    g.value(d).item()
}

/// Per-column de-meaning and scaling to unit second moment.
pub fn batchnorm_forward(h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(h.clone());
    let y = g.batchnorm(v)?;
    Ok(g.value(y).clone())
}
