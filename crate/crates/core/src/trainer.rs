//! Adam training loop with learning-rate decay and per-epoch metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nets::{classification_error, draw_noise, LossBreakdown, Model, ParamStore};
use crate::rng::Purpose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the learning rate falls with the epoch count `e`, for decay constant `D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayLaw {
    /// `lr · D / (D + e)`
    Hyperbolic,
    /// `lr · ½^⌊e / D⌋`
    Step,
    /// `lr · exp(−e / D)`
    Exponential,
}

impl fmt::Display for DecayLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayLaw::Hyperbolic => "hyperbolic",
            DecayLaw::Step => "step",
            DecayLaw::Exponential => "exponential",
        })
    }
}

impl FromStr for DecayLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(DecayLaw::Hyperbolic),
            "step" => Ok(DecayLaw::Step),
            "exponential" => Ok(DecayLaw::Exponential),
            other => Err(Error::Contract(format!("unknown decay law '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_epochs: f64,
    pub decay: DecayLaw,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            decay_epochs: 500.0,
            decay: DecayLaw::Hyperbolic,
            batch_size: 1000,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        if !(self.decay_epochs > 0.0) {
            return Err(Error::Contract("decay epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Contract("Adam needs β₁, β₂ in [0,1) and ε > 0".into()));
        }
        Ok(())
    }

    /// Learning rate during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        let d = self.decay_epochs;
        self.learning_rate
            * match self.decay {
                DecayLaw::Hyperbolic => d / (d + e),
                DecayLaw::Step => 0.5f64.powi((e / d).floor() as i32),
                DecayLaw::Exponential => (-e / d).exp(),
            }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update. Parameters without a gradient see a zero
/// gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::Dimension(format!(
                    "gradient of '{name}' has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::Contract(format!("gradient for unknown parameter '{name}'"))),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.map(|g| g.data()[i]).unwrap_or(0.0);
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub test: Option<LossBreakdown>,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

/// Splits `count` indices into chunks of `size`, folding a trailing single
/// observation into the previous chunk so batch statistics stay defined.
fn merge_singleton(mut chunks: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    if chunks.len() >= 2 && chunks.last().map(Vec::len) == Some(1) {
        let last = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(last);
    }
    chunks
}

/// Evaluation loss (and classification error where the model classifies) over
/// a whole dataset in batches of `batch_size`, with noise fixed by `seed`.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<(LossBreakdown, Option<f64>)> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let chunks = merge_singleton(order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect());
    let latent = model.arch().latent_dim;
    let mut total = LossBreakdown::default();
    let mut wrong = 0.0;
    for (bi, idx) in chunks.iter().enumerate() {
        let x = data.images.select_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let noise = draw_noise(idx.len(), latent, seed, Purpose::EvalNoise, 0, bi as u64);
        let parts = model.evaluate(&x, Some(&labels), &noise)?;
        total.accumulate(&parts, idx.len() as f64);
        if model.arch().has_classifier() {
            let p = model.classify(&x)?;
            wrong += classification_error(&p, &labels)? * idx.len() as f64;
        }
    }
    let n = data.len() as f64;
    let err = model.arch().has_classifier().then_some(wrong / n);
    Ok((total.scaled(1.0 / n), err))
}

fn abort(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Trains `model` in place. `on_epoch` sees the metrics of epoch 0 (before any
/// update) and of every completed epoch.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let labels_needed = model.arch().has_classifier() || model.arch().kind == crate::nets::ArchKind::Ace;
    let latent = model.arch().latent_dim;
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    let (train0, train_err0) = evaluate(model, train_set, cfg.batch_size, cfg.seed)?;
    let (test0, test_err0) = match test_set {
        Some(t) => {
            let (l, e) = evaluate(model, t, cfg.batch_size, cfg.seed)?;
            (Some(l), e)
        }
        None => (None, None),
    };
    let first = EpochMetrics {
        epoch: 0,
        lr: cfg.lr_at(0),
        train: train0,
        test: test0,
        train_error: train_err0,
        test_error: test_err0,
    };
    on_epoch(&first, model)?;
    history.push(first);

    let mut state = AdamState::default();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        let chunks = merge_singleton(batches(
            train_set.len(),
            cfg.batch_size,
            cfg.seed,
            epoch as u64,
        )?);
        let mut running = LossBreakdown::default();
        for (bi, idx) in chunks.iter().enumerate() {
            let x = train_set.images.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let noise = draw_noise(idx.len(), latent, cfg.seed, Purpose::TrainNoise, epoch as u64, bi as u64);
            let (parts, grads) = model
                .loss_and_grad(&x, labels_needed.then_some(&labels[..]), &noise)
                .map_err(|e| abort(epoch, bi, e))?;
            if !parts.total.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {bi}: non-finite loss or gradient"
                )));
            }
            adam_step(model.params_mut(), &grads, &mut state, lr, &cfg.adam)?;
            running.accumulate(&parts, idx.len() as f64);
        }
        let (test, test_error) = match test_set {
            Some(t) => {
                let (l, e) = evaluate(model, t, cfg.batch_size, cfg.seed)?;
                (Some(l), e)
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train: running.scaled(1.0 / train_set.len() as f64),
            test,
            train_error: None,
            test_error,
        };
        on_epoch(&m, model)?;
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let arch = crate::nets::Architecture::classifier(3, vec![2], 2);
        crate::nets::Model::new(arch, 0).unwrap().params().clone()
    }

    #[test]
    fn decay_starts_at_the_configured_rate() {
        for decay in [DecayLaw::Hyperbolic, DecayLaw::Step, DecayLaw::Exponential] {
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                decay_epochs: 5.0,
                decay,
                ..TrainConfig::default()
            };
            assert_eq!(cfg.lr_at(0), 1e-3);
            assert!((0..50).all(|e| cfg.lr_at(e + 1) <= cfg.lr_at(e)));
        }
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters() {
        let mut p = store();
        let before = p.clone();
        let grads: BTreeMap<String, Tensor> = p
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut s = AdamState::default();
        adam_step(&mut p, &grads, &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut p = store();
        let name = p.names().next().unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert(name, Tensor::zeros(&[7, 7]));
        let mut s = AdamState::default();
        assert!(adam_step(&mut p, &grads, &mut s, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let c = merge_singleton(vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(c, vec![vec![0, 1], vec![2, 3, 4]]);
    }
}
