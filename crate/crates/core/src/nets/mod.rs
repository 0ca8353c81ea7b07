//! Network assembly: the Gibbs-machine auto-encoder, the auto-classifier-encoder
//! (ACE) and the maxout classifier branch, with their losses.
//!
//! Weights multiply on the right, `y = x·W + b`, so a layer from `a` to `b`
//! units stores `W` as `a×b`.
//!
//! Parameter names:
//! - `enc.{l}.w`, `enc.{l}.b`: shared encoder layers (tanh)
//! - `head.{c}.mean.{w,b}`, `head.{c}.logsd.{w,b}`: latent heads per class
//! - `dec.{c}.{l}.{w,b}`, `dec.{c}.out.{w,b}`: decoders per class (tanh, then
//!   sigmoid logits)
//! - `cls.{l}.{w,b}`, `cls.out.{w,b}`: classifier branch (affine to twice the
//!   width, two-unit maxout, batch normalization on the first and last hidden
//!   layers)

mod checkpoint;
mod losses;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{batchnorm_forward, dual_reconstruction_error, reconstruction_error};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_tensor, softmax, Gradients, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::expfamily::{standard_noise, LatentDensity, LatentFamily};
use crate::rng::{self, Purpose};
use crate::tensor::{init_weights, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Auto-classifier-encoder: shared encoder, per-class heads and decoders,
    /// classifier branch.
    Ace,
    /// Single-decoder Gibbs-machine auto-encoder.
    Vae,
    /// Classifier branch alone.
    Classifier,
    /// Classifier branch trained with the dual reconstruction error.
    AceNonGen,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Ace => "ace",
            ArchKind::Vae => "vae",
            ArchKind::Classifier => "classifier",
            ArchKind::AceNonGen => "ace-nongen",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ace" => Ok(ArchKind::Ace),
            "vae" => Ok(ArchKind::Vae),
            "classifier" => Ok(ArchKind::Classifier),
            "ace-nongen" => Ok(ArchKind::AceNonGen),
            other => Err(Error::Contract(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub classes: usize,
    pub classifier_hidden: Vec<usize>,
    pub family: LatentFamily,
    pub share_decoders: bool,
    pub dual_reconstruction: bool,
}

impl Architecture {
    /// `input-hidden…-latent-hidden…-input` auto-encoder with one decoder.
    pub fn vae(
        input_dim: usize,
        encoder_hidden: Vec<usize>,
        latent_dim: usize,
        decoder_hidden: Vec<usize>,
        family: LatentFamily,
    ) -> Self {
        Architecture {
            kind: ArchKind::Vae,
            input_dim,
            encoder_hidden,
            latent_dim,
            decoder_hidden,
            classes: 1,
            classifier_hidden: vec![],
            family,
            share_decoders: false,
            dual_reconstruction: false,
        }
    }

    pub fn classifier(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Architecture {
            kind: ArchKind::Classifier,
            input_dim,
            encoder_hidden: vec![],
            latent_dim: 0,
            decoder_hidden: vec![],
            classes,
            classifier_hidden: hidden,
            family: LatentFamily::Gaussian,
            share_decoders: false,
            dual_reconstruction: false,
        }
    }

    pub fn has_generative(&self) -> bool {
        matches!(self.kind, ArchKind::Ace | ArchKind::Vae)
    }

    pub fn has_classifier(&self) -> bool {
        !matches!(self.kind, ArchKind::Vae)
    }

    pub fn uses_dual(&self) -> bool {
        match self.kind {
            ArchKind::AceNonGen => true,
            ArchKind::Vae => false,
            _ => self.dual_reconstruction,
        }
    }

    /// Number of latent heads and decoders.
    pub fn generative_classes(&self) -> usize {
        match self.kind {
            ArchKind::Ace => self.classes,
            ArchKind::Vae => 1,
            _ => 0,
        }
    }

    fn decoder_index(&self, class: usize) -> usize {
        if self.share_decoders {
            0
        } else {
            class
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(m.to_string()));
        if self.input_dim == 0 {
            return bad("input dimension must be positive");
        }
        if self.has_generative() && self.latent_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if self.has_classifier() && self.classes < 2 && self.kind != ArchKind::Ace {
            return bad("a classifier needs at least 2 classes");
        }
        if self.kind == ArchKind::Ace && self.classes == 0 {
            return bad("ACE needs at least 1 class");
        }
        if self.has_classifier() && self.classifier_hidden.is_empty() {
            return bad("the classifier branch needs at least one hidden layer");
        }
        if self.uses_dual() && self.classifier_hidden.is_empty() {
            return bad("dual reconstruction needs a classifier hidden layer");
        }
        let all = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.classifier_hidden);
        if all.clone().any(|&d| d == 0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// `(name, shape)` of every weight matrix, each followed by its bias.
    fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<(String, Vec<usize>)>, name: String, a: usize, b: usize| {
            out.push((format!("{name}.w"), vec![a, b]));
            out.push((format!("{name}.b"), vec![b]));
        };
        if self.has_generative() {
            let mut width = self.input_dim;
            for (l, &h) in self.encoder_hidden.iter().enumerate() {
                dense(&mut out, format!("enc.{l}"), width, h);
                width = h;
            }
            for c in 0..self.generative_classes() {
                dense(&mut out, format!("head.{c}.mean"), width, self.latent_dim);
                dense(&mut out, format!("head.{c}.logsd"), width, self.latent_dim);
            }
            let decoders = if self.share_decoders {
                1
            } else {
                self.generative_classes()
            };
            for c in 0..decoders {
                let mut w = self.latent_dim;
                for (l, &h) in self.decoder_hidden.iter().enumerate() {
                    dense(&mut out, format!("dec.{c}.{l}"), w, h);
                    w = h;
                }
                dense(&mut out, format!("dec.{c}.out"), w, self.input_dim);
            }
        }
        if self.has_classifier() {
            let mut width = self.input_dim;
            for (l, &h) in self.classifier_hidden.iter().enumerate() {
                dense(&mut out, format!("cls.{l}"), width, 2 * h);
                width = h;
            }
            dense(&mut out, "cls.out".into(), width, self.classes);
        }
        out
    }
}

/// Parameters of one loss evaluation, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub generative: f64,
    pub reconstruction: f64,
    pub classifier: f64,
    pub dual_reconstruction: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Generative plus reconstruction error: the upper bound on `−log q(x)`.
    pub fn bound(&self) -> f64 {
        self.generative + self.reconstruction
    }

    /// Weighted running sum used to average over batches.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.generative += weight * other.generative;
        self.reconstruction += weight * other.reconstruction;
        self.classifier += weight * other.classifier;
        if let Some(d) = other.dual_reconstruction {
            *self.dual_reconstruction.get_or_insert(0.0) += weight * d;
        }
        self.total += weight * other.total;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.generative *= c;
        self.reconstruction *= c;
        self.classifier *= c;
        self.dual_reconstruction = self.dual_reconstruction.map(|d| d * c);
        self.total *= c;
        self
    }
}

/// Per-observation latent means and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpec {
    pub mean: Tensor,
    pub sd: Tensor,
}

impl LatentSpec {
    /// Density of row `i`.
    pub fn density(&self, family: LatentFamily, i: usize) -> Result<LatentDensity> {
        LatentDensity::new(family, self.mean.row(i).to_vec(), self.sd.row(i).to_vec())
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    initialized: bool,
}

impl ParamStore {
    /// Store holding `tensors` as initialized values.
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore {
            tensors,
            initialized: true,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// Deterministic 64-bit FNV-1a hash of a parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Graph handles of every parameter.
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not bound")))
    }

    /// Gradients keyed by parameter name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: ParamStore,
}

/// Uniform noise for the latent sample of every observation, `[B×L]`.
pub type Noise = Tensor;

/// Open-interval uniforms for `rows` observations from a seeded stream.
pub fn draw_noise(rows: usize, latent: usize, seed: u64, purpose: Purpose, a: u64, b: u64) -> Noise {
    let mut r = rng::stream(seed, purpose, a, b);
    Tensor::new(vec![rows, latent], rng::open_uniforms(&mut r, rows * latent))
        .expect("length matches")
}

impl Model {
    /// Architecture with randomly initialized weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.parameter_shapes() {
            let t = if shape.len() == 2 {
                init_weights(shape[0], shape[1], seed ^ name_hash(&name))?
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Model {
            arch,
            params: ParamStore {
                tensors,
                initialized: true,
            },
        })
    }

    /// Architecture without parameters; every evaluation is refused until
    /// parameters are loaded.
    pub fn uninitialized(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Model {
            arch,
            params: ParamStore::default(),
        })
    }

    /// Model from stored parameters; names and shapes must match `arch`.
    pub fn from_parts(arch: Architecture, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "architecture has {} parameters, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return dim_err(format!(
                        "parameter '{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    ))
                }
                None => return Err(Error::Contract(format!("parameter '{name}' is missing"))),
            }
        }
        Ok(Model {
            arch,
            params: ParamStore {
                tensors,
                initialized: true,
            },
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn ensure_initialized(&self) -> Result<()> {
        if !self.params.initialized {
            return Err(Error::Contract("model parameters are not initialized".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (b, n) = x.dims2()?;
        if n != self.arch.input_dim {
            return dim_err(format!(
                "model expects {} observables, batch has {n}",
                self.arch.input_dim
            ));
        }
        if b == 0 {
            return dim_err("empty batch");
        }
        Ok(b)
    }

    /// Puts every parameter on `g`, differentiable if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bindings> {
        self.ensure_initialized()?;
        let vars = self
            .params
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Ok(Bindings { vars })
    }

    fn dense(&self, g: &mut Graph, b: &Bindings, x: Var, name: &str) -> Result<Var> {
        let w = b.var(&format!("{name}.w"))?;
        let bias = b.var(&format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }

    fn encoder(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.arch.encoder_hidden.len() {
            let a = self.dense(g, b, h, &format!("enc.{l}"))?;
            h = g.tanh(a)?;
        }
        Ok(h)
    }

    fn heads(&self, g: &mut Graph, b: &Bindings, h: Var, class: usize) -> Result<(Var, Var)> {
        let mean = self.dense(g, b, h, &format!("head.{class}.mean"))?;
        let log_sd = self.dense(g, b, h, &format!("head.{class}.logsd"))?;
        Ok((mean, log_sd))
    }

    /// Decoder logits for latent `z`.
    fn decoder(&self, g: &mut Graph, b: &Bindings, z: Var, class: usize) -> Result<Var> {
        let d = self.arch.decoder_index(class);
        let mut h = z;
        for l in 0..self.arch.decoder_hidden.len() {
            let a = self.dense(g, b, h, &format!("dec.{d}.{l}"))?;
            h = g.tanh(a)?;
        }
        self.dense(g, b, h, &format!("dec.{d}.out"))
    }

    /// Classifier logits and the normalized first hidden layer.
    fn classifier(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let layers = self.arch.classifier_hidden.len();
        let mut h = x;
        let mut first = None;
        for l in 0..layers {
            let a = self.dense(g, b, h, &format!("cls.{l}"))?;
            h = g.maxout2(a)?;
            if l == 0 || l + 1 == layers {
                h = g.batchnorm(h)?;
            }
            if l == 0 {
                first = Some(h);
            }
        }
        let logits = self.dense(g, b, h, "cls.out")?;
        Ok((logits, first.expect("at least one hidden layer")))
    }

    /// `z = μ + σ·ε(u)` with `ε` the family's standardized noise transform.
    fn sample_latent(&self, g: &mut Graph, mean: Var, log_sd: Var, noise: &Tensor) -> Result<Var> {
        let mut eps = noise.clone();
        for e in eps.data_mut() {
            *e = standard_noise(self.arch.family, *e)?;
        }
        if eps.shape() != g.value(mean).shape() {
            return dim_err(format!(
                "noise of shape {:?} for latent of shape {:?}",
                eps.shape(),
                g.value(mean).shape()
            ));
        }
        let e = g.constant(eps);
        let sd = g.exp(log_sd)?;
        let spread = g.mul(sd, e)?;
        g.add(mean, spread)
    }

    /// Per-row generative and reconstruction errors of the rows of `x` under
    /// class `class`'s head and decoder.
    fn generative_rows(
        &self,
        g: &mut Graph,
        b: &Bindings,
        h: Var,
        x: &Tensor,
        noise: &Tensor,
        class: usize,
    ) -> Result<(Var, Var)> {
        let (mean, log_sd) = self.heads(g, b, h, class)?;
        let gen = g.generative_error(mean, log_sd, self.arch.family)?;
        let z = self.sample_latent(g, mean, log_sd, noise)?;
        let logits = self.decoder(g, b, z, class)?;
        let rec = g.binary_cross_entropy(logits, x)?;
        Ok((gen, rec))
    }

    fn dual_term(&self, g: &mut Graph, first: Var, x: &Tensor) -> Result<Var> {
        losses::dual_on_graph(g, first, x)
    }

    /// Builds the training objective on `g`. `labels` route each observation
    /// to its class decoder; they are required for ACE and classifier kinds.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph,
        b: &Bindings,
        x: &Tensor,
        labels: Option<&[usize]>,
        noise: &Tensor,
    ) -> Result<(Var, LossBreakdown)> {
        let rows = self.check_input(x)?;
        let inv_b = 1.0 / rows as f64;
        let xv = g.constant(x.clone());
        let mut parts = LossBreakdown::default();
        let mut terms: Vec<Var> = Vec::new();

        if let Some(l) = labels {
            if l.len() != rows {
                return dim_err(format!("{} labels for {rows} observations", l.len()));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= self.arch.classes) {
                return Err(Error::Contract(format!(
                    "label {bad} out of range for {} classes",
                    self.arch.classes
                )));
            }
        }

        if self.arch.has_generative() {
            let h = self.encoder(g, b, xv)?;
            let groups: Vec<(usize, Vec<usize>)> = if self.arch.kind == ArchKind::Vae {
                vec![(0, (0..rows).collect())]
            } else {
                let l = labels.ok_or_else(|| {
                    Error::Contract("ACE training needs labels; use the test bound".into())
                })?;
                (0..self.arch.classes)
                    .map(|c| (c, (0..rows).filter(|&i| l[i] == c).collect::<Vec<_>>()))
                    .filter(|(_, idx)| !idx.is_empty())
                    .collect()
            };
            let mut gen_sum = None;
            let mut rec_sum = None;
            for (c, idx) in groups {
                let (hc, xc, nc) = if idx.len() == rows {
                    (h, x.clone(), noise.clone())
                } else {
                    (g.select_rows(h, &idx)?, x.select_rows(&idx)?, noise.select_rows(&idx)?)
                };
                let (gen, rec) = self.generative_rows(g, b, hc, &xc, &nc, c)?;
                let gs = g.sum(gen)?;
                let rs = g.sum(rec)?;
                gen_sum = Some(match gen_sum {
                    Some(a) => g.add(a, gs)?,
                    None => gs,
                });
                rec_sum = Some(match rec_sum {
                    Some(a) => g.add(a, rs)?,
                    None => rs,
                });
            }
            let gen = g.scale(gen_sum.expect("non-empty batch"), inv_b)?;
            let rec = g.scale(rec_sum.expect("non-empty batch"), inv_b)?;
            parts.generative = g.value(gen).item()?;
            parts.reconstruction = g.value(rec).item()?;
            terms.push(gen);
            terms.push(rec);
        }

        if self.arch.has_classifier() {
            let (logits, first) = self.classifier(g, b, xv)?;
            let l = labels.ok_or_else(|| Error::Contract("classifier training needs labels".into()))?;
            let ce = g.softmax_cross_entropy(logits, l)?;
            let s = g.sum(ce)?;
            let cls = g.scale(s, inv_b)?;
            parts.classifier = g.value(cls).item()?;
            terms.push(cls);
            if self.arch.uses_dual() {
                let dual = self.dual_term(g, first, x)?;
                parts.dual_reconstruction = Some(g.value(dual).item()?);
                terms.push(dual);
            }
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        parts.total = g.value(total).item()?;
        Ok((total, parts))
    }

    /// Training loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        labels: Option<&[usize]>,
        noise: &Tensor,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, true)?;
        let (total, parts) = self.loss_on_graph(&mut g, &b, x, labels, noise)?;
        let mut grads = g.backward(total)?;
        Ok((parts, b.collect(&mut grads)))
    }

    /// Training loss without gradients.
    pub fn loss(&self, x: &Tensor, labels: Option<&[usize]>, noise: &Tensor) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        Ok(self.loss_on_graph(&mut g, &b, x, labels, noise)?.1)
    }

    /// Generative and reconstruction error of a single-decoder auto-encoder.
    pub fn vae_bound(&self, x: &Tensor, noise: &Tensor) -> Result<LossBreakdown> {
        if self.arch.kind != ArchKind::Vae {
            return Err(Error::Contract("vae_bound needs a VAE architecture".into()));
        }
        self.loss(x, None, noise)
    }

    /// Labeled ACE objective.
    pub fn ace_loss(&self, x: &Tensor, labels: &[usize], noise: &Tensor) -> Result<LossBreakdown> {
        if self.arch.kind != ArchKind::Ace {
            return Err(Error::Contract("ace_loss needs an ACE architecture".into()));
        }
        self.loss(x, Some(labels), noise)
    }

    /// Classifier class probabilities, `[B×C]`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_initialized()?;
        if !self.arch.has_classifier() {
            return Err(Error::Unsupported("model has no classifier branch".into()));
        }
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let (logits, _) = self.classifier(&mut g, &b, xv)?;
        softmax(g.value(logits))
    }

    /// Posterior means and standard deviations under class `class`.
    pub fn encode(&self, x: &Tensor, class: usize) -> Result<LatentSpec> {
        self.ensure_initialized()?;
        self.check_generative_class(class)?;
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let h = self.encoder(&mut g, &b, xv)?;
        let (mean, log_sd) = self.heads(&mut g, &b, h, class)?;
        Ok(LatentSpec {
            mean: g.value(mean).clone(),
            sd: g.value(log_sd).map(f64::exp),
        })
    }

    /// Decoder output probabilities for latent rows `z` (`[K×L]`).
    pub fn decode(&self, z: &Tensor, class: usize) -> Result<Tensor> {
        self.ensure_initialized()?;
        self.check_generative_class(class)?;
        let (_, l) = z.dims2()?;
        if l != self.arch.latent_dim {
            return dim_err(format!("latent rows of width {l}, model has {}", self.arch.latent_dim));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let zv = g.constant(z.clone());
        let logits = self.decoder(&mut g, &b, zv, class)?;
        Ok(sigmoid_tensor(g.value(logits)))
    }

    fn check_generative_class(&self, class: usize) -> Result<()> {
        if !self.arch.has_generative() {
            return Err(Error::Unsupported("model has no generative branch".into()));
        }
        if class >= self.arch.generative_classes() {
            return Err(Error::Contract(format!(
                "class {class} out of range for {} decoders",
                self.arch.generative_classes()
            )));
        }
        Ok(())
    }

    /// Test-time bound: class weights `ω` mix the per-class generative and
    /// reconstruction errors of every observation.
    pub fn mixture_bound(&self, x: &Tensor, omega: &Tensor, noise: &Tensor) -> Result<LossBreakdown> {
        self.ensure_initialized()?;
        let rows = self.check_input(x)?;
        let k = self.arch.generative_classes();
        if k == 0 {
            return Err(Error::Unsupported("model has no generative branch".into()));
        }
        if omega.shape() != [rows, k] {
            return dim_err(format!(
                "class weights of shape {:?}, expected [{rows}, {k}]",
                omega.shape()
            ));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let h = self.encoder(&mut g, &b, xv)?;
        let (mut gen, mut rec) = (0.0, 0.0);
        for c in 0..k {
            let w: Vec<f64> = (0..rows).map(|i| omega.get2(i, c)).collect();
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (gv, rv) = self.generative_rows(&mut g, &b, h, x, noise, c)?;
            for i in 0..rows {
                gen += w[i] * g.value(gv).data()[i];
                rec += w[i] * g.value(rv).data()[i];
            }
        }
        let inv_b = 1.0 / rows as f64;
        Ok(LossBreakdown {
            generative: gen * inv_b,
            reconstruction: rec * inv_b,
            classifier: 0.0,
            dual_reconstruction: None,
            total: (gen + rec) * inv_b,
        })
    }

    /// ACE test bound with `ω` from the classifier's softmax.
    pub fn ace_test_bound(&self, x: &Tensor, noise: &Tensor) -> Result<LossBreakdown> {
        if self.arch.kind != ArchKind::Ace {
            return Err(Error::Contract("ace_test_bound needs an ACE architecture".into()));
        }
        let omega = self.classify(x)?;
        self.mixture_bound(x, &omega, noise)
    }

    /// Evaluation-time loss: the mixture bound for ACE (with the classifier
    /// term when labels are known), the training objective otherwise.
    pub fn evaluate(&self, x: &Tensor, labels: Option<&[usize]>, noise: &Tensor) -> Result<LossBreakdown> {
        match self.arch.kind {
            ArchKind::Ace => {
                let omega = self.classify(x)?;
                let mut parts = self.mixture_bound(x, &omega, noise)?;
                if let Some(l) = labels {
                    let rows = l.len();
                    let ce: f64 = l
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| -omega.get2(i, c).max(f64::MIN_POSITIVE).ln())
                        .sum::<f64>()
                        / rows as f64;
                    parts.classifier = ce;
                    parts.total += ce;
                }
                if self.arch.uses_dual() {
                    let d = self.dual_value(x)?;
                    parts.dual_reconstruction = Some(d);
                    parts.total += d;
                }
                Ok(parts)
            }
            ArchKind::Vae => self.loss(x, None, noise),
            ArchKind::Classifier | ArchKind::AceNonGen => self.loss(x, labels, noise),
        }
    }

    fn dual_value(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let (_, first) = self.classifier(&mut g, &b, xv)?;
        let d = self.dual_term(&mut g, first, x)?;
        g.value(d).item()
    }

    /// Decodes `count` prior samples through decoder `class`, `[count×N]`.
    pub fn generate(&self, class: usize, count: usize, seed: u64) -> Result<Tensor> {
        self.check_generative_class(class)?;
        let prior = LatentDensity::standard(self.arch.family, self.arch.latent_dim);
        let mut data = Vec::with_capacity(count * self.arch.latent_dim);
        for k in 0..count {
            let mut r = rng::stream(seed, Purpose::Generate, class as u64, k as u64);
            data.extend(prior.sample(&mut r));
        }
        let z = Tensor::new(vec![count, self.arch.latent_dim], data)?;
        self.decode(&z, class)
    }

    /// Decodes an equally spaced grid of `points` values in `[lo, hi]` on
    /// latent coordinate `coord`, other coordinates at zero; `[points×N]`.
    pub fn generate_grid(&self, class: usize, coord: usize, points: usize, lo: f64, hi: f64) -> Result<Tensor> {
        self.check_generative_class(class)?;
        let l = self.arch.latent_dim;
        if coord >= l {
            return dim_err(format!("latent coordinate {coord} out of range for {l}"));
        }
        if points < 2 {
            return Err(Error::Contract("a grid needs at least 2 points".into()));
        }
        let mut z = Tensor::zeros(&[points, l]);
        for k in 0..points {
            z.data_mut()[k * l + coord] = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        }
        self.decode(&z, class)
    }
}

/// Fraction of rows whose arg-max class differs from the label.
pub fn classification_error(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = probs.dims2()?;
    if b != labels.len() {
        return dim_err(format!("{} labels for {b} rows", labels.len()));
    }
    let wrong = (0..b)
        .filter(|&i| {
            let row = probs.row(i);
            let arg = (0..row.len())
                .fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg != labels[i]
        })
        .count();
    Ok(wrong as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ace() -> Architecture {
        Architecture {
            kind: ArchKind::Ace,
            input_dim: 16,
            encoder_hidden: vec![6],
            latent_dim: 3,
            decoder_hidden: vec![5],
            classes: 2,
            classifier_hidden: vec![4],
            family: LatentFamily::Laplacian,
            share_decoders: false,
            dual_reconstruction: false,
        }
    }

    #[test]
    fn parameter_names_are_complete() {
        let m = Model::new(tiny_ace(), 1).unwrap();
        let names: Vec<&String> = m.params().names().collect();
        assert!(names.iter().any(|n| *n == "dec.1.out.w"));
        assert!(names.iter().any(|n| *n == "cls.0.w"));
        assert_eq!(m.params().get("cls.0.w").unwrap().shape(), &[16, 8]);
        assert_eq!(m.params().get("head.1.logsd.b").unwrap().shape(), &[3]);
    }

    #[test]
    fn class_decoders_differ() {
        let m = Model::new(tiny_ace(), 1).unwrap();
        assert_ne!(m.params().get("dec.0.out.w"), m.params().get("dec.1.out.w"));
    }

    #[test]
    fn uninitialized_model_refuses_to_run() {
        let m = Model::uninitialized(tiny_ace()).unwrap();
        assert!(matches!(m.generate(0, 1, 0), Err(Error::Contract(_))));
        assert!(matches!(m.classify(&Tensor::zeros(&[2, 16])), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Model::new(tiny_ace(), 3).unwrap();
        let x = draw_noise(5, 16, 1, Purpose::Fixture, 0, 0);
        let p = m.classify(&x).unwrap();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let m = Model::new(tiny_ace(), 3).unwrap();
        let x = Tensor::zeros(&[2, 16]);
        let noise = Tensor::full(&[2, 3], 0.5);
        assert!(matches!(m.ace_loss(&x, &[0, 2], &noise), Err(Error::Contract(_))));
    }

    #[test]
    fn grid_has_requested_shape() {
        let m = Model::new(tiny_ace(), 3).unwrap();
        let g = m.generate_grid(1, 0, 30, -6.0, 6.0).unwrap();
        assert_eq!(g.shape(), &[30, 16]);
    }

    #[test]
    fn generation_is_seeded() {
        let m = Model::new(tiny_ace(), 3).unwrap();
        assert_eq!(m.generate(0, 4, 9).unwrap(), m.generate(0, 4, 9).unwrap());
    }

    #[test]
    fn classification_error_counts_mistakes() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        assert!((classification_error(&p, &[0, 1, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
