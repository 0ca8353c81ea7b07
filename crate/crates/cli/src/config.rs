//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gibbs_core::data::BinarizeMode;
use gibbs_core::expfamily::LatentFamily;
use gibbs_core::nets::{ArchKind, Architecture};
use gibbs_core::trainer::{AdamConfig, DecayLaw, TrainConfig};

use crate::error::CliError;

/// How training images are binarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarize {
    Threshold,
    Stochastic,
    /// Threshold for classifiers, stochastic for density runs.
    Auto,
}

impl Binarize {
    pub fn mode(self, kind: ArchKind, seed: u64) -> BinarizeMode {
        match self {
            Binarize::Threshold => BinarizeMode::Threshold,
            Binarize::Stochastic => BinarizeMode::Stochastic { seed },
            Binarize::Auto => match kind {
                ArchKind::Classifier | ArchKind::AceNonGen => BinarizeMode::Threshold,
                ArchKind::Ace | ArchKind::Vae => BinarizeMode::Stochastic { seed },
            },
        }
    }
}

impl FromStr for Binarize {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "threshold" => Ok(Binarize::Threshold),
            "stochastic" => Ok(Binarize::Stochastic),
            "auto" => Ok(Binarize::Auto),
            other => Err(CliError::Config(format!("unknown binarization '{other}'"))),
        }
    }
}

impl std::fmt::Display for Binarize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Binarize::Threshold => "threshold",
            Binarize::Stochastic => "stochastic",
            Binarize::Auto => "auto",
        })
    }
}

/// Every setting of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub latent_family: LatentFamily,
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub classes: usize,
    pub classifier_hidden: Vec<usize>,
    pub share_decoders: bool,
    pub dual_recon: bool,
    pub lr: f64,
    pub decay: DecayLaw,
    pub decay_epochs: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `0` keeps every observation.
    pub train_size: usize,
    pub test_size: usize,
    pub binarize: Binarize,
    /// Checkpoint every this many epochs; `0` writes only the final model.
    pub checkpoint_every: usize,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            arch: ArchKind::Ace,
            latent_family: LatentFamily::Laplacian,
            input_dim: 784,
            encoder_hidden: vec![700],
            latent_dim: 400,
            decoder_hidden: vec![700],
            classes: 10,
            classifier_hidden: vec![700, 700, 700],
            share_decoders: false,
            dual_recon: false,
            lr: t.learning_rate,
            decay: t.decay,
            decay_epochs: t.decay_epochs,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            train_size: 0,
            test_size: 0,
            binarize: Binarize::Auto,
            checkpoint_every: 0,
            data_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "arch",
    "latent_family",
    "input_dim",
    "encoder_hidden",
    "latent_dim",
    "decoder_hidden",
    "classes",
    "classifier_hidden",
    "share_decoders",
    "dual_recon",
    "lr",
    "decay",
    "decay_epochs",
    "batch_size",
    "epochs",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "train_size",
    "test_size",
    "binarize",
    "checkpoint_every",
    "data_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(CliError::Config(format!("{key}: expected on|off, got '{other}'"))),
    }
}

fn core<T>(key: &str, r: gibbs_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "arch" => self.arch = core(key, value.parse())?,
            "latent_family" => self.latent_family = core(key, value.parse())?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "classifier_hidden" => self.classifier_hidden = parse_list(key, value)?,
            "share_decoders" => self.share_decoders = parse_switch(key, value)?,
            "dual_recon" => self.dual_recon = parse_switch(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay" => self.decay = core(key, value.parse())?,
            "decay_epochs" => self.decay_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "binarize" => self.binarize = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            other => {
                return Err(CliError::Config(format!(
                    "unknown key '{other}'; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; repeated keys are rejected.
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(CliError::Config(format!(
                    "line {}: key '{k}' already set on line {prev}",
                    n + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.arch.to_string()),
            ("latent_family", self.latent_family.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("encoder_hidden", join(&self.encoder_hidden)),
            ("latent_dim", self.latent_dim.to_string()),
            ("decoder_hidden", join(&self.decoder_hidden)),
            ("classes", self.classes.to_string()),
            ("classifier_hidden", join(&self.classifier_hidden)),
            ("share_decoders", on_off(self.share_decoders)),
            ("dual_recon", on_off(self.dual_recon)),
            ("lr", self.lr.to_string()),
            ("decay", self.decay.to_string()),
            ("decay_epochs", self.decay_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("binarize", self.binarize.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            (
                "data_dir",
                self.data_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
        ]
    }

    pub fn architecture(&self) -> Architecture {
        let classifier_only = matches!(self.arch, ArchKind::Classifier | ArchKind::AceNonGen);
        Architecture {
            kind: self.arch,
            input_dim: self.input_dim,
            encoder_hidden: if classifier_only { vec![] } else { self.encoder_hidden.clone() },
            latent_dim: if classifier_only { 0 } else { self.latent_dim },
            decoder_hidden: if classifier_only { vec![] } else { self.decoder_hidden.clone() },
            classes: if self.arch == ArchKind::Vae { 1 } else { self.classes },
            classifier_hidden: if self.arch == ArchKind::Vae {
                vec![]
            } else {
                self.classifier_hidden.clone()
            },
            family: self.latent_family,
            share_decoders: self.share_decoders,
            dual_reconstruction: self.dual_recon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            decay_epochs: self.decay_epochs,
            decay: self.decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.architecture()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("classifier_hidden", "200,200").unwrap();
        c.set("dual_recon", "on").unwrap();
        c.set("data_dir", "/tmp/x").unwrap();
        assert_eq!(RunConfig::parse_str(&c.render()).unwrap(), c);
    }

    #[test]
    fn every_key_is_rendered() {
        let keys: Vec<&str> = RunConfig::default().entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        assert!(RunConfig::parse_str("learning_rate = 1").is_err());
        assert!(RunConfig::parse_str("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::parse_str("lr 1").is_err());
        assert!(RunConfig::parse_str("# comment\n\nlr = 0.5 # trailing\n").is_ok());
    }
}
