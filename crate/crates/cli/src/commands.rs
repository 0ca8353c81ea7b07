//! The subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gibbs_core::data::{load_mnist, resolve_data_dir, write_idx, BinarizeMode, Dataset, IdxArray, Split};
use gibbs_core::entropy::{
    conjugate_projections, einstein_entropy, entropy_table_export, intricates, projections_export, qq_export,
    qq_tail_departure, Ridge,
};
use gibbs_core::nets::{read_checkpoint, write_checkpoint, ArchKind, Model};
use gibbs_core::symmetry::{canonicalize, stats_export, symmetry_stats, CanonicalConfig, SymmetryStats};
use gibbs_core::trainer::{evaluate, train, EpochMetrics};
use gibbs_core::variational::{cross_entropy_export, full_cross_entropy, CrossEntropyRow, DvarMethod, GibbsView};
use gibbs_core::Tensor;
use serde::Serialize;

use crate::config::{Binarize, RunConfig};
use crate::error::CliError;
use crate::manifest::Run;
use crate::output::{square_side, write_json_line, write_pgm_grid};

pub fn data_dir(explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    resolve_data_dir(explicit).map_err(CliError::data)
}

/// Loads `split`, keeping the first `limit` observations when `limit > 0`.
pub fn load(dir: &Path, split: Split, limit: usize) -> Result<Dataset, CliError> {
    let d = load_mnist(dir, split).map_err(CliError::data)?;
    if limit > 0 {
        d.head(limit).map_err(CliError::data)
    } else {
        Ok(d)
    }
}

fn binarize(d: &Dataset, mode: BinarizeMode) -> Result<Dataset, CliError> {
    d.binarized(mode).map_err(CliError::data)
}

fn check_fit(model_dim: usize, classes: usize, needs_labels: bool, d: &Dataset) -> Result<(), CliError> {
    if d.dim() != model_dim {
        return Err(CliError::Config(format!(
            "model expects {model_dim} observables, {} data has {}",
            d.split,
            d.dim()
        )));
    }
    if needs_labels {
        if let Some(l) = d.labels.iter().find(|&&l| l >= classes) {
            return Err(CliError::Data(format!("label {l} out of range for {classes} classes")));
        }
    }
    Ok(())
}

fn needs_labels(kind: ArchKind) -> bool {
    kind != ArchKind::Vae
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    wall_seconds: f64,
}

/// Seeds of the stochastic binarization of the train and test sets.
fn binarize_modes(cfg: &RunConfig) -> (BinarizeMode, BinarizeMode) {
    (
        cfg.binarize.mode(cfg.arch, cfg.seed),
        cfg.binarize.mode(cfg.arch, cfg.seed.wrapping_add(1)),
    )
}

fn run_entries(cfg: &RunConfig) -> Vec<(String, String)> {
    let (tr, te) = binarize_modes(cfg);
    let mut e: Vec<(String, String)> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    e.push(("train_binarization".into(), tr.to_string()));
    e.push(("test_binarization".into(), te.to_string()));
    e
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch-{epoch:05}.ckpt")
}

pub fn train_cmd(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let dir = data_dir(cfg.data_dir.as_deref())?;
    cfg.data_dir = Some(dir.clone());
    let mut run = Run::begin("train", run_entries(&cfg), cfg.seed, out)?;
    let result = train_inner(&cfg, &dir, &mut run);
    run.finish(&result)?;
    result
}

fn train_inner(cfg: &RunConfig, dir: &Path, run: &mut Run) -> Result<(), CliError> {
    let (tr_mode, te_mode) = binarize_modes(cfg);
    let train_set = binarize(&load(dir, Split::Train, cfg.train_size)?, tr_mode)?;
    let test_set = binarize(&load(dir, Split::Test, cfg.test_size)?, te_mode)?;
    let arch = cfg.architecture();
    for d in [&train_set, &test_set] {
        check_fit(arch.input_dim, arch.classes, needs_labels(arch.kind), d)?;
    }
    let mut model = Model::new(arch, cfg.seed)?;
    std::fs::write(run.output("config.txt")?, cfg.render())?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(run.output("metrics.jsonl")?)?);
    let mut timings = std::io::BufWriter::new(std::fs::File::create(run.output("timings.jsonl")?)?);
    let mut checkpoints = Vec::new();
    for e in 1..=cfg.epochs {
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e != cfg.epochs {
            checkpoints.push((e, run.output(&checkpoint_name(e))?));
        }
    }
    let final_path = run.output("model.ckpt")?;
    let start = Instant::now();
    let mut on_epoch = |m: &EpochMetrics, model: &Model| -> gibbs_core::Result<()> {
        let io = |e: CliError| gibbs_core::Error::Io(std::io::Error::other(e.to_string()));
        write_json_line(&mut metrics, m).map_err(io)?;
        metrics.flush()?;
        let t = Timing {
            epoch: m.epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        write_json_line(&mut timings, &t).map_err(io)?;
        timings.flush()?;
        eprintln!(
            "epoch {:>4}  lr {:.3e}  train {:.4}  test {}",
            m.epoch,
            m.lr,
            m.train.total,
            m.test.map(|t| format!("{:.4}", t.total)).unwrap_or_default()
        );
        if let Some((_, p)) = checkpoints.iter().find(|(e, _)| *e == m.epoch) {
            write_checkpoint(model, p)?;
        }
        Ok(())
    };
    let tc = cfg.train_config();
    train(&mut model, &train_set, Some(&test_set), &tc, &mut on_epoch)?;
    write_checkpoint(&model, &final_path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub data_dir: Option<PathBuf>,
    pub limit: usize,
    pub binarize: Binarize,
    pub seed: u64,
    pub batch_size: usize,
    pub cross_entropy: usize,
    pub samples: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    split: String,
    observations: usize,
    binarization: String,
    loss: gibbs_core::nets::LossBreakdown,
    bound: Option<f64>,
    error: Option<f64>,
}

fn read_model(path: &Path) -> Result<Model, CliError> {
    read_checkpoint(path).map_err(CliError::data)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let model = read_model(&a.checkpoint)?;
    if a.batch_size == 0 {
        return Err(CliError::Config("batch size must be at least 1".into()));
    }
    let dir = data_dir(a.data_dir.as_deref())?;
    let mode = a.binarize.mode(model.arch().kind, a.seed);
    let entries = vec![
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("split".into(), a.split.to_string()),
        ("data_dir".into(), dir.display().to_string()),
        ("limit".into(), a.limit.to_string()),
        ("binarization".into(), mode.to_string()),
        ("batch_size".into(), a.batch_size.to_string()),
        ("cross_entropy".into(), a.cross_entropy.to_string()),
        ("samples".into(), a.samples.to_string()),
    ];
    let mut run = match &a.out {
        Some(out) => Some(Run::begin("eval", entries, a.seed, out)?),
        None => None,
    };
    let result = eval_inner(a, &model, &dir, mode, run.as_mut());
    if let Some(run) = run {
        run.finish(&result)?;
    }
    result
}

fn eval_inner(a: &EvalArgs, model: &Model, dir: &Path, mode: BinarizeMode, run: Option<&mut Run>) -> Result<(), CliError> {
    let data = binarize(&load(dir, a.split, a.limit)?, mode)?;
    let arch = model.arch();
    check_fit(arch.input_dim, arch.classes, needs_labels(arch.kind), &data)?;
    let (loss, error) = evaluate(model, &data, a.batch_size, a.seed)?;
    let report = EvalReport {
        checkpoint: a.checkpoint.display().to_string(),
        split: a.split.to_string(),
        observations: data.len(),
        binarization: mode.to_string(),
        loss,
        bound: arch.has_generative().then(|| loss.bound()),
        error,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    let rows = if a.cross_entropy > 0 {
        if !arch.has_generative() {
            return Err(CliError::Config("cross-entropy needs a generative model".into()));
        }
        Some(cross_entropy_rows(model, &data.head(a.cross_entropy)?, a.samples, a.seed)?)
    } else {
        None
    };
    if let Some(run) = run {
        std::fs::write(run.output("eval.json")?, serde_json::to_string_pretty(&report)?)?;
        if let Some(rows) = &rows {
            cross_entropy_export(rows, &run.output("cross_entropy.csv")?)?;
        }
    }
    Ok(())
}

/// `−log q(x)` per observation through the decoder of its label (or the
/// single decoder of an auto-encoder).
fn cross_entropy_rows(model: &Model, data: &Dataset, samples: usize, seed: u64) -> Result<Vec<CrossEntropyRow>, CliError> {
    let classes = model.arch().generative_classes();
    let mut rows: Vec<Option<CrossEntropyRow>> = vec![None; data.len()];
    for class in 0..classes {
        let idx: Vec<usize> = (0..data.len())
            .filter(|&i| classes == 1 || data.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let xs = data.images.select_rows(&idx)?;
        let view = GibbsView { model, class };
        for r in full_cross_entropy(&view, &xs, samples, DvarMethod::MonteCarloLogMeanExp, seed)? {
            let i = idx[r.index];
            rows[i] = Some(CrossEntropyRow { index: i, ..r });
        }
    }
    Ok(rows.into_iter().flatten().collect())
}

pub enum GenerateMode {
    Grid { coord: usize, points: usize, lo: f64, hi: f64 },
    Samples { count: usize },
}

pub fn generate_cmd(checkpoint: &Path, class: Option<usize>, mode: &GenerateMode, seed: u64, out: &Path) -> Result<(), CliError> {
    let model = read_model(checkpoint)?;
    if !model.arch().has_generative() {
        return Err(CliError::Config("the checkpoint has no decoder".into()));
    }
    let classes: Vec<usize> = match class {
        Some(c) => vec![c],
        None => (0..model.arch().generative_classes()).collect(),
    };
    let mut entries = vec![
        ("checkpoint".to_string(), checkpoint.display().to_string()),
        (
            "classes".into(),
            classes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        ),
    ];
    match mode {
        GenerateMode::Grid { coord, points, lo, hi } => {
            entries.push(("mode".into(), "grid".into()));
            entries.push(("coord".into(), coord.to_string()));
            entries.push(("points".into(), points.to_string()));
            entries.push(("lo".into(), lo.to_string()));
            entries.push(("hi".into(), hi.to_string()));
        }
        GenerateMode::Samples { count } => {
            entries.push(("mode".into(), "samples".into()));
            entries.push(("count".into(), count.to_string()));
        }
    }
    let mut run = Run::begin("generate", entries, seed, out)?;
    let result = (|| {
        let side = square_side(model.arch().input_dim)?;
        let mut images = Vec::new();
        for &c in &classes {
            images.push(match *mode {
                GenerateMode::Grid { coord, points, lo, hi } => model.generate_grid(c, coord, points, lo, hi)?,
                GenerateMode::Samples { count } => model.generate(c, count, seed)?,
            });
        }
        let cols = images[0].rows();
        let tiles: Vec<&[f64]> = images.iter().flat_map(|t| (0..t.rows()).map(move |i| t.row(i))).collect();
        let name = match mode {
            GenerateMode::Grid { .. } => "grid.pgm",
            GenerateMode::Samples { .. } => "samples.pgm",
        };
        write_pgm_grid(&run.output(name)?, &tiles, side, cols)
    })();
    run.finish(&result)?;
    result
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Entropy,
    Intricates,
    Qq,
    Kurtosis,
}

pub struct AnalyzeArgs {
    pub analysis: Analysis,
    pub data_dir: Option<PathBuf>,
    pub split: Split,
    pub limit: usize,
    pub ridge: Ridge,
    pub class: Option<usize>,
    pub k: usize,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct QqSummary {
    observations: usize,
    tail_departure: f64,
}

#[derive(Serialize)]
struct KurtosisSummary {
    observations: usize,
    dimension: usize,
    kurtosis: f64,
    /// `N(N+2)`, the value for Gaussian data.
    gaussian_value: f64,
}

pub fn analyze_cmd(a: &AnalyzeArgs) -> Result<(), CliError> {
    let dir = data_dir(a.data_dir.as_deref())?;
    let name = format!("{:?}", a.analysis).to_lowercase();
    let entries = vec![
        ("analysis".to_string(), name.clone()),
        ("data_dir".into(), dir.display().to_string()),
        ("split".into(), a.split.to_string()),
        ("limit".into(), a.limit.to_string()),
        (
            "ridge".into(),
            match a.ridge {
                Ridge::Default => "default".into(),
                Ridge::Value(v) => v.to_string(),
            },
        ),
        ("class".into(), a.class.map(|c| c.to_string()).unwrap_or_else(|| "all".into())),
        ("k".into(), a.k.to_string()),
    ];
    let mut run = Run::begin(&format!("analyze {name}"), entries, 0, &a.out)?;
    let result = analyze_inner(a, &dir, &mut run);
    run.finish(&result)?;
    result
}

fn analyze_inner(a: &AnalyzeArgs, dir: &Path, run: &mut Run) -> Result<(), CliError> {
    let data = load(dir, a.split, a.limit)?;
    let report = einstein_entropy(&data.images, a.ridge)?;
    match a.analysis {
        Analysis::Entropy => {
            entropy_table_export(&report, &data.labels, &run.output("entropy.csv")?)?;
            // Axes: conjugates of the two lowest-entropy observations.
            let axes: Vec<usize> = report.ranking.iter().take(2).copied().collect();
            let proj = conjugate_projections(&report, &data.images, &axes)?;
            projections_export(&proj, &data.labels, &run.output("conjugate_projections.csv")?)?;
            println!(
                "{} observations, log det C {:.4}, ridge {:.3e}",
                data.len(),
                report.log_det,
                report.ridge
            );
        }
        Analysis::Intricates => {
            let classes: Vec<usize> = match a.class {
                Some(c) => vec![c],
                None => {
                    let mut c: Vec<usize> = data.labels.clone();
                    c.sort_unstable();
                    c.dedup();
                    c
                }
            };
            let side = square_side(data.dim())?;
            let mut csv = std::io::BufWriter::new(std::fs::File::create(run.output("intricates.csv")?)?);
            writeln!(csv, "class,rank,index,neg_log_lik")?;
            let mut tiles = Vec::new();
            for &c in &classes {
                let idx = intricates(&report, &data.labels, c, a.k)?;
                for (r, &i) in idx.iter().enumerate() {
                    writeln!(csv, "{c},{r},{i},{}", report.neg_log_lik[i])?;
                    tiles.push(data.images.row(i));
                }
            }
            csv.flush()?;
            write_pgm_grid(&run.output("intricates.pgm")?, &tiles, side, a.k)?;
        }
        Analysis::Qq => {
            let points = qq_export(&report.neg_log_lik, &run.output("qq.csv")?)?;
            let s = QqSummary {
                observations: data.len(),
                tail_departure: qq_tail_departure(&points),
            };
            std::fs::write(run.output("qq_summary.json")?, serde_json::to_string_pretty(&s)?)?;
            println!("right-tail departure {:.3} standardized units", s.tail_departure);
        }
        Analysis::Kurtosis => {
            let n = data.dim() as f64;
            let s = KurtosisSummary {
                observations: data.len(),
                dimension: data.dim(),
                kurtosis: report.kurtosis,
                gaussian_value: n * (n + 2.0),
            };
            std::fs::write(run.output("kurtosis.json")?, serde_json::to_string_pretty(&s)?)?;
            println!("kurtosis {:.4} (Gaussian value {:.1})", s.kurtosis, s.gaussian_value);
        }
    }
    Ok(())
}

pub struct CanonicalizeArgs {
    pub data_dir: Option<PathBuf>,
    pub split: Split,
    pub limit: usize,
    pub preview: usize,
    pub out: PathBuf,
}

pub fn canonicalize_cmd(a: &CanonicalizeArgs) -> Result<(), CliError> {
    let dir = data_dir(a.data_dir.as_deref())?;
    let entries = vec![
        ("data_dir".to_string(), dir.display().to_string()),
        ("split".into(), a.split.to_string()),
        ("limit".into(), a.limit.to_string()),
        ("preview".into(), a.preview.to_string()),
    ];
    let mut run = Run::begin("canonicalize", entries, 0, &a.out)?;
    let result = canonicalize_inner(a, &dir, &mut run);
    run.finish(&result)?;
    result
}

fn canonicalize_inner(a: &CanonicalizeArgs, dir: &Path, run: &mut Run) -> Result<(), CliError> {
    let data = load(dir, a.split, a.limit)?;
    let side = square_side(data.dim())?;
    let cfg = CanonicalConfig::for_side(side);
    let t = cfg.target_side();
    let mut stats: Vec<SymmetryStats> = Vec::with_capacity(data.len());
    let mut canonical = Vec::with_capacity(data.len());
    let mut skipped = Vec::new();
    for i in 0..data.len() {
        let img = Tensor::new(vec![side, side], data.images.row(i).to_vec())?;
        let s = symmetry_stats(&img).map_err(|e| CliError::Data(format!("image {i}: {e}")))?;
        match canonicalize(&img, &s, &cfg) {
            Ok(c) => canonical.push(c),
            Err(e) => {
                skipped.push((i, e.to_string()));
                canonical.push(Tensor::zeros(&[t, t]));
            }
        }
        stats.push(s);
    }
    stats_export(&stats, &run.output("stats.csv")?)?;
    let bytes: Vec<u8> = canonical
        .iter()
        .flat_map(|c| c.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let idx = IdxArray {
        dims: vec![data.len(), t, t],
        bytes,
    };
    write_idx(&run.output("canonical-images-idx3-ubyte")?, &idx)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(run.output("skipped.csv")?)?);
    writeln!(w, "index,reason")?;
    for (i, r) in &skipped {
        writeln!(w, "{i},\"{}\"", r.replace('"', "'"))?;
    }
    w.flush()?;
    let n = a.preview.min(data.len());
    if n > 0 {
        let originals: Vec<&[f64]> = (0..n).map(|i| data.images.row(i)).collect();
        write_pgm_grid(&run.output("preview-original.pgm")?, &originals, side, n.min(10))?;
        let canon: Vec<&[f64]> = canonical[..n].iter().map(|c| c.data()).collect();
        write_pgm_grid(&run.output("preview-canonical.pgm")?, &canon, t, n.min(10))?;
    }
    println!("{} images canonicalized, {} skipped", data.len() - skipped.len(), skipped.len());
    Ok(())
}
