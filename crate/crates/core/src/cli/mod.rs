//! The `wsddn` command line: data generation, training, evaluation,
//! detection export, and gradient checking.

mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{EvalConfig, Paths, RunConfig};

use crate::autodiff::{checkpoint, ParamStore, Tensor};
use crate::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, LoadBoxes};
use crate::error::{Error, Result};
use crate::evaluation::{
    detect_dataset, detect_image, evaluate, format_detections, parse_detections, EvalReport, ImageDetection, View,
};
use crate::gradcheck::{self, GradCheckConfig};
use crate::network::{Network, Region, Variant};
use crate::training::{train, TrainState};

#[derive(Debug, Parser)]
#[command(name = "wsddn", version, about = "Weakly supervised two-stream region detector")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        t == Toggle::On
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization, and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, global = true)]
    pub box_score: Option<Toggle>,
    #[arg(long, global = true)]
    pub spatial_reg: Option<Toggle>,
    #[arg(long, global = true)]
    pub multi_view: Option<Toggle>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Config override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    GenData,
    /// Train a model on the train split.
    Train {
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report per-class AP on the test split and CorLoc on the train split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Average the scores of several checkpoints.
        #[arg(long, value_delimiter = ',', conflicts_with = "checkpoint")]
        ensemble: Vec<PathBuf>,
        /// Score a detections file instead of running a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "ensemble"])]
        detections: Option<PathBuf>,
    },
    /// Write post-NMS detections and an overlay image for one image.
    Detect {
        #[arg(long)]
        image: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Keep detections scoring strictly above this value.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = GradCheckConfig::default().instances_per_op)]
        instances: usize,
        /// Perturb one operation's gradient (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A check ran but found a failure.
    CheckFailed,
}

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

/// Parses arguments and runs the command, writing progress to `out`.
/// Returns the process exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) => 2,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Builds the effective configuration from the file, overrides, and flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(t) = common.box_score {
        cfg.model.box_score_scaling = t.into();
    }
    if let Some(t) = common.spatial_reg {
        cfg.train.spatial_regularizer = t.into();
    }
    if let Some(t) = common.multi_view {
        cfg.eval.multi_view = t.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, cli.common.force, out),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref(), cli.common.force, out),
        Command::Eval {
            checkpoint,
            ensemble,
            detections,
        } => {
            let source = match (detections, ensemble.is_empty()) {
                (Some(d), _) => Source::Detections(d.clone()),
                (None, false) => Source::Checkpoints(ensemble.clone()),
                (None, true) => Source::Checkpoints(vec![checkpoint.clone().unwrap_or(cfg.paths.checkpoint.clone())]),
            };
            cmd_eval(&cfg, &source, out).map(|_| Outcome::Success)
        }
        Command::Detect {
            image,
            checkpoint,
            threshold,
        } => {
            let ckpt = checkpoint.clone().unwrap_or(cfg.paths.checkpoint.clone());
            cmd_detect(&cfg, &ckpt, image, *threshold, out)
        }
        Command::Gradcheck { instances, corrupt } => {
            let gc = GradCheckConfig {
                seed: cfg.train.seed,
                instances_per_op: *instances,
                corrupt: corrupt.clone(),
                ..GradCheckConfig::default()
            };
            cmd_gradcheck(&gc, out)
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match std::fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<Outcome> {
    let dir = &cfg.paths.data_dir;
    if is_nonempty_dir(dir)? && !force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to replace it",
            dir.display()
        )));
    }
    let (train, test) = generate_dataset(&cfg.dataset, &cfg.proposals)?;
    for split in ["train", "test"] {
        let p = dir.join(split);
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    write_dataset(&train, &dir.join("train"))?;
    write_dataset(&test, &dir.join("test"))?;
    say(
        out,
        format!(
            "wrote {} train and {} test images to {}",
            train.samples.len(),
            test.samples.len(),
            dir.display()
        ),
    )?;
    Ok(Outcome::Success)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<Outcome> {
    let net = Network::new(cfg.model.clone())?;
    let ckpt = &cfg.paths.checkpoint;
    if resume.is_none() && ckpt.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite or --resume to continue it",
            ckpt.display()
        )));
    }
    let dataset = read_dataset(&cfg.paths.data_dir.join("train"), LoadBoxes::No)?;
    let start = match resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::initial(&net, cfg.train.seed),
    };
    let mut log_text = match resume {
        Some(_) => std::fs::read_to_string(&cfg.paths.loss_log).unwrap_or_default(),
        None => String::new(),
    };
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if start.epoch == 0 {
        start.save(ckpt)?;
    }
    let (state, _) = train(&dataset, &net, &cfg.train, start, |entry, state| {
        say(out, entry.to_string())?;
        log_text.push_str(&format!("{entry}\n"));
        write_file(&cfg.paths.loss_log, &log_text)?;
        state.save(ckpt)
    })?;
    say(
        out,
        format!("checkpoint at epoch {} written to {}", state.epoch, ckpt.display()),
    )?;
    Ok(Outcome::Success)
}

/// What `eval` scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Checkpoints(Vec<PathBuf>),
    Detections(PathBuf),
}

/// Loads the parameters of a checkpoint, ignoring optimizer state.
pub fn load_params(net: &Network, path: &Path) -> Result<ParamStore> {
    let params = TrainState::load(path)?.params;
    net.check_params(&params)?;
    Ok(params)
}

fn views(cfg: &RunConfig) -> Vec<View> {
    if cfg.eval.multi_view {
        View::grid(&cfg.eval.view_scales)
    } else {
        vec![View::IDENTITY]
    }
}

pub fn cmd_eval(cfg: &RunConfig, source: &Source, out: &mut dyn Write) -> Result<EvalReport> {
    let train = read_dataset(&cfg.paths.data_dir.join("train"), LoadBoxes::Yes)?;
    let test = read_dataset(&cfg.paths.data_dir.join("test"), LoadBoxes::Yes)?;
    for d in [&train, &test] {
        if d.num_classes() != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                d.num_classes(),
                cfg.model.num_classes
            )));
        }
    }
    let (train_dets, test_dets) = match source {
        Source::Checkpoints(paths) => {
            if paths.is_empty() {
                return Err(Error::usage("no checkpoint to evaluate"));
            }
            let net = Network::new(cfg.model.clone())?;
            let sets = paths.iter().map(|p| load_params(&net, p)).collect::<Result<Vec<_>>>()?;
            let v = views(cfg);
            let train_dets = detect_dataset(&net, &sets, &train, &v)?;
            let test_dets = detect_dataset(&net, &sets, &test, &v)?;
            let mut all = test_dets.clone();
            all.extend(train_dets.iter().cloned());
            write_file(&cfg.paths.detections, format_detections(&all))?;
            (train_dets, test_dets)
        }
        Source::Detections(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let all = parse_detections(&text, path)?;
            split_by_dataset(all, &train, &test)
        }
    };
    let report = evaluate(
        &test.class_names,
        &test_dets,
        &test.ground_truth(),
        &train_dets,
        &train.ground_truth(),
    );
    let text = report.to_text();
    write_file(&cfg.paths.report, &text)?;
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(report)
}

fn split_by_dataset(
    all: Vec<ImageDetection>,
    train: &Dataset,
    test: &Dataset,
) -> (Vec<ImageDetection>, Vec<ImageDetection>) {
    let in_test: BTreeSet<&str> = test.samples.iter().map(|s| s.id.as_str()).collect();
    let in_train: BTreeSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for d in all {
        if in_test.contains(d.image_id.as_str()) {
            te.push(d);
        } else if in_train.contains(d.image_id.as_str()) {
            tr.push(d);
        }
    }
    (tr, te)
}

/// Gray image replicated to RGB with each box outlined, from red (low
/// score) to green (highest score).
pub fn overlay(image: &Tensor, boxes: &[(Region, f64)]) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for &v in image.data() {
        rgb.extend_from_slice(&[v, v, v]);
    }
    let top = boxes.iter().map(|(_, s)| *s).fold(f64::MIN, f64::max);
    let low = boxes.iter().map(|(_, s)| *s).fold(f64::MAX, f64::min);
    // Paint weakest first so the strongest boxes end up on top.
    let mut order: Vec<&(Region, f64)> = boxes.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    for (r, s) in order {
        let t = if top > low { (s - low) / (top - low) } else { 1.0 };
        let color = [1.0 - t, t, 0.0];
        let x0 = (r.x0.floor().max(0.0) as usize).min(w - 1);
        let y0 = (r.y0.floor().max(0.0) as usize).min(h - 1);
        let x1 = ((r.x1.ceil() as usize).max(x0 + 1) - 1).min(w - 1);
        let y1 = ((r.y1.ceil() as usize).max(y0 + 1) - 1).min(h - 1);
        let mut paint = |y: usize, x: usize| rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        for x in x0..=x1 {
            paint(y0, x);
            paint(y1, x);
        }
        for y in y0..=y1 {
            paint(y, x0);
            paint(y, x1);
        }
    }
    Tensor::new(vec![h, w, 3], rgb)
}

pub fn cmd_detect(
    cfg: &RunConfig,
    ckpt: &Path,
    image_id: &str,
    threshold: f64,
    out: &mut dyn Write,
) -> Result<Outcome> {
    let mut found = None;
    for split in ["test", "train"] {
        let dir = cfg.paths.data_dir.join(split);
        let ds = read_dataset(&dir, LoadBoxes::No)?;
        if let Some(s) = ds.samples.into_iter().find(|s| s.id == image_id) {
            found = Some(s);
            break;
        }
    }
    let sample = found.ok_or_else(|| Error::NotFound(format!("image {image_id} is in neither split")))?;
    let net = Network::new(cfg.model.clone())?;
    let params = load_params(&net, ckpt)?;
    let dets: Vec<ImageDetection> = detect_image(&net, &[params], &sample.image, &sample.proposals, &views(cfg))?
        .into_iter()
        .filter(|d| d.score > threshold)
        .map(|detection| ImageDetection {
            image_id: sample.id.clone(),
            detection,
        })
        .collect();
    let det_path = cfg.paths.detect_dir.join(format!("{image_id}.txt"));
    write_file(&det_path, format_detections(&dets))?;
    let boxes: Vec<(Region, f64)> = dets.iter().map(|d| (d.detection.region, d.detection.score)).collect();
    let over = overlay(&sample.image, &boxes)?;
    let over_path = cfg.paths.detect_dir.join(format!("{image_id}_overlay.wten"));
    write_file(&over_path, checkpoint::encode(&[("overlay".to_string(), over)]))?;
    say(
        out,
        format!(
            "{} detections for {image_id} written to {}; overlay at {}",
            dets.len(),
            det_path.display(),
            over_path.display()
        ),
    )?;
    Ok(Outcome::Success)
}

pub fn cmd_gradcheck(cfg: &GradCheckConfig, out: &mut dyn Write) -> Result<Outcome> {
    let report = gradcheck::run(cfg)?;
    out.write_all(report.to_text().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(if report.passed() {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}
