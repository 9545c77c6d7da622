//! Training objective, jittering, and the epoch loop.

mod labels;
mod loss;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use labels::LabelVector;
pub use loss::{argmax_first, baseline_loss, binary_log_loss, spatial_regularizer, weight_penalty, P_MIN};

use crate::autodiff::{checkpoint, Graph, NodeId, ParamStore, SgdMomentum, Tensor};
use crate::dataset::{sample_seed, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::evaluation::View;
use crate::network::{Network, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_first: f64,
    /// Defaults to `lr_first / 10`.
    pub lr_second: Option<f64>,
    /// First epoch (0-based) run at `lr_second`. Defaults to `epochs / 2`.
    pub switch_epoch: Option<usize>,
    pub momentum: f64,
    /// λ of the L2 penalty; applied to every parameter, biases included.
    pub weight_decay: f64,
    pub spatial_regularizer: bool,
    pub reg_weight: f64,
    pub reg_iou: f64,
    pub jitter: bool,
    /// Longest-side targets sampled by jittering.
    pub jitter_scales: Vec<usize>,
    /// Seeds parameter initialization and the per-epoch shuffles and jitter.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr_first: 1e-3,
            lr_second: None,
            switch_epoch: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            spatial_regularizer: false,
            reg_weight: 1e-2,
            reg_iou: 0.6,
            jitter: true,
            jitter_scales: vec![48, 64, 80],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_second(&self) -> f64 {
        self.lr_second.unwrap_or(self.lr_first / 10.0)
    }

    pub fn switch_epoch(&self) -> usize {
        self.switch_epoch.unwrap_or(self.epochs / 2)
    }

    /// Learning rate for a 0-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch() {
            self.lr_first
        } else {
            self.lr_second()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        for (name, lr) in [("lr_first", self.lr_first), ("lr_second", self.lr_second())] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} {lr} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad(format!("reg_weight {} must be >= 0", self.reg_weight));
        }
        if !(self.reg_iou > 0.0 && self.reg_iou < 1.0) {
            return bad(format!("reg_iou {} outside (0, 1)", self.reg_iou));
        }
        if self.jitter && self.jitter_scales.is_empty() {
            return bad("jitter is on but jitter_scales is empty".into());
        }
        Ok(())
    }
}

/// Random horizontal flip (probability ½) and a random longest-side scale.
/// Regions and ground-truth boxes follow the image; labels are unchanged.
pub fn jitter<R: Rng + ?Sized>(sample: &ImageSample, scales: &[usize], rng: &mut R) -> Result<ImageSample> {
    if scales.is_empty() {
        return Err(Error::usage("jitter needs at least one scale"));
    }
    let flip = rng.random_bool(0.5);
    let side = scales[rng.random_range(0..scales.len())];
    apply_view(
        sample,
        View {
            longest_side: Some(side),
            flip,
        },
    )
}

/// Applies one fixed view to a sample.
pub fn apply_view(sample: &ImageSample, view: View) -> Result<ImageSample> {
    let mut boxes: Vec<_> = sample.proposals.clone();
    boxes.extend(sample.gt.iter().map(|(_, r)| *r));
    let (image, moved) = view.apply(&sample.image, &boxes)?;
    let (proposals, gt) = moved.split_at(sample.proposals.len());
    Ok(ImageSample {
        id: sample.id.clone(),
        image,
        labels: sample.labels.clone(),
        proposals: proposals.to_vec(),
        gt: sample.gt.iter().zip(gt).map(|((c, _), r)| (*c, *r)).collect(),
    })
}

/// Data term of the objective for one image of a batch of `num_images`:
/// binary log loss plus the weighted spatial regulariser for the
/// two-stream model, the hinge loss for the baseline.
pub fn image_objective(
    g: &mut Graph,
    net: &Network,
    params: &ParamStore,
    sample: &ImageSample,
    cfg: &TrainConfig,
    num_images: usize,
) -> Result<NodeId> {
    let f = net.forward(g, params, &sample.image, &sample.proposals)?;
    match net.variant() {
        Variant::Wsddn => {
            let data = binary_log_loss(g, f.image_scores, &sample.labels)?;
            if !cfg.spatial_regularizer || cfg.reg_weight == 0.0 {
                return Ok(data);
            }
            let reg = spatial_regularizer(
                g,
                f.region_scores,
                f.fc7,
                &sample.proposals,
                &sample.labels,
                cfg.reg_iou,
                num_images,
            )?;
            let reg = g.scale(reg, cfg.reg_weight)?;
            g.add(data, reg)
        }
        Variant::Baseline => baseline_loss(g, f.image_scores, &sample.labels, num_images),
    }
}

/// Full energy of a batch: `λ/2 ‖w‖²` plus every image's data term.
pub fn total_energy(
    g: &mut Graph,
    net: &Network,
    params: &ParamStore,
    batch: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::usage("total_energy of an empty batch"));
    }
    let mut total = weight_penalty(g, params, cfg.weight_decay)?;
    for sample in batch {
        let e = image_objective(g, net, params, sample, cfg, batch.len())?;
        total = g.add(total, e)?;
    }
    Ok(total)
}

/// Parameters, optimizer velocity, and the number of finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub epoch: usize,
}

const VELOCITY_PREFIX: &str = "velocity/";
const EPOCH_KEY: &str = "meta/epoch";

impl TrainState {
    pub fn initial(net: &Network, seed: u64) -> Self {
        let params = net.init_params(seed);
        let velocity = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        TrainState {
            params,
            velocity,
            epoch: 0,
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        out.extend(
            self.velocity
                .iter()
                .map(|(n, t)| (format!("{VELOCITY_PREFIX}{n}"), t.clone())),
        );
        out.push((EPOCH_KEY.to_string(), Tensor::scalar(self.epoch as f64)));
        out
    }

    /// Splits checkpoint tensors back into a state. A file holding only
    /// parameters loads with zero velocity at epoch 0.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut velocity = ParamStore::new();
        let mut epoch = 0;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix(VELOCITY_PREFIX) {
                velocity.insert(p, t)?;
            } else if name == EPOCH_KEY {
                let v = t.item()?;
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::Config(format!("checkpoint epoch {v} is not a count")));
                }
                epoch = v as usize;
            } else {
                params.insert(name, t)?;
            }
        }
        for (name, t) in params.iter() {
            if !velocity.contains(name) {
                velocity.insert(name, Tensor::zeros(t.shape()))?;
            }
        }
        Ok(TrainState {
            params,
            velocity,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::read_file(path)?)
    }
}

/// Mean energy of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} loss {} lr {}", self.epoch, self.loss, self.lr)
    }
}

/// Runs epochs one at a time from some starting state.
pub struct Trainer<'a> {
    net: &'a Network,
    cfg: &'a TrainConfig,
    state: TrainState,
    optimizer: SgdMomentum,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a Network, cfg: &'a TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if cfg.spatial_regularizer && net.variant() == Variant::Baseline {
            return Err(Error::Config(
                "train: the spatial regularizer needs the two-stream (wsddn) variant".into(),
            ));
        }
        if cfg.jitter {
            let min = net.config.min_input_side();
            if let Some(s) = cfg.jitter_scales.iter().find(|&&s| s < min) {
                return Err(Error::Config(format!(
                    "train: jitter scale {s} is below the network minimum {min}x{min}"
                )));
            }
        }
        net.check_params(&state.params)?;
        let mut optimizer = SgdMomentum::new(cfg.momentum, cfg.weight_decay)?;
        optimizer.set_velocity(&state.velocity);
        Ok(Trainer {
            net,
            cfg,
            state,
            optimizer,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// One pass over the dataset in a shuffled order, one image per step.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let lr = self.cfg.learning_rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, "epoch", epoch));
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let original = &dataset.samples[i];
            let jittered;
            let sample = if self.cfg.jitter {
                jittered = jitter(original, &self.cfg.jitter_scales, &mut rng)?;
                &jittered
            } else {
                original
            };
            total += self.step(sample, lr)?;
        }
        self.state.epoch += 1;
        self.state.velocity = self.optimizer.velocity(&self.state.params);
        let loss = if order.is_empty() { 0.0 } else { total / order.len() as f64 };
        Ok(EpochLog {
            epoch: self.state.epoch,
            loss,
            lr,
        })
    }

    /// Returns the image's energy at the pre-update parameters.
    fn step(&mut self, sample: &ImageSample, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = image_objective(&mut g, self.net, &self.state.params, sample, self.cfg, 1)?;
        let value = g.value(loss).item()? + 0.5 * self.cfg.weight_decay * self.state.params.squared_norm();
        let grads = g.backward(loss)?.for_params(&self.state.params);
        if !value.is_finite() || grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient on image {} in epoch {}",
                sample.id,
                self.state.epoch + 1
            )));
        }
        self.optimizer.step(&mut self.state.params, &grads, lr)?;
        Ok(value)
    }
}

/// Trains from `state` until `cfg.epochs` epochs are done, calling
/// `on_epoch` after each one.
pub fn train(
    dataset: &Dataset,
    net: &Network,
    cfg: &TrainConfig,
    state: TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    dataset.validate_for_training()?;
    if dataset.num_classes() != net.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            net.config.num_classes
        )));
    }
    let mut trainer = Trainer::new(net, cfg, state)?;
    let mut log = Vec::new();
    while !trainer.finished() {
        let entry = trainer.run_epoch(dataset)?;
        on_epoch(&entry, trainer.state())?;
        log.push(entry);
    }
    Ok((trainer.into_state(), log))
}
