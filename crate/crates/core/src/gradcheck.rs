//! Finite-difference verification of every differentiable primitive and
//! of the full training energies.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_difference_gradient, relative_error, CellBox, Graph, NodeId, ParamStore, Tensor, DEFAULT_EPS,
};
use crate::dataset::{sample_seed, ImageSample};
use crate::error::Result;
use crate::network::{ConvStage, ModelConfig, Network, Region, Variant};
use crate::training::{self, LabelVector, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;

/// Every checked operation, in report order.
pub const ROSTER: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "log",
    "clamp",
    "sum_axis",
    "sum",
    "softmax",
    "log_sum_exp",
    "max_pool2",
    "conv2d",
    "concat",
    "gather",
    "reshape",
    "roi_pool",
    "binary_log_loss",
    "baseline_loss",
    "spatial_regularizer",
    "wsddn_energy",
    "baseline_energy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances_per_op: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of the named operation so
    /// its check must fail.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances_per_op: 6,
            eps: DEFAULT_EPS,
            tolerance: TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    /// Elements compared against the finite-difference estimate.
    pub checked: usize,
    /// Elements skipped because a kink lies within the probe step.
    pub skipped: usize,
    pub worst_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn instances(&self) -> usize {
        self.ops.iter().map(|o| o.instances).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>9} {:>8} {:>8} {:>12}  result",
            "operation", "instances", "checked", "kinks", "worst"
        );
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<20} {:>9} {:>8} {:>8} {:>12.3e}  {}",
                o.name,
                o.instances,
                o.checked,
                o.skipped,
                o.worst_error,
                if o.passed { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} operations, {} instances, tolerance {:e}: {}",
            self.ops.len(),
            self.instances(),
            self.tolerance,
            if self.passed() { "all passed" } else { "FAILED" }
        );
        s
    }
}

type Eval = Box<dyn Fn(&[Tensor], bool) -> Result<(f64, Vec<Tensor>)>>;

/// Inputs plus a function giving the scalar value and, on request, the
/// analytic gradient for each input.
struct Instance {
    inputs: Vec<Tensor>,
    eval: Eval,
}

/// Wraps a primitive as `loss = Σ op(inputs) ⊙ R` for a fixed random `R`,
/// so every output element carries a distinct weight.
fn primitive<F>(inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, op: F) -> Result<Instance>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &ids)?;
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let eval = move |xs: &[Tensor], want: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &ids)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item()?;
        if !want {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_input = ids
            .iter()
            .zip(xs)
            .map(|(&id, x)| grads.wrt(id).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, per_input))
    };
    Ok(Instance {
        inputs,
        eval: Box::new(eval),
    })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CellBox {
    let y0 = rng.random_range(0..h);
    let x0 = rng.random_range(0..w);
    CellBox {
        y0,
        y1: rng.random_range(y0 + 1..=h),
        x0,
        x1: rng.random_range(x0 + 1..=w),
    }
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize) -> LabelVector {
    let mut v: Vec<i8> = (0..c).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
    v[rng.random_range(0..c)] = 1;
    LabelVector::new(v).expect("entries are +-1")
}

/// Regions in a `side × side` image, with a one-pixel-shifted twin for
/// the first few so the overlap gate of the regulariser opens.
fn random_regions(rng: &mut ChaCha8Rng, side: usize, count: usize) -> Vec<Region> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = rng.random_range(4..=side - 1);
        let h = rng.random_range(4..=side - 1);
        let x = rng.random_range(0..side - w) as f64;
        let y = rng.random_range(0..side - h) as f64;
        out.push(Region::new(x, y, x + w as f64, y + h as f64).with_objectness(rng.random_range(0.1..1.0)));
        if out.len() < count && out.len() <= 4 {
            out.push(Region::new(x + 1.0, y, x + 1.0 + w as f64, y + h as f64).with_objectness(0.5));
        }
    }
    out
}

fn small_network(variant: Variant) -> Network {
    Network::new(ModelConfig {
        backbone: vec![ConvStage::new(2)],
        spp_grid: 2,
        fc6: 5,
        fc7: 4,
        num_classes: 3,
        box_score_scaling: true,
        variant,
        ..ModelConfig::default()
    })
    .expect("small config is valid")
}

fn energy(rng: &mut ChaCha8Rng, variant: Variant) -> Result<Instance> {
    let net = small_network(variant);
    let side = 12;
    let batch: Vec<ImageSample> = (0..2)
        .map(|i| {
            Ok(ImageSample {
                id: format!("check_{i}"),
                image: Tensor::uniform(&[side, side, 1], 0.0, 1.0, rng),
                labels: random_labels(rng, 3),
                proposals: random_regions(rng, side, 7),
                gt: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let params = net.init_params(rng.random());
    // Larger head weights than the default init so the scores are far from
    // uniform and every term contributes.
    let mut params: ParamStore = params
        .iter()
        .map(|(n, t)| {
            let t = if n.starts_with("fc8") { t.map(|v| v * 50.0) } else { t.clone() };
            (n.to_string(), t)
        })
        .collect();
    for (_, t) in params.iter_mut() {
        if t.rank() == 1 {
            let noise = Tensor::randn(t.shape(), 0.1, rng);
            for (v, d) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += d;
            }
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    let cfg = TrainConfig {
        weight_decay: 0.05,
        spatial_regularizer: variant == Variant::Wsddn,
        reg_weight: 0.5,
        ..TrainConfig::default()
    };
    let eval = move |xs: &[Tensor], want: bool| -> Result<(f64, Vec<Tensor>)> {
        let store: ParamStore = names.iter().cloned().zip(xs.iter().cloned()).collect();
        let mut g = Graph::new();
        let loss = training::total_energy(&mut g, &net, &store, &batch, &cfg)?;
        let value = g.value(loss).item()?;
        if !want {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?.for_params(&store);
        let per_input = names.iter().map(|n| grads.get(n).cloned()).collect::<Result<_>>()?;
        Ok((value, per_input))
    };
    Ok(Instance {
        inputs,
        eval: Box::new(eval),
    })
}

fn build(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    match name {
        "matmul" => primitive(vec![normal(rng, &[m, k]), normal(rng, &[k, n])], rng, |g, x| {
            g.matmul(x[0], x[1])
        }),
        "transpose" => primitive(vec![normal(rng, &[m, k])], rng, |g, x| g.transpose(x[0])),
        "add" => primitive(vec![normal(rng, &[m, k]), normal(rng, &[m, k])], rng, |g, x| {
            g.add(x[0], x[1])
        }),
        "mul" => primitive(vec![normal(rng, &[m, k]), normal(rng, &[m, k])], rng, |g, x| {
            g.mul(x[0], x[1])
        }),
        "add_bias" => primitive(vec![normal(rng, &[m, k]), normal(rng, &[k])], rng, |g, x| {
            g.add_bias(x[0], x[1])
        }),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            primitive(vec![normal(rng, &[m, k])], rng, move |g, x| g.scale(x[0], c))
        }
        "relu" => primitive(vec![normal(rng, &[m, k])], rng, |g, x| g.relu(x[0])),
        "log" => {
            let t = Tensor::uniform(&[m, k], 0.2, 3.0, rng);
            primitive(vec![t], rng, |g, x| g.log(x[0]))
        }
        "clamp" => primitive(vec![normal(rng, &[m, k])], rng, |g, x| g.clamp(x[0], -0.5, 0.7)),
        "sum_axis" => {
            let axis = rng.random_range(0..3);
            primitive(vec![normal(rng, &[m, k, n])], rng, move |g, x| g.sum_axis(x[0], axis))
        }
        "sum" => primitive(vec![normal(rng, &[m, k])], rng, |g, x| g.sum(x[0])),
        "softmax" => {
            let axis = rng.random_range(0..2);
            let t = Tensor::randn(&[m + 1, k + 1], 2.0, rng);
            primitive(vec![t], rng, move |g, x| g.softmax_axis(x[0], axis))
        }
        "log_sum_exp" => {
            let axis = rng.random_range(0..2);
            let t = Tensor::randn(&[m + 1, k + 1], 2.0, rng);
            primitive(vec![t], rng, move |g, x| g.log_sum_exp(x[0], axis))
        }
        "max_pool2" => {
            let (h, w) = (2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
            primitive(vec![normal(rng, &[m, h, w])], rng, |g, x| g.max_pool2(x[0]))
        }
        "conv2d" => {
            let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
            let kernel = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let side = rng.random_range(kernel.max(2)..7);
            let inputs = vec![
                normal(rng, &[c, side, side + 1]),
                normal(rng, &[o, c, kernel, kernel]),
                normal(rng, &[o]),
            ];
            primitive(inputs, rng, move |g, x| g.conv2d(x[0], x[1], x[2], stride, pad))
        }
        "concat" => {
            let axis = rng.random_range(0..2);
            let (a, b) = if axis == 0 { ([m, k], [n, k]) } else { ([m, k], [m, n]) };
            primitive(vec![normal(rng, &a), normal(rng, &b)], rng, move |g, x| {
                g.concat(&[x[0], x[1]], axis)
            })
        }
        "gather" => {
            let idx: Vec<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..m * k)).collect();
            primitive(vec![normal(rng, &[m, k])], rng, move |g, x| g.gather(x[0], &idx))
        }
        "reshape" => primitive(vec![normal(rng, &[m, k])], rng, move |g, x| g.reshape(x[0], &[k * m])),
        "roi_pool" => {
            let (c, h, w) = (rng.random_range(1..4), rng.random_range(2..8), rng.random_range(2..8));
            let boxes: Vec<CellBox> = (0..rng.random_range(1..5)).map(|_| random_box(rng, h, w)).collect();
            let grid = rng.random_range(1..4);
            primitive(vec![normal(rng, &[c, h, w])], rng, move |g, x| g.roi_pool(x[0], &boxes, grid))
        }
        "binary_log_loss" => {
            let c = rng.random_range(1..5);
            let labels = random_labels(rng, c);
            let p = Tensor::uniform(&[c], 0.05, 0.95, rng);
            primitive(vec![p], rng, move |g, x| training::binary_log_loss(g, x[0], &labels))
        }
        "baseline_loss" => {
            let c = rng.random_range(1..5);
            let labels = random_labels(rng, c);
            let s = Tensor::randn(&[c], 2.0, rng);
            primitive(vec![s], rng, move |g, x| training::baseline_loss(g, x[0], &labels, 2))
        }
        "spatial_regularizer" => {
            let (c, d) = (rng.random_range(1..4), rng.random_range(1..5));
            let count = rng.random_range(2..8);
            let regions = random_regions(rng, 16, count);
            let r = regions.len();
            let labels = random_labels(rng, c);
            let scores = Tensor::uniform(&[c, r], 0.0, 1.0, rng);
            let fc7 = normal(rng, &[r, d]);
            primitive(vec![scores, fc7], rng, move |g, x| {
                training::spatial_regularizer(g, x[0], x[1], &regions, &labels, 0.6, 1)
            })
        }
        "wsddn_energy" => energy(rng, Variant::Wsddn),
        "baseline_energy" => energy(rng, Variant::Baseline),
        other => unreachable!("{other} is not in the roster"),
    }
}

/// Runs the whole roster.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let ops = ROSTER
        .iter()
        .enumerate()
        .map(|(i, &name)| check_op(name, i, cfg))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        ops,
    })
}

fn check_op(name: &'static str, index: usize, cfg: &GradCheckConfig) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, name, index));
    let corrupt = cfg.corrupt.as_deref() == Some(name);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for _ in 0..cfg.instances_per_op {
        let inst = build(name, &mut rng)?;
        let (_, analytic) = (inst.eval)(&inst.inputs, true)?;
        for (j, (x, a)) in inst.inputs.iter().zip(&analytic).enumerate() {
            let mut probe = inst.inputs.clone();
            let fd = finite_difference_gradient(
                |t| {
                    probe[j] = t.clone();
                    (inst.eval)(&probe, false).map(|(v, _)| v).unwrap_or(f64::NAN)
                },
                x,
                cfg.eps,
            );
            for ((&av, &nv), &kink) in a.data().iter().zip(fd.grad.data()).zip(&fd.unreliable) {
                if kink {
                    skipped += 1;
                    continue;
                }
                let av = if corrupt { av * 1.01 + 1e-3 } else { av };
                let err = relative_error(av, nv);
                // `f64::max` drops NaN, which must stick and fail the op.
                worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
                checked += 1;
            }
        }
    }
    Ok(OpReport {
        name,
        instances: cfg.instances_per_op,
        checked,
        skipped,
        worst_error: worst,
        passed: checked > 0 && worst < cfg.tolerance,
    })
}
