//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting so the workspace test run completes; set
//! `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsddn_core::autodiff::{Graph, Tensor};
use wsddn_core::cli::main_with;
use wsddn_core::dataset::{read_dataset, DatasetConfig, LoadBoxes};
use wsddn_core::evaluation::{
    average_precision, corloc, defined_mean, evaluate, iou, nms_indices, Detection, GroundTruthSet, ImageDetection,
};
use wsddn_core::gradcheck::{self, GradCheckConfig};
use wsddn_core::network::{roi_spp_pool, ConvStage, ModelConfig, Network, Region};

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const NORM_TOL: f64 = 1e-12;
const NORM_FORWARDS: usize = 1000;
const POOL_TRIPLES: usize = 500;
const NMS_INSTANCES: usize = 1000;
const AP_TOL: f64 = 1e-9;
const IOU_TOL: f64 = 1e-12;
const EMERGE_MAP: f64 = 30.0;
const EMERGE_CORLOC: f64 = 60.0;
const EMERGE_BUDGET: Duration = Duration::from_secs(15 * 60);
const REG_MAX_DROP: f64 = 2.0;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        name,
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        tolerance: GRAD_TOL,
        ..GradCheckConfig::default()
    };
    let report = match gradcheck::run(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome("gradient suite", false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let worst = report.ops.iter().map(|o| o.worst_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report.ops.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    let has_energy = report.ops.iter().any(|o| o.name == "wsddn_energy" && o.passed);
    outcome(
        "gradient suite",
        report.passed() && has_energy && report.instances() >= GRAD_MIN_INSTANCES && elapsed < GRAD_BUDGET,
        format!(
            "{} ops, {} instances, worst {:.2e}, failed {:?}, {:.1}s",
            report.ops.len(),
            report.instances(),
            worst,
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_regions(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<Region> {
    (0..count)
        .map(|_| {
            // Whole-pixel corners, then a sub-pixel nudge inward.
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let x1 = rng.random_range(x0 + 1..=w);
            let y1 = rng.random_range(y0 + 1..=h);
            let (nx, ny) = if x1 - x0 >= 3 && y1 - y0 >= 3 {
                (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9))
            } else {
                (0.0, 0.0)
            };
            Region::new(x0 as f64 + nx, y0 as f64 + ny, x1 as f64 - nx, y1 as f64 - ny).with_objectness(rng.random_range(0.0..=1.0))
        })
        .collect()
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut bad_range = 0usize;
    for i in 0..NORM_FORWARDS {
        let classes = rng.random_range(2..6);
        let net = Network::new(ModelConfig {
            backbone: vec![ConvStage::new(rng.random_range(1..4))],
            spp_grid: rng.random_range(1..3),
            fc6: rng.random_range(2..6),
            fc7: rng.random_range(2..6),
            num_classes: classes,
            box_score_scaling: rng.random_bool(0.5),
            ..ModelConfig::default()
        })
        .expect("valid config");
        let side = rng.random_range(6..14);
        let image = Tensor::uniform(&[side, side, 1], 0.0, 1.0, &mut rng);
        let count = rng.random_range(1..12);
        let regions = random_regions(&mut rng, side, side, count);
        // Stretch the heads so some forwards run close to saturation.
        let gain = [1.0, 10.0, 100.0][i % 3];
        let params = net
            .init_params(rng.random())
            .iter()
            .map(|(n, t)| {
                let t = if n.starts_with("fc8") { t.map(|v| v * gain) } else { t.clone() };
                (n.to_string(), t)
            })
            .collect();
        let s = net.score(&params, &image, &regions).expect("forward");
        let (cp, dp) = (s.class_probs.unwrap(), s.det_probs.unwrap());
        let r = regions.len();
        for reg in 0..r {
            let col: f64 = (0..classes).map(|k| cp.at(&[k, reg])).sum();
            worst = worst.max((col - 1.0).abs());
        }
        for k in 0..classes {
            let row: f64 = (0..r).map(|reg| dp.at(&[k, reg])).sum();
            worst = worst.max((row - 1.0).abs());
        }
        bad_range += s.image_scores.data().iter().filter(|&&y| !(y > 0.0 && y < 1.0)).count();
    }
    let mut single_exact = true;
    for seed in 0..20 {
        let net = Network::new(ModelConfig {
            backbone: vec![ConvStage::new(2)],
            spp_grid: 2,
            fc6: 4,
            fc7: 4,
            num_classes: 1,
            ..ModelConfig::default()
        })
        .expect("valid config");
        let image = Tensor::uniform(&[10, 10, 1], 0.0, 1.0, &mut rng);
        let regions = random_regions(&mut rng, 10, 10, 5);
        let s = net.score(&net.init_params(seed), &image, &regions).expect("forward");
        single_exact &= s.image_scores.data() == [1.0];
    }
    outcome(
        "normalization invariants",
        worst <= NORM_TOL && bad_range == 0 && single_exact,
        format!(
            "{NORM_FORWARDS} forwards, worst sum error {worst:.1e}, {bad_range} scores outside (0,1), single class exact {single_exact}"
        ),
    )
}

/// Bin `i` of `bins` over `len` cells: near-equal split with the larger
/// bins first, or a single stretched cell when the span is shorter.
fn oracle_bin(len: usize, bins: usize, i: usize) -> std::ops::Range<usize> {
    if len < bins {
        let c = i * len / bins;
        return c..c + 1;
    }
    let (q, r) = (len / bins, len % bins);
    let start = i * q + i.min(r);
    start..start + q + usize::from(i < r)
}

fn crop_then_pool(map: &Tensor, region: &Region, stride: usize, grid: usize) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let s = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / s).floor() as usize).min(n - 1);
        let b = ((hi / s).ceil() as usize).clamp(a + 1, n);
        (a, b)
    };
    let (x0, x1) = span(region.x0, region.x1, w);
    let (y0, y1) = span(region.y0, region.y1, h);
    let (ch, cw) = (y1 - y0, x1 - x0);
    let crop: Vec<f64> = (0..c)
        .flat_map(|k| (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (k, y, x))))
        .map(|(k, y, x)| map.at(&[k, y, x]))
        .collect();
    let mut out = Vec::new();
    for k in 0..c {
        for by in 0..grid {
            for bx in 0..grid {
                let mut m = f64::NEG_INFINITY;
                for y in oracle_bin(ch, grid, by) {
                    for x in oracle_bin(cw, grid, bx) {
                        m = m.max(crop[(k * ch + y) * cw + x]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn brute_force_nms(dets: &[Detection], threshold: f64) -> Vec<usize> {
    // Repeatedly take the best survivor and strike everything it overlaps.
    let overlap = |a: &Region, b: &Region| {
        let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
        let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
        let inter = iw * ih;
        let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
        if inter == 0.0 {
            0.0
        } else {
            inter / union
        }
    };
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && overlap(&dets[b].region, &dets[i].region) > threshold {
                alive[i] = false;
            }
        }
    }
    kept
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut pool_mismatch = 0;
    for _ in 0..POOL_TRIPLES {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..10), rng.random_range(1..10));
        let stride = rng.random_range(1..5);
        let map = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let region = random_regions(&mut rng, h * stride, w * stride, 1)[0];
        let grid = rng.random_range(1..5);
        let mut g = Graph::new();
        let m = g.constant(map.clone());
        let pooled = roi_spp_pool(&mut g, m, &[region], stride, grid).expect("pool");
        if g.value(pooled).data() != crop_then_pool(&map, &region, stride, grid).as_slice() {
            pool_mismatch += 1;
        }
    }
    let mut nms_mismatch = 0;
    for _ in 0..NMS_INSTANCES {
        let n = rng.random_range(0..=20);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x0 = rng.random_range(0..20) as f64;
                let y0 = rng.random_range(0..20) as f64;
                Detection {
                    class_index: 0,
                    region: Region::new(
                        x0,
                        y0,
                        x0 + rng.random_range(1..12) as f64,
                        y0 + rng.random_range(1..12) as f64,
                    ),
                    // Coarse scores so ties are common.
                    score: rng.random_range(0..6) as f64 / 5.0,
                }
            })
            .collect();
        if nms_indices(&dets, 0.4) != brute_force_nms(&dets, 0.4) {
            nms_mismatch += 1;
        }
    }
    outcome(
        "oracle equivalences",
        pool_mismatch == 0 && nms_mismatch == 0,
        format!(
            "pooling {pool_mismatch}/{POOL_TRIPLES} mismatches, nms {nms_mismatch}/{NMS_INSTANCES} mismatches"
        ),
    )
}

fn metric_fixtures(data: &Path) -> Outcome {
    let b = |x0, y0, x1, y1| Region::new(x0, y0, x1, y1);
    let det = |img: &str, r: Region, score| ImageDetection {
        image_id: img.into(),
        detection: Detection {
            class_index: 0,
            region: r,
            score,
        },
    };
    let mut gt = GroundTruthSet::new();
    gt.insert("a".into(), vec![(0, b(0.0, 0.0, 10.0, 10.0))]);
    gt.insert("b".into(), vec![(0, b(20.0, 20.0, 30.0, 30.0))]);
    let dets = vec![
        det("a", b(0.0, 0.0, 10.0, 10.0), 0.9),
        det("a", b(40.0, 40.0, 50.0, 50.0), 0.8),
        det("b", b(20.0, 20.0, 30.0, 30.0), 0.7),
    ];
    let ap = average_precision(&dets, &gt, 0, 0.5).unwrap_or(f64::NAN);
    let ap_ok = (ap - 28.0 / 33.0).abs() <= AP_TOL;

    let i = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
    let iou_ok = (i - 1.0 / 7.0).abs() <= IOU_TOL;

    // Ground truth fed back as detections on the real default splits.
    let oracle = |gt: &GroundTruthSet| -> Vec<ImageDetection> {
        gt.iter()
            .flat_map(|(id, boxes)| boxes.iter().map(move |(c, r)| (id, *c, *r)))
            .map(|(id, c, r)| ImageDetection {
                image_id: id.clone(),
                detection: Detection {
                    class_index: c,
                    region: r,
                    score: 1.0,
                },
            })
            .collect()
    };
    let (train, test) = match (
        read_dataset(&data.join("train"), LoadBoxes::Yes),
        read_dataset(&data.join("test"), LoadBoxes::Yes),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome("metric fixtures", false, e.to_string()),
    };
    let (tr_gt, te_gt) = (train.ground_truth(), test.ground_truth());
    let report = evaluate(&test.class_names, &oracle(&te_gt), &te_gt, &oracle(&tr_gt), &tr_gt);
    let (m, c) = (report.mean_ap(), report.mean_corloc());
    let cl = defined_mean(&corloc(&oracle(&tr_gt), &tr_gt, train.num_classes(), 0.5));
    let oracle_ok = m == Some(100.0) && c == Some(100.0) && cl == Some(100.0);
    outcome(
        "metric fixtures",
        ap_ok && iou_ok && oracle_ok,
        format!("AP {ap:.12} (28/33), IoU {i:.15} (1/7), oracle mAP {m:?} CorLoc {c:?}"),
    )
}

struct Cli<'a> {
    dir: &'a Path,
}

impl Cli<'_> {
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let mut full: Vec<String> = vec![
            "wsddn".into(),
            "--config".into(),
            self.dir.join("run.toml").display().to_string(),
        ];
        full.extend(args.iter().map(|s| s.to_string()));
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(full, &mut out, &mut err);
        if code == 0 {
            Ok(String::from_utf8_lossy(&out).into_owned())
        } else {
            Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err)))
        }
    }

    /// Trains under `name` with extra flags and returns the eval report.
    fn train_and_eval(&self, name: &str, flags: &[&str]) -> Result<Metrics, String> {
        let ckpt = format!("paths.checkpoint=run/{name}.wten");
        let log = format!("paths.loss_log=run/{name}.log");
        let report = format!("paths.report=run/{name}.txt");
        let dets = format!("paths.detections=run/{name}_detections.txt");
        let mut args = vec!["train", "--set", &ckpt, "--set", &log];
        args.extend_from_slice(flags);
        self.run(&args)?;
        let mut args = vec!["eval", "--set", &ckpt, "--set", &report, "--set", &dets];
        args.extend_from_slice(flags);
        self.run(&args)?;
        let text = fs::read_to_string(self.dir.join("run").join(format!("{name}.txt"))).map_err(|e| e.to_string())?;
        Metrics::parse(&text)
    }
}

#[derive(Debug, Clone, Copy)]
struct Metrics {
    map: f64,
    corloc: f64,
}

impl Metrics {
    fn parse(report: &str) -> Result<Metrics, String> {
        let line = report
            .lines()
            .find(|l| l.starts_with("mean"))
            .ok_or("report has no mean line")?;
        let v: Vec<f64> = line.split_whitespace().skip(1).filter_map(|s| s.parse().ok()).collect();
        match v[..] {
            [map, corloc] => Ok(Metrics { map, corloc }),
            _ => Err(format!("unparsable mean line {line:?}")),
        }
    }
}

fn write_config(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("run.toml"), "[paths]\ndata_dir = \"data\"\n").unwrap();
}

struct Experiments {
    results: BTreeMap<&'static str, Metrics>,
    emergence_time: Duration,
}

fn experiments(a: &Path) -> Result<Experiments, String> {
    let cli = Cli { dir: a };
    let start = Instant::now();
    cli.run(&["gen-data"])?;
    let mut results = BTreeMap::new();
    results.insert("wsddn", cli.train_and_eval("wsddn", &[])?);
    results.insert("baseline", cli.train_and_eval("baseline", &["--variant", "baseline"])?);
    let emergence_time = start.elapsed();
    results.insert("wsddn+box", cli.train_and_eval("box", &["--box-score", "on"])?);
    results.insert("wsddn+reg", cli.train_and_eval("reg", &["--spatial-reg", "on"])?);
    Ok(Experiments {
        results,
        emergence_time,
    })
}

fn emergence(ex: &Experiments) -> Outcome {
    let (w, b) = (ex.results["wsddn"], ex.results["baseline"]);
    outcome(
        "weak localization emergence",
        w.map >= EMERGE_MAP
            && w.corloc >= EMERGE_CORLOC
            && w.map > b.map
            && w.corloc > b.corloc
            && ex.emergence_time <= EMERGE_BUDGET,
        format!(
            "wsddn mAP {:.2} CorLoc {:.2}; baseline mAP {:.2} CorLoc {:.2}; {:.0}s",
            w.map,
            w.corloc,
            b.map,
            b.corloc,
            ex.emergence_time.as_secs_f64()
        ),
    )
}

fn ablation(ex: &Experiments) -> Outcome {
    let plain = ex.results["wsddn"].map;
    let (boxed, reg) = (ex.results["wsddn+box"].map, ex.results["wsddn+reg"].map);
    let mut order: Vec<(&str, f64)> = ["wsddn", "wsddn+box", "wsddn+reg"]
        .iter()
        .map(|&k| (k, ex.results[k].map))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let ranking: Vec<String> = order.iter().map(|(k, m)| format!("{k} {m:.2}")).collect();
    outcome(
        "ablation direction",
        boxed != plain && reg != plain && reg >= plain - REG_MAX_DROP,
        format!("mAP ranking: {}", ranking.join(" > ")),
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let cli = Cli { dir: b };
    let second = cli.run(&["gen-data"]).and_then(|_| cli.train_and_eval("wsddn", &[]));
    if let Err(e) = second {
        return outcome("determinism", false, e);
    }
    let same = |rel: &str| {
        let (x, y) = (fs::read(a.join(rel)), fs::read(b.join(rel)));
        matches!((x, y), (Ok(x), Ok(y)) if x == y)
    };
    let ckpt = same("run/wsddn.wten");
    let report = same("run/wsddn.txt");
    let dets = same("run/wsddn_detections.txt");
    outcome(
        "determinism",
        ckpt && report && dets,
        format!("checkpoint identical {ckpt}, report identical {report}, detections identical {dets}"),
    )
}

fn main() {
    // `cargo test -- --list` and filtered runs must not start the long
    // experiments.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().expect("tempdir");
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    write_config(&a);
    write_config(&b);
    assert_eq!(DatasetConfig::default().seed, 0);

    let mut outcomes = vec![gradient_suite(), normalization(), oracles()];
    match experiments(&a) {
        Ok(ex) => {
            outcomes.push(metric_fixtures(&a.join("data")));
            outcomes.push(emergence(&ex));
            outcomes.push(ablation(&ex));
        }
        Err(e) => {
            outcomes.push(metric_fixtures(&a.join("data")));
            outcomes.push(outcome("weak localization emergence", false, e.clone()));
            outcomes.push(outcome("ablation direction", false, e));
        }
    }
    outcomes.push(determinism(&a, &b));

    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if passed < outcomes.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
