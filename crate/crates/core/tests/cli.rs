use std::fs;
use std::path::{Path, PathBuf};

use wsddn_core::autodiff::checkpoint;
use wsddn_core::cli::main_with;
use wsddn_core::dataset::{read_dataset, LoadBoxes};
use wsddn_core::evaluation::{format_detections, parse_detections, Detection, ImageDetection};
use wsddn_core::network::{ModelConfig, Network};
use wsddn_core::training::TrainState;

const SMALL: &str = r#"
[dataset]
width = 32
height = 32
object_size = [8, 12]
train_count = 4
test_count = 2

[proposals]
scales = [0.35, 0.5]

[model]
backbone = [{ out_channels = 4 }]
spp_grid = 2
fc6 = 8
fc7 = 8

[train]
epochs = 2
jitter_scales = [24, 32, 40]

[eval]
view_scales = [24, 32]
"#;

struct Run {
    code: u8,
    stdout: String,
    stderr: String,
}

fn wsddn(dir: &Path, args: &[&str]) -> Run {
    let cfg = dir.join("run.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    let mut full = vec!["wsddn".to_string(), "--config".into(), cfg.display().to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(full, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let r = wsddn(dir, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
    r.stdout
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_counts_determinism_and_force() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let counts = ["--set", "dataset.train_count=2", "--set", "dataset.test_count=1"];
    let out = ok(a.path(), &[&counts[..], &["gen-data"]].concat());
    assert!(out.contains("2 train and 1 test"), "{out}");
    ok(b.path(), &[&counts[..], &["gen-data"]].concat());
    let (ta, tb) = (tree(&a.path().join("data")), tree(&b.path().join("data")));
    let images = ta.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "wten")).count();
    assert_eq!(images, 3);
    assert_eq!(ta, tb);

    let again = wsddn(a.path(), &["gen-data"]);
    assert_eq!(again.code, 1);
    assert!(again.stderr.contains("--force"));
    ok(a.path(), &["gen-data", "--force"]);
}

#[test]
fn single_class_dataset_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("run.toml"),
        "[dataset]\nclasses = [{ name = \"disk\", shape = \"disk\", intensity = [0.5, 0.6] }]\n[model]\nnum_classes = 1\n",
    )
    .unwrap();
    let r = wsddn(d.path(), &["gen-data"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("at least 2 classes"), "{}", r.stderr);
    assert!(!d.path().join("data").exists());
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-data"]);
    ok(d.path(), &["train", "--set", "train.epochs=0", "--seed", "7"]);
    let saved = TrainState::load(&d.path().join("run/model.wten")).unwrap();
    let net = Network::new(ModelConfig {
        backbone: vec![wsddn_core::network::ConvStage::new(4)],
        spp_grid: 2,
        fc6: 8,
        fc7: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(saved, TrainState::initial(&net, 7));
}

#[test]
fn train_eval_detect_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    let out = ok(p, &["train"]);
    assert!(out.contains("epoch 1 loss "), "{out}");
    let log = fs::read_to_string(p.join("run/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch ") && l.contains(" lr ")));

    // Retraining over an existing checkpoint needs --force.
    assert_eq!(wsddn(p, &["train"]).code, 1);

    let report = ok(p, &["eval"]);
    assert!(report.lines().last().unwrap().starts_with("mean"));
    assert_eq!(fs::read_to_string(p.join("run/report.txt")).unwrap(), report);

    // The detections written by eval score identically when read back.
    let dets = p.join("run/detections.txt");
    let again = ok(p, &["eval", "--detections", dets.to_str().unwrap()]);
    assert_eq!(again, report);

    let out = ok(p, &["detect", "--image", "test_00000"]);
    assert!(out.contains("detections for test_00000"));
    let text = fs::read_to_string(p.join("run/detect/test_00000.txt")).unwrap();
    let parsed = parse_detections(&text, Path::new("x")).unwrap();
    assert!(!parsed.is_empty());
    // Sorted per class by score; the first line of each class is its top box.
    for c in 0..3 {
        let scores: Vec<f64> = parsed
            .iter()
            .filter(|d| d.detection.class_index == c)
            .map(|d| d.detection.score)
            .collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
    let overlay = checkpoint::read_file(&p.join("run/detect/test_00000_overlay.wten")).unwrap();
    assert_eq!(overlay[0].1.shape(), &[32, 32, 3]);

    let bare = ok(p, &["detect", "--image", "test_00001", "--threshold", "2"]);
    assert!(bare.starts_with("0 detections"));
    assert_eq!(fs::read_to_string(p.join("run/detect/test_00001.txt")).unwrap(), "");
    let plain = checkpoint::read_file(&p.join("run/detect/test_00001_overlay.wten")).unwrap();
    let img = &read_dataset(&p.join("data/test"), LoadBoxes::No).unwrap().samples[1].image;
    for (i, v) in img.data().iter().enumerate() {
        assert_eq!(&plain[0].1.data()[3 * i..3 * i + 3], &[*v, *v, *v]);
    }

    let missing = wsddn(p, &["detect", "--image", "nope"]);
    assert_eq!(missing.code, 1);
    assert!(missing.stderr.contains("not found"));

    let views = ok(p, &["eval", "--multi-view", "on"]);
    assert!(views.contains("mean"));
}

#[test]
fn oracle_detections_score_one_hundred() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    let mut dets = Vec::new();
    for split in ["train", "test"] {
        for s in read_dataset(&p.join("data").join(split), LoadBoxes::Yes).unwrap().samples {
            for (c, r) in &s.gt {
                dets.push(ImageDetection {
                    image_id: s.id.clone(),
                    detection: Detection {
                        class_index: *c,
                        region: *r,
                        score: 1.0,
                    },
                });
            }
        }
    }
    let f = p.join("oracle.txt");
    fs::write(&f, format_detections(&dets)).unwrap();
    let report = ok(p, &["eval", "--detections", f.to_str().unwrap()]);
    let mean = report.lines().last().unwrap();
    assert_eq!(mean.split_whitespace().collect::<Vec<_>>(), ["mean", "100.0000", "100.0000"]);
}

#[test]
fn ensemble_equals_hand_averaged_scores() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    ok(p, &["train", "--set", "paths.checkpoint=run/a.wten", "--seed", "1"]);
    ok(p, &["train", "--set", "paths.checkpoint=run/b.wten", "--seed", "2"]);
    let (a, b) = (p.join("run/a.wten"), p.join("run/b.wten"));
    let both = format!("{},{}", a.display(), b.display());
    let report = ok(p, &["eval", "--ensemble", &both]);
    let ensemble_dets = fs::read_to_string(p.join("run/detections.txt")).unwrap();

    // Independent oracle: average the two score tables by hand and apply
    // the same suppression.
    use wsddn_core::evaluation::{detections_from_scores, NMS_IOU};
    let net = Network::new(ModelConfig {
        backbone: vec![wsddn_core::network::ConvStage::new(4)],
        spp_grid: 2,
        fc6: 8,
        fc7: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    let pa = TrainState::load(&a).unwrap().params;
    let pb = TrainState::load(&b).unwrap().params;
    let mut expected = Vec::new();
    for split in ["test", "train"] {
        for s in read_dataset(&p.join("data").join(split), LoadBoxes::No).unwrap().samples {
            let sa = net.score(&pa, &s.image, &s.proposals).unwrap();
            let sb = net.score(&pb, &s.image, &s.proposals).unwrap();
            let mut avg = sa.clone();
            for (x, y) in avg.region_scores.data_mut().iter_mut().zip(sb.region_scores.data()) {
                *x = (*x + y) / 2.0;
            }
            for det in detections_from_scores(&avg, &s.proposals, NMS_IOU) {
                expected.push(ImageDetection {
                    image_id: s.id.clone(),
                    detection: det,
                });
            }
        }
    }
    let got = parse_detections(&ensemble_dets, Path::new("x")).unwrap();
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!(g.image_id, e.image_id);
        assert_eq!(g.detection.region, e.detection.region);
        assert!((g.detection.score - e.detection.score).abs() < 1e-12);
    }
    assert!(report.contains("mean"));
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    ok(p, &["train", "--set", "train.epochs=0"]);
    let r = wsddn(p, &["eval", "--variant", "baseline"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("configuration error"), "{}", r.stderr);
}

#[test]
fn resumed_training_continues_the_epoch_counter() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    ok(p, &["train", "--set", "train.epochs=4", "--set", "paths.checkpoint=run/full.wten"]);
    let two = p.join("run/two.wten");
    let stage = |epochs: &str| {
        vec![
            "train".to_string(),
            "--set".into(),
            "train.switch_epoch=2".into(),
            "--set".into(),
            "paths.checkpoint=run/two.wten".into(),
            "--set".into(),
            format!("train.epochs={epochs}"),
        ]
    };
    let first = stage("2");
    ok(p, &first.iter().map(String::as_str).collect::<Vec<_>>());
    let mut second = stage("4");
    second.extend(["--resume".to_string(), two.display().to_string()]);
    let out = ok(p, &second.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.starts_with("epoch 3 "), "{out}");
    assert_eq!(fs::read(p.join("run/full.wten")).unwrap(), fs::read(p.join("run/two.wten")).unwrap());
}

#[test]
fn nan_loss_exits_with_numeric_status() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data"]);
    ok(p, &["train", "--set", "train.epochs=0"]);
    let ckpt = p.join("run/model.wten");
    let mut tensors = checkpoint::read_file(&ckpt).unwrap();
    for (name, t) in &mut tensors {
        if name == "fc8c.bias" {
            t.data_mut()[0] = f64::NAN;
        }
    }
    checkpoint::write_file(&ckpt, &tensors).unwrap();
    let r = wsddn(p, &["train", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("train_0000"), "{}", r.stderr);
}

#[test]
fn gradcheck_reports_every_primitive_and_fails_when_corrupted() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["gradcheck", "--instances", "1"]);
    for name in wsddn_core::gradcheck::ROSTER {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(name)), "{name}");
    }
    let rows = out.lines().filter(|l| l.ends_with("pass")).count();
    assert_eq!(rows, wsddn_core::gradcheck::ROSTER.len());
    let bad = wsddn(d.path(), &["gradcheck", "--instances", "1", "--corrupt", "conv2d"]);
    assert_eq!(bad.code, 2);
    assert!(bad.stdout.contains("FAIL"));
}

#[test]
fn help_and_bad_flags() {
    let d = tempfile::tempdir().unwrap();
    let r = wsddn(d.path(), &["--help"]);
    assert_eq!(r.code, 0);
    for cmd in ["gen-data", "train", "eval", "detect", "gradcheck"] {
        assert!(r.stdout.contains(cmd));
    }
    assert_eq!(wsddn(d.path(), &["train", "--variant", "mil"]).code, 1);
    assert_eq!(wsddn(d.path(), &["train", "--box-score", "maybe"]).code, 1);
}
