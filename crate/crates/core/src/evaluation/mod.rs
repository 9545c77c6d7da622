//! Detection post-processing and weakly supervised detection metrics.

mod metrics;
mod report;

use std::fmt::Write as _;
use std::path::Path;

pub use metrics::{average_precision, corloc, defined_mean, GroundTruthSet};
pub use report::EvalReport;

use crate::autodiff::{ParamStore, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imageops;
use crate::network::{Network, Region, RegionScores};

pub const NMS_IOU: f64 = 0.4;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_index: usize,
    pub region: Region,
    pub score: f64,
}

/// A detection tagged with the image it was found in.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub detection: Detection,
}

/// Intersection over union of two half-open boxes.
pub fn iou(a: &Region, b: &Region) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression for detections of one class.
///
/// Visits detections by descending score (ties in input order), keeping
/// each one unless it overlaps an already kept box by more than
/// `threshold`. The result is sorted by score.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    nms_indices(dets, threshold).into_iter().map(|i| dets[i]).collect()
}

/// Indices of the detections [`nms`] keeps, in kept order.
pub fn nms_indices(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    metrics::rank_by_score(&mut order, |&i| dets[i].score);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&dets[k].region, &dets[i].region) <= threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Per-class detections for one image: every region scored for every
/// class, suppressed at `nms_threshold`.
pub fn detections_from_scores(
    scores: &RegionScores,
    regions: &[Region],
    nms_threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for class in 0..scores.num_classes() {
        let dets: Vec<Detection> = regions
            .iter()
            .enumerate()
            .map(|(r, region)| Detection {
                class_index: class,
                region: Region {
                    objectness: None,
                    ..*region
                },
                score: scores.score(class, r),
            })
            .collect();
        out.extend(nms(&dets, nms_threshold));
    }
    out
}

/// Element-wise mean of equally shaped score tensors.
pub fn ensemble_average(sets: &[Tensor]) -> Result<Tensor> {
    let first = sets
        .first()
        .ok_or_else(|| Error::usage("ensemble of zero score sets"))?;
    let mut acc = vec![0.0; first.len()];
    for s in sets {
        if s.shape() != first.shape() {
            return Err(Error::shape(
                "ensemble_average",
                format!("{:?} vs {:?}", first.shape(), s.shape()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = sets.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v / n).collect())
}

/// Averages every score tensor of several forward passes over the same
/// region list.
pub fn average_region_scores(runs: &[RegionScores]) -> Result<RegionScores> {
    let pick = |f: &dyn Fn(&RegionScores) -> Option<Tensor>| -> Result<Option<Tensor>> {
        let parts: Option<Vec<Tensor>> = runs.iter().map(f).collect();
        parts.map(|p| ensemble_average(&p)).transpose()
    };
    Ok(RegionScores {
        class_probs: pick(&|r| r.class_probs.clone())?,
        det_probs: pick(&|r| r.det_probs.clone())?,
        region_scores: pick(&|r| Some(r.region_scores.clone()))?
            .ok_or_else(|| Error::usage("average of zero runs"))?,
        image_scores: pick(&|r| Some(r.image_scores.clone()))?
            .ok_or_else(|| Error::usage("average of zero runs"))?,
    })
}

/// One test-time view of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    /// Target length of the longer side; `None` keeps the original size.
    pub longest_side: Option<usize>,
    pub flip: bool,
}

impl View {
    pub const IDENTITY: View = View {
        longest_side: None,
        flip: false,
    };

    /// Every scale, unflipped and flipped.
    pub fn grid(scales: &[usize]) -> Vec<View> {
        scales
            .iter()
            .flat_map(|&s| {
                [false, true].map(|flip| View {
                    longest_side: Some(s),
                    flip,
                })
            })
            .collect()
    }

    /// Applies the view to an image and its regions.
    pub fn apply(&self, image: &Tensor, regions: &[Region]) -> Result<(Tensor, Vec<Region>)> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let (nh, nw) = match self.longest_side {
            Some(side) => imageops::fit_longest_side(h, w, side),
            None => (h, w),
        };
        let mut img = imageops::resize_bilinear(image, nh, nw)?;
        let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
        let mut regs: Vec<Region> = regions
            .iter()
            .map(|r| {
                if (nh, nw) == (h, w) {
                    return *r;
                }
                // Rounding can push a far edge a hair past the new border.
                let mut s = r.scaled(sx, sy);
                s.x1 = s.x1.min(nw as f64);
                s.y1 = s.y1.min(nh as f64);
                s
            })
            .collect();
        if self.flip {
            img = imageops::flip_horizontal(&img)?;
            for r in &mut regs {
                *r = r.flip_horizontal(nw as f64);
            }
        }
        Ok((img, regs))
    }
}

/// Runs the network once per view and averages region and image scores.
/// Regions stay in the caller's order, so averaged column `r` always
/// refers to `regions[r]` in original coordinates.
pub fn multi_view_scores(
    net: &Network,
    params: &ParamStore,
    image: &Tensor,
    regions: &[Region],
    views: &[View],
) -> Result<RegionScores> {
    if views.is_empty() {
        return Err(Error::usage("multi-view scoring needs at least one view"));
    }
    let runs = views
        .iter()
        .map(|v| {
            let (img, regs) = v.apply(image, regions)?;
            net.score(params, &img, &regs)
        })
        .collect::<Result<Vec<_>>>()?;
    average_region_scores(&runs)
}

/// Scores an image under every parameter set (each averaged over `views`),
/// averages the sets, and returns post-NMS detections.
pub fn detect_image(
    net: &Network,
    param_sets: &[ParamStore],
    image: &Tensor,
    regions: &[Region],
    views: &[View],
) -> Result<Vec<Detection>> {
    let runs = param_sets
        .iter()
        .map(|p| multi_view_scores(net, p, image, regions, views))
        .collect::<Result<Vec<_>>>()?;
    let scores = average_region_scores(&runs)?;
    Ok(detections_from_scores(&scores, regions, NMS_IOU))
}

/// Detections for every sample, ordered by image id.
pub fn detect_dataset(
    net: &Network,
    param_sets: &[ParamStore],
    dataset: &Dataset,
    views: &[View],
) -> Result<Vec<ImageDetection>> {
    let mut samples: Vec<_> = dataset.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for s in samples {
        for detection in detect_image(net, param_sets, &s.image, &s.proposals, views)? {
            out.push(ImageDetection {
                image_id: s.id.clone(),
                detection,
            });
        }
    }
    Ok(out)
}

/// AP on the test detections and CorLoc on the training detections.
pub fn evaluate(
    class_names: &[String],
    test_dets: &[ImageDetection],
    test_gt: &GroundTruthSet,
    train_dets: &[ImageDetection],
    train_gt: &GroundTruthSet,
) -> EvalReport {
    let c = class_names.len();
    EvalReport {
        class_names: class_names.to_vec(),
        ap: (0..c)
            .map(|k| average_precision(test_dets, test_gt, k, MATCH_IOU).map(|v| 100.0 * v))
            .collect(),
        corloc: corloc(train_dets, train_gt, c, MATCH_IOU),
    }
}

/// One line per detection: `imageId classIndex score x0 y0 x1 y1`.
pub fn format_detections(dets: &[ImageDetection]) -> String {
    let mut s = String::new();
    for d in dets {
        let r = &d.detection.region;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            d.image_id, d.detection.class_index, d.detection.score, r.x0, r.y0, r.x1, r.y1
        );
    }
    s
}

pub fn parse_detections(text: &str, file: &Path) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |m: &str| Error::Parse {
            file: file.to_path_buf(),
            offset: here,
            message: format!("{m}: {line:?}"),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(fail("expected 7 fields"));
        }
        let class_index = fields[1].parse().map_err(|_| fail("bad class index"))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| fail("bad number"))?;
        out.push(ImageDetection {
            image_id: fields[0].to_string(),
            detection: Detection {
                class_index,
                score: nums[0],
                region: Region::new(nums[1], nums[2], nums[3], nums[4]),
            },
        });
    }
    Ok(out)
}
