use std::collections::BTreeMap;

use crate::network::Region;

use super::{iou, ImageDetection};

/// Ground-truth boxes per image id, as `(class, box)` pairs.
pub type GroundTruthSet = BTreeMap<String, Vec<(usize, Region)>>;

/// Order by score, highest first; equal scores keep their input order.
pub(crate) fn rank_by_score<T>(items: &mut [T], score: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

/// Interpolated average precision at eleven recall levels 0, 0.1, …, 1.
///
/// Detections are pooled across images. Each is matched to the
/// ground-truth box of its class with the highest IoU in the same image; it
/// counts as a true positive when that IoU is at least `iou_threshold` and
/// the box has not been claimed by a higher-ranked detection. Returns
/// `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[ImageDetection],
    gt: &GroundTruthSet,
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let n_gt: usize = gt
        .values()
        .map(|boxes| boxes.iter().filter(|(c, _)| *c == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&ImageDetection> = detections
        .iter()
        .filter(|d| d.detection.class_index == class)
        .collect();
    rank_by_score(&mut ranked, |d| d.detection.score);

    let mut claimed: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, det) in ranked.iter().enumerate() {
        let boxes: Vec<&Region> = gt
            .get(&det.image_id)
            .map(|b| b.iter().filter(|(c, _)| *c == class).map(|(_, r)| r).collect())
            .unwrap_or_default();
        let best = boxes
            .iter()
            .enumerate()
            .map(|(i, r)| (i, iou(&det.detection.region, r)))
            .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            });
        if let Some((i, overlap)) = best {
            if overlap >= iou_threshold {
                let flags = claimed
                    .entry(det.image_id.as_str())
                    .or_insert_with(|| vec![false; boxes.len()]);
                if !flags[i] {
                    flags[i] = true;
                    tp += 1;
                }
            }
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        curve.push((recall, precision));
    }
    Some(eleven_point(&curve))
}

fn eleven_point(curve: &[(f64, f64)]) -> f64 {
    let total: f64 = (0..=10)
        .map(|t| {
            let level = t as f64 / 10.0;
            curve
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / 11.0
}

/// Correct-localization rate (percent) per class.
///
/// Over the images that contain the class, counts how often the
/// highest-scoring detection of that class overlaps some instance by at
/// least `iou_threshold`. An image with no detection for the class counts
/// as a miss. Returns `None` for classes with no positive image.
pub fn corloc(
    detections: &[ImageDetection],
    gt: &GroundTruthSet,
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<Option<f64>> {
    let mut top: BTreeMap<(&str, usize), &ImageDetection> = BTreeMap::new();
    for d in detections {
        let key = (d.image_id.as_str(), d.detection.class_index);
        match top.get(&key) {
            Some(best) if best.detection.score >= d.detection.score => {}
            _ => {
                top.insert(key, d);
            }
        }
    }
    (0..num_classes)
        .map(|class| {
            let mut positives = 0usize;
            let mut hits = 0usize;
            for (image_id, boxes) in gt {
                let instances: Vec<&Region> =
                    boxes.iter().filter(|(c, _)| *c == class).map(|(_, r)| r).collect();
                if instances.is_empty() {
                    continue;
                }
                positives += 1;
                if let Some(d) = top.get(&(image_id.as_str(), class)) {
                    if instances.iter().any(|r| iou(&d.detection.region, r) >= iou_threshold) {
                        hits += 1;
                    }
                }
            }
            (positives > 0).then(|| 100.0 * hits as f64 / positives as f64)
        })
        .collect()
}

/// Mean over the defined entries, or `None` if none is defined.
pub fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
