use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::iou;
use crate::network::Region;

use super::LabelVector;

/// Probabilities are clamped into `[P_MIN, 1 - P_MIN]` before the log.
pub const P_MIN: f64 = 1e-12;

fn check_labels(g: &Graph, node: NodeId, labels: &LabelVector, op: &'static str) -> Result<()> {
    if g.shape(node) != [labels.len()] {
        return Err(Error::shape(
            op,
            format!("scores {:?} vs {} labels", g.shape(node), labels.len()),
        ));
    }
    Ok(())
}

/// `Σ_k −log(y_k (p_k − ½) + ½)` over clamped image-level probabilities.
pub fn binary_log_loss(g: &mut Graph, y_pred: NodeId, labels: &LabelVector) -> Result<NodeId> {
    check_labels(g, y_pred, labels, "binary_log_loss")?;
    let y = labels.as_f64();
    let offset: Vec<f64> = y.iter().map(|v| (1.0 - v) / 2.0).collect();
    let p = g.clamp(y_pred, P_MIN, 1.0 - P_MIN)?;
    let yc = g.constant(Tensor::vector(y));
    let oc = g.constant(Tensor::vector(offset));
    let signed = g.mul(p, yc)?;
    let lik = g.add(signed, oc)?;
    let logs = g.log(lik)?;
    let total = g.sum(logs)?;
    g.scale(total, -1.0)
}

/// Hinge loss on log-sum-exp image scores, `1/(nC) Σ_k max(0, 1 − y_k s_k)`
/// for one image of a batch of `num_images`.
pub fn baseline_loss(
    g: &mut Graph,
    image_scores: NodeId,
    labels: &LabelVector,
    num_images: usize,
) -> Result<NodeId> {
    check_labels(g, image_scores, labels, "baseline_loss")?;
    let c = labels.len();
    let yc = g.constant(Tensor::vector(labels.as_f64()));
    let ones = g.constant(Tensor::ones(&[c]));
    let margin = g.mul(image_scores, yc)?;
    let neg = g.scale(margin, -1.0)?;
    let slack = g.add(ones, neg)?;
    let hinge = g.relu(slack)?;
    let total = g.sum(hinge)?;
    g.scale(total, 1.0 / (num_images * c) as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Feature-discrepancy penalty around each positive class's top region.
///
/// For a positive class `k` with top-scoring region `p`, every other region
/// overlapping `p` by at least `iou_threshold` adds
/// `½ · x_kp · ‖fc7_p − fc7_r‖²`. The sum is scaled by `1/(nC)`. The score
/// weight `x_kp` stays in the graph, so gradients reach both streams.
pub fn spatial_regularizer(
    g: &mut Graph,
    region_scores: NodeId,
    fc7: NodeId,
    regions: &[Region],
    labels: &LabelVector,
    iou_threshold: f64,
    num_images: usize,
) -> Result<NodeId> {
    let (c, r) = match *g.shape(region_scores) {
        [c, r] => (c, r),
        ref s => return Err(Error::shape("spatial_regularizer", format!("scores {s:?} are not C x R"))),
    };
    let d = match *g.shape(fc7) {
        [rows, d] if rows == r => d,
        ref s => {
            return Err(Error::shape(
                "spatial_regularizer",
                format!("fc7 {s:?} does not have {r} rows"),
            ))
        }
    };
    if regions.len() != r || labels.len() != c {
        return Err(Error::shape(
            "spatial_regularizer",
            format!("{r} score columns, {} regions, {c} classes, {} labels", regions.len(), labels.len()),
        ));
    }
    let mut terms = Vec::new();
    for k in labels.positives() {
        let row = &g.value(region_scores).data()[k * r..(k + 1) * r];
        let p = argmax_first(row);
        let neighbours: Vec<usize> = (0..r)
            .filter(|&q| q != p && iou(&regions[p], &regions[q]) >= iou_threshold)
            .collect();
        if neighbours.is_empty() {
            continue;
        }
        let others: Vec<usize> = neighbours
            .iter()
            .flat_map(|&q| (0..d).map(move |j| q * d + j))
            .collect();
        let top: Vec<usize> = neighbours
            .iter()
            .flat_map(|_| (0..d).map(|j| p * d + j))
            .collect();
        let fo = g.gather(fc7, &others)?;
        let fp = g.gather(fc7, &top)?;
        let neg = g.scale(fo, -1.0)?;
        let diff = g.add(fp, neg)?;
        let sq = g.mul(diff, diff)?;
        let dist = g.sum(sq)?;
        let dist = g.reshape(dist, &[1])?;
        let weight = g.gather(region_scores, &[k * r + p])?;
        terms.push(g.mul(weight, dist)?);
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let all = g.concat(&terms, 0)?;
    let total = g.sum(all)?;
    g.scale(total, 0.5 / (num_images * c) as f64)
}

/// `λ/2 · ‖w‖²` over every parameter in the store.
pub fn weight_penalty(g: &mut Graph, params: &ParamStore, lambda: f64) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(params.len());
    for name in params.names() {
        let w = g.param(params, name)?;
        let sq = g.mul(w, w)?;
        let s = g.sum(sq)?;
        parts.push(g.reshape(s, &[1])?);
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let all = g.concat(&parts, 0)?;
    let total = g.sum(all)?;
    g.scale(total, lambda / 2.0)
}
