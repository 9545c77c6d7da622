//! Region-scoring network: shared backbone, per-region pooling, a two-layer
//! fc stack, and either the two-stream head or the single-stream baseline.

mod config;
mod region;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConvStage, ModelConfig, Variant};
pub use region::Region;

use crate::autodiff::{CellBox, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Reorders an `H × W × C` image into the `C × H × W` layout the
/// convolutions use.
pub fn hwc_to_chw(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("image", format!("{s:?} is not H x W x C")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Runs the convolutional trunk once over the whole image. Returns the
/// `[channels, h, w]` feature map and its pixel stride.
pub fn backbone_forward(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<(NodeId, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != cfg.in_channels {
        return Err(Error::shape(
            "backbone_forward",
            format!("image {s:?} is not H x W x {}", cfg.in_channels),
        ));
    }
    let min = cfg.min_input_side();
    if s[0] < min || s[1] < min {
        return Err(Error::usage(format!(
            "image {}x{} is smaller than the backbone minimum of {min}x{min}",
            s[1], s[0]
        )));
    }
    let mut x = g.constant(hwc_to_chw(image)?);
    for (i, stage) in cfg.backbone.iter().enumerate() {
        let w = g.param(params, &format!("backbone.{i}.weight"))?;
        let b = g.param(params, &format!("backbone.{i}.bias"))?;
        x = g.conv2d(x, w, b, stage.stride, stage.pad)?;
        x = g.relu(x)?;
        if stage.pool {
            x = g.max_pool2(x)?;
        }
    }
    Ok((x, cfg.feature_stride()))
}

/// Projects an image-space region onto feature-map cells: floor for the
/// start, ceil for the end, clamped to the map, at least one cell wide.
pub fn project_region(region: &Region, stride: usize, map_h: usize, map_w: usize) -> CellBox {
    let s = stride as f64;
    let axis = |lo: f64, hi: f64, n: usize| {
        let mut a = ((lo / s).floor().max(0.0) as usize).min(n);
        let b = ((hi / s).ceil().max(0.0) as usize).min(n);
        if a >= n {
            a = n - 1;
        }
        (a, b.max(a + 1))
    };
    let (x0, x1) = axis(region.x0, region.x1, map_w);
    let (y0, y1) = axis(region.y0, region.y1, map_h);
    CellBox { y0, y1, x0, x1 }
}

/// Pools a `grid × grid` max lattice from every region, giving a
/// `[regions, channels·grid·grid]` matrix.
pub fn roi_spp_pool(
    g: &mut Graph,
    feature_map: NodeId,
    regions: &[Region],
    stride: usize,
    grid: usize,
) -> Result<NodeId> {
    if regions.is_empty() {
        return Err(Error::usage("roi_spp_pool: empty region list"));
    }
    let s = g.shape(feature_map);
    if s.len() != 3 {
        return Err(Error::shape("roi_spp_pool", format!("map {s:?} is not [C, H, W]")));
    }
    let (h, w) = (s[1], s[2]);
    let boxes: Vec<CellBox> = regions.iter().map(|r| project_region(r, stride, h, w)).collect();
    g.roi_pool(feature_map, &boxes, grid)
}

/// Scales each region's pooled features by its objectness, normalized so
/// the image's best region has factor 1.
pub fn box_score_scale(g: &mut Graph, features: NodeId, regions: &[Region]) -> Result<NodeId> {
    let scores = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.objectness
                .ok_or_else(|| Error::usage(format!("box-score scaling: region {i} has no objectness")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let s = g.shape(features).to_vec();
    if s.len() != 2 || s[0] != regions.len() {
        return Err(Error::shape(
            "box_score_scale",
            format!("features {s:?} for {} regions", regions.len()),
        ));
    }
    let max = scores.iter().cloned().fold(0.0, f64::max);
    let width = s[1];
    let mut factors = Vec::with_capacity(s[0] * width);
    for &sc in &scores {
        let f = if max > 0.0 { sc / max } else { 0.0 };
        factors.extend(std::iter::repeat_n(f, width));
    }
    let factors = g.constant(Tensor::new(s, factors)?);
    g.mul(features, factors)
}

fn linear(g: &mut Graph, params: &ParamStore, x: NodeId, name: &str) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}.weight"))?;
    let b = g.param(params, &format!("{name}.bias"))?;
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::usage(format!(
            "{name}: input width {:?} does not match weight {ws:?}",
            xs.get(1)
        )));
    }
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Two linear + ReLU layers applied to each region row independently.
pub fn fc_stack(g: &mut Graph, params: &ParamStore, features: NodeId) -> Result<NodeId> {
    let h = linear(g, params, features, "fc6")?;
    let h = g.relu(h)?;
    let h = linear(g, params, h, "fc7")?;
    g.relu(h)
}

/// Raw `C × regions` scores of a linear head.
fn head_scores(g: &mut Graph, params: &ParamStore, fc7: NodeId, name: &str) -> Result<NodeId> {
    let s = linear(g, params, fc7, name)?;
    g.transpose(s)
}

/// Class head followed by a softmax over classes for each region.
pub fn classification_stream(g: &mut Graph, params: &ParamStore, fc7: NodeId) -> Result<NodeId> {
    let xc = head_scores(g, params, fc7, "fc8c")?;
    g.softmax_axis(xc, 0)
}

/// Detection head followed by a softmax over regions for each class.
pub fn detection_stream(g: &mut Graph, params: &ParamStore, fc7: NodeId) -> Result<NodeId> {
    let xd = head_scores(g, params, fc7, "fc8d")?;
    g.softmax_axis(xd, 1)
}

/// Element-wise product of the two stream outputs.
pub fn combine_scores(g: &mut Graph, class_probs: NodeId, det_probs: NodeId) -> Result<NodeId> {
    g.mul(class_probs, det_probs)
}

/// Image-level class scores: combined region scores summed over regions.
///
/// Each entry lies in (0, 1) when there are at least two classes. With a
/// single class the class softmax is identically 1, the region softmax sums
/// to 1, and the score is the constant 1 (rounding in the sum is dropped).
pub fn image_scores(g: &mut Graph, combined: NodeId) -> Result<NodeId> {
    if g.shape(combined).first() == Some(&1) {
        return Ok(g.constant(Tensor::vector(vec![1.0])));
    }
    g.sum_axis(combined, 1)
}

/// Single-stream baseline: raw class scores per region and their
/// log-sum-exp over regions. Returns `(region_scores, image_scores)`.
pub fn baseline_forward(g: &mut Graph, params: &ParamStore, fc7: NodeId) -> Result<(NodeId, NodeId)> {
    let xc = head_scores(g, params, fc7, "fc8c")?;
    let s = g.log_sum_exp(xc, 1)?;
    Ok((xc, s))
}

/// Node handles produced by a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub fc7: NodeId,
    pub class_probs: Option<NodeId>,
    pub det_probs: Option<NodeId>,
    /// `C × regions` detection scores: the combined two-stream score, or
    /// the raw class score for the baseline.
    pub region_scores: NodeId,
    pub image_scores: NodeId,
}

/// Evaluated scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub class_probs: Option<Tensor>,
    pub det_probs: Option<Tensor>,
    pub region_scores: Tensor,
    pub image_scores: Tensor,
}

impl RegionScores {
    pub fn num_classes(&self) -> usize {
        self.region_scores.shape()[0]
    }

    pub fn num_regions(&self) -> usize {
        self.region_scores.shape()[1]
    }

    pub fn score(&self, class: usize, region: usize) -> f64 {
        self.region_scores.at(&[class, region])
    }
}

/// The assembled network for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Network { config })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Parameter names and shapes in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, s) in cfg.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), vec![s.out_channels, in_ch, s.kernel, s.kernel]));
            out.push((format!("backbone.{i}.bias"), vec![s.out_channels]));
            in_ch = s.out_channels;
        }
        let mut fc = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        fc("fc6", cfg.region_feature_width(), cfg.fc6);
        fc("fc7", cfg.fc6, cfg.fc7);
        fc("fc8c", cfg.fc7, cfg.num_classes);
        if cfg.variant == Variant::Wsddn {
            fc("fc8d", cfg.fc7, cfg.num_classes);
        }
        out
    }

    /// He-normal weights for the trunk and fc stack, small normal weights
    /// for the score heads, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.starts_with("fc8") {
                Tensor::randn(&shape, 0.01, &mut rng)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            };
            store.insert(name, t).expect("parameter names are unique");
        }
        store
    }

    /// Checks a parameter set has exactly this network's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.param_shapes();
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        image: &Tensor,
        regions: &[Region],
    ) -> Result<ForwardNodes> {
        if regions.is_empty() {
            return Err(Error::usage("forward: image has no regions"));
        }
        let (h, w) = (image.shape()[0] as f64, image.shape().get(1).copied().unwrap_or(0) as f64);
        for r in regions {
            r.validate(w, h)?;
        }
        let cfg = &self.config;
        let (map, stride) = backbone_forward(g, params, cfg, image)?;
        let mut feats = roi_spp_pool(g, map, regions, stride, cfg.spp_grid)?;
        if cfg.box_score_scaling {
            feats = box_score_scale(g, feats, regions)?;
        }
        let fc7 = fc_stack(g, params, feats)?;
        match cfg.variant {
            Variant::Wsddn => {
                let class_probs = classification_stream(g, params, fc7)?;
                let det_probs = detection_stream(g, params, fc7)?;
                let combined = combine_scores(g, class_probs, det_probs)?;
                let y = image_scores(g, combined)?;
                Ok(ForwardNodes {
                    fc7,
                    class_probs: Some(class_probs),
                    det_probs: Some(det_probs),
                    region_scores: combined,
                    image_scores: y,
                })
            }
            Variant::Baseline => {
                let (xc, s) = baseline_forward(g, params, fc7)?;
                Ok(ForwardNodes {
                    fc7,
                    class_probs: None,
                    det_probs: None,
                    region_scores: xc,
                    image_scores: s,
                })
            }
        }
    }

    /// Forward pass without keeping the graph.
    pub fn score(&self, params: &ParamStore, image: &Tensor, regions: &[Region]) -> Result<RegionScores> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, params, image, regions)?;
        Ok(RegionScores {
            class_probs: f.class_probs.map(|n| g.value(n).clone()),
            det_probs: f.det_probs.map(|n| g.value(n).clone()),
            region_scores: g.value(f.region_scores).clone(),
            image_scores: g.value(f.image_scores).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_value(t: Tensor, f: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x).unwrap();
        g.value(y).clone()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_floors_starts_and_ceils_ends() {
        let b = project_region(&Region::new(5.0, 0.0, 13.0, 64.0), 4, 16, 16);
        assert_eq!((b.x0, b.x1, b.y0, b.y1), (1, 4, 0, 16));
        let b = project_region(&Region::new(63.0, 63.0, 64.0, 64.0), 4, 16, 16);
        assert_eq!((b.x0, b.x1), (15, 16));
        // A region past the last cell still gets one cell.
        let b = project_region(&Region::new(62.0, 0.0, 64.0, 4.0), 8, 7, 7);
        assert_eq!((b.x0, b.x1), (6, 7));
    }

    #[test]
    fn backbone_on_64_pixels_gives_16_cells_at_stride_4() {
        let net = Network::new(ModelConfig::default()).unwrap();
        let params = net.init_params(0);
        let mut g = Graph::new();
        let (map, stride) = backbone_forward(&mut g, &params, &net.config, &Tensor::zeros(&[64, 64, 1])).unwrap();
        assert_eq!(g.shape(map), &[32, 16, 16]);
        assert_eq!(stride, 4);
        // Zero image and zero biases give an all-zero map.
        assert!(g.value(map).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_rejects_small_images_naming_the_minimum() {
        let net = Network::new(ModelConfig::default()).unwrap();
        let params = net.init_params(0);
        let mut g = Graph::new();
        let err = backbone_forward(&mut g, &params, &net.config, &Tensor::zeros(&[3, 8, 1])).unwrap_err();
        assert!(err.to_string().contains("4x4"), "{err}");
    }

    #[test]
    fn whole_image_region_with_unit_grid_is_global_max() {
        let map = Tensor::new(vec![2, 2, 2], vec![1.0, 5.0, 3.0, 2.0, -1.0, -4.0, -2.0, -3.0]).unwrap();
        let out = graph_value(map, |g, m| roi_spp_pool(g, m, &[Region::new(0.0, 0.0, 8.0, 8.0)], 4, 1));
        assert_eq!(out.data(), &[5.0, -1.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let out = graph_value(Tensor::full(&[3, 6, 6], 0.25), |g, m| {
            roi_spp_pool(g, m, &[Region::new(1.0, 2.0, 5.0, 6.0), Region::new(0.0, 0.0, 1.0, 1.0)], 1, 3)
        });
        assert!(out.data().iter().all(|&v| v == 0.25));
        assert_eq!(out.shape(), &[2, 27]);
    }

    #[test]
    fn box_scores_scale_rows() {
        let regions = [
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(0.5),
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(1.0),
        ];
        let out = graph_value(Tensor::ones(&[2, 1]), |g, x| box_score_scale(g, x, &regions));
        assert_eq!(out.data(), &[0.5, 1.0]);

        let zeroed = [
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(0.0),
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(2.0),
        ];
        let out = graph_value(Tensor::ones(&[2, 2]), |g, x| box_score_scale(g, x, &zeroed));
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 1.0]);

        let equal = [
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(0.3),
            Region::new(0.0, 0.0, 2.0, 2.0).with_objectness(0.3),
        ];
        let input = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = graph_value(input.clone(), |g, x| box_score_scale(g, x, &equal));
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn box_scores_require_objectness() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3]));
        let err = box_score_scale(&mut g, x, &[Region::new(0.0, 0.0, 2.0, 2.0)]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    fn fc_params(width: usize, weight: f64) -> ParamStore {
        let mut p = ParamStore::new();
        let mut eye = Tensor::zeros(&[width, width]);
        for i in 0..width {
            eye.data_mut()[i * width + i] = weight;
        }
        for name in ["fc6", "fc7"] {
            p.insert(format!("{name}.weight"), eye.clone()).unwrap();
            p.insert(format!("{name}.bias"), Tensor::zeros(&[width])).unwrap();
        }
        p
    }

    #[test]
    fn fc_stack_identity_and_zero_weights() {
        let input = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 0.5, 0.25]).unwrap();
        let p = fc_params(3, 1.0);
        let out = graph_value(input.clone(), |g, x| fc_stack(g, &p, x));
        assert_eq!(out.data(), input.data());
        let p = fc_params(3, 0.0);
        let out = graph_value(input, |g, x| fc_stack(g, &p, x));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_stack_rejects_width_mismatch() {
        let p = fc_params(3, 1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 4]));
        assert!(matches!(fc_stack(&mut g, &p, x), Err(Error::Usage(_))));
    }

    fn head(name: &str, rows: Vec<f64>, classes: usize, fc7: usize) -> ParamStore {
        // Weight maps fc7 unit i to class score i when fc7 == classes.
        let mut p = ParamStore::new();
        p.insert(format!("{name}.weight"), Tensor::new(vec![fc7, classes], rows).unwrap())
            .unwrap();
        p.insert(format!("{name}.bias"), Tensor::zeros(&[classes])).unwrap();
        p
    }

    #[test]
    fn classification_stream_normalizes_over_classes() {
        let p = head("fc8c", vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        // Two regions: logits [0,0] and [ln 1, ln 3].
        let fc7 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let out = graph_value(fc7, |g, x| classification_stream(g, &p, x));
        assert_eq!(out.shape(), &[2, 2]);
        assert!(close(out.data(), &[0.5, 0.25, 0.5, 0.75], 1e-15));
    }

    #[test]
    fn detection_stream_normalizes_over_regions() {
        let p = head("fc8d", vec![1.0], 1, 1);
        let fc7 = Tensor::new(vec![3, 1], vec![0.0, 0.0, 2f64.ln()]).unwrap();
        let out = graph_value(fc7, |g, x| detection_stream(g, &p, x));
        assert!(close(out.data(), &[0.25, 0.25, 0.5], 1e-15));

        let uniform = Tensor::new(vec![3, 1], vec![0.0; 3]).unwrap();
        let out = graph_value(uniform, |g, x| detection_stream(g, &p, x));
        assert!(close(out.data(), &[1.0 / 3.0; 3], 1e-15));

        let single = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        let out = graph_value(single, |g, x| detection_stream(g, &p, x));
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn combine_and_aggregate_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![0.7, 0.3, 0.1, 0.9]).unwrap());
        let c = combine_scores(&mut g, a, b).unwrap();
        assert!(close(g.value(c).data(), &[0.14, 0.24, 0.06, 0.36], 1e-15));
        let y = image_scores(&mut g, c).unwrap();
        assert!(close(g.value(y).data(), &[0.38, 0.42], 1e-15));

        let one_hot = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let probs = g.constant(Tensor::new(vec![1, 3], vec![0.3, 0.5, 0.9]).unwrap());
        let c = combine_scores(&mut g, probs, one_hot).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 0.0]);

        let bad = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(combine_scores(&mut g, a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn baseline_log_sum_exp() {
        let p = head("fc8c", vec![1.0], 1, 1);
        let out = |rows: Vec<f64>| {
            let n = rows.len();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![n, 1], rows).unwrap());
            let (_, s) = baseline_forward(&mut g, &p, x).unwrap();
            g.value(s).data()[0]
        };
        assert!((out(vec![1.7]) - 1.7).abs() < 1e-15);
        assert!((out(vec![0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let s = out(vec![0.3, -2.0, 1.1, 0.9]);
        assert!(s >= 1.1 && s <= 1.1 + 4f64.ln());
    }

    #[test]
    fn single_class_image_score_is_exactly_one() {
        let cfg = ModelConfig {
            num_classes: 1,
            backbone: vec![ConvStage::new(4), ConvStage::new(4)],
            fc6: 8,
            fc7: 8,
            ..ModelConfig::default()
        };
        let net = Network::new(cfg).unwrap();
        let params = net.init_params(3);
        let image = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let regions = [Region::new(0.0, 0.0, 16.0, 16.0), Region::new(8.0, 4.0, 30.0, 20.0)];
        let s = net.score(&params, &image, &regions).unwrap();
        assert_eq!(s.image_scores.data(), &[1.0]);
    }
}
