//! Python bindings: regions and metrics, proposals, synthetic data, a
//! scoring model, the command pipeline, and the gradient check.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use wsddn_core::autodiff::Tensor;
use wsddn_core::cli::{self, RunConfig, Source};
use wsddn_core::dataset::{generate_dataset, ImageSample};
use wsddn_core::evaluation::{self, Detection, GroundTruthSet, ImageDetection, View};
use wsddn_core::gradcheck::{self, GradCheckConfig};
use wsddn_core::network::{Network, Region};
use wsddn_core::proposals::{self, ProposalConfig};
use wsddn_core::training::TrainState;

create_exception!(wsddn, WsddnError, PyException);

fn to_py(e: wsddn_core::Error) -> PyErr {
    WsddnError::new_err(e.to_string())
}

/// Axis-aligned box in pixel coordinates, half-open on the right and
/// bottom, with an optional objectness score.
#[pyclass(name = "Region", module = "wsddn", frozen, eq, from_py_object)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyRegion(Region);

#[pymethods]
impl PyRegion {
    #[new]
    #[pyo3(signature = (x0, y0, x1, y1, objectness = None))]
    fn new(x0: f64, y0: f64, x1: f64, y1: f64, objectness: Option<f64>) -> PyResult<Self> {
        if !(x0 < x1 && y0 < y1) || [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) {
            return Err(PyValueError::new_err(format!("invalid box ({x0}, {y0}, {x1}, {y1})")));
        }
        let r = Region::new(x0, y0, x1, y1);
        Ok(PyRegion(match objectness {
            Some(s) => r.with_objectness(s),
            None => r,
        }))
    }

    #[getter]
    fn x0(&self) -> f64 {
        self.0.x0
    }
    #[getter]
    fn y0(&self) -> f64 {
        self.0.y0
    }
    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1
    }
    #[getter]
    fn objectness(&self) -> Option<f64> {
        self.0.objectness
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn __repr__(&self) -> String {
        let r = &self.0;
        match r.objectness {
            Some(s) => format!("Region({}, {}, {}, {}, objectness={s})", r.x0, r.y0, r.x1, r.y1),
            None => format!("Region({}, {}, {}, {})", r.x0, r.y0, r.x1, r.y1),
        }
    }
}

fn regions(list: &[PyRegion]) -> Vec<Region> {
    list.iter().map(|r| r.0).collect()
}

fn wrap(list: Vec<Region>) -> Vec<PyRegion> {
    list.into_iter().map(PyRegion).collect()
}

#[pyfunction]
fn iou(a: PyRegion, b: PyRegion) -> f64 {
    evaluation::iou(&a.0, &b.0)
}

/// Indices of the boxes kept by greedy suppression, best first.
#[pyfunction]
#[pyo3(signature = (boxes, scores, threshold = evaluation::NMS_IOU))]
fn nms(boxes: Vec<PyRegion>, scores: Vec<f64>, threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let dets: Vec<Detection> = boxes
        .iter()
        .zip(&scores)
        .map(|(r, &score)| Detection {
            class_index: 0,
            region: r.0,
            score,
        })
        .collect();
    Ok(evaluation::nms_indices(&dets, threshold))
}

fn ground_truth(gt: BTreeMap<String, Vec<(usize, PyRegion)>>) -> GroundTruthSet {
    gt.into_iter()
        .map(|(id, boxes)| (id, boxes.into_iter().map(|(c, r)| (c, r.0)).collect()))
        .collect()
}

fn image_detections(dets: Vec<(String, usize, PyRegion, f64)>) -> Vec<ImageDetection> {
    dets.into_iter()
        .map(|(image_id, class_index, r, score)| ImageDetection {
            image_id,
            detection: Detection {
                class_index,
                region: r.0,
                score,
            },
        })
        .collect()
}

/// Eleven-point AP (a fraction) of one class; `None` without ground truth.
///
/// `detections` holds `(image_id, class, region, score)` tuples and
/// `ground_truth` maps image ids to `(class, region)` lists.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, class_index, iou_threshold = evaluation::MATCH_IOU))]
fn average_precision(
    detections: Vec<(String, usize, PyRegion, f64)>,
    ground_truth: BTreeMap<String, Vec<(usize, PyRegion)>>,
    class_index: usize,
    iou_threshold: f64,
) -> Option<f64> {
    evaluation::average_precision(
        &image_detections(detections),
        &self::ground_truth(ground_truth),
        class_index,
        iou_threshold,
    )
}

/// CorLoc percentage per class, `None` for classes with no positive image.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, num_classes, iou_threshold = evaluation::MATCH_IOU))]
fn corloc(
    detections: Vec<(String, usize, PyRegion, f64)>,
    ground_truth: BTreeMap<String, Vec<(usize, PyRegion)>>,
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<Option<f64>> {
    evaluation::corloc(
        &image_detections(detections),
        &self::ground_truth(ground_truth),
        num_classes,
        iou_threshold,
    )
}

#[pyfunction]
#[pyo3(signature = (width, height, scales = None, ratios = None, stride_fraction = None))]
fn grid_proposals(
    width: usize,
    height: usize,
    scales: Option<Vec<f64>>,
    ratios: Option<Vec<f64>>,
    stride_fraction: Option<f64>,
) -> PyResult<Vec<PyRegion>> {
    let mut cfg = ProposalConfig::default();
    if let Some(s) = scales {
        cfg.scales = s;
    }
    if let Some(r) = ratios {
        cfg.ratios = r;
    }
    if let Some(f) = stride_fraction {
        cfg.stride_fraction = f;
    }
    cfg.validate().map_err(to_py)?;
    proposals::grid_proposals(width, height, &cfg).map(wrap).map_err(to_py)
}

fn image_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Tensor::new(vec![h, w, 1], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn image_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

/// One synthetic image: pixels as rows, labels in {-1, +1}, proposals, and
/// ground-truth `(class, region)` pairs.
#[pyclass(name = "Sample", module = "wsddn", frozen)]
pub struct PySample(ImageSample);

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }
    #[getter]
    fn image(&self) -> Vec<Vec<f64>> {
        image_rows(&self.0.image)
    }
    #[getter]
    fn labels(&self) -> Vec<i8> {
        self.0.labels.values().to_vec()
    }
    #[getter]
    fn proposals(&self) -> Vec<PyRegion> {
        wrap(self.0.proposals.clone())
    }
    #[getter]
    fn gt(&self) -> Vec<(usize, PyRegion)> {
        self.0.gt.iter().map(|&(c, r)| (c, PyRegion(r))).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample({}, labels={:?}, {} proposals)", self.0.id, self.0.labels.values(), self.0.proposals.len())
    }
}

fn load_config(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<RunConfig> {
    let cfg = RunConfig::load(config.as_deref(), &overrides).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Generates the train and test splits described by a run configuration.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
fn generate(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
    let cfg = load_config(config, overrides)?;
    let (train, test) = generate_dataset(&cfg.dataset, &cfg.proposals).map_err(to_py)?;
    let wrap = |d: wsddn_core::dataset::Dataset| d.samples.into_iter().map(PySample).collect();
    Ok((wrap(train), wrap(test)))
}

/// A network with its parameters, for scoring single images.
#[pyclass(name = "Model", module = "wsddn")]
pub struct PyModel {
    net: Network,
    state: TrainState,
}

#[pymethods]
impl PyModel {
    /// Fresh initialization from the model section of a run configuration.
    #[new]
    #[pyo3(signature = (config = None, overrides = Vec::new(), seed = 0))]
    fn new(config: Option<PathBuf>, overrides: Vec<String>, seed: u64) -> PyResult<Self> {
        let cfg = load_config(config, overrides)?;
        let net = Network::new(cfg.model).map_err(to_py)?;
        let state = TrainState::initial(&net, seed);
        Ok(PyModel { net, state })
    }

    /// Replaces the parameters with those of a checkpoint.
    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let state = TrainState::load(&path).map_err(to_py)?;
        self.net.check_params(&state.params).map_err(to_py)?;
        self.state = state;
        Ok(())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.state.params.numel()
    }

    /// Region scores as `C` rows of per-region values, and the image scores.
    fn score(&self, image: Vec<Vec<f64>>, regions: Vec<PyRegion>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let image = image_tensor(image)?;
        let s = self
            .net
            .score(&self.state.params, &image, &self::regions(&regions))
            .map_err(to_py)?;
        let rows = s
            .region_scores
            .data()
            .chunks(s.num_regions())
            .map(<[f64]>::to_vec)
            .collect();
        Ok((rows, s.image_scores.data().to_vec()))
    }

    /// Post-suppression detections `(class, region, score)` above `threshold`.
    #[pyo3(signature = (image, regions, threshold = 0.0))]
    fn detect(
        &self,
        image: Vec<Vec<f64>>,
        regions: Vec<PyRegion>,
        threshold: f64,
    ) -> PyResult<Vec<(usize, PyRegion, f64)>> {
        let image = image_tensor(image)?;
        let dets = evaluation::detect_image(
            &self.net,
            std::slice::from_ref(&self.state.params),
            &image,
            &self::regions(&regions),
            &[View::IDENTITY],
        )
        .map_err(to_py)?;
        Ok(dets
            .into_iter()
            .filter(|d| d.score > threshold)
            .map(|d| (d.class_index, PyRegion(d.region), d.score))
            .collect())
    }
}

/// The command-line pipeline driven from Python. Each method runs the
/// matching subcommand and returns its printed output.
#[pyclass(name = "Pipeline", module = "wsddn")]
pub struct PyPipeline {
    cfg: RunConfig,
}

fn captured(f: impl FnOnce(&mut Vec<u8>) -> wsddn_core::Result<()>) -> PyResult<String> {
    let mut out = Vec::new();
    f(&mut out).map_err(to_py)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config = None, overrides = Vec::new()))]
    fn new(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyPipeline {
            cfg: load_config(config, overrides)?,
        })
    }

    #[pyo3(signature = (force = false))]
    fn gen_data(&self, force: bool) -> PyResult<String> {
        captured(|out| cli::cmd_gen_data(&self.cfg, force, out).map(drop))
    }

    #[pyo3(signature = (resume = None, force = false))]
    fn train(&self, resume: Option<PathBuf>, force: bool) -> PyResult<String> {
        captured(|out| cli::cmd_train(&self.cfg, resume.as_deref(), force, out).map(drop))
    }

    /// Returns `(mean_ap, mean_corloc, report_text)`.
    #[pyo3(signature = (checkpoints = None))]
    fn evaluate(&self, checkpoints: Option<Vec<PathBuf>>) -> PyResult<(Option<f64>, Option<f64>, String)> {
        let paths = checkpoints.unwrap_or_else(|| vec![self.cfg.paths.checkpoint.clone()]);
        let mut out = Vec::new();
        let report = cli::cmd_eval(&self.cfg, &Source::Checkpoints(paths), &mut out).map_err(to_py)?;
        Ok((report.mean_ap(), report.mean_corloc(), report.to_text()))
    }
}

/// Runs the finite-difference check; returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(name = "gradcheck", signature = (instances_per_op = 6, seed = 0))]
fn run_gradcheck(instances_per_op: usize, seed: u64) -> PyResult<(bool, String)> {
    let cfg = GradCheckConfig {
        seed,
        instances_per_op,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg).map_err(to_py)?;
    Ok((report.passed(), report.to_text()))
}

#[pymodule]
fn wsddn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WsddnError", m.py().get_type::<WsddnError>())?;
    m.add_class::<PyRegion>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(corloc, m)?)?;
    m.add_function(wrap_pyfunction!(grid_proposals, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    Ok(())
}
