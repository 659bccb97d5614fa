use std::collections::BTreeMap;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use vodkit::detection::{Detection, VideoDetectionSet};
use vodkit::evalio::{self, EvalResult};
use vodkit::geometry::{self, BBox, RegressionDelta};
use vodkit::linker::LinkMode;
use vodkit::pipeline;
use vodkit::runner::{self, RunConfig, Variant};
use vodkit::synth::{self, ScenarioSpec};
use vodkit::tensor::{self, BinSampling, Tensor3};

fn err(e: vodkit::Error) -> PyErr {
    match e {
        vodkit::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "BBox", module = "vodkit", frozen, from_py_object)]
#[derive(Clone)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        BBox::new(x1, y1, x2, y2).map(PyBBox).map_err(err)
    }

    #[staticmethod]
    fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> PyResult<Self> {
        BBox::from_center(cx, cy, w, h).map(PyBBox).map_err(err)
    }

    #[getter]
    fn corners(&self) -> [f64; 4] {
        self.0.corners()
    }

    #[getter]
    fn center(&self) -> (f64, f64) {
        (self.0.cx(), self.0.cy())
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> f64 {
        self.0.height()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn __eq__(&self, other: &PyBBox) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.corners();
        format!("BBox({a}, {b}, {c}, {d})")
    }
}

#[pyclass(name = "Detection", module = "vodkit", from_py_object)]
#[derive(Clone)]
struct PyDetection(Detection);

#[pymethods]
impl PyDetection {
    #[new]
    #[pyo3(signature = (frame, class_id, score, bbox, track = None))]
    fn new(frame: usize, class_id: u32, score: f64, bbox: PyBBox, track: Option<u64>) -> Self {
        let mut d = Detection::new(frame, class_id, score, bbox.0);
        d.track = track;
        PyDetection(d)
    }

    #[getter]
    fn frame(&self) -> usize {
        self.0.frame
    }

    #[getter]
    fn class_id(&self) -> u32 {
        self.0.class
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    #[getter]
    fn bbox(&self) -> PyBBox {
        PyBBox(self.0.bbox)
    }

    #[getter]
    fn track(&self) -> Option<u64> {
        self.0.track
    }

    #[getter]
    fn provenance(&self) -> Option<&'static str> {
        self.0.provenance.map(|p| p.as_str())
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.bbox.corners();
        format!(
            "Detection(frame={}, class_id={}, score={}, bbox=[{a}, {b}, {c}, {d}])",
            self.0.frame, self.0.class, self.0.score
        )
    }
}

/// Per-frame detections of one video.
#[pyclass(name = "VideoDetections", module = "vodkit", from_py_object)]
#[derive(Clone)]
struct PyVideo(VideoDetectionSet);

#[pymethods]
impl PyVideo {
    #[new]
    fn new(video: String, num_frames: usize) -> Self {
        PyVideo(VideoDetectionSet::new(video, num_frames))
    }

    #[getter]
    fn video(&self) -> String {
        self.0.video.clone()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.0.num_frames()
    }

    fn push(&mut self, det: PyDetection) -> PyResult<()> {
        if det.0.frame >= self.0.num_frames() {
            return Err(PyValueError::new_err(format!("frame {} outside 0..{}", det.0.frame, self.0.num_frames())));
        }
        self.0.push(det.0);
        Ok(())
    }

    fn frame(&self, t: usize) -> PyResult<Vec<PyDetection>> {
        self.0
            .frames
            .get(t)
            .map(|f| f.iter().cloned().map(PyDetection).collect())
            .ok_or_else(|| PyValueError::new_err(format!("frame {t} outside 0..{}", self.0.num_frames())))
    }

    fn detections(&self) -> Vec<PyDetection> {
        self.0.iter().cloned().map(PyDetection).collect()
    }

    fn __len__(&self) -> usize {
        self.0.num_detections()
    }

    fn __repr__(&self) -> String {
        format!(
            "VideoDetections({:?}, frames={}, detections={})",
            self.0.video,
            self.0.num_frames(),
            self.0.num_detections()
        )
    }
}

/// Pipeline, linking and ground-truth tracker parameters.
#[pyclass(name = "RunConfig", module = "vodkit", from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    /// Defaults, or parsed from TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            Some(s) => RunConfig::from_toml(s).map(PyRunConfig).map_err(err),
            None => Ok(PyRunConfig(RunConfig::default())),
        }
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn t_merge(&self) -> f64 {
        self.0.pipeline.t_merge
    }

    #[setter]
    fn set_t_merge(&mut self, v: f64) -> PyResult<()> {
        self.update(|c| c.pipeline.t_merge = v)
    }

    #[getter]
    fn tracker_noise(&self) -> f64 {
        self.0.oracle.center_sigma
    }

    /// Sets center and log-size noise of the ground-truth tracker together.
    #[setter]
    fn set_tracker_noise(&mut self, v: f64) -> PyResult<()> {
        self.update(|c| {
            c.oracle.center_sigma = v;
            c.oracle.scale_sigma = v;
        })
    }

    #[getter]
    fn link_iou(&self) -> f64 {
        self.0.link.link_iou
    }

    #[setter]
    fn set_link_iou(&mut self, v: f64) -> PyResult<()> {
        self.update(|c| c.link.link_iou = v)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({:?})", self.0.to_toml())
    }
}

impl PyRunConfig {
    fn update(&mut self, f: impl FnOnce(&mut RunConfig)) -> PyResult<()> {
        let mut next = self.0.clone();
        f(&mut next);
        next.validate().map_err(err)?;
        self.0 = next;
        Ok(())
    }
}

#[pyclass(name = "EvalResult", module = "vodkit", frozen)]
struct PyEvalResult(EvalResult);

#[pymethods]
impl PyEvalResult {
    #[getter]
    fn map(&self) -> f64 {
        self.0.map
    }

    #[getter]
    fn iou_thresh(&self) -> f64 {
        self.0.iou_thresh
    }

    /// class -> (AP, ground-truth count, prediction count)
    #[getter]
    fn per_class(&self) -> BTreeMap<u32, (f64, usize, usize)> {
        self.0.per_class.iter().map(|(c, a)| (*c, (a.ap, a.num_gt, a.num_pred))).collect()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("EvalResult(map={})", self.0.map)
    }
}

#[pyfunction]
fn iou(a: PyBBox, b: PyBBox) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Regression delta `(dx, dy, dw, dh)` taking `reference` to `target`.
#[pyfunction]
fn encode(reference: PyBBox, target: PyBBox) -> PyResult<[f64; 4]> {
    geometry::encode(&reference.0, &target.0).map(|d| d.to_array()).map_err(err)
}

#[pyfunction]
fn decode(reference: PyBBox, delta: [f64; 4]) -> PyResult<PyBBox> {
    let d = RegressionDelta::new(delta[0], delta[1], delta[2], delta[3]).map_err(err)?;
    geometry::decode(&reference.0, &d).map(PyBBox).map_err(err)
}

#[pyfunction]
fn expand(b: PyBBox, k: f64) -> PyResult<PyBBox> {
    geometry::expand(&b.0, k).map(PyBBox).map_err(err)
}

/// Greedy NMS; returns kept indices, highest score first.
#[pyfunction]
fn nms(boxes: Vec<PyBBox>, scores: Vec<f64>, iou_thresh: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let items: Vec<(BBox, f64)> = boxes.iter().map(|b| b.0).zip(scores).collect();
    Ok(pipeline::nms_indices(&items, iou_thresh, |x| x.0, |x| x.1))
}

fn to_tensor(v: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor3> {
    let c = v.len();
    let h = v.first().map_or(0, |p| p.len());
    let w = v.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(c * h * w);
    for plane in v {
        if plane.len() != h {
            return Err(PyValueError::new_err("ragged tensor"));
        }
        for row in plane {
            if row.len() != w {
                return Err(PyValueError::new_err("ragged tensor"));
            }
            data.extend(row);
        }
    }
    Tensor3::from_vec(c, h, w, data).map_err(err)
}

fn from_tensor(t: &Tensor3) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = t.shape();
    (0..c).map(|k| (0..h).map(|y| (0..w).map(|x| t[(k, y, x)]).collect()).collect()).collect()
}

/// Per-channel valid cross-correlation of nested `[C][H][W]` lists.
#[pyfunction]
fn depthwise_correlate(template: Vec<Vec<Vec<f64>>>, search: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let out = tensor::depthwise_correlate(&to_tensor(template)?, &to_tensor(search)?).map_err(err)?;
    Ok(from_tensor(&out))
}

/// RoIAlign of a `[C][H][W]` map; `roi` is in image coordinates.
#[pyfunction]
#[pyo3(signature = (feature, roi, out_h, out_w, stride, samples = None))]
fn roi_align(
    feature: Vec<Vec<Vec<f64>>>,
    roi: PyBBox,
    out_h: usize,
    out_w: usize,
    stride: f64,
    samples: Option<usize>,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let sampling = samples.map_or(BinSampling::Adaptive, BinSampling::Grid);
    let out = tensor::roi_align(&to_tensor(feature)?, &roi.0, out_h, out_w, stride, sampling).map_err(err)?;
    Ok(from_tensor(&out))
}

fn preset(name: &str, seed: u64) -> PyResult<ScenarioSpec> {
    match name {
        "noiseless" => Ok(ScenarioSpec { seed, ..ScenarioSpec::noiseless() }),
        "degradation" => Ok(ScenarioSpec::degradation(seed)),
        "fast-motion" | "fast_motion" => Ok(ScenarioSpec::fast_motion(seed)),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    }
}

/// Ground truth and detections of a built-in synthetic scenario.
#[pyfunction]
#[pyo3(signature = (preset_name, seed = 0))]
fn scenario(preset_name: &str, seed: u64) -> PyResult<(PyVideo, PyVideo)> {
    let (gt, dets) = synth::generate(&preset(preset_name, seed)?).map_err(err)?;
    Ok((PyVideo(gt), PyVideo(dets)))
}

/// Ground truth and detections from a scenario TOML file.
#[pyfunction]
fn scenario_from_file(path: &str) -> PyResult<(PyVideo, PyVideo)> {
    let spec = ScenarioSpec::load(path).map_err(err)?;
    let (gt, dets) = synth::generate(&spec).map_err(err)?;
    Ok((PyVideo(gt), PyVideo(dets)))
}

/// Runs one pipeline variant; tracking variants use the ground-truth tracker.
#[pyfunction]
#[pyo3(signature = (variant, dets, gt, config = None))]
fn run_variant(variant: &str, dets: PyVideo, gt: PyVideo, config: Option<PyRunConfig>) -> PyResult<PyVideo> {
    let v: Variant = variant.parse().map_err(err)?;
    let cfg = config.map(|c| c.0).unwrap_or_default();
    let out = runner::run_variant(v, &dets.0, &gt.0, &cfg).map_err(err)?;
    Ok(PyVideo(out.output))
}

/// Tubelet linking and re-scoring without the final threshold and NMS.
#[pyfunction]
#[pyo3(signature = (video, mode = "seqnms", config = None))]
fn link(video: PyVideo, mode: &str, config: Option<PyRunConfig>) -> PyResult<PyVideo> {
    let mode: LinkMode = mode.parse().map_err(err)?;
    if mode == LinkMode::SeqTrack {
        return Err(PyValueError::new_err("seqtrack linking needs tracker predictions; use run_variant"));
    }
    let cfg = config.map(|c| c.0).unwrap_or_default();
    let r = vodkit::linker::link_and_rescore(&video.0, mode, None, &cfg.link).map_err(err)?;
    Ok(PyVideo(r.video))
}

#[pyfunction]
#[pyo3(signature = (preds, gt, iou_thresh = 0.5))]
fn evaluate(preds: Vec<PyVideo>, gt: Vec<PyVideo>, iou_thresh: f64) -> PyResult<PyEvalResult> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(PyValueError::new_err("iou_thresh outside [0, 1]"));
    }
    let p: Vec<_> = preds.into_iter().map(|v| v.0).collect();
    let g: Vec<_> = gt.into_iter().map(|v| v.0).collect();
    Ok(PyEvalResult(evalio::evaluate_map(&p, &g, iou_thresh)))
}

#[pyfunction]
fn load_detections(path: &str) -> PyResult<Vec<PyVideo>> {
    Ok(evalio::load_detections(path).map_err(err)?.into_iter().map(PyVideo).collect())
}

#[pyfunction]
fn save_detections(path: &str, videos: Vec<PyVideo>) -> PyResult<()> {
    let sets: Vec<_> = videos.into_iter().map(|v| v.0).collect();
    evalio::save_detections(path, &sets).map_err(err)
}

#[pymodule]
#[pyo3(name = "vodkit")]
fn vodkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("VARIANTS", Variant::ALL.map(|v| v.as_str()).to_vec())?;
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyVideo>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyEvalResult>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(expand, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(depthwise_correlate, m)?)?;
    m.add_function(wrap_pyfunction!(roi_align, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_from_file, m)?)?;
    m.add_function(wrap_pyfunction!(run_variant, m)?)?;
    m.add_function(wrap_pyfunction!(link, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(load_detections, m)?)?;
    m.add_function(wrap_pyfunction!(save_detections, m)?)?;
    Ok(())
}
