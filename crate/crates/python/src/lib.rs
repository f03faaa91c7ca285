//! Python bindings for the fusion detector: autodiff tensors, fusion ops,
//! sensor geometry, box utilities, metrics and the training pipeline.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use ugf_core::bfe::{BranchTag, FeatureStack};
use ugf_core::fusion::{self, FusionStrategy};
use ugf_core::geometry::{self, RadarPoint, SensorRig};
use ugf_core::mdn::{self, BBox, Detection};
use ugf_core::metrics::{self, EvalConfig, EvalReport};
use ugf_core::pipeline::{self, Checkpoint, RunConfig};
use ugf_core::synthdata::{self, SceneGenConfig, Split, SplitRatios};
use ugf_core::tensor::{ops, NdArray, Real, Tensor};

create_exception!(ugf, UgfError, PyException, "Error raised by the ugf core; the message starts with its class.");

fn err(e: ugf_core::Error) -> PyErr {
    UgfError::new_err(format!("[{}] {e}", e.class()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ugf_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn strategy(name: &str) -> PyResult<FusionStrategy> {
    name.parse().py()
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().py()
}

// ---------------------------------------------------------------- tensors

/// Node of the reverse-mode autodiff graph.
#[pyclass(name = "Tensor", unsendable, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

fn array(data: Vec<f64>, shape: Vec<usize>) -> PyResult<NdArray> {
    NdArray::new(shape, data.into_iter().map(|v| v as Real).collect()).py()
}

fn to_f64(x: &[Real]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let value = array(data, shape)?;
        Ok(Self(if requires_grad { Tensor::parameter(value) } else { Tensor::constant(value) }))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape()
    }

    /// Flat row-major values.
    #[getter]
    fn data(&self) -> Vec<f64> {
        to_f64(self.0.value().data())
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad().map(|g| to_f64(g.data()))
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.0.requires_grad()
    }

    fn item(&self) -> PyResult<f64> {
        Ok(self.0.item().py()? as f64)
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().py()
    }

    fn zero_grad(&self) {
        self.0.zero_grad()
    }

    fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    fn __add__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        add(self, &other)
    }

    fn __sub__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        sub(self, &other)
    }

    fn __mul__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        mul(self, &other)
    }

    fn __truediv__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        Ok(Self(ops::div(&self.0, &other.0).py()?))
    }

    fn __neg__(&self) -> Self {
        Self(ops::neg(&self.0))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.0.shape(), self.0.requires_grad())
    }
}

#[pyfunction]
fn add(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(ops::add(&a.0, &b.0).py()?))
}

#[pyfunction]
fn sub(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(ops::sub(&a.0, &b.0).py()?))
}

#[pyfunction]
fn mul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(ops::mul(&a.0, &b.0).py()?))
}

#[pyfunction]
fn exp(x: &PyTensor) -> PyTensor {
    PyTensor(ops::exp(&x.0))
}

#[pyfunction]
fn ln(x: &PyTensor) -> PyTensor {
    PyTensor(ops::ln(&x.0))
}

#[pyfunction]
fn square(x: &PyTensor) -> PyTensor {
    PyTensor(ops::square(&x.0))
}

#[pyfunction]
fn sigmoid(x: &PyTensor) -> PyTensor {
    PyTensor(ops::sigmoid(&x.0))
}

#[pyfunction]
fn silu(x: &PyTensor) -> PyTensor {
    PyTensor(ops::silu(&x.0))
}

#[pyfunction]
fn sum(x: &PyTensor) -> PyTensor {
    PyTensor(ops::sum(&x.0))
}

#[pyfunction]
fn mean(x: &PyTensor) -> PyTensor {
    PyTensor(ops::mean(&x.0))
}

#[pyfunction]
fn reshape(x: &PyTensor, shape: Vec<usize>) -> PyResult<PyTensor> {
    Ok(PyTensor(ops::reshape(&x.0, &shape).py()?))
}

/// Softmax over the spatial positions of each channel of a `[C, H, W]` map.
#[pyfunction]
fn spatial_softmax(x: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(ops::spatial_softmax(&x.0).py()?))
}

#[pyfunction]
#[pyo3(signature = (x, eps = 1e-5))]
fn layer_norm(x: &PyTensor, eps: f64) -> PyTensor {
    PyTensor(ops::layer_norm(&x.0, eps as Real))
}

#[pyfunction]
#[pyo3(signature = (x, kernel, stride = 1, padding = 0))]
fn conv2d(x: &PyTensor, kernel: &PyTensor, stride: usize, padding: usize) -> PyResult<PyTensor> {
    Ok(PyTensor(ugf_core::tensor::conv2d(&x.0, &kernel.0, stride, padding).py()?))
}

fn tensors(items: &[PyRef<'_, PyTensor>]) -> Vec<Tensor> {
    items.iter().map(|t| t.0.clone()).collect()
}

/// Element-wise mean and unbiased variance over a list of equal-shape tensors.
#[pyfunction]
fn stack_mean_var(samples: Vec<PyRef<'_, PyTensor>>) -> PyResult<(PyTensor, PyTensor)> {
    let (m, v) = ops::stack_mean_var(&tensors(&samples)).py()?;
    Ok((PyTensor(m), PyTensor(v)))
}

fn stacks(main: &[PyRef<'_, PyTensor>], aux: &[PyRef<'_, PyTensor>]) -> (FeatureStack, FeatureStack) {
    (
        FeatureStack { samples: tensors(main), branch: BranchTag::Main },
        FeatureStack { samples: tensors(aux), branch: BranchTag::Auxiliary },
    )
}

/// Fuses two stochastic feature stacks; returns `(fused, w_main, w_aux)`.
#[pyfunction]
fn ugf_fuse(main: Vec<PyRef<'_, PyTensor>>, aux: Vec<PyRef<'_, PyTensor>>) -> PyResult<(PyTensor, PyTensor, PyTensor)> {
    let (fm, fa) = stacks(&main, &aux);
    let out = fusion::ugf_fuse(&fm, &fa, true).py()?;
    let (wm, wa) = out.weight_maps.expect("weights requested");
    Ok((PyTensor(out.map), PyTensor(wm), PyTensor(wa)))
}

#[pyfunction]
fn va_fuse(main: Vec<PyRef<'_, PyTensor>>, aux: Vec<PyRef<'_, PyTensor>>) -> PyResult<PyTensor> {
    let (fm, fa) = stacks(&main, &aux);
    Ok(PyTensor(fusion::va_fuse(&fm, &fa).py()?.map))
}

// ---------------------------------------------------------------- boxes

#[pyclass(name = "BBox", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl From<BBox> for PyBBox {
    fn from(b: BBox) -> Self {
        Self { x_min: b.x_min, y_min: b.y_min, x_max: b.x_max, y_max: b.y_max }
    }
}

impl PyBBox {
    fn inner(&self) -> BBox {
        BBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox::new(x_min, y_min, x_max, y_max).into()
    }

    fn area(&self) -> f64 {
        self.inner().area()
    }

    fn iou(&self, other: PyRef<'_, Self>) -> PyResult<f64> {
        mdn::iou(&self.inner(), &other.inner()).py()
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[pyclass(name = "Detection", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyDetection {
    bbox: PyBBox,
    confidence: f64,
}

impl From<Detection> for PyDetection {
    fn from(d: Detection) -> Self {
        Self { bbox: d.bbox.into(), confidence: d.confidence }
    }
}

impl PyDetection {
    fn inner(&self) -> Detection {
        Detection::new(self.bbox.inner(), self.confidence)
    }
}

#[pymethods]
impl PyDetection {
    #[new]
    fn new(bbox: PyRef<'_, PyBBox>, confidence: f64) -> Self {
        Self { bbox: *bbox, confidence }
    }

    fn __repr__(&self) -> String {
        format!("Detection({}, confidence={})", self.bbox.__repr__(), self.confidence)
    }
}

fn detections(items: &[PyRef<'_, PyDetection>]) -> Vec<Detection> {
    items.iter().map(|d| d.inner()).collect()
}

fn wrap_frames(frames: Vec<(String, Vec<Detection>)>) -> Vec<(String, Vec<PyDetection>)> {
    frames
        .into_iter()
        .map(|(id, dets)| (id, dets.into_iter().map(PyDetection::from).collect()))
        .collect()
}

#[pyfunction]
fn iou(a: PyRef<'_, PyBBox>, b: PyRef<'_, PyBBox>) -> PyResult<f64> {
    mdn::iou(&a.inner(), &b.inner()).py()
}

/// Greedy non-maximum suppression, most confident first.
#[pyfunction]
fn nms(dets: Vec<PyRef<'_, PyDetection>>, iou_threshold: f64) -> Vec<PyDetection> {
    mdn::nms(&detections(&dets), iou_threshold).into_iter().map(Into::into).collect()
}

// ---------------------------------------------------------------- geometry

#[pyclass(name = "SensorRig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRig(SensorRig);

#[pymethods]
impl PyRig {
    /// The generator's default calibration for a `width x height` camera.
    #[staticmethod]
    fn synthetic(width: usize, height: usize) -> Self {
        Self(SensorRig::synthetic(width, height))
    }

    /// Parses a `calib.txt` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| err(ugf_core::Error::Io { path: path.clone(), source: e }))?;
        Ok(Self(SensorRig::parse_calib(&text, &path).py()?))
    }

    fn to_calib_string(&self) -> String {
        self.0.to_calib_string()
    }

    /// Radar point to `(u, v, depth)`, or None when it falls outside the image.
    fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64, f64)> {
        geometry::project_point(&RadarPoint::new(x, y, z), &self.0).map(|p| (p.u, p.v, p.depth))
    }

    fn backproject(&self, u: f64, v: f64, depth: f64) -> PyResult<(f64, f64, f64)> {
        let p = geometry::backproject(u, v, depth, &self.0).py()?;
        Ok((p.x, p.y, p.z))
    }

    /// Rasterizes `(x, y, z)` points into a depth image given as rows.
    fn project_cloud(&self, points: Vec<(f64, f64, f64)>) -> Vec<Vec<f64>> {
        let pts: Vec<_> = points.into_iter().map(|(x, y, z)| RadarPoint::new(x, y, z)).collect();
        let img = geometry::project_cloud(&pts, &self.0);
        let w = img.width();
        (0..img.height()).map(|r| (0..w).map(|c| img.get(c, r) as f64).collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!("SensorRig(fx={}, fy={}, cx={}, cy={})", self.0.fx(), self.0.fy(), self.0.cx(), self.0.cy())
    }
}

// ---------------------------------------------------------------- metrics

#[pyclass(name = "EvalReport", frozen, get_all, skip_from_py_object)]
struct PyReport {
    iou_thresholds: Vec<f64>,
    ap: Vec<f64>,
    mf1: Vec<f64>,
    map_50_95: f64,
    mmf1_50_95: f64,
    pr_curves: Vec<Vec<(f64, f64)>>,
    nms_iou: f64,
    frames: usize,
    ground_truths: usize,
    table: String,
}

impl From<EvalReport> for PyReport {
    fn from(r: EvalReport) -> Self {
        Self {
            table: r.to_table(),
            iou_thresholds: r.iou_thresholds,
            ap: r.ap,
            mf1: r.mf1,
            map_50_95: r.map_50_95,
            mmf1_50_95: r.mmf1_50_95,
            pr_curves: r.pr_curves,
            nms_iou: r.nms_iou,
            frames: r.frames,
            ground_truths: r.ground_truths,
        }
    }
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!("EvalReport(mAP_50_95={:.4}, mmF1_50_95={:.4}, frames={})", self.map_50_95, self.mmf1_50_95, self.frames)
    }
}

/// Scores detections against ground truth. Both arguments map frame ids to
/// lists; detections are suppressed with `nms_iou` first.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, nms_iou = 0.6))]
fn evaluate(
    detections: Vec<(String, Vec<PyRef<'_, PyDetection>>)>,
    ground_truth: Vec<(String, Vec<PyRef<'_, PyBBox>>)>,
    nms_iou: f64,
) -> PyResult<PyReport> {
    let dets: Vec<_> = detections.iter().map(|(id, d)| (id.clone(), self::detections(d))).collect();
    let gts: Vec<_> = ground_truth
        .iter()
        .map(|(id, b)| (id.clone(), b.iter().map(|b| b.inner()).collect()))
        .collect();
    let cfg = EvalConfig { nms_iou, ..EvalConfig::default() };
    cfg.validate().py()?;
    Ok(metrics::evaluate(&dets, &gts, &cfg).py()?.into())
}

// ---------------------------------------------------------------- pipeline

/// Writes a synthetic dataset; returns `(train, val, test)` frame counts.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed = 0, split = (0.64, 0.18, 0.18)))]
fn generate_dataset(out_dir: PathBuf, count: usize, seed: u64, split: (f64, f64, f64)) -> PyResult<(usize, usize, usize)> {
    let cfg = SceneGenConfig { seed, ..SceneGenConfig::default() };
    let ratios = SplitRatios { train: split.0, val: split.1, test: split.2 };
    let ds = synthdata::generate_dataset(&cfg, count, ratios).py()?;
    synthdata::write_dataset(&ds, &out_dir).py()?;
    Ok((ds.subset(Split::Train).len(), ds.subset(Split::Val).len(), ds.subset(Split::Test).len()))
}

fn run_config(config: Option<&Path>) -> PyResult<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p).py(),
        None => Ok(RunConfig::default()),
    }
}

/// Trains a detector and writes `best.ckpt`, `last.ckpt`, `train_log.txt`
/// and `config.toml` to `output_dir`. Returns the log as
/// `(epoch, lr, train_loss, val_map_50_95, val_mmf1_50_95)` rows.
#[pyfunction]
#[pyo3(signature = (dataset_dir, output_dir, config = None, strategy = None, epochs = None, seed = None))]
fn train(
    py: Python<'_>,
    dataset_dir: PathBuf,
    output_dir: PathBuf,
    config: Option<PathBuf>,
    strategy: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Vec<(usize, f64, f64, f64, f64)>> {
    let mut cfg = run_config(config.as_deref())?;
    cfg.dataset_dir = dataset_dir;
    cfg.output_dir = output_dir;
    if let Some(s) = strategy {
        cfg.strategy = self::strategy(s)?;
    }
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate().py()?;
    let out = py.detach(|| pipeline::train(&cfg).map(|o| o.log)).py()?;
    Ok(out
        .iter()
        .map(|r| (r.epoch, r.lr, r.train_loss, r.val_map_50_95, r.val_mmf1_50_95))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset_dir, split = "test", nms_iou = None))]
fn evaluate_checkpoint(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset_dir: PathBuf,
    split: &str,
    nms_iou: Option<f64>,
) -> PyResult<PyReport> {
    let split = self::split(split)?;
    let report = py.detach(|| -> ugf_core::Result<EvalReport> {
        let ck = Checkpoint::load(&checkpoint)?;
        let ds = synthdata::load_dataset(&dataset_dir)?;
        let eval = nms_iou.map(|nms_iou| EvalConfig { nms_iou, ..ck.config.eval.clone() });
        Ok(pipeline::evaluate_checkpoint(&ck, &ds, split, eval.as_ref())?.report)
    });
    Ok(report.py()?.into())
}

/// Detections after NMS for one split of a dataset, as `(frame_id, [Detection])`.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset_dir, split = "test", conf = None, nms_iou = None))]
fn infer(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset_dir: PathBuf,
    split: &str,
    conf: Option<f64>,
    nms_iou: Option<f64>,
) -> PyResult<Vec<(String, Vec<PyDetection>)>> {
    let split = self::split(split)?;
    let frames = py.detach(|| -> ugf_core::Result<_> {
        let ck = Checkpoint::load(&checkpoint)?;
        let ds = synthdata::load_dataset(&dataset_dir)?;
        let frames: Vec<_> = ds.subset(split).into_iter().cloned().collect();
        let conf = conf.unwrap_or(ck.config.infer_conf_threshold);
        let nms_iou = nms_iou.unwrap_or(ck.config.eval.nms_iou);
        pipeline::infer(&ck, &ds.rig, &frames, conf, nms_iou)
    });
    Ok(wrap_frames(frames.py()?))
}

#[pymodule]
fn ugf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("UgfError", m.py().get_type::<UgfError>())?;
    m.add("STRATEGIES", FusionStrategy::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyRig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(add, m)?)?;
    m.add_function(wrap_pyfunction!(sub, m)?)?;
    m.add_function(wrap_pyfunction!(mul, m)?)?;
    m.add_function(wrap_pyfunction!(exp, m)?)?;
    m.add_function(wrap_pyfunction!(ln, m)?)?;
    m.add_function(wrap_pyfunction!(square, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(silu, m)?)?;
    m.add_function(wrap_pyfunction!(sum, m)?)?;
    m.add_function(wrap_pyfunction!(mean, m)?)?;
    m.add_function(wrap_pyfunction!(reshape, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(stack_mean_var, m)?)?;
    m.add_function(wrap_pyfunction!(ugf_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(va_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    Ok(())
}
