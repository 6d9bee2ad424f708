//! Python bindings: tensors as (shape, flat data) pairs, the camera and pose
//! types, scene generation, view synthesis, metrics, feature visualization,
//! and training / inference through checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scent_core::cli::checkpoint::load_checkpoint;
use scent_core::cli::config::RunConfig;
use scent_core::cli::run::{self, TrainOptions};
use scent_core::evalkit;
use scent_core::featviz::{self, VizConfig};
use scent_core::geometry::{self, Frame, PoseVar, SE3Pose};
use scent_core::losscheck;
use scent_core::models::ModelBundle;
use scent_core::synth::{self, CorruptionKind, CorruptionSpec};
use scent_core::tensor::{Precision, Tape};
use scent_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Generation(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense f64 array in row-major order.
#[pyclass(name = "Tensor", module = "scent", frozen, from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: scent_core::tensor::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: scent_core::tensor::Tensor::new(&shape, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor { inner: scent_core::tensor::Tensor::zeros(&shape) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: scent_core::tensor::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Pinhole intrinsics of a `width × height` image.
#[pyclass(name = "Intrinsics", module = "scent", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyIntrinsics {
    inner: geometry::Intrinsics,
}

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Ok(PyIntrinsics { inner: geometry::Intrinsics::new(fx, fy, cx, cy, width, height).map_err(to_py)? })
    }

    /// The default camera used by the scene generator.
    #[staticmethod]
    fn for_size(width: usize, height: usize) -> Self {
        PyIntrinsics { inner: geometry::Intrinsics::for_size(width, height) }
    }

    /// Unit-depth ray through pixel `(u, v)`.
    fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        self.inner.ray(u, v)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.inner.fx
    }

    #[getter]
    fn fy(&self) -> f64 {
        self.inner.fy
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.inner.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.inner.cy
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }
}

/// Rigid transform `p ↦ R p + t`.
#[pyclass(name = "Pose", module = "scent", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyPose {
    inner: SE3Pose,
}

#[pymethods]
impl PyPose {
    #[new]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        Ok(PyPose { inner: SE3Pose::new(rotation, translation).map_err(to_py)? })
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose { inner: SE3Pose::identity() }
    }

    #[staticmethod]
    fn from_axis_angle(omega: [f64; 3], translation: [f64; 3]) -> Self {
        PyPose { inner: SE3Pose::from_axis_angle(omega, translation) }
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        self.inner.rotation
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.inner.translation
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        self.inner.apply(point)
    }

    fn inverse(&self) -> Self {
        PyPose { inner: self.inner.inverse() }
    }

    /// `self ∘ other`.
    fn compose(&self, other: &PyPose) -> Self {
        PyPose { inner: self.inner.compose(&other.inner) }
    }

    fn with_scaled_translation(&self, s: f64) -> Self {
        PyPose { inner: self.inner.with_scaled_translation(s) }
    }

    fn __repr__(&self) -> String {
        format!("Pose(rotation={:?}, translation={:?})", self.inner.rotation, self.inner.translation)
    }
}

/// A generated target frame, its two neighbours and ground truth.
#[pyclass(name = "Scene", module = "scent", frozen)]
struct PyScene {
    inner: synth::SceneSample,
}

#[pymethods]
impl PyScene {
    /// Image `[1,3,H,W]` of the target frame.
    #[getter]
    fn target(&self) -> PyTensor {
        wrap(self.inner.target.image.clone())
    }

    #[getter]
    fn sources(&self) -> Vec<PyTensor> {
        self.inner.sources.iter().map(|f| wrap(f.image.clone())).collect()
    }

    #[getter]
    fn gt_depth(&self) -> PyTensor {
        wrap(self.inner.gt_depth.clone())
    }

    /// Target-to-source transform of each source.
    #[getter]
    fn gt_poses(&self) -> Vec<PyPose> {
        self.inner.gt_poses.iter().map(|&p| PyPose { inner: p }).collect()
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics { inner: self.inner.target.intrinsics }
    }

    #[getter]
    fn description(&self) -> String {
        self.inner.scene_spec.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, width = 64, height = 48))]
fn random_scene(seed: u64, width: usize, height: usize) -> PyResult<PyScene> {
    Ok(PyScene { inner: synth::random_scene(seed, width, height).map_err(to_py)? })
}

/// Warps `source` into the target view given the target depth and the
/// target-to-source pose. Returns `(image, valid_mask)`.
#[pyfunction]
fn synthesize_view(source: &PyTensor, depth: &PyTensor, pose: &PyPose, k: &PyIntrinsics) -> PyResult<(PyTensor, PyTensor)> {
    let tape = Tape::new(Precision::Double);
    let out = geometry::synthesize_view(
        tape.constant(source.inner.clone()),
        tape.constant(depth.inner.clone()),
        &PoseVar::constant(&tape, &pose.inner),
        &k.inner,
    )
    .map_err(to_py)?;
    Ok((wrap(out.image.value()), wrap(out.mask)))
}

/// Applies a named corruption (`fog`, `snow`, `frost`, `motion_blur`,
/// `night`) at severity 1..5 to a `[1,3,H,W]` image.
#[pyfunction]
#[pyo3(signature = (image, kind, severity = 3, seed = 0, depth = None))]
fn corrupt(image: &PyTensor, kind: &str, severity: u8, seed: u64, depth: Option<&PyTensor>) -> PyResult<PyTensor> {
    let shape = image.inner.shape();
    if shape.len() != 4 {
        return Err(PyValueError::new_err(format!("expected a [1,3,H,W] image, got {shape:?}")));
    }
    let k = geometry::Intrinsics::for_size(shape[3], shape[2]);
    let frame = Frame::new(image.inner.clone(), k, 0).map_err(to_py)?;
    let spec = CorruptionSpec::new(CorruptionKind::parse(kind).map_err(to_py)?, severity, seed).map_err(to_py)?;
    let out = synth::corrupt(&frame, depth.map(|d| &d.inner), &spec).map_err(to_py)?;
    Ok(wrap(out.image))
}

fn record_dict<'py>(py: Python<'py>, r: &evalkit::MetricRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("condition", &r.condition)?;
    d.set_item("abs_rel", r.abs_rel)?;
    d.set_item("sq_rel", r.sq_rel)?;
    d.set_item("rmse", r.rmse)?;
    d.set_item("rmse_log", r.rmse_log)?;
    d.set_item("delta1", r.delta1)?;
    d.set_item("delta2", r.delta2)?;
    d.set_item("delta3", r.delta3)?;
    d.set_item("n_pixels", r.n_pixels)?;
    d.set_item("scale_factor", r.scale_factor)?;
    Ok(d)
}

/// Standard depth metrics of one prediction against ground truth.
#[pyfunction]
#[pyo3(signature = (pred, gt, valid = None, median_scale = true))]
fn compute_metrics<'py>(
    py: Python<'py>,
    pred: &PyTensor,
    gt: &PyTensor,
    valid: Option<&PyTensor>,
    median_scale: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let r = evalkit::compute_metrics(&pred.inner, &gt.inner, valid.map(|v| &v.inner), median_scale).map_err(to_py)?;
    record_dict(py, &r)
}

/// Renders the top principal component of the stacked feature maps as an
/// 8-bit `height × width` image; returns the row-major pixels.
#[pyfunction]
#[pyo3(signature = (features, height, width, clip_lo = 5.0, clip_hi = 95.0))]
fn visualize_features(features: Vec<PyTensor>, height: usize, width: usize, clip_lo: f64, clip_hi: f64) -> PyResult<Vec<u8>> {
    let maps: Vec<_> = features.into_iter().map(|t| t.inner).collect();
    let cfg = VizConfig { clip_lo, clip_hi, ..VizConfig::new(height, width) };
    Ok(featviz::visualize_features(&maps, &cfg).map_err(to_py)?.pixels)
}

/// Finite-difference checks of every loss for one seed, as
/// `(name, relative_error, passed)` rows followed by the stop-gradient rows.
#[pyfunction]
#[pyo3(signature = (seed = 0, double = true))]
fn gradient_check(seed: u64, double: bool) -> PyResult<Vec<(String, f64, bool)>> {
    let precision = if double { Precision::Double } else { Precision::Single };
    let suite = losscheck::loss_suite(seed, precision).map_err(to_py)?;
    let mut rows: Vec<_> = suite.gradients.iter().map(|r| (r.name.clone(), r.relative_error, r.passed)).collect();
    rows.extend(suite.stop_gradients.iter().map(|r| (format!("stop_gradient/{}", r.name), r.max_abs_grad, r.passed)));
    Ok(rows)
}

/// Writes `count` generated samples to `out`.
#[pyfunction]
#[pyo3(signature = (out, count, width = 64, height = 48, seed = 0, force = false))]
fn generate_dataset(out: PathBuf, count: usize, width: usize, height: usize, seed: u64, force: bool) -> PyResult<()> {
    run::generate_dataset(&out, count, width, height, seed, force).map_err(to_py)
}

/// Self-supervised depth model, freshly initialized or loaded from a
/// checkpoint directory.
#[pyclass(name = "Model", module = "scent")]
struct PyModel {
    config: RunConfig,
    bundle: ModelBundle,
}

#[pymethods]
impl PyModel {
    /// Fresh model from config text (`key = value` lines); defaults if empty.
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        let config = RunConfig::parse(config).map_err(to_py)?;
        let bundle = ModelBundle::new(config.model()).map_err(to_py)?;
        Ok(PyModel { config, bundle })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&checkpoint).map_err(to_py)?;
        Ok(PyModel { config: ck.config, bundle: ck.bundle })
    }

    /// Trains on the dataset in `data`, checkpointing to `out`, and replaces
    /// this model with the result. Returns the number of steps taken.
    #[pyo3(signature = (data, out, max_steps = None, resume = false, force = false))]
    fn train(&mut self, data: PathBuf, out: PathBuf, max_steps: Option<u64>, resume: bool, force: bool) -> PyResult<u64> {
        let samples = run::load_dataset(&data).map_err(to_py)?;
        let result = run::train(&self.config, &samples, &out, TrainOptions { resume, force, max_steps }).map_err(to_py)?;
        self.bundle = result.bundle;
        Ok(result.state.step)
    }

    /// Depth `[1,1,H,W]` for an image `[1,3,H,W]`.
    fn predict_depth(&self, image: &PyTensor) -> PyResult<PyTensor> {
        Ok(wrap(evalkit::predict_depth(&self.bundle, &image.inner).map_err(to_py)?))
    }

    /// Pooled metrics per condition (`clear` or a corruption name) on the
    /// dataset in `data`.
    #[pyo3(signature = (data, conditions = vec!["clear".to_string()], severity = 3, seed = 0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        conditions: Vec<String>,
        severity: u8,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let samples = run::load_dataset(&data).map_err(to_py)?;
        let conds = conditions
            .iter()
            .map(|c| evalkit::Condition::parse(c, severity))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let records = evalkit::run_benchmark(&self.bundle, &samples, &conds, seed).map_err(to_py)?;
        records.iter().map(|r| record_dict(py, r)).collect()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.bundle.param_count()
    }

    /// The run configuration as `key = value` text.
    #[getter]
    fn config(&self) -> String {
        self.config.to_text()
    }
}

#[pymodule]
fn scent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(random_scene, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_view, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(visualize_features, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
