//! Python bindings for `futuredet`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use futuredet::assignment::{self, BBox, CostMatrix};
use futuredet::cli;
use futuredet::diffcore::{Tape, Tensor};
use futuredet::evalkit::{self, ClassTruth, Detection};
use futuredet::model::{load_checkpoint, EgoMotionRecord, Model, ModelConfig, ModelInput};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type BoxTuple = (f64, f64, f64, f64);

fn to_py(err: futuredet::Error) -> PyErr {
    if cli::exit_code(&err) == 1 {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

fn bbox(b: BoxTuple) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> f64 {
    assignment::iou(&bbox(a), &bbox(b))
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes.
#[pyfunction]
fn giou(a: BoxTuple, b: BoxTuple) -> f64 {
    assignment::giou(&bbox(a), &bbox(b))
}

/// Minimum-cost assignment of every column of a `rows >= cols` cost matrix.
/// Returns `(row, col)` pairs.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    let m = CostMatrix::from_fn(rows, cols, |r, c| cost[r][c]);
    Ok(assignment::hungarian(&m).map_err(to_py)?.pairs())
}

/// Average precision of one class. `detections` are
/// `(sample, confidence, box)`; `truth` maps sample ids to boxes.
#[pyfunction]
#[pyo3(signature = (detections, truth, threshold = 0.5))]
fn average_precision(
    detections: Vec<(usize, f64, BoxTuple)>,
    truth: BTreeMap<usize, Vec<BoxTuple>>,
    threshold: f64,
) -> Option<f64> {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(sample, confidence, b)| Detection {
            sample,
            class: 0,
            confidence,
            bbox: bbox(b),
        })
        .collect();
    let mut t = ClassTruth::default();
    for (s, boxes) in truth {
        t.boxes.insert(s, boxes.into_iter().map(|b| (bbox(b), true)).collect());
    }
    evalkit::average_precision(&dets, &t, threshold)
}

/// Runs the `futuredet` command line with `args` (without the program
/// name) and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::main_with_args(std::iter::once("futuredet".to_string()).chain(args))
}

/// A future-object predictor.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a JSON model configuration (missing fields take
    /// their defaults).
    #[new]
    #[pyo3(signature = (config_json = "{}", seed = 0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let config: ModelConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Model::new(config, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint::<f32>(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.config.label()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Predicts the future object set. `frames` are flat `3·H·W` channel-major
    /// images, oldest first; `egos` are `(tx, ty, speed, rotation, timestamp)`
    /// per frame and may be omitted for models without ego-motion fusion.
    /// Returns one `(class_probs, box)` per slot.
    #[pyo3(signature = (frames, timestamps, egos = None))]
    fn predict(
        &self,
        frames: Vec<Vec<f32>>,
        timestamps: Vec<f64>,
        egos: Option<Vec<(f64, f64, f64, f64, f64)>>,
    ) -> PyResult<Vec<(Vec<f64>, BoxTuple)>> {
        let cfg = &self.inner.config;
        let frames: Vec<Tensor<f32>> = frames
            .into_iter()
            .map(|f| Tensor::new(vec![3, cfg.image_height, cfg.image_width], f))
            .collect::<futuredet::Result<_>>()
            .map_err(to_py)?;
        let egos: Vec<EgoMotionRecord> = egos
            .unwrap_or_default()
            .into_iter()
            .map(|(tx, ty, speed, rotation, timestamp)| EgoMotionRecord {
                translation: [tx, ty],
                speed,
                rotation,
                timestamp,
            })
            .collect();
        let tape = Tape::new();
        let input = ModelInput {
            frames: &frames,
            timestamps: &timestamps,
            egos: &egos,
        };
        let preds = self.inner.pass(&tape).forward(&input, false).map_err(to_py)?.predictions();
        Ok((0..preds.slots())
            .map(|j| {
                let probs = (0..preds.classes()).map(|c| preds.prob(j, c)).collect();
                let b = preds.bbox(j);
                (probs, (b.cx, b.cy, b.w, b.h))
            })
            .collect())
    }
}

#[pymodule]
fn futuredet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
