//! Python bindings: configs, synthetic data, the grounding model and the
//! metric and loss functions.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use stgd_core::checkpoint::{load_checkpoint, save_checkpoint};
use stgd_core::data::{self, SyntheticSample};
use stgd_core::metrics::{BoxCxcywh, Tube};
use stgd_core::tensor::GradCheckOptions;
use stgd_core::{eval, losses, metrics, train, ParamStore, StgdModel, TrainConfig};

create_exception!(stgd, StgdError, PyException);

fn py_err(e: stgd_core::Error) -> PyErr {
    StgdError::new_err(e.to_string())
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn tube(t_s: usize, t_e: usize, boxes: Vec<BoxCxcywh>) -> PyResult<Tube> {
    Tube::new(t_s, t_e, boxes).map_err(py_err)
}

/// Training and model configuration. Keyword arguments override defaults.
#[pyclass(name = "Config", module = "stgd")]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(TrainConfig::default()).expect("serializable");
        if let Some(o) = overrides {
            let text: String = py.import("json")?.call_method1("dumps", (o,))?.extract()?;
            let patch: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| StgdError::new_err(e.to_string()))?;
            for (k, v) in patch.as_object().into_iter().flatten() {
                value[k] = v.clone();
            }
        }
        Self::from_json(&value.to_string())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: TrainConfig =
            serde_json::from_str(text).map_err(|e| StgdError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_loads(py, &self.inner.to_json())
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, frames={}, d_model={}, use_adapters={})",
            self.inner.seed, self.inner.frames, self.inner.d_model, self.inner.use_adapters
        )
    }
}

/// One synthetic clip with its ground-truth tube.
#[pyclass(name = "Sample", module = "stgd")]
struct PySample {
    inner: SyntheticSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> usize {
        self.inner.id
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn t_s(&self) -> usize {
        self.inner.tube.t_s
    }

    #[getter]
    fn t_e(&self) -> usize {
        self.inner.tube.t_e
    }

    #[getter]
    fn boxes(&self) -> Vec<BoxCxcywh> {
        self.inner.tube.boxes.clone()
    }

    #[getter]
    fn video_shape(&self) -> Vec<usize> {
        self.inner.batch.video.shape().to_vec()
    }

    #[getter]
    fn text_shape(&self) -> Vec<usize> {
        self.inner.batch.text.shape().to_vec()
    }

    /// The JSON record written by `write_jsonl`.
    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner.to_record()).expect("serializable")
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={}, t_s={}, t_e={})",
            self.inner.id, self.inner.tube.t_s, self.inner.tube.t_e
        )
    }
}

fn unwrap_samples(samples: &Bound<'_, PyList>) -> PyResult<Vec<SyntheticSample>> {
    samples
        .iter()
        .map(|s| Ok(s.cast::<PySample>()?.borrow().inner.clone()))
        .collect()
}

fn wrap_samples(samples: Vec<SyntheticSample>) -> Vec<PySample> {
    samples
        .into_iter()
        .map(|inner| PySample { inner })
        .collect()
}

#[pyfunction]
fn generate_dataset(config: &PyConfig, n: usize, seed: u64) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(
        data::generate_dataset(&config.inner, n, seed).map_err(py_err)?,
    ))
}

#[pyfunction]
fn write_jsonl(path: PathBuf, samples: &Bound<'_, PyList>) -> PyResult<()> {
    data::write_jsonl(&path, &unwrap_samples(samples)?).map_err(py_err)
}

#[pyfunction]
fn read_jsonl(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(data::read_jsonl(&path).map_err(py_err)?))
}

#[pyfunction]
fn matched_filter_accuracy(config: &PyConfig, samples: &Bound<'_, PyList>) -> PyResult<f64> {
    data::matched_filter_accuracy(&config.inner, &unwrap_samples(samples)?).map_err(py_err)
}

/// Frozen backbone with trainable adapters and grounding heads.
#[pyclass(name = "Model", module = "stgd")]
struct PyModel {
    model: StgdModel,
    store: ParamStore,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let (model, store) = StgdModel::build(&config.inner).map_err(py_err)?;
        Ok(PyModel { model, store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        let (model, mut store) = StgdModel::build(&ck.manifest.config).map_err(py_err)?;
        ck.restore_into(&mut store).map_err(py_err)?;
        Ok(PyModel { model, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.model.cfg, &self.store).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.model.cfg.clone(),
        }
    }

    /// `(total, trainable)` parameter counts.
    fn count_params(&self) -> (usize, usize) {
        (
            self.store.count_total(),
            metrics::count_trainable_params(&self.store),
        )
    }

    /// Trains for `config.steps` steps and returns the per-step mean loss.
    #[pyo3(signature = (samples, val=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        samples: &Bound<'py, PyList>,
        val: Option<&Bound<'py, PyList>>,
    ) -> PyResult<Vec<f64>> {
        let train_set = unwrap_samples(samples)?;
        let val_set = val.map(unwrap_samples).transpose()?;
        let (model, store) = (&self.model, &mut self.store);
        let h = py
            .detach(|| train::train(model, store, &train_set, val_set.as_deref(), |_| {}))
            .map_err(py_err)?;
        Ok(h.losses)
    }

    /// Metrics report as a dict.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        samples: &Bound<'py, PyList>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r =
            eval::evaluate(&self.model, &self.store, &unwrap_samples(samples)?).map_err(py_err)?;
        json_loads(py, &serde_json::to_string(&r).expect("serializable"))
    }

    /// Predicted tube `(t_s, t_e, boxes)`.
    fn predict(&self, sample: &PySample) -> PyResult<(usize, usize, Vec<BoxCxcywh>)> {
        let t = self
            .model
            .predict_tube(&self.store, &sample.inner.batch)
            .map_err(py_err)?;
        Ok((t.t_s, t.t_e, t.boxes))
    }

    /// Per-frame start, end and confidence distributions.
    fn boundaries(&self, sample: &PySample) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = self
            .model
            .predict(&self.store, &sample.inner.batch)
            .map_err(py_err)?;
        Ok((
            p.start_dist.data().to_vec(),
            p.end_dist.data().to_vec(),
            p.temporal_conf.data().to_vec(),
        ))
    }

    /// Names of the parameters that receive gradients.
    fn trainable_names(&self) -> Vec<String> {
        self.store
            .trainable_ids()
            .iter()
            .map(|&id| self.store.name(id).to_string())
            .collect()
    }
}

/// Finite-difference check of all trainable gradients; returns
/// `(passed, max_rel_error, coords_checked)`.
#[pyfunction]
#[pyo3(signature = (config, tol=1e-4))]
fn gradcheck(py: Python<'_>, config: &PyConfig, tol: f64) -> PyResult<(bool, f64, usize)> {
    let opts = GradCheckOptions {
        tol,
        seed: config.inner.seed,
        ..GradCheckOptions::default()
    };
    let r = py
        .detach(|| train::check_model_gradients(&config.inner, &opts))
        .map_err(py_err)?;
    Ok((r.passed, r.max_rel_error, r.coords_checked()))
}

#[pyfunction]
fn t_iou(pred: (usize, usize), gt: (usize, usize)) -> PyResult<f64> {
    metrics::t_iou(pred, gt).map_err(py_err)
}

/// vIoU of two tubes given as `(t_s, t_e, boxes)`.
#[pyfunction]
fn v_iou(
    pred: (usize, usize, Vec<BoxCxcywh>),
    gt: (usize, usize, Vec<BoxCxcywh>),
) -> PyResult<f64> {
    metrics::v_iou(&tube(pred.0, pred.1, pred.2)?, &tube(gt.0, gt.1, gt.2)?).map_err(py_err)
}

/// GIoU of two corner-form boxes.
#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    losses::giou(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (target, pred, eps=losses::KL_EPS))]
fn kl_div(target: Vec<f64>, pred: Vec<f64>, eps: f64) -> PyResult<f64> {
    losses::kl_div(&target, &pred, eps).map_err(py_err)
}

#[pyfunction]
fn bce_mask(mask: Vec<f64>, conf: Vec<f64>) -> PyResult<f64> {
    losses::bce_mask(&mask, &conf).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, frames, sigma=1.0))]
fn gt_boundary_distribution(t: usize, frames: usize, sigma: f64) -> PyResult<Vec<f64>> {
    losses::gt_boundary_distribution(t, frames, sigma).map_err(py_err)
}

#[pymodule]
fn stgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StgdError", m.py().get_type::<StgdError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(matched_filter_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(t_iou, m)?)?;
    m.add_function(wrap_pyfunction!(v_iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(bce_mask, m)?)?;
    m.add_function(wrap_pyfunction!(gt_boundary_distribution, m)?)?;
    Ok(())
}
