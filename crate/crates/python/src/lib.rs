//! Python bindings: tensors, chunk grids, planted models, attribution and
//! the enumeration oracle. Any Python callable mapping a batch of flat
//! float lists to a list of losses can serve as the model.

use std::path::PathBuf;
use std::sync::Arc;

use mupax::attribution::threshold_mask;
use mupax::models::{ModelError, PlantedModel, PlantedModelSpec};
use mupax::oracle::enumerate as enumerate_masks;
use mupax::sampler::Engine;
use mupax::tensor::{load_tensor, save_tensor};
use mupax::{
    build_grid, explain as run_explain, ChunkGrid, ExplainConfig, InputTensor, LossValue, Predictor,
    SaliencyMap, SamplerConfig,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "mupax_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Arc<InputTensor>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(InputTensor::new(shape, values).map_err(err)?),
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values().to_vec()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_mpxt_bytes().map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(InputTensor::from_mpxt_bytes(&data, true).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_tensor(&path, true).map_err(err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_tensor(&path, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "ChunkGrid", module = "mupax_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGrid {
    inner: Arc<ChunkGrid>,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(input_shape: Vec<usize>, chunk_shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(build_grid(&input_shape, &chunk_shape).map_err(err)?),
        })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    /// Flat offsets belonging to chunk `j`.
    fn members(&self, j: usize) -> PyResult<Vec<usize>> {
        if j >= self.inner.m() {
            return Err(PyValueError::new_err(format!("chunk {j} out of range")));
        }
        Ok(self.inner.members(j).to_vec())
    }

    fn chunk_of(&self, coord: Vec<usize>) -> PyResult<usize> {
        self.inner.chunk_of(&coord).map_err(err)
    }

    /// Zeroes every chunk not listed in `retained`.
    fn apply(&self, x: &PyTensor, retained: Vec<usize>) -> PyResult<PyTensor> {
        let s = mupax::SelectionVector::from_indices(self.inner.m(), retained);
        Ok(PyTensor {
            inner: Arc::new(mupax::apply_mask(&x.inner, &s, &self.inner).map_err(err)?),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "ChunkGrid(input={:?}, chunk={:?}, m={})",
            self.inner.input_shape(),
            self.inner.chunk_shape(),
            self.inner.m()
        )
    }
}

#[pyclass(name = "PlantedModel", module = "mupax_py", frozen)]
pub struct PyPlanted {
    inner: Arc<PlantedModel>,
}

#[pymethods]
impl PyPlanted {
    #[new]
    #[pyo3(signature = (grid, reference, relevant, noise = Vec::new(), epsilon = 0.0))]
    fn new(
        grid: &PyGrid,
        reference: &PyTensor,
        relevant: Vec<usize>,
        noise: Vec<usize>,
        epsilon: f64,
    ) -> PyResult<Self> {
        let spec = PlantedModelSpec::new(
            (*grid.inner).clone(),
            (*reference.inner).clone(),
            relevant,
            noise,
            epsilon,
        )
        .map_err(err)?;
        Ok(Self {
            inner: Arc::new(PlantedModel::new(spec)),
        })
    }

    fn loss(&self, x: &PyTensor) -> PyResult<f64> {
        Ok(mupax::models::evaluate_one(self.inner.as_ref(), &x.inner)
            .map_err(err)?
            .get())
    }

    #[getter]
    fn relevant_offsets(&self) -> Vec<usize> {
        self.inner.spec().relevant_offsets().to_vec()
    }
}

/// A Python callable `f(batch: list[list[float]]) -> list[float]`.
struct PyCallable {
    f: Py<PyAny>,
    shape: Vec<usize>,
}

impl Predictor for PyCallable {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn description(&self) -> String {
        "python-callable".into()
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        let flat: Vec<Vec<f32>> = batch.iter().map(|x| x.values().to_vec()).collect();
        let losses: Vec<f64> = Python::attach(|py| {
            self.f
                .call1(py, (flat,))
                .and_then(|r| r.extract::<Vec<f64>>(py))
                .map_err(|e| ModelError::InvalidSpec(format!("python model failed: {e}")))
        })?;
        if losses.len() != batch.len() {
            return Err(ModelError::BatchSize {
                expected: batch.len(),
                actual: losses.len(),
            });
        }
        losses.into_iter().map(LossValue::new).collect()
    }
}

enum Model {
    Planted(Arc<PlantedModel>),
    Callable(PyCallable),
}

impl Model {
    fn from_py(model: &Bound<'_, PyAny>, x: &InputTensor) -> PyResult<Self> {
        if let Ok(p) = model.cast::<PyPlanted>() {
            return Ok(Model::Planted(p.get().inner.clone()));
        }
        if model.is_callable() {
            return Ok(Model::Callable(PyCallable {
                f: model.clone().unbind(),
                shape: x.shape().to_vec(),
            }));
        }
        Err(PyValueError::new_err("model must be a PlantedModel or a callable"))
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Model::Planted(p) => p.as_ref(),
            Model::Callable(c) => c,
        }
    }
}

#[pyclass(name = "Saliency", module = "mupax_py", frozen)]
pub struct PySaliency {
    map: SaliencyMap,
    grid: Option<Arc<ChunkGrid>>,
}

#[pymethods]
impl PySaliency {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.map.shape.clone()
    }

    #[getter]
    fn chi(&self) -> Vec<f64> {
        self.map.chi.clone()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.map.se.clone()
    }

    #[getter]
    fn n(&self) -> u64 {
        self.map.n
    }

    #[getter]
    fn w(&self) -> f64 {
        self.map.w_used
    }

    #[getter]
    fn p_hat(&self) -> f64 {
        self.map.p_hat
    }

    /// Chunks kept at the given percentile of per-chunk mean saliency.
    #[pyo3(signature = (percentile = 50.0))]
    fn mask(&self, percentile: f64) -> PyResult<Vec<usize>> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("saliency loaded without a chunk grid"))?;
        Ok(threshold_mask(&self.map, grid, percentile).retained().collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.map.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            map: SaliencyMap::load(&path).map_err(err)?,
            grid: None,
        })
    }
}

/// Attributes `x` under `model`; returns `(Saliency, stats dict)`.
#[pyfunction]
#[pyo3(signature = (
    model, x, grid, n_target, seed = 0, percentile_w = 20.0, n_calibration = 256,
    threshold = None, workers = 1, cap = None, batch_size = 32
))]
#[allow(clippy::too_many_arguments)]
fn explain<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    x: &PyTensor,
    grid: &PyGrid,
    n_target: usize,
    seed: u64,
    percentile_w: f64,
    n_calibration: usize,
    threshold: Option<f64>,
    workers: usize,
    cap: Option<usize>,
    batch_size: usize,
) -> PyResult<(PySaliency, Bound<'py, PyDict>)> {
    let model = Model::from_py(model, &x.inner)?;
    let mut sampler = SamplerConfig::new(n_target, seed);
    sampler.percentile_w = percentile_w;
    sampler.n_calibration = n_calibration;
    sampler.n_total_cap = cap;
    sampler.batch_size = batch_size;
    let mut config = ExplainConfig::new(sampler).with_workers(workers);
    config.threshold = threshold;
    let (xi, gi) = (x.inner.clone(), grid.inner.clone());
    let e = py
        .detach(|| run_explain(model.predictor(), xi, gi, &config))
        .map_err(err)?;
    let stats = PyDict::new(py);
    stats.set_item("attempted", e.acceptance.attempted)?;
    stats.set_item("accepted", e.acceptance.accepted)?;
    stats.set_item("p_hat", e.acceptance.p_hat())?;
    stats.set_item("w", e.threshold.w)?;
    stats.set_item("partial", e.partial)?;
    stats.set_item("max_identity_error", e.decomposition.max_identity_error)?;
    let retention: Vec<f64> = e.decomposition.chunks.iter().map(|c| c.retention).collect();
    let goodness: Vec<Option<f64>> = e.decomposition.chunks.iter().map(|c| c.goodness).collect();
    stats.set_item("retention", retention)?;
    stats.set_item("goodness", goodness)?;
    Ok((
        PySaliency {
            map: e.map,
            grid: Some(grid.inner.clone()),
        },
        stats,
    ))
}

/// Exact saliency by enumerating every admissible mask (m ≤ 20).
#[pyfunction]
fn oracle<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    x: &PyTensor,
    grid: &PyGrid,
    w: f64,
) -> PyResult<(PySaliency, Bound<'py, PyDict>)> {
    let model = Model::from_py(model, &x.inner)?;
    let (xi, gi) = (x.inner.clone(), grid.inner.clone());
    let result = py
        .detach(|| {
            let engine = Engine::new(1, model.predictor())?;
            enumerate_masks(&xi, &gi, model.predictor(), w, &engine).map_err(mupax::Error::from)
        })
        .map_err(err)?;
    let info = PyDict::new(py);
    info.set_item("p_w", result.p_w)?;
    info.set_item("retention", result.retention.clone())?;
    info.set_item("goodness", result.goodness.clone())?;
    info.set_item("max_identity_error", result.max_identity_error)?;
    Ok((
        PySaliency {
            map: result.to_saliency(),
            grid: Some(grid.inner.clone()),
        },
        info,
    ))
}

#[pymodule]
fn mupax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyPlanted>()?;
    m.add_class::<PySaliency>()?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
