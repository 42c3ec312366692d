//! Python bindings: topologies and counts, model build and inference,
//! synthetic data, splitting, tiling and the IOU metrics.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seistile::data::{self, SplitConfig, SynthConfig, TileConfig};
use seistile::eval;
use seistile::tensor::Tensor;
use seistile::topology::{self, OpMode, TopologySpec};
use seistile::train;
use seistile::Error;

create_exception!(seistile, SeistileError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => pyo3::exceptions::PyIOError::new_err(e.to_string()),
        Error::Parse { .. } | Error::Topology(_) | Error::Config(_) | Error::Dimension(_) | Error::Label { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => SeistileError::new_err(other.to_string()),
    }
}

fn op_mode(mode: &str) -> PyResult<OpMode> {
    mode.parse().map_err(PyValueError::new_err)
}

/// A validated network description.
#[pyclass(name = "Topology", module = "seistile", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTopology {
    spec: TopologySpec,
}

#[pymethods]
impl PyTopology {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            spec: topology::parse_topology(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            spec: topology::preset(name).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.spec.name
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    #[getter]
    fn total_stride(&self) -> usize {
        self.spec.total_stride()
    }

    /// Layer lines, one per layer.
    fn layers(&self) -> Vec<String> {
        self.spec.layers.iter().map(|l| l.to_string()).collect()
    }

    fn render(&self) -> String {
        self.spec.render()
    }

    fn parameters(&self) -> u64 {
        topology::count_parameters(&self.spec)
    }

    #[pyo3(signature = (height, width, mode = "mac"))]
    fn operations(&self, height: usize, width: usize, mode: &str) -> PyResult<u64> {
        Ok(topology::count_operations(&self.spec, height, width, op_mode(mode)?))
    }

    #[pyo3(signature = (divisor, min_channels = 4))]
    fn with_width_divisor(&self, divisor: usize, min_channels: usize) -> Self {
        Self {
            spec: self.spec.with_width_divisor(divisor, min_channels),
        }
    }

    fn __repr__(&self) -> String {
        format!("Topology(name={:?}, layers={})", self.spec.name, self.spec.layers.len())
    }
}

/// Network weights in single precision.
#[pyclass(name = "Model", module = "seistile")]
struct PyModel {
    model: topology::Model<f32>,
}

fn nhwc(shape: (usize, usize, usize)) -> [usize; 4] {
    [shape.0, shape.1, shape.2, 1]
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (topology, seed = 0))]
    fn new(topology: &PyTopology, seed: u64) -> PyResult<Self> {
        Ok(Self {
            model: topology::Model::build(&topology.spec, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: train::load_checkpoint(&path).map_err(to_py)?.model,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    #[getter]
    fn topology(&self) -> PyTopology {
        PyTopology {
            spec: self.model.spec().clone(),
        }
    }

    /// Inference-mode class scores for a flat `N x H x W` image batch.
    /// Returns the flat `N x H x W x C` scores.
    fn predict(&self, py: Python<'_>, images: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Vec<f32>> {
        let x = Tensor::new(&nhwc(shape), images).map_err(to_py)?;
        py.detach(|| self.model.predict(&x))
            .map(Tensor::into_data)
            .map_err(to_py)
    }

    /// Per-pixel argmax of [`predict`].
    fn predict_labels(&self, py: Python<'_>, images: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Vec<u8>> {
        let scores = self.predict(py, images, shape)?;
        Ok(eval::argmax_classes(&scores, self.model.num_classes()))
    }
}

type Dims = (usize, usize, usize);

/// Synthetic layered survey. Returns `(dims, amplitudes, labels)` with flat
/// slice-major data.
#[pyfunction]
#[pyo3(signature = (slices = 24, height = 160, width = 240, num_classes = 7, seed = 0))]
fn synthetic_volume(
    slices: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> PyResult<(Dims, Vec<f32>, Vec<u8>)> {
    let cfg = SynthConfig {
        slices,
        height,
        width,
        num_classes,
        ..Default::default()
    };
    let (v, m) = data::generate_synthetic_volume(&cfg, seed).map_err(to_py)?;
    let [s, h, w] = v.dims();
    Ok(((s, h, w), v.data().to_vec(), m.data().to_vec()))
}

/// Percentile clip and rescale to `[0, 255]`.
#[pyfunction]
#[pyo3(signature = (values, dims, lo_pct = 1.0, hi_pct = 99.0))]
fn rescale(values: Vec<f32>, dims: (usize, usize, usize), lo_pct: f64, hi_pct: f64) -> PyResult<Vec<f32>> {
    let v = data::Volume::new([dims.0, dims.1, dims.2], values, Default::default()).map_err(to_py)?;
    Ok(data::preprocess_rescale(&v, lo_pct, hi_pct)
        .map_err(to_py)?
        .data()
        .to_vec())
}

/// Block-wise train/val/test split as a dict of index lists.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (num_slices, n_blocks = 10, train_fraction = 0.7, slice_limit = None, test_slices = Vec::new(), test_count = 40, seed = 0))]
fn split_blocks<'py>(
    py: Python<'py>,
    num_slices: usize,
    n_blocks: usize,
    train_fraction: f64,
    slice_limit: Option<usize>,
    test_slices: Vec<usize>,
    test_count: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SplitConfig {
        n_blocks,
        train_fraction,
        slice_limit,
        test_slices,
        test_count,
    };
    let s = data::split_blocks(num_slices, &cfg, seed).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("train", s.train)?;
    out.set_item("val", s.val)?;
    out.set_item("test", s.test)?;
    out.set_item("unused", s.unused)?;
    Ok(out)
}

/// Number of whole tiles a sliding window fits in an `H x W` slice.
#[pyfunction]
#[pyo3(signature = (height, width, tile_h = 80, tile_w = 120, overlap = 0.5))]
fn tile_count(height: usize, width: usize, tile_h: usize, tile_w: usize, overlap: f64) -> PyResult<usize> {
    data::tile_count(height, width, &TileConfig::new(tile_h, tile_w, overlap)).map_err(to_py)
}

/// Tile origins `(row, col)` in row-major order.
#[pyfunction]
#[pyo3(signature = (height, width, tile_h = 80, tile_w = 120, overlap = 0.5))]
fn tile_origins(
    height: usize,
    width: usize,
    tile_h: usize,
    tile_w: usize,
    overlap: f64,
) -> PyResult<Vec<(usize, usize)>> {
    let (sh, sw) = TileConfig::new(tile_h, tile_w, overlap).strides().map_err(to_py)?;
    let cols = data::tile_origins(width, tile_w, sw);
    Ok(data::tile_origins(height, tile_h, sh)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

#[pyfunction]
fn iou_per_class(pred: Vec<u8>, gt: Vec<u8>, num_classes: usize) -> PyResult<Vec<f64>> {
    eval::iou_per_class(&pred, &gt, num_classes).map_err(to_py)
}

#[pyfunction]
fn miou(ious: Vec<f64>) -> PyResult<f64> {
    eval::miou_image(&ious).map_err(to_py)
}

#[pyfunction]
fn mmiou(mious: Vec<f64>) -> PyResult<f64> {
    eval::mmiou(&mious).map_err(to_py)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    topology::PRESET_NAMES.to_vec()
}

#[pymodule]
#[pyo3(name = "seistile")]
fn seistile_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SeistileError", m.py().get_type::<SeistileError>())?;
    m.add_class::<PyTopology>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_volume, m)?)?;
    m.add_function(wrap_pyfunction!(rescale, m)?)?;
    m.add_function(wrap_pyfunction!(split_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(tile_count, m)?)?;
    m.add_function(wrap_pyfunction!(tile_origins, m)?)?;
    m.add_function(wrap_pyfunction!(iou_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(mmiou, m)?)?;
    Ok(())
}
