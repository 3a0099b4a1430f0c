//! Python bindings: loss and metric primitives, the command line, and
//! embedding extraction from trained checkpoints.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rivid::datamodel::{load_image, Embedding};
use rivid::degrade::resize_array;
use rivid::evalkit::{self, DistanceMatrix};
use rivid::trainer::{self, Model};

fn to_py(e: rivid::Error) -> PyErr {
    match e {
        rivid::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// `width / width_max`.
#[pyfunction]
fn resolution_of(width: usize, width_max: usize) -> PyResult<f64> {
    rivid::degrade::resolution_of(width, width_max).map_err(to_py)
}

/// Centre-prior foreground mask as a list of rows.
#[pyfunction]
#[pyo3(signature = (height, width, sigma_frac = rivid::masks::DEFAULT_SIGMA_FRAC))]
fn gaussian_mask(height: usize, width: usize, sigma_frac: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = rivid::masks::gaussian_mask(height, width, sigma_frac).map_err(to_py)?;
    Ok(m.weights().rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn rw_loss(w_low: f64, w_high: f64, r: f64) -> PyResult<f64> {
    rivid::rife::rw_loss(w_low, w_high, r).map_err(to_py)
}

#[pyfunction]
fn xent_loss(logits: Vec<f64>, class: usize) -> PyResult<f64> {
    rivid::rife::xent_loss(&logits, class).map_err(to_py)
}

/// CMC accuracies at `ranks` for a query-by-gallery distance matrix.
#[pyfunction]
fn cmc(dist: Vec<Vec<f64>>, query_ids: Vec<u32>, gallery_ids: Vec<u32>, ranks: Vec<usize>) -> PyResult<Vec<f64>> {
    let cols = dist.first().map_or(0, Vec::len);
    if dist.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("distance rows differ in length"));
    }
    let values = Array2::from_shape_vec((dist.len(), cols), dist.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let curve = evalkit::cmc(&DistanceMatrix { values }, &query_ids, &gallery_ids, &ranks).map_err(to_py)?;
    Ok(curve.accuracy)
}

/// Runs the command line with `argv` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    rivid::cli::dispatch(std::iter::once("rivid".to_string()).chain(argv))
}

/// Human-readable summary of a checkpoint.
#[pyfunction]
fn inspect(path: PathBuf) -> PyResult<String> {
    rivid::cli::inspect(&path).map_err(to_py)
}

/// A trained checkpoint.
#[pyclass(name = "Model", module = "rivid_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(&path).map_err(to_py)?,
        })
    }

    /// `(height, width)` every input is resized to.
    #[getter]
    fn canonical_size(&self) -> Option<(usize, usize)> {
        self.inner.canonical_size()
    }

    /// Raw identity labels the classifier was trained on.
    #[getter]
    fn identities(&self) -> Vec<u32> {
        self.inner.identities.as_ref().map(|m| m.raw_labels().to_vec()).unwrap_or_default()
    }

    /// Embeddings of image files, one list per image.
    fn embed_files(&self, paths: Vec<PathBuf>) -> PyResult<Vec<Vec<f32>>> {
        let (h, w) = self
            .inner
            .canonical_size()
            .ok_or_else(|| PyValueError::new_err("checkpoint holds no network"))?;
        let inputs = paths
            .iter()
            .map(|p| load_image(p).map(|im| resize_array(im.pixels(), h, w)))
            .collect::<rivid::Result<Vec<_>>>()
            .map_err(to_py)?;
        let refs: Vec<_> = inputs.iter().collect();
        let out = self.inner.infer(&refs).map_err(to_py)?;
        Ok(out.embeddings.into_iter().map(|e: Embedding| e.0).collect())
    }

    /// Rank-1/Rank-5 on the query and gallery splits of a data directory.
    fn evaluate(&self, data: PathBuf) -> PyResult<(f64, f64)> {
        let load = |name: &str| rivid::datamodel::load_manifest(data.join(format!("{name}.csv"))).map_err(to_py);
        let m = trainer::evaluate_retrieval(&self.inner, &load("query")?, &load("gallery")?, 1).map_err(to_py)?;
        Ok((m.rank1, m.rank5))
    }
}

#[pymodule]
fn rivid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resolution_of, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mask, m)?)?;
    m.add_function(wrap_pyfunction!(rw_loss, m)?)?;
    m.add_function(wrap_pyfunction!(xent_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmc, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_class::<PyModel>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
