//! Python access to trained checkpoints: pair distances, crops and ROI boxes.
//!
//! Images cross the boundary as flat row-major lists of `C*H*W` floats in
//! `[0, 1]`, so no array library is needed on either side.

use std::path::PathBuf;

use getnet_core::siamese::{contrastive_loss as loss, extract_features, euclidean_distance};
use getnet_core::stn::theta_to_bbox;
use getnet_core::{checkpoint_precision, load_checkpoint, BBox, Margin, ModelState, PairLabel, Precision, Scalar, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: getnet_core::Error) -> PyErr {
    match e {
        getnet_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

enum Inner {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

/// Runs `$body` with `$m` bound to the model at its stored precision.
macro_rules! with_model {
    ($self:expr, $m:ident => $body:expr) => {
        match &$self.inner {
            Inner::F32($m) => $body,
            Inner::F64($m) => $body,
        }
    };
}

fn image<T: Scalar>(model: &ModelState<T>, pixels: &[f64]) -> PyResult<Tensor<T>> {
    let want: usize = model.input_shape.iter().product();
    if pixels.len() != want {
        return Err(PyValueError::new_err(format!(
            "expected {want} pixels for shape {:?}, got {}",
            model.input_shape,
            pixels.len()
        )));
    }
    Tensor::from_f64(&model.input_shape, pixels).map_err(py_err)
}

fn distance<T: Scalar>(model: &ModelState<T>, a: &[f64], b: &[f64]) -> PyResult<f64> {
    let feature = |pixels: &[f64]| -> PyResult<_> {
        let (crop, _) = model.transform(&image(model, pixels)?, model.mode).map_err(py_err)?;
        Ok(extract_features(&crop, &model.branch).map_err(py_err)?.0)
    };
    let d = euclidean_distance(&feature(a)?, &feature(b)?).map_err(py_err)?;
    Ok(d.to_f64_lossy())
}

fn crop<T: Scalar>(model: &ModelState<T>, pixels: &[f64]) -> PyResult<Vec<f64>> {
    let (crop, _) = model.transform(&image(model, pixels)?, model.mode).map_err(py_err)?;
    Ok(crop.data().iter().map(|v| v.to_f64_lossy()).collect())
}

fn roi<T: Scalar>(model: &ModelState<T>, pixels: &[f64]) -> PyResult<Option<(f64, f64, f64, f64)>> {
    let (_, theta) = model.transform(&image(model, pixels)?, model.mode).map_err(py_err)?;
    let side = (model.input_shape[1], model.input_shape[2]);
    Ok(theta.map(|t| {
        let b = theta_to_bbox(t, side);
        (b.row0, b.col0, b.row1, b.col1)
    }))
}

/// A trained model loaded from a checkpoint file.
#[pyclass(frozen)]
struct Model {
    inner: Inner,
}

#[pymethods]
impl Model {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let inner = match checkpoint_precision(&path).map_err(py_err)? {
            Precision::F32 => Inner::F32(load_checkpoint(&path).map_err(py_err)?),
            Precision::F64 => Inner::F64(load_checkpoint(&path).map_err(py_err)?),
        };
        Ok(Model { inner })
    }

    /// "getnet" or "baseline_siamese".
    #[getter]
    fn mode(&self) -> String {
        with_model!(self, m => m.mode.to_string())
    }

    #[getter]
    fn epochs_completed(&self) -> usize {
        with_model!(self, m => m.epochs_completed)
    }

    /// (channels, height, width) of the images the model accepts.
    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        with_model!(self, m => m.input_shape.clone())
    }

    /// Feature distance between two images.
    fn distance(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        with_model!(self, m => distance(m, &a, &b))
    }

    /// The crop the branch sees, flattened.
    fn crop(&self, image: Vec<f64>) -> PyResult<Vec<f64>> {
        with_model!(self, m => crop(m, &image))
    }

    /// Source box `(row0, col0, row1, col1)` of the transformer crop, or
    /// `None` for a baseline model.
    fn roi(&self, image: Vec<f64>) -> PyResult<Option<(f64, f64, f64, f64)>> {
        with_model!(self, m => roi(m, &image))
    }
}

/// Mean contrastive loss over a batch of distances and 0/1 match labels.
#[pyfunction]
#[pyo3(signature = (distances, labels, margin = 1.0))]
fn contrastive_loss(distances: Vec<f64>, labels: Vec<u8>, margin: f64) -> PyResult<f64> {
    let labels = labels.into_iter().map(PairLabel::new).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    let margin = Margin::new(margin).map_err(py_err)?;
    Ok(loss(&distances, &labels, margin).map_err(py_err)?.0)
}

/// Intersection over union of two inclusive pixel boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    BBox::new(a.0, a.1, a.2, a.3).iou(&BBox::new(b.0, b.1, b.2, b.3))
}

#[pymodule]
fn getnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    Ok(())
}
