//! Python bindings: MI helpers, SSIM, model loading and stylization,
//! information export, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use infostyler::bottleneck::{BranchKind, Noise};
use infostyler::evaluation::{evaluate_pairs, sample_protocol, ssim_plane};
use infostyler::heatmap::export_info;
use infostyler::imageio::{load_image, pad_to_multiple, save_image};
use infostyler::training::{load_model, run_training, TrainConfig};
use infostyler::transfer::InterpolationWeights;
use infostyler::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Argument(m) => PyValueError::new_err(m),
        Error::Numeric(m) => PyArithmeticError::new_err(m),
        other @ (Error::Io { .. } | Error::Ingestion { .. }) => PyIOError::new_err(other.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Per-element mutual information in nats for gate `alpha` and standardized feature `f`.
#[pyfunction]
fn mi_scalar(alpha: f64, f: f64) -> f64 {
    infostyler::mi_scalar(alpha, f)
}

/// Elementwise MI over two equal-length sequences.
#[pyfunction]
fn mi_elementwise(alpha: Vec<f64>, f: Vec<f64>) -> PyResult<Vec<f64>> {
    if alpha.len() != f.len() {
        return Err(PyValueError::new_err("alpha and f differ in length"));
    }
    Ok(alpha.iter().zip(&f).map(|(a, x)| infostyler::mi_scalar(*a, *x)).collect())
}

/// Nats to bits.
#[pyfunction]
fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Windowed SSIM of two row-major grayscale planes in [0, 1].
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    ssim_plane(&a, &b, height, width).map_err(py_err)
}

/// Trains from a dict of configuration keys; returns the per-step loss dicts as JSON lines.
#[pyfunction]
#[pyo3(signature = (config, out_dir))]
fn train(config: Vec<(String, String)>, out_dir: PathBuf) -> PyResult<Vec<String>> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &config {
        cfg.set(k, v).map_err(py_err)?;
    }
    let summary = run_training(cfg, &out_dir, |_, _| {}).map_err(py_err)?;
    Ok(summary
        .reports
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_json_line(i as u64))
        .collect())
}

/// Evaluates a checkpoint on a seeded sample of pairs; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, content_dir, style_dir, n_content=4, n_style=4, size=256, seed=0))]
fn evaluate(
    checkpoint: PathBuf,
    content_dir: PathBuf,
    style_dir: PathBuf,
    n_content: usize,
    n_style: usize,
    size: u32,
    seed: u64,
) -> PyResult<String> {
    let model = load_model(&checkpoint, None).map_err(py_err)?;
    let c = infostyler::data::scan_images(&content_dir).map_err(py_err)?;
    let s = infostyler::data::scan_images(&style_dir).map_err(py_err)?;
    let (c, s) = sample_protocol(&c, &s, n_content, n_style, seed).map_err(py_err)?;
    Ok(evaluate_pairs(&model, &c, &s, size, seed).map_err(py_err)?.to_json())
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: infostyler::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (checkpoint, encoder=None))]
    fn load(checkpoint: PathBuf, encoder: Option<PathBuf>) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(&checkpoint, encoder.as_deref()).map_err(py_err)?,
        })
    }

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        self.inner.store.num_elements()
    }

    /// Stylizes `content` with `style` and writes the PNG to `out`.
    #[pyo3(signature = (content, style, out, sample=false, seed=0))]
    fn stylize(&self, content: PathBuf, style: PathBuf, out: PathBuf, sample: bool, seed: u64) -> PyResult<()> {
        let dtype = self.inner.dtype();
        let c = load_image(&content, dtype).map_err(py_err)?;
        let s = load_image(&style, dtype).map_err(py_err)?;
        let img = if sample {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            self.inner.stylize(&c, &s, &mut Noise::Sample(&mut rng))
        } else {
            self.inner.stylize(&c, &s, &mut Noise::Expectation)
        }
        .map_err(py_err)?;
        save_image(&img, 0, &out).map_err(py_err)
    }

    /// Deterministic stylization with weighted styles.
    fn interpolate(&self, content: PathBuf, styles: Vec<PathBuf>, weights: Vec<f64>, out: PathBuf) -> PyResult<()> {
        let dtype = self.inner.dtype();
        let w = InterpolationWeights::new(weights).map_err(py_err)?;
        let c = load_image(&content, dtype).map_err(py_err)?;
        let ss = styles
            .iter()
            .map(|p| load_image(p, dtype))
            .collect::<infostyler::Result<Vec<_>>>()
            .map_err(py_err)?;
        let img = self
            .inner
            .interpolate(&c, &ss, &w, &mut Noise::Expectation)
            .map_err(py_err)?;
        save_image(&img, 0, &out).map_err(py_err)
    }

    /// Per-level mean MI in nats of `image` for the `content` or `style` branch.
    fn mutual_information(&self, image: PathBuf, branch: &str) -> PyResult<Vec<f64>> {
        let kind: BranchKind = branch.parse().map_err(py_err)?;
        let img = load_image(&image, self.inner.dtype())
            .and_then(|i| pad_to_multiple(&i, 16))
            .map_err(py_err)?;
        let cp = self
            .inner
            .encode(&img)
            .and_then(|p| self.inner.compress_branch(kind, &p, &mut Noise::Expectation))
            .map_err(py_err)?;
        cp.mi_means().map_err(py_err)
    }

    /// Writes bits heatmaps and the MI CSV; returns the written paths.
    fn inspect_info(&self, image: PathBuf, branch: &str, out_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        let kind: BranchKind = branch.parse().map_err(py_err)?;
        let img = load_image(&image, self.inner.dtype())
            .and_then(|i| pad_to_multiple(&i, 16))
            .map_err(py_err)?;
        let cp = self
            .inner
            .encode(&img)
            .and_then(|p| self.inner.compress_branch(kind, &p, &mut Noise::Expectation))
            .map_err(py_err)?;
        std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
        export_info(&cp, kind.prefix(), &out_dir, 0).map_err(py_err)
    }
}

#[pymodule]
pub fn infostyler_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mi_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(mi_elementwise, m)?)?;
    m.add_function(wrap_pyfunction!(nats_to_bits, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
