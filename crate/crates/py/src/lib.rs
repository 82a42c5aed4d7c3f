//! Python bindings: tensors, the model, training, metrics, losses and Netpbm I/O.

use std::path::PathBuf;

use cfpn::backbone::BackboneConfig;
use cfpn::data_io;
use cfpn::gradcheck::{self, GradCheckConfig};
use cfpn::metrics;
use cfpn::training::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use cfpn::training::{balanced_bce_value, BetaConvention};
use cfpn::{CfaVariant, CfdConfig, ModelConfig, ModelParams, SaliencySample, TrainConfig};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: cfpn::Error) -> PyErr {
    match e {
        cfpn::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense f64 array with a shape, row-major.
#[pyclass(name = "Tensor", module = "cfpn_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: cfpn::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        cfpn::Tensor::new(shape, data)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        Self {
            inner: cfpn::Tensor::full(&shape, value),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(inner: cfpn::Tensor) -> PyTensor {
    PyTensor { inner }
}

fn parse_cfd(levels: Option<&str>) -> PyResult<Option<CfdConfig>> {
    levels
        .map(|s| s.parse::<CfdConfig>().map_err(to_py))
        .transpose()
}

fn parse_convention(s: &str) -> PyResult<BetaConvention> {
    match s {
        "ratio" => Ok(BetaConvention::Ratio),
        "hed" => Ok(BetaConvention::Hed),
        other => Err(PyValueError::new_err(format!(
            "convention must be ratio or hed, got `{other}`"
        ))),
    }
}

/// A CFPN configuration together with its parameters.
#[pyclass(name = "Model", module = "cfpn_py")]
struct PyModel {
    config: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    /// `cfd_levels=None` selects the plain FPN top-down path.
    #[new]
    #[pyo3(signature = (cfa_variant = "D", cfd_levels = Some("0,1,2,3,4"), seed = 0, stem_channels = 16, block_channels = [32, 48, 64, 96]))]
    fn new(
        cfa_variant: &str,
        cfd_levels: Option<&str>,
        seed: u64,
        stem_channels: usize,
        block_channels: [usize; 4],
    ) -> PyResult<Self> {
        let config = ModelConfig {
            backbone: BackboneConfig {
                stem_channels,
                block_channels,
            },
            cfa_variant: cfa_variant.parse::<CfaVariant>().map_err(to_py)?,
            cfd: parse_cfd(cfd_levels)?,
        };
        let params = config.init_params(seed);
        Ok(Self { config, params })
    }

    #[getter]
    fn cfa_variant(&self) -> String {
        self.config.cfa_variant.to_string()
    }

    #[getter]
    fn cfd_levels(&self) -> Option<String> {
        self.config.cfd.as_ref().map(ToString::to_string)
    }

    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.params.keys().cloned().collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.params.get(name).cloned().map(wrap).map_err(to_py)
    }

    /// Eval-mode prediction; returns `(local, global)` maps of shape `[1, H, W]`.
    fn predict(
        &self,
        py: Python<'_>,
        image: PyRef<'_, PyTensor>,
    ) -> PyResult<(PyTensor, PyTensor)> {
        let image = image.inner.clone();
        let pred = py
            .detach(|| cfpn::predict(&self.params, &self.config, &image))
            .map_err(to_py)?;
        Ok((wrap(pred.local), wrap(pred.global)))
    }

    /// Shapes of the aggregated feature and each distributed level for a square input.
    fn feature_shapes(&self, size: usize) -> PyResult<Vec<(String, Vec<usize>)>> {
        let image = cfpn::Tensor::zeros(&[3, size, size]);
        let mut ctx = cfpn::Ctx::new(&self.params, cfpn::Mode::Eval);
        let out = cfpn::forward(&mut ctx, &self.config, &image).map_err(to_py)?;
        let mut shapes = vec![("F".to_string(), ctx.tape.shape(out.cfa.f).to_vec())];
        for (n, level) in &out.distributed {
            shapes.push((format!("level{n}"), ctx.tape.shape(level.features).to_vec()));
        }
        shapes.push(("local".into(), ctx.tape.shape(out.s_local).to_vec()));
        shapes.push(("global".into(), ctx.tape.shape(out.s_global).to_vec()));
        Ok(shapes)
    }

    /// Trains in place and returns the per-step joint losses.
    #[pyo3(signature = (images, masks, steps, lr = 5e-5, batch_size = 2, seed = 0, augment = true, weight_decay = 5e-4))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        images: Vec<PyRef<'_, PyTensor>>,
        masks: Vec<PyRef<'_, PyTensor>>,
        steps: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        augment: bool,
        weight_decay: f64,
    ) -> PyResult<Vec<f64>> {
        if images.len() != masks.len() {
            return Err(PyValueError::new_err(format!(
                "{} images but {} masks",
                images.len(),
                masks.len()
            )));
        }
        let samples = images
            .iter()
            .zip(&masks)
            .map(|(i, m)| SaliencySample::new(i.inner.clone(), m.inner.clone()))
            .collect::<cfpn::Result<Vec<_>>>()
            .map_err(to_py)?;
        let mut config = TrainConfig {
            batch_size,
            steps,
            seed,
            augment,
            ..TrainConfig::default()
        };
        config.adam.lr = lr;
        config.adam.weight_decay = weight_decay;
        let (model, start) = (&self.config, self.params.clone());
        let outcome = py
            .detach(|| cfpn::train(model, start, &samples, &config, |_, _| Ok(())))
            .map_err(to_py)?;
        self.params = outcome.params;
        Ok(outcome.trace.iter().map(|r| r.joint).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(path, &self.params).map_err(to_py)
    }

    /// Replaces the parameters with a checkpoint written for the same configuration.
    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let loaded = load_checkpoint(path).map_err(to_py)?;
        check_compatible(&loaded, &self.params).map_err(to_py)?;
        self.params = loaded;
        Ok(())
    }

    fn __repr__(&self) -> String {
        let levels = self
            .cfd_levels()
            .map_or("None".to_string(), |l| format!("'{l}'"));
        format!(
            "Model(cfa_variant='{}', cfd_levels={levels}, parameters={})",
            self.cfa_variant(),
            self.num_parameters()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (s, mask, convention = "ratio"))]
fn balanced_bce(
    s: PyRef<'_, PyTensor>,
    mask: PyRef<'_, PyTensor>,
    convention: &str,
) -> PyResult<f64> {
    balanced_bce_value(&s.inner, &mask.inner, parse_convention(convention)?).map_err(to_py)
}

#[pyfunction]
fn mae(s: PyRef<'_, PyTensor>, y: PyRef<'_, PyTensor>) -> PyResult<f64> {
    metrics::mae(&s.inner, &y.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (s, y, beta2 = metrics::DEFAULT_BETA2))]
fn max_f(s: PyRef<'_, PyTensor>, y: PyRef<'_, PyTensor>, beta2: f64) -> PyResult<f64> {
    metrics::max_f(&s.inner, &y.inner, beta2).map_err(to_py)
}

/// `(thresholds, precision, recall)` over the 256 thresholds `k / 255`.
#[pyfunction]
fn pr_curve(
    s: PyRef<'_, PyTensor>,
    y: PyRef<'_, PyTensor>,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c = metrics::pr_curve(&s.inner, &y.inner).map_err(to_py)?;
    Ok((c.thresholds, c.precision, c.recall))
}

#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<PyTensor> {
    data_io::read_image(path).map(wrap).map_err(to_py)
}

#[pyfunction]
fn read_mask(path: PathBuf) -> PyResult<PyTensor> {
    data_io::read_mask(path).map(wrap).map_err(to_py)
}

#[pyfunction]
fn write_saliency(path: PathBuf, s: PyRef<'_, PyTensor>) -> PyResult<()> {
    data_io::write_saliency(path, &s.inner).map_err(to_py)
}

/// Writes a synthetic dataset and returns `(image_path, mask_path)` pairs.
#[pyfunction]
#[pyo3(signature = (directory, count, size = 96, seed = 0))]
fn synth_dataset(
    directory: PathBuf,
    count: usize,
    size: usize,
    seed: u64,
) -> PyResult<Vec<(PathBuf, PathBuf)>> {
    let m = data_io::synth_dataset(&directory, count, size, seed).map_err(to_py)?;
    Ok(m.entries
        .iter()
        .map(|e| (m.resolve(&e.image), m.resolve(&e.mask)))
        .collect())
}

/// Finite-difference check of every tape op; returns `(passed, max_relative_error)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck_ops(seed: u64) -> PyResult<(bool, f64)> {
    let r = gradcheck::op_gradcheck(&GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    })
    .map_err(to_py)?;
    Ok((r.passed(), r.max_rel_error()))
}

#[pymodule]
fn cfpn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(balanced_bce, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(max_f, m)?)?;
    m.add_function(wrap_pyfunction!(pr_curve, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(read_mask, m)?)?;
    m.add_function(wrap_pyfunction!(write_saliency, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    Ok(())
}
