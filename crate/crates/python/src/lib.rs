//! Python bindings. Images cross the boundary as nested lists of rows;
//! configs as JSON strings in the same schema as the command line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqmri::forward::{AccelSpec, SamplingMode};
use seqmri::params::{read_checkpoint, write_checkpoint};
use seqmri::phantom::{self as ph, PhantomSpec, Split, SplitSpec};
use seqmri::pipeline::{self, EpisodeOptions, TrainConfig};
use seqmri::{metrics, Tensor};

fn py_err(e: seqmri::Error) -> PyErr {
    match e {
        seqmri::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f32>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    Tensor::new(&[h, w], data).map_err(py_err)
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{s}`")))
}

/// One phantom as a list of rows.
#[pyfunction]
#[pyo3(signature = (extent=64, seed=0, rotate=false))]
fn phantom(extent: usize, seed: u64, rotate: bool) -> PyResult<Vec<Vec<f64>>> {
    let spec = PhantomSpec {
        extent,
        rotate,
        seed,
        ..PhantomSpec::default()
    };
    spec.validate().map_err(py_err)?;
    let img = ph::generate_phantom(&spec, &mut seqmri::seed::stream(seed, &[])).map_err(py_err)?;
    Ok(to_rows(&img))
}

/// Sample budgets: total, low-frequency block and per step.
#[pyfunction]
fn budgets<'py>(py: Python<'py>, mode: &str, extent: usize, accel: f64, steps: usize) -> PyResult<Bound<'py, PyDict>> {
    let spec = AccelSpec::new(parse::<SamplingMode>("mode", mode)?, extent, extent, accel, steps).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("budget", spec.budget())?;
    d.set_item("low_freq", spec.low_freq_budget())?;
    d.set_item("steps", spec.step_budgets())?;
    Ok(d)
}

#[pyfunction]
fn ssim(x: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ssim(&from_rows(x)?, &from_rows(target)?).map_err(py_err)
}

#[pyfunction]
fn psnr(x: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::psnr(&from_rows(x)?, &from_rows(target)?).map_err(py_err)
}

/// Paired comparison of A against B as a JSON object string.
#[pyfunction]
fn compare(a: Vec<f64>, b: Vec<f64>) -> PyResult<String> {
    let r = metrics::compare(&a, &b).map_err(py_err)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Gradient-check table as a JSON array string.
#[pyfunction]
#[pyo3(signature = (seeds=5))]
fn gradcheck(seeds: u64) -> PyResult<String> {
    let seeds: Vec<u64> = (1..=seeds).collect();
    let rows = seqmri::gradsuite::full_suite(&seeds).map_err(py_err)?;
    serde_json::to_string(&rows).map_err(json_err)
}

#[pyclass]
struct Dataset {
    inner: ph::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (train, val, test, extent=64, seed=0, rotate=false))]
    fn generate(train: usize, val: usize, test: usize, extent: usize, seed: u64, rotate: bool) -> PyResult<Self> {
        let spec = PhantomSpec {
            extent,
            rotate,
            seed,
            ..PhantomSpec::default()
        };
        let split = SplitSpec::Counts { train, val, test };
        let inner = ph::Dataset::generate(&spec, train + val + test, &split).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ph::load_dataset(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        ph::write_dataset(path, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn extent(&self) -> usize {
        self.inner.extent()
    }

    fn image(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {index} out of range")));
        }
        Ok(to_rows(self.inner.image(index)))
    }

    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.indices(parse::<Split>("split", split)?))
    }
}

#[pyclass]
struct Model {
    inner: pipeline::Model,
    config: TrainConfig,
}

#[pymethods]
impl Model {
    /// Builds and trains from a JSON training config; returns the model and
    /// its JSON-lines log.
    #[staticmethod]
    fn train(config_json: &str, dataset: &Dataset) -> PyResult<(Self, String)> {
        let config: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
        config.validate().map_err(py_err)?;
        let (inner, log) = pipeline::train_model(&config, &dataset.inner).map_err(py_err)?;
        Ok((Self { inner, config }, log.to_json_lines()))
    }

    /// Untrained model (useful for inspecting episodes).
    #[staticmethod]
    fn init(config_json: &str, dataset: &Dataset) -> PyResult<Self> {
        let config: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
        config.validate().map_err(py_err)?;
        let inner = pipeline::Model::new(&config, &dataset.inner).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    fn load(path: &str, config_json: &str) -> PyResult<Self> {
        let config: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
        let f = File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let (params, _) = read_checkpoint(&mut BufReader::new(f)).map_err(py_err)?;
        let inner = pipeline::Model::from_params(&config, params).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut w = BufWriter::new(f);
        write_checkpoint::<f32, _>(&mut w, &self.inner.params, None).map_err(py_err)?;
        w.flush().map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(json_err)
    }

    /// Per-image metrics of one split as a JSON array string.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, dataset: &Dataset, split: &str) -> PyResult<String> {
        let ev = pipeline::evaluate(&self.inner, &dataset.inner, parse::<Split>("split", split)?, self.config.eval_seed)
            .map_err(py_err)?;
        serde_json::to_string(&ev.metrics).map_err(json_err)
    }

    /// Acquired indices after each step, then the final reconstruction.
    fn episode(&self, image: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        let x = from_rows(image)?;
        let tape = seqmri::ad::Tape::new();
        let vars = self.inner.register(&tape, &self.inner.params, false).map_err(py_err)?;
        let mut rng = seqmri::seed::stream(seed, &[]);
        let ep = pipeline::run_episode(&tape, &self.inner, &vars, &x, &mut rng, EpisodeOptions::default()).map_err(py_err)?;
        let masks = ep.trace.steps.iter().map(|r| r.mask.indices()).collect();
        let out = tape.value(ep.output).clone();
        Ok((masks, to_rows(&out)))
    }
}

#[pymodule]
fn pyseqmri(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(budgets, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
