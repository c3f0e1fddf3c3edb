//! Python bindings: degradation operators, signal batches, search, retraining and studies.

use dascore::autodiff::Tensor;
use dascore::baselines::random_search;
use dascore::candidate::OperationKind;
use dascore::config::ExperimentConfig;
use dascore::engine::{das_search_with, derive_seed as core_derive_seed, train_architecture};
use dascore::harness::{self, run_study, TrialRecord};
use dascore::hyperopt::{hyperband_brackets_with, run_bohb, DEFAULT_RUNGS};
use dascore::signal::{self, CosineConfig, Degradation, DegradationOperator};
use dascore::space::{enumerate_archs, DiscreteArch};
use dascore::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// A batch of signals as nested lists.
type Signals = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::SpaceTooLarge { .. } => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| py_err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| py_err(e.into()))
}

fn batch_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let len = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != len) {
        return Err(PyValueError::new_err("all signals must have the same length"));
    }
    let b = rows.len();
    Tensor::new(vec![b, 1, len], rows.concat()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let len = t.shape().last().copied().unwrap_or(0).max(1);
    t.data().chunks(len).map(<[f64]>::to_vec).collect()
}

/// Blur or blur-then-downsample operator on signals of length `n`.
#[pyclass(name = "Operator", module = "das1d", frozen)]
struct PyOperator {
    inner: DegradationOperator,
}

#[pymethods]
impl PyOperator {
    #[new]
    #[pyo3(signature = (kind = "blur", n = 50, sigma_b = signal::DEFAULT_SIGMA_B))]
    fn new(kind: &str, n: usize, sigma_b: f64) -> PyResult<Self> {
        let kind: Degradation = serde_json::from_value(json!(kind))
            .map_err(|_| PyValueError::new_err(format!("unknown degradation {kind:?}; expected blur or downsample")))?;
        Ok(PyOperator {
            inner: DegradationOperator::new(kind, n, sigma_b).map_err(py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn kernel(&self) -> Vec<f64> {
        self.inner.kernel().to_vec()
    }

    /// Spectral norm ‖A‖₂.
    #[getter]
    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Apply A to a batch of signals (list of lists).
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.apply_forward(&batch_tensor(x)?).map_err(py_err)?))
    }

    fn adjoint(&self, y: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.apply_adjoint(&batch_tensor(y)?).map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Operator(n={}, m={}, norm={:.6})",
            self.inner.n(),
            self.inner.m(),
            self.inner.norm()
        )
    }
}

/// Random cosine signals and their noisy measurements: `(measured, clean)`.
#[pyfunction]
#[pyo3(signature = (op, batch, seed = 0, sigma_n = None))]
fn make_batch(op: &PyOperator, batch: usize, seed: u64, sigma_n: Option<f64>) -> PyResult<(Signals, Signals)> {
    let mut cfg = CosineConfig {
        n: op.inner.n(),
        ..CosineConfig::default()
    };
    if let Some(s) = sigma_n {
        cfg.sigma_n = s;
    }
    cfg.validate().map_err(py_err)?;
    let b = signal::make_batch(&mut ChaCha8Rng::seed_from_u64(seed), &op.inner, &cfg, batch).map_err(py_err)?;
    Ok((rows(&b.measured), rows(&b.clean)))
}

#[pyfunction]
#[pyo3(signature = (pred, target, peak = 1.0))]
fn psnr(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>, peak: f64) -> PyResult<f64> {
    signal::psnr(&batch_tensor(pred)?, &batch_tensor(target)?, peak).map_err(py_err)
}

#[pyfunction]
fn derive_seed(base: u64, index: u64) -> u64 {
    core_derive_seed(base, index)
}

/// `[[(configs, budget), ...], ...]`, one list per bracket.
#[pyfunction]
#[pyo3(signature = (max_budget, eta = 3, rungs = DEFAULT_RUNGS))]
fn hyperband_brackets(max_budget: usize, eta: usize, rungs: usize) -> PyResult<Vec<Vec<(usize, usize)>>> {
    let brackets = hyperband_brackets_with(max_budget, eta, rungs).map_err(py_err)?;
    Ok(brackets
        .iter()
        .map(|b| b.rungs.iter().map(|r| (r.configs, r.budget)).collect())
        .collect())
}

/// Pearson r, slope and intercept; undefined entries are None.
#[pyfunction]
fn pearson_linreg<'py>(py: Python<'py>, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &harness::pearson_linreg(&xs, &ys).map_err(py_err)?)
}

/// Summary statistics of a list of trial records (as returned by `Experiment.study`).
#[pyfunction]
fn summarize<'py>(py: Python<'py>, records: &Bound<'py, PyList>) -> PyResult<Bound<'py, PyAny>> {
    let records: Vec<TrialRecord> = serde_json::from_value(from_py(records.as_any())?)
        .map_err(|e| PyValueError::new_err(format!("not a list of trial records: {e}")))?;
    to_py(py, &harness::summarize(&records).map_err(py_err)?)
}

/// A resolved experiment config. Keyword arguments are dotted overrides,
/// e.g. `Experiment(**{"schedule.epochs": 5, "space.depth": 2})`.
#[pyclass(name = "Experiment", module = "das1d", frozen)]
struct PyExperiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config = None, **overrides))]
    fn new(config: Option<std::path::PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut pairs = Vec::new();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                pairs.push((k.extract::<String>()?, from_py(&v)?));
            }
        }
        // `epochs` rescales the warm-up along with the schedule
        let epochs = pairs.iter().position(|(k, _)| k == "epochs").map(|i| pairs.remove(i).1);
        let mut cfg = ExperimentConfig::load(config.as_deref(), &pairs).map_err(py_err)?;
        if let Some(e) = epochs {
            let e = e
                .as_u64()
                .ok_or_else(|| PyValueError::new_err("epochs must be a non-negative integer"))?;
            cfg.schedule = cfg.schedule.with_epochs(e as usize);
            cfg.validate().map_err(py_err)?;
        }
        Ok(PyExperiment { cfg })
    }

    /// The full config as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.cfg)
    }

    #[getter]
    fn study_id(&self) -> String {
        self.cfg.study_id()
    }

    /// Every architecture of the configured space, as canonical strings.
    fn architectures(&self) -> PyResult<Vec<String>> {
        Ok(enumerate_archs(&self.cfg.spec())
            .map_err(py_err)?
            .iter()
            .map(DiscreteArch::to_string)
            .collect())
    }

    /// One differentiable search: one-shot PSNR, chosen architecture and final softmax weights.
    #[pyo3(signature = (seed = None))]
    fn search<'py>(&self, py: Python<'py>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let seed = seed.unwrap_or(self.cfg.base_seed);
        let cfg = &self.cfg;
        let out = py.detach(|| -> dascore::Result<Value> {
            let r = das_search_with(
                &cfg.spec(),
                &cfg.problem()?,
                &cfg.hp.resolve()?,
                &cfg.schedule,
                seed,
                cfg.inner_steps,
            )?;
            Ok(json!({
                "seed": seed,
                "one_shot_psnr": r.one_shot_psnr,
                "arch": r.arch.to_string(),
                "betas": r.betas,
                "runtime_s": r.runtime_s,
            }))
        });
        to_py(py, &out.map_err(py_err)?)
    }

    /// Train `arch` from scratch and report its PSNR.
    #[pyo3(signature = (arch, seed = None))]
    fn retrain<'py>(&self, py: Python<'py>, arch: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let seed = seed.unwrap_or(self.cfg.base_seed);
        let arch: DiscreteArch = arch.parse().map_err(py_err)?;
        let cfg = &self.cfg;
        let out = py.detach(|| -> dascore::Result<Value> {
            let spec = cfg.spec();
            arch.validate_for(&spec)?;
            let r = train_architecture(&spec, &arch, &cfg.problem()?, &cfg.hp.resolve()?, &cfg.schedule, seed)?;
            Ok(json!({ "seed": seed, "arch": arch.to_string(), "arch_psnr": r.arch_psnr, "runtime_s": r.runtime_s }))
        });
        to_py(py, &out.map_err(py_err)?)
    }

    /// Random search under the configured budget; every evaluation is returned.
    #[pyo3(signature = (seed = None))]
    fn random_search<'py>(&self, py: Python<'py>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let seed = seed.unwrap_or(self.cfg.base_seed);
        let cfg = &self.cfg;
        let out = py.detach(|| -> dascore::Result<Value> {
            let r = random_search(
                &cfg.spec(),
                &cfg.problem()?,
                &cfg.hp.resolve()?,
                &cfg.schedule,
                cfg.budget,
                seed,
            )?;
            Ok(json!({ "best": r.best, "best_psnr": r.best_psnr(), "evaluations": r.evaluations }))
        });
        to_py(py, &out.map_err(py_err)?)
    }

    /// All trials of the configured study, as a list of record dicts.
    fn study<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &self.cfg;
        let records = py
            .detach(|| run_study(&cfg.study()?, cfg.parallelism))
            .map_err(py_err)?;
        to_py(py, &records)
    }

    /// Hyperparameter search; returns the best config, its score and the full log.
    fn bohb<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &self.cfg;
        let out = py.detach(|| -> dascore::Result<Value> {
            let r = run_bohb(
                &cfg.hp_space,
                &cfg.bohb,
                &cfg.spec(),
                &cfg.problem()?,
                &cfg.schedule,
                cfg.base_seed,
            )?;
            Ok(json!({ "best": r.best, "score": r.best_score, "records": r.records }))
        });
        to_py(py, &out.map_err(py_err)?)
    }

    fn __repr__(&self) -> String {
        format!("Experiment({})", self.cfg.study_id())
    }
}

#[pymodule(name = "das1d")]
fn das1d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOperator>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(make_batch, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(hyperband_brackets, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_linreg, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add(
        "OPERATIONS",
        OperationKind::ALL.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
