//! Python bindings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use casgraph::augment::{self, AugRwrParams, AugSimParams, StrengthMode};
use casgraph::autodiff::{Graph, Tensor};
use casgraph::config::ExperimentConfig;
use casgraph::encoder::{self, EncoderConfig, HeadDesign};
use casgraph::ingest::{self, GeneratorParams};
use casgraph::{eval, seed, train};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A rooted diffusion tree with adoption times.
#[pyclass(name = "CascadeGraph", module = "casgraph_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCascadeGraph {
    inner: casgraph::CascadeGraph,
}

#[pymethods]
impl PyCascadeGraph {
    /// Parses one line of the tab-separated cascade format.
    #[staticmethod]
    fn parse(line: &str) -> PyResult<Self> {
        Ok(PyCascadeGraph {
            inner: ingest::parse_line(line).map_err(value_err)?,
        })
    }

    fn to_line(&self) -> String {
        ingest::format_line(&self.inner)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn users(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|a| a.user.clone()).collect()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times().collect()
    }

    /// `(parent, child)` index pairs.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().collect()
    }

    fn observe(&self, t_o: f64) -> Self {
        PyCascadeGraph {
            inner: self.inner.observe(t_o),
        }
    }

    fn popularity(&self, t_p: f64) -> usize {
        self.inner.popularity(t_p)
    }

    fn is_valid_tree(&self) -> bool {
        self.inner.check_tree().is_ok()
    }

    fn __repr__(&self) -> String {
        format!("CascadeGraph(id={:?}, nodes={})", self.inner.id(), self.inner.len())
    }
}

/// Synthetic cascades from the heavy-tailed generator.
#[pyfunction]
#[pyo3(signature = (n, seed=0, end_time=120.0))]
fn synthesize(n: usize, seed: u64, end_time: f64) -> Vec<PyCascadeGraph> {
    ingest::synthesize_cascades(n, &GeneratorParams::default(), end_time, seed)
        .into_iter()
        .map(|inner| PyCascadeGraph { inner })
        .collect()
}

/// One diffusion-simulating augmentation.
#[pyfunction]
#[pyo3(signature = (g, t_o, seed, eta=0.1, theta_t=0.5, lam=1.0, per_node=false))]
fn aug_sim(
    g: &PyCascadeGraph,
    t_o: f64,
    seed: u64,
    eta: f64,
    theta_t: f64,
    lam: f64,
    per_node: bool,
) -> PyResult<PyCascadeGraph> {
    let params = AugSimParams {
        eta,
        theta_t,
        lambda: lam,
        strength_mode: if per_node { StrengthMode::PerNode } else { StrengthMode::Absolute },
    };
    let inner = augment::aug_sim(&g.inner, &params, t_o, &mut seed::rng(seed)).map_err(value_err)?;
    Ok(PyCascadeGraph { inner })
}

/// One random-walk-with-restart subgraph.
#[pyfunction]
#[pyo3(signature = (g, seed, restart_prob=0.2, walk_budget_factor=3.0))]
fn aug_rwr(g: &PyCascadeGraph, seed: u64, restart_prob: f64, walk_budget_factor: f64) -> PyResult<PyCascadeGraph> {
    let params = AugRwrParams {
        restart_prob,
        walk_budget_factor,
    };
    let inner = augment::aug_rwr(&g.inner, &params, &mut seed::rng(seed)).map_err(value_err)?;
    Ok(PyCascadeGraph { inner })
}

/// Exponential rate fitted on all non-root adoption times.
#[pyfunction]
fn fit_rate(graphs: Vec<PyRef<'_, PyCascadeGraph>>) -> PyResult<f64> {
    augment::fit_rate(graphs.iter().map(|g| &g.inner)).map_err(value_err)
}

/// Node feature rows (`structural` or `wavelet` mode).
#[pyfunction]
#[pyo3(signature = (g, t_o, mode="structural", scale=1.0, samples=8, t_max=10.0))]
fn node_features(
    g: &PyCascadeGraph,
    t_o: f64,
    mode: &str,
    scale: f64,
    samples: usize,
    t_max: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let mut spec = encoder::NodeFeatureSpec::wavelet(scale, samples, t_max);
    spec.mode = encoder::FeatureMode::parse(mode).ok_or_else(|| value_err(format!("unknown mode {mode}")))?;
    let t = encoder::node_features(&g.inner, &spec, t_o).map_err(value_err)?;
    Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
}

/// Mean NT-Xent loss; rows `2k` and `2k+1` are a positive pair.
#[pyfunction]
fn nt_xent(z: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    if z.is_empty() || z.iter().any(|r| r.len() != z[0].len()) {
        return Err(value_err("z must be a non-empty rectangular matrix"));
    }
    let mut tape = Graph::new();
    let v = tape.constant(Tensor::from_rows(&z));
    let l = train::nt_xent_loss(&mut tape, v, tau).map_err(value_err)?;
    Ok(tape.value(l).item())
}

/// Mean squared log₂ error of log₂ predictions against popularity labels.
#[pyfunction]
fn msle(pred_log2: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    train::msle_value(&pred_log2, &labels).map_err(value_err)
}

/// Encoder with projection and regression heads.
#[pyclass(name = "Encoder", module = "casgraph_py")]
struct PyEncoder {
    inner: casgraph::EncoderModel,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (embedding_dim=64, model_size=4, head="4-4", seed=0))]
    fn new(embedding_dim: usize, model_size: usize, head: &str, seed: u64) -> PyResult<Self> {
        let head = HeadDesign::parse(head).map_err(value_err)?;
        let cfg = EncoderConfig::sized(embedding_dim, model_size, head);
        let inner = casgraph::EncoderModel::new(cfg, &mut seed::rng(seed)).map_err(value_err)?;
        Ok(PyEncoder { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoder {
            inner: casgraph::EncoderModel::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// The representation `h`.
    fn encode(&self, g: &PyCascadeGraph, t_o: f64) -> PyResult<Vec<f64>> {
        self.inner.encode(&g.inner, t_o).map_err(value_err)
    }

    /// The projection `z`.
    fn embed(&self, g: &PyCascadeGraph, t_o: f64) -> PyResult<Vec<f64>> {
        self.inner.embed(&g.inner, t_o).map_err(value_err)
    }

    /// log₂ popularity predictions.
    fn predict(&self, graphs: Vec<PyRef<'_, PyCascadeGraph>>, t_o: f64) -> PyResult<Vec<f64>> {
        let refs: Vec<&casgraph::CascadeGraph> = graphs.iter().map(|g| &g.inner).collect();
        self.inner.predict_graphs(&refs, t_o).map_err(value_err)
    }
}

/// Runs an experiment from config-file text; returns the summary as JSON.
#[pyfunction]
fn run_experiment(config_text: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::layered(Some(config_text), std::iter::empty::<(String, String)>(), &[])
        .map_err(value_err)?;
    let summary = eval::run_experiment(&cfg, &out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn casgraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCascadeGraph>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(aug_sim, m)?)?;
    m.add_function(wrap_pyfunction!(aug_rwr, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(node_features, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(msle, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
