//! Python bindings for the DAIL toy lab.

use std::path::PathBuf;

use dail::agent::{self, DailAgent, Hyperparams};
use dail::analysis::{self, AnalysisThresholds, DiscreteDist};
use dail::dataset::{self, OfflineDataset};
use dail::distributional::{self as dist, make_support, CategoricalDistribution};
use dail::gridworld::{make_mapping, Action, EnvConfig, EpisodeState, Gridworld, InstructionMapping};
use dail::DailError;
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: DailError) -> PyErr {
    match e {
        DailError::Io { .. } => PyIOError::new_err(e.to_string()),
        DailError::Index { .. } | DailError::UnknownInstruction { .. } => PyIndexError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn env_config(json: Option<&str>) -> PyResult<EnvConfig> {
    match json {
        None => Ok(EnvConfig::default()),
        Some(text) => {
            let cfg: EnvConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            cfg.validate().map_err(py_err)?;
            Ok(cfg)
        }
    }
}

fn categorical(probs: Vec<f64>, v_min: f64, v_max: f64) -> PyResult<CategoricalDistribution> {
    let support = make_support(v_min, v_max, probs.len()).map_err(py_err)?;
    CategoricalDistribution::new(support, probs).map_err(py_err)
}

/// Instruction-to-goal table for `num_instructions` ids.
#[pyfunction]
#[pyo3(signature = (num_instructions, seed=0))]
fn mapping(num_instructions: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(make_mapping(num_instructions, seed).map_err(py_err)?.table)
}

/// Atom values of the support.
#[pyfunction]
#[pyo3(signature = (v_min=-20.0, v_max=20.0, m=51))]
fn support(v_min: f64, v_max: f64, m: usize) -> PyResult<Vec<f64>> {
    Ok(make_support(v_min, v_max, m).map_err(py_err)?.atoms())
}

/// Projects `r + gamma * Z` onto the support of `probs`.
#[pyfunction]
#[pyo3(signature = (r, gamma, probs, done=false, v_min=-20.0, v_max=20.0))]
fn project_target(r: f64, gamma: f64, probs: Vec<f64>, done: bool, v_min: f64, v_max: f64) -> PyResult<Vec<f64>> {
    let d = categorical(probs, v_min, v_max)?;
    Ok(dist::project_target(r, gamma, &d, done).map_err(py_err)?.into_probs())
}

#[pyfunction]
#[pyo3(signature = (a, b, v_min=-20.0, v_max=20.0))]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>, v_min: f64, v_max: f64) -> PyResult<f64> {
    let (a, b) = (categorical(a, v_min, v_max)?, categorical(b, v_min, v_max)?);
    dist::wasserstein1(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (target, logits, v_min=-20.0, v_max=20.0))]
fn kl_loss(target: Vec<f64>, logits: Vec<f64>, v_min: f64, v_max: f64) -> PyResult<f64> {
    dist::kl_loss(&categorical(target, v_min, v_max)?, &logits).map_err(py_err)
}

/// Mean silhouette under cosine distance.
#[pyfunction]
fn silhouette(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    analysis::silhouette(&embeddings, &labels).map_err(py_err)
}

/// Detection rates `(w1, mean)` of the two detectors for samples drawn
/// from two discrete distributions.
#[pyfunction]
#[pyo3(signature = (a_values, a_weights, b_values, b_weights, n, trials, delta=1.0, d=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn mc_theorem_check(
    a_values: Vec<f64>,
    a_weights: Vec<f64>,
    b_values: Vec<f64>,
    b_weights: Vec<f64>,
    n: usize,
    trials: usize,
    delta: f64,
    d: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let a = DiscreteDist::new(a_values, a_weights).map_err(py_err)?;
    let b = DiscreteDist::new(b_values, b_weights).map_err(py_err)?;
    let th = AnalysisThresholds {
        delta,
        d,
        ..AnalysisThresholds::default()
    };
    let r = analysis::mc_theorem_check(|g| a.sample(g), |g| b.sample(g), n, trials, th, seed).map_err(py_err)?;
    Ok((r.w1_detect_rate, r.mean_detect_rate))
}

/// Single-episode view of the gridworld.
#[pyclass(name = "Gridworld")]
struct PyGridworld {
    env: Gridworld,
    mapping: InstructionMapping,
    state: Option<EpisodeState>,
}

#[pymethods]
impl PyGridworld {
    #[new]
    #[pyo3(signature = (num_instructions=1, mapping_seed=0, config_json=None))]
    fn new(num_instructions: usize, mapping_seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        Ok(PyGridworld {
            env: Gridworld::new(env_config(config_json)?).map_err(py_err)?,
            mapping: make_mapping(num_instructions, mapping_seed).map_err(py_err)?,
            state: None,
        })
    }

    /// Starts an episode; returns the observation `(x, y, orientation)`.
    fn reset(&mut self, instruction_id: usize) -> PyResult<(usize, usize, usize)> {
        let s = self.env.reset(&self.mapping, instruction_id).map_err(py_err)?;
        let o: [usize; 3] = s.observation().into();
        self.state = Some(s);
        Ok((o[0], o[1], o[2]))
    }

    /// Actions: 0 turn left, 1 turn right, 2 forward. Returns
    /// `(observation, reward, done)`.
    fn step(&mut self, action: usize) -> PyResult<((usize, usize, usize), f64, bool)> {
        let s = self.state.as_ref().ok_or_else(|| PyValueError::new_err("call reset first"))?;
        let a = Action::from_index(action).map_err(py_err)?;
        let out = self.env.step(s, a).map_err(py_err)?;
        let o: [usize; 3] = out.state.observation().into();
        self.state = Some(out.state);
        Ok(((o[0], o[1], o[2]), out.reward, out.done))
    }

    fn expert_action(&self) -> PyResult<usize> {
        let s = self.state.as_ref().ok_or_else(|| PyValueError::new_err("call reset first"))?;
        Ok(self.env.expert_action(s).map_err(py_err)?.index())
    }

    #[getter]
    fn mapping(&self) -> Vec<usize> {
        self.mapping.table.clone()
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: OfflineDataset,
}

#[pymethods]
impl PyDataset {
    /// Mixed-quality (or, with `expert=True`, expert) dataset.
    #[staticmethod]
    #[pyo3(signature = (num_instructions, n_traj=None, success_ratio=0.5, seed=0, mapping_seed=0, expert=false, config_json=None))]
    fn collect(
        num_instructions: usize,
        n_traj: Option<usize>,
        success_ratio: f64,
        seed: u64,
        mapping_seed: u64,
        expert: bool,
        config_json: Option<&str>,
    ) -> PyResult<Self> {
        let env = Gridworld::new(env_config(config_json)?).map_err(py_err)?;
        let mapping = make_mapping(num_instructions, mapping_seed).map_err(py_err)?;
        let n = n_traj.unwrap_or_else(|| dataset::default_dataset_size(num_instructions));
        let inner = if expert {
            dataset::collect_expert(&env, &mapping, n, seed)
        } else {
            dataset::collect_mixed(&env, &mapping, n, success_ratio, seed)
        }
        .map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save(&self.inner, &path).map_err(py_err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &PyDataset) -> bool {
        self.inner == other.inner
    }

    fn success_count(&self) -> usize {
        self.inner.success_count()
    }

    fn instruction_counts(&self) -> Vec<usize> {
        self.inner.instruction_counts()
    }

    #[getter]
    fn num_instructions(&self) -> usize {
        self.inner.meta.num_instructions
    }
}

#[pyclass(name = "Agent")]
struct PyAgent {
    agent: DailAgent,
    env: EnvConfig,
    metrics_csv: String,
}

#[pymethods]
impl PyAgent {
    /// Trains on `dataset`. `hyperparams_json` holds any subset of the
    /// training keys (lr, batch, lambda, alpha, epochs, seed, ...).
    #[staticmethod]
    #[pyo3(signature = (dataset, hyperparams_json=None))]
    fn train(dataset: &PyDataset, hyperparams_json: Option<&str>) -> PyResult<Self> {
        let hp: Hyperparams = match hyperparams_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => Hyperparams::default(),
        };
        let (agent, metrics) = agent::train(&hp, &dataset.inner).map_err(py_err)?;
        Ok(PyAgent {
            agent,
            env: dataset.inner.meta.env.clone(),
            metrics_csv: metrics.to_csv(),
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (agent, env) = DailAgent::load(&dir).map_err(py_err)?;
        Ok(PyAgent {
            agent,
            env,
            metrics_csv: String::new(),
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.agent.save(&dir, &self.env).map_err(py_err)
    }

    /// Greedy success rate over `n_episodes` episodes.
    #[pyo3(signature = (n_episodes=100, seed=0))]
    fn evaluate(&self, n_episodes: usize, seed: u64) -> PyResult<f64> {
        let env = Gridworld::new(self.env.clone()).map_err(py_err)?;
        let mapping = make_mapping(self.agent.num_instructions, self.agent.mapping_seed).map_err(py_err)?;
        analysis::evaluate(&self.agent, &env, &mapping, n_episodes, seed).map_err(py_err)
    }

    /// Silhouette of the instruction embeddings labelled by goal.
    fn silhouette(&self) -> PyResult<f64> {
        let mapping = make_mapping(self.agent.num_instructions, self.agent.mapping_seed).map_err(py_err)?;
        analysis::instruction_silhouette(&self.agent, &mapping).map_err(py_err)
    }

    fn instruction_embeddings(&self) -> PyResult<Vec<Vec<f64>>> {
        analysis::instruction_embeddings(&self.agent).map_err(py_err)
    }

    /// Per-epoch metrics of the training run (empty for loaded agents).
    #[getter]
    fn metrics_csv(&self) -> String {
        self.metrics_csv.clone()
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.agent.hp.algorithm_name()
    }
}

#[pymodule]
fn dail_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mapping, m)?)?;
    m.add_function(wrap_pyfunction!(support, m)?)?;
    m.add_function(wrap_pyfunction!(project_target, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(mc_theorem_check, m)?)?;
    m.add_class::<PyGridworld>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyAgent>()?;
    Ok(())
}
