//! Python bindings: tasks, policies, algorithm configs, the trainer and the
//! oracle, plus the run / compare / export entry points.

use std::path::PathBuf;

use minirl_core::algo;
use minirl_core::env::{TaskName, TaskSpec};
use minirl_core::experiment;
use minirl_core::oracle::{self, EnumerationDomain, DEFAULT_BUDGET};
use minirl_core::policy::{self, PolicySpec};
use minirl_core::trainer::{self, TrainConfig};
use minirl_core::{AlgoConfig, AlgoKind, Error, FilterKind, PolicyParams, PromptInstance, RngStream, TokenSeq};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::UnknownField { .. } => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A seeded random stream.
#[pyclass(name = "Rng", module = "minirl")]
struct PyRng(RngStream);

#[pymethods]
impl PyRng {
    #[new]
    #[pyo3(signature = (seed, stream_id = 0))]
    fn new(seed: u64, stream_id: u64) -> Self {
        PyRng(minirl_core::make_rng(seed, stream_id))
    }

    fn uniform(&mut self) -> f64 {
        self.0.uniform()
    }
}

#[pyclass(name = "Prompt", module = "minirl", frozen)]
struct PyPrompt(PromptInstance);

#[pymethods]
impl PyPrompt {
    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.0.tokens.0.clone()
    }

    #[getter]
    fn difficulty(&self) -> String {
        format!("{:?}", self.0.difficulty).to_lowercase()
    }

    #[getter]
    fn ground_truth(&self) -> String {
        self.0.ground_truth.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Prompt(tokens={:?}, difficulty={})", self.0.tokens.0, self.difficulty())
    }
}

/// A synthetic task with an exact verifier.
#[pyclass(name = "Task", module = "minirl", frozen)]
struct PyTask(TaskSpec);

#[pymethods]
impl PyTask {
    #[staticmethod]
    #[pyo3(signature = (modulus, operand_min, operand_max, unsolvable_fraction = 0.0))]
    fn add_mod(modulus: usize, operand_min: usize, operand_max: usize, unsolvable_fraction: f64) -> PyResult<Self> {
        let t = TaskSpec::add_mod(modulus, operand_min, operand_max).with_unsolvable(unsolvable_fraction);
        t.validate().map_err(to_py)?;
        Ok(PyTask(t))
    }

    #[staticmethod]
    #[pyo3(signature = (name, symbols, len_min, len_max, unsolvable_fraction = 0.0))]
    fn sequence(name: &str, symbols: usize, len_min: usize, len_max: usize, unsolvable_fraction: f64) -> PyResult<Self> {
        let name: TaskName = name.parse().map_err(to_py)?;
        let t = TaskSpec::sequence(name, symbols, len_min, len_max).with_unsolvable(unsolvable_fraction);
        t.validate().map_err(to_py)?;
        Ok(PyTask(t))
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    #[getter]
    fn eos(&self) -> u32 {
        self.0.eos()
    }

    #[getter]
    fn delim(&self) -> u32 {
        self.0.delim()
    }

    fn vocab_table(&self) -> Vec<String> {
        self.0.vocab_table()
    }

    fn render(&self, tokens: Vec<u32>) -> String {
        self.0.render(&tokens)
    }

    fn sample_prompt(&self, rng: &mut PyRng) -> PyPrompt {
        PyPrompt(self.0.sample_prompt(&mut rng.0))
    }

    /// Returns `(reward, failure_reason)`; the reason is `None` on success.
    fn verify(&self, prompt: &PyPrompt, response: Vec<u32>) -> (f64, Option<&'static str>) {
        let rep = self.0.verify(&prompt.0, &response);
        (rep.reward.value(), rep.failure_reason.map(|r| r.name()))
    }

    fn gold_response(&self, prompt: &PyPrompt) -> Option<Vec<u32>> {
        self.0.gold_response(&prompt.0).map(|t| t.0)
    }
}

/// Policy parameters for a tabular k-gram or MLP policy.
#[pyclass(name = "Policy", module = "minirl")]
struct PyPolicy(PolicyParams);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab_size, context_len, scale = 0.0, seed = 0))]
    fn tabular(vocab_size: usize, context_len: usize, scale: f64, seed: u64) -> PyResult<Self> {
        let spec = PolicySpec::tabular(vocab_size, context_len);
        PolicyParams::init(spec, scale, &mut minirl_core::make_rng(seed, 0)).map(PyPolicy).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (vocab_size, context_len, embed_dim, hidden, scale = 1.0, seed = 0))]
    fn mlp(vocab_size: usize, context_len: usize, embed_dim: usize, hidden: Vec<usize>, scale: f64, seed: u64) -> PyResult<Self> {
        let spec = PolicySpec::mlp(vocab_size, context_len, embed_dim, hidden);
        PolicyParams::init(spec, scale, &mut minirl_core::make_rng(seed, 0)).map(PyPolicy).map_err(to_py)
    }

    /// A format-warmed starting policy, as produced at the start of a run.
    #[staticmethod]
    #[pyo3(signature = (task, context_len = 3, warmup_steps = 300, seed = 0))]
    fn warmed_up(task: &PyTask, context_len: usize, warmup_steps: usize, seed: u64) -> PyResult<Self> {
        let train = TrainConfig {
            warmup_steps,
            seed,
            ..Default::default()
        };
        let spec = PolicySpec::tabular(task.0.vocab_size(), context_len);
        trainer::initial_policy(spec, 0.0, &task.0, &train).map(PyPolicy).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        policy::load_checkpoint(&path).map(PyPolicy).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        policy::save_checkpoint(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.0.spec.arch.name()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.theta.len()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.0.theta.clone()
    }

    #[setter]
    fn set_theta(&mut self, theta: Vec<f64>) -> PyResult<()> {
        self.0 = PolicyParams::from_theta(self.0.spec.clone(), theta).map_err(to_py)?;
        Ok(())
    }

    fn logits(&self, context: Vec<u32>) -> PyResult<Vec<f64>> {
        self.0.logits(&context).map_err(to_py)
    }

    /// Returns `(total, per_token)` natural-log probabilities.
    fn log_prob(&self, prompt: &PyPrompt, response: Vec<u32>) -> PyResult<(f64, Vec<f64>)> {
        policy::log_prob(&self.0, &prompt.0, &TokenSeq(response)).map_err(to_py)
    }

    /// Returns `(tokens, logprobs, terminated)`.
    #[pyo3(signature = (prompt, rng, temperature = 1.0, max_len = 16))]
    fn sample(&self, prompt: &PyPrompt, rng: &mut PyRng, temperature: f64, max_len: usize) -> PyResult<(Vec<u32>, Vec<f64>, bool)> {
        let r = policy::sample_response(&self.0, &prompt.0, temperature, max_len, &mut rng.0).map_err(to_py)?;
        Ok((r.tokens.0, r.logprobs, r.terminated))
    }

    fn __repr__(&self) -> String {
        format!("Policy(arch={}, vocab={}, params={})", self.arch(), self.vocab_size(), self.param_count())
    }
}

/// Algorithm configuration; `kind` sets the canonical flags, keyword
/// arguments override them.
#[pyclass(name = "AlgoConfig", module = "minirl")]
struct PyAlgoConfig(AlgoConfig);

#[pymethods]
impl PyAlgoConfig {
    #[new]
    #[pyo3(signature = (kind, group_size = None, filter = None, eps_lo = None, eps_hi = None, mean_center = None, std_normalize = None, dpo_beta = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        group_size: Option<usize>,
        filter: Option<&str>,
        eps_lo: Option<f64>,
        eps_hi: Option<f64>,
        mean_center: Option<bool>,
        std_normalize: Option<bool>,
        dpo_beta: Option<f64>,
    ) -> PyResult<Self> {
        let kind: AlgoKind = kind.parse().map_err(to_py)?;
        let mut c = AlgoConfig::new(kind);
        if let Some(n) = group_size {
            c.group_size = n;
        }
        if let Some(f) = filter {
            c.filter = f.parse::<FilterKind>().map_err(to_py)?;
        }
        if let Some(x) = eps_lo {
            c.eps_lo = x;
        }
        if let Some(x) = eps_hi {
            c.eps_hi = x;
        }
        if let Some(x) = mean_center {
            c.mean_center = x;
        }
        if let Some(x) = std_normalize {
            c.std_normalize = x;
        }
        if let Some(x) = dpo_beta {
            c.dpo_beta = x;
        }
        c.validate().map_err(to_py)?;
        Ok(PyAlgoConfig(c))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind.name()
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.0.group_size
    }

    #[getter]
    fn filter(&self) -> &'static str {
        self.0.filter.name()
    }

    #[getter]
    fn eps_lo(&self) -> f64 {
        self.0.eps_lo
    }

    #[getter]
    fn eps_hi(&self) -> f64 {
        self.0.eps_hi
    }

    fn warnings(&self) -> Vec<String> {
        self.0.warnings()
    }

    fn __repr__(&self) -> String {
        format!("AlgoConfig(kind={}, group_size={}, filter={})", self.kind(), self.group_size(), self.filter())
    }
}

#[pyfunction]
#[pyo3(signature = (rewards, std_guard = 1e-6))]
fn grpo_advantages(rewards: Vec<f64>, std_guard: f64) -> PyResult<Vec<f64>> {
    algo::grpo_advantages(&rewards, std_guard).map_err(to_py)
}

#[pyfunction]
fn keep_rewards(rewards: Vec<f64>, filter: &str) -> PyResult<bool> {
    Ok(algo::keep_rewards(&rewards, filter.parse().map_err(to_py)?))
}

#[pyfunction]
fn clipped_surrogate(s: f64, w: f64, eps_lo: f64, eps_hi: f64) -> f64 {
    algo::clipped_surrogate(s, w, eps_lo, eps_hi)
}

#[pyfunction]
fn dpo_loss(logratio_plus: f64, logratio_minus: f64, beta: f64) -> f64 {
    algo::dpo_loss(logratio_plus, logratio_minus, beta)
}

/// Trains a copy of `policy`; returns `(trained_policy, metrics)`.
#[pyfunction]
#[pyo3(signature = (policy, task, algo, iterations, lr = 1e-2, seed = 0, prompts_per_iter = 64))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    policy: &PyPolicy,
    task: &PyTask,
    algo: &PyAlgoConfig,
    iterations: u64,
    lr: f64,
    seed: u64,
    prompts_per_iter: usize,
) -> PyResult<(PyPolicy, Vec<Py<PyAny>>)> {
    let mut cfg = TrainConfig {
        total_iters: iterations,
        seed,
        prompts_per_iter,
        minibatch_size: prompts_per_iter,
        ..Default::default()
    };
    cfg.adamw.lr = lr;
    let errors = cfg.violations(algo.0.group_size);
    if !errors.is_empty() {
        return Err(to_py(Error::Config(errors)));
    }
    let (params, task_spec, algo_cfg) = (policy.0.clone(), task.0.clone(), algo.0.clone());
    let state = py
        .detach(move || trainer::train_loop(params, &task_spec, &algo_cfg, &cfg, |_, _| Ok(())))
        .map_err(to_py)?;
    let records = state
        .metrics_log
        .iter()
        .map(|r| json(py, &serde_json::to_string(r).expect("record serializes")).map(|b| b.unbind()))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyPolicy(state.params), records))
}

/// Runs an INI experiment config; returns the output directory.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: PathBuf) -> PyResult<PathBuf> {
    py.detach(|| experiment::run_experiment(&config)).map(|o| o.output_dir).map_err(to_py)
}

#[pyfunction]
fn read_metrics(py: Python<'_>, path: PathBuf) -> PyResult<Vec<Py<PyAny>>> {
    experiment::read_metrics(&path)
        .map_err(to_py)?
        .iter()
        .map(|r| json(py, &serde_json::to_string(r).expect("record serializes")).map(|b| b.unbind()))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (paths, field = "train_acc", window = 20))]
fn compare_runs<'py>(py: Python<'py>, paths: Vec<PathBuf>, field: &str, window: usize) -> PyResult<Bound<'py, PyAny>> {
    let c = experiment::compare_runs(&paths, field, window).map_err(to_py)?;
    json(py, &c.to_json())
}

#[pyfunction]
fn export_csv(metrics: PathBuf, out: PathBuf) -> PyResult<usize> {
    experiment::export_csv(&metrics, &out).map_err(to_py)
}

fn domain(task: &PyTask, max_len: usize) -> PyResult<EnumerationDomain> {
    EnumerationDomain::new(task.0.clone(), max_len, DEFAULT_BUDGET).map_err(to_py)
}

/// Exact expected reward for one prompt by enumerating every response.
#[pyfunction]
fn exact_objective(policy: &PyPolicy, task: &PyTask, prompt: &PyPrompt, max_len: usize) -> PyResult<f64> {
    oracle::exact_objective(&policy.0, &domain(task, max_len)?, &prompt.0).map_err(to_py)
}

#[pyfunction]
fn exact_gradient(policy: &PyPolicy, task: &PyTask, prompt: &PyPrompt, max_len: usize) -> PyResult<Vec<f64>> {
    oracle::exact_gradient(&policy.0, &domain(task, max_len)?, &prompt.0).map_err(to_py)
}

#[pyfunction]
fn success_probability(policy: &PyPolicy, task: &PyTask, prompt: &PyPrompt, max_len: usize) -> PyResult<f64> {
    oracle::success_probability(&policy.0, &domain(task, max_len)?, &prompt.0).map_err(to_py)
}

/// Monte Carlo vs exact gradient audit; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (algo, policy, task, prompt, max_len, n_samples = 100_000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn estimator_bias_check<'py>(
    py: Python<'py>,
    algo: &PyAlgoConfig,
    policy: &PyPolicy,
    task: &PyTask,
    prompt: &PyPrompt,
    max_len: usize,
    n_samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let d = domain(task, max_len)?;
    let mut rng = minirl_core::make_rng(seed, 0);
    let (a, p, q) = (&algo.0, &policy.0, &prompt.0);
    let rep = py
        .detach(|| oracle::estimator_bias_check(a, p, &d, q, n_samples, &mut rng))
        .map_err(to_py)?;
    json(py, &rep.to_json())
}

#[pymodule]
fn minirl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRng>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyAlgoConfig>()?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(keep_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(read_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_function(wrap_pyfunction!(export_csv, m)?)?;
    m.add_function(wrap_pyfunction!(exact_objective, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(success_probability, m)?)?;
    m.add_function(wrap_pyfunction!(estimator_bias_check, m)?)?;
    Ok(())
}
