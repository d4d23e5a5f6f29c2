//! Experiment files and run directories: INI configs, manifests, metrics
//! JSONL, checkpoints, run comparison and CSV export.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::config::{AlgoConfig, AlgoKind, FilterKind, Violation};
use crate::env::{TaskName, TaskSpec};
use crate::error::{Error, Result};
use crate::oracle::{self, EnumerationDomain};
use crate::policy::{save_checkpoint, Arch, PolicySpec};
use crate::rng::{make_rng, stream_id, Purpose};
use crate::trainer::{initial_policy, moving_average, run_iteration, TrainConfig, TrainState};
use crate::types::MetricsRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Standard deviation scale of the random initialization; 0 starts from
    /// the uniform policy.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            arch: Arch::TabularKgram,
            context_len: 3,
            embed_dim: 8,
            hidden_sizes: vec![32],
            init_scale: 0.0,
        }
    }
}

impl PolicyConfig {
    pub fn spec(&self, vocab_size: usize) -> PolicySpec {
        match self.arch {
            Arch::TabularKgram => PolicySpec::tabular(vocab_size, self.context_len),
            Arch::Mlp => PolicySpec::mlp(vocab_size, self.context_len, self.embed_dim, self.hidden_sizes.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Length cap for enumeration and sampling in the audits.
    pub max_len: usize,
    pub budget: u64,
    pub bias_samples: usize,
    pub grad_instances: usize,
    pub grad_batch: usize,
    pub fd_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_len: 3,
            budget: oracle::DEFAULT_BUDGET,
            bias_samples: 200_000,
            grad_instances: 10,
            grad_batch: 6,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub algo: AlgoConfig,
    pub train: TrainConfig,
    pub oracle: OracleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs/run"),
            task: TaskSpec::add_mod_easy(),
            policy: PolicyConfig::default(),
            algo: AlgoConfig::new(AlgoKind::Grpo),
            train: TrainConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Every accepted key, as `section.key` (top-level keys have no section).
pub const CONFIG_KEYS: &[&str] = &[
    "run_name",
    "output_dir",
    "task.name",
    "task.symbols",
    "task.operand_min",
    "task.operand_max",
    "task.prompt_len_min",
    "task.prompt_len_max",
    "task.unsolvable_fraction",
    "policy.arch",
    "policy.context_len",
    "policy.embed_dim",
    "policy.hidden_sizes",
    "policy.init_scale",
    "algo.kind",
    "algo.group_size",
    "algo.eps_lo",
    "algo.eps_hi",
    "algo.mean_center",
    "algo.std_normalize",
    "algo.std_guard",
    "algo.sample_std",
    "algo.filter",
    "algo.dpo_beta",
    "algo.ratio_clamp",
    "algo.raft_strict_argmax",
    "algo.raft_sum_form",
    "train.prompts_per_iter",
    "train.minibatch_size",
    "train.epochs_per_iter",
    "train.max_gen_len",
    "train.temperature",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.total_iters",
    "train.eval_every",
    "train.eval_k",
    "train.eval_prompts",
    "train.kl_samples",
    "train.warmup_steps",
    "train.warmup_batch",
    "train.seed",
    "train.workers",
    "oracle.max_len",
    "oracle.budget",
    "oracle.bias_samples",
    "oracle.grad_instances",
    "oracle.grad_batch",
    "oracle.fd_step",
];

fn qualified(section: &str, key: &str) -> Option<&'static str> {
    let full = if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    };
    CONFIG_KEYS.iter().copied().find(|k| *k == full)
}

struct Fields<'a> {
    errors: Vec<Violation>,
    ini: &'a Ini,
}

impl Fields<'_> {
    fn raw(&self, key: &'static str) -> Option<&str> {
        let (section, name) = match key.split_once('.') {
            Some((s, n)) => (Some(s), n),
            None => (None, key),
        };
        self.ini.section(section).and_then(|s| s.get(name)).map(str::trim)
    }

    fn set<T>(&mut self, key: &'static str, target: &mut T, parse: impl Fn(&str) -> std::result::Result<T, String>) {
        if let Some(raw) = self.raw(key) {
            match parse(raw) {
                Ok(v) => *target = v,
                Err(message) => self.errors.push(Violation {
                    field: key,
                    message: format!("`{raw}`: {message}"),
                }),
            }
        }
    }

    fn num<T: std::str::FromStr>(&mut self, key: &'static str, target: &mut T)
    where
        T::Err: fmt::Display,
    {
        self.set(key, target, |s| s.parse::<T>().map_err(|e| e.to_string()));
    }

    fn flag(&mut self, key: &'static str, target: &mut bool) {
        self.set(key, target, |s| match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err("expected true or false".into()),
        });
    }

    fn named<T: std::str::FromStr<Err = Error>>(&mut self, key: &'static str, target: &mut T) {
        self.set(key, target, |s| s.parse::<T>().map_err(|e| e.to_string()));
    }
}

impl ExperimentConfig {
    /// Parses INI text, collecting every malformed, unknown or invalid field.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::new(),
            line: e.line,
            message: e.msg.to_string(),
        })?;
        let mut f = Fields { errors: Vec::new(), ini: &ini };
        for (section, props) in ini.iter() {
            for (key, _) in props.iter() {
                if qualified(section.unwrap_or(""), key).is_none() {
                    f.errors.push(Violation {
                        field: "unknown",
                        message: match section {
                            Some(s) => format!("unknown key `{key}` in [{s}]"),
                            None => format!("unknown top-level key `{key}`"),
                        },
                    });
                }
            }
        }

        let mut cfg = ExperimentConfig::default();
        f.set("run_name", &mut cfg.run_name, |s| Ok(s.to_string()));
        f.set("output_dir", &mut cfg.output_dir, |s| Ok(PathBuf::from(s)));

        let mut task_name = TaskName::AddMod;
        f.named("task.name", &mut task_name);
        cfg.task = match task_name {
            TaskName::AddMod => TaskSpec::add_mod_easy(),
            other => TaskSpec::sequence(other, 4, 1, 4),
        };
        let t = &mut cfg.task;
        f.num("task.symbols", &mut t.symbols);
        f.num("task.operand_min", &mut t.operand_min);
        f.num("task.operand_max", &mut t.operand_max);
        f.num("task.prompt_len_min", &mut t.prompt_len_min);
        f.num("task.prompt_len_max", &mut t.prompt_len_max);
        f.num("task.unsolvable_fraction", &mut t.unsolvable_fraction);

        let p = &mut cfg.policy;
        f.named("policy.arch", &mut p.arch);
        f.num("policy.context_len", &mut p.context_len);
        f.num("policy.embed_dim", &mut p.embed_dim);
        f.set("policy.hidden_sizes", &mut p.hidden_sizes, |s| {
            s.split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| x.parse::<usize>().map_err(|e| e.to_string()))
                .collect()
        });
        f.num("policy.init_scale", &mut p.init_scale);

        let mut kind = AlgoKind::Grpo;
        f.named("algo.kind", &mut kind);
        cfg.algo = AlgoConfig::new(kind);
        let a = &mut cfg.algo;
        f.num("algo.group_size", &mut a.group_size);
        f.num("algo.eps_lo", &mut a.eps_lo);
        f.num("algo.eps_hi", &mut a.eps_hi);
        f.flag("algo.mean_center", &mut a.mean_center);
        f.flag("algo.std_normalize", &mut a.std_normalize);
        f.num("algo.std_guard", &mut a.std_guard);
        f.flag("algo.sample_std", &mut a.sample_std);
        let mut filter: FilterKind = a.filter;
        f.named("algo.filter", &mut filter);
        a.filter = filter;
        f.num("algo.dpo_beta", &mut a.dpo_beta);
        f.num("algo.ratio_clamp", &mut a.ratio_clamp);
        f.flag("algo.raft_strict_argmax", &mut a.raft_strict_argmax);
        f.flag("algo.raft_sum_form", &mut a.raft_sum_form);

        let tr = &mut cfg.train;
        f.num("train.prompts_per_iter", &mut tr.prompts_per_iter);
        f.num("train.minibatch_size", &mut tr.minibatch_size);
        f.num("train.epochs_per_iter", &mut tr.epochs_per_iter);
        f.num("train.max_gen_len", &mut tr.max_gen_len);
        f.num("train.temperature", &mut tr.temperature);
        f.num("train.lr", &mut tr.adamw.lr);
        f.num("train.beta1", &mut tr.adamw.beta1);
        f.num("train.beta2", &mut tr.adamw.beta2);
        f.num("train.adam_eps", &mut tr.adamw.eps);
        f.num("train.weight_decay", &mut tr.adamw.weight_decay);
        f.num("train.total_iters", &mut tr.total_iters);
        f.num("train.eval_every", &mut tr.eval_every);
        f.num("train.eval_k", &mut tr.eval_k);
        f.num("train.eval_prompts", &mut tr.eval_prompts);
        f.num("train.kl_samples", &mut tr.kl_samples);
        f.num("train.warmup_steps", &mut tr.warmup_steps);
        f.num("train.warmup_batch", &mut tr.warmup_batch);
        f.num("train.seed", &mut tr.seed);
        f.num("train.workers", &mut tr.workers);

        let o = &mut cfg.oracle;
        f.num("oracle.max_len", &mut o.max_len);
        f.num("oracle.budget", &mut o.budget);
        f.num("oracle.bias_samples", &mut o.bias_samples);
        f.num("oracle.grad_instances", &mut o.grad_instances);
        f.num("oracle.grad_batch", &mut o.grad_batch);
        f.num("oracle.fd_step", &mut o.fd_step);

        let mut errors = f.errors;
        if errors.is_empty() {
            errors = cfg.violations();
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_ini_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Every invariant violation across sections, qualified by section.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |section: &str, v: Violation| {
            out.push(Violation {
                field: qualified(section, v.field).unwrap_or(v.field),
                message: v.message,
            })
        };
        if self.run_name.is_empty() {
            push("", Violation { field: "run_name", message: "run_name must not be empty".into() });
        }
        if let Err(e) = self.task.validate() {
            push("task", Violation { field: "name", message: e.to_string() });
        }
        if let Err(e) = self.policy.spec(self.task.vocab_size()).validate() {
            push("policy", Violation { field: "arch", message: e.to_string() });
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            push("policy", Violation { field: "init_scale", message: "init_scale must be >= 0".into() });
        }
        for v in self.algo.violations() {
            push("algo", v);
        }
        for v in self.train.violations(self.algo.group_size) {
            push("train", v);
        }
        if self.oracle.max_len == 0 {
            push("oracle", Violation { field: "max_len", message: "max_len must be positive".into() });
        }
        if !(self.oracle.fd_step > 0.0) {
            push("oracle", Violation { field: "fd_step", message: "fd_step must be positive".into() });
        }
        out
    }

    /// Canonical INI text; `from_ini_str(to_ini())` reproduces `self`.
    pub fn to_ini(&self) -> String {
        let t = &self.task;
        let p = &self.policy;
        let a = &self.algo;
        let tr = &self.train;
        let o = &self.oracle;
        let hidden: Vec<String> = p.hidden_sizes.iter().map(|h| h.to_string()).collect();
        format!(
            "run_name = {}\noutput_dir = {}\n\n\
             [task]\nname = {}\nsymbols = {}\noperand_min = {}\noperand_max = {}\n\
             prompt_len_min = {}\nprompt_len_max = {}\nunsolvable_fraction = {}\n\n\
             [policy]\narch = {}\ncontext_len = {}\nembed_dim = {}\nhidden_sizes = {}\ninit_scale = {}\n\n\
             [algo]\nkind = {}\ngroup_size = {}\neps_lo = {}\neps_hi = {}\nmean_center = {}\n\
             std_normalize = {}\nstd_guard = {}\nsample_std = {}\nfilter = {}\ndpo_beta = {}\n\
             ratio_clamp = {}\nraft_strict_argmax = {}\nraft_sum_form = {}\n\n\
             [train]\nprompts_per_iter = {}\nminibatch_size = {}\nepochs_per_iter = {}\n\
             max_gen_len = {}\ntemperature = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\
             weight_decay = {}\ntotal_iters = {}\neval_every = {}\neval_k = {}\neval_prompts = {}\n\
             kl_samples = {}\nwarmup_steps = {}\nwarmup_batch = {}\nseed = {}\nworkers = {}\n\n\
             [oracle]\nmax_len = {}\nbudget = {}\nbias_samples = {}\ngrad_instances = {}\n\
             grad_batch = {}\nfd_step = {}\n",
            self.run_name,
            self.output_dir.display(),
            t.name,
            t.symbols,
            t.operand_min,
            t.operand_max,
            t.prompt_len_min,
            t.prompt_len_max,
            t.unsolvable_fraction,
            p.arch,
            p.context_len,
            p.embed_dim,
            hidden.join(","),
            p.init_scale,
            a.kind,
            a.group_size,
            a.eps_lo,
            a.eps_hi,
            a.mean_center,
            a.std_normalize,
            a.std_guard,
            a.sample_std,
            a.filter,
            a.dpo_beta,
            a.ratio_clamp,
            a.raft_strict_argmax,
            a.raft_sum_form,
            tr.prompts_per_iter,
            tr.minibatch_size,
            tr.epochs_per_iter,
            tr.max_gen_len,
            tr.temperature,
            tr.adamw.lr,
            tr.adamw.beta1,
            tr.adamw.beta2,
            tr.adamw.eps,
            tr.adamw.weight_decay,
            tr.total_iters,
            tr.eval_every,
            tr.eval_k,
            tr.eval_prompts,
            tr.kl_samples,
            tr.warmup_steps,
            tr.warmup_batch,
            tr.seed,
            tr.workers,
            o.max_len,
            o.budget,
            o.bias_samples,
            o.grad_instances,
            o.grad_batch,
            o.fd_step,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    /// The full configuration as canonical INI text.
    pub config: String,
    pub version: String,
    pub seed: u64,
    pub vocab_table: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub final_checkpoint: Option<PathBuf>,
    pub status: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_ini_str(&self.config)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<MetricsRecord>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:06}.ckpt"))
}

/// Loads, validates and runs the config at `path`.
pub fn run_experiment(config_path: &Path) -> Result<RunOutcome> {
    run_config(&ExperimentConfig::load(config_path)?)
}

/// Runs `cfg` into `cfg.output_dir`: manifest first, then one JSONL line per
/// iteration, a checkpoint every `eval_every` iterations and a final one.
/// On a numerical fault the metrics written so far are flushed and the
/// manifest records the failure.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let errors = cfg.violations();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    for w in cfg.algo.warnings() {
        log::warn!("{w}");
    }
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;

    let mut manifest = RunManifest {
        run_name: cfg.run_name.clone(),
        config: cfg.to_ini(),
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        seed: cfg.train.seed,
        vocab_table: cfg.task.vocab_table(),
        started_at: chrono::Utc::now().to_rfc3339(),
        finished_at: None,
        final_checkpoint: None,
        status: "running".into(),
    };
    manifest.write(dir)?;

    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let result = (|| -> Result<TrainState> {
        let spec = cfg.policy.spec(cfg.task.vocab_size());
        let params = initial_policy(spec, cfg.policy.init_scale, &cfg.task, &cfg.train)?;
        let mut state = TrainState::new(params);
        for _ in 0..cfg.train.total_iters {
            let rec = run_iteration(&mut state, &cfg.task, &cfg.algo, &cfg.train)?;
            serde_json::to_writer(&mut metrics, &rec)?;
            metrics.write_all(b"\n")?;
            log::info!(
                "iter {} train_acc {:.4} entropy {:.4} kl {:.4} clip {:.4}{}",
                rec.iteration,
                rec.train_accuracy,
                rec.mean_entropy,
                rec.kl_from_initial,
                rec.clip_fraction,
                rec.eval_accuracy.map(|e| format!(" eval {e:.4}")).unwrap_or_default()
            );
            if cfg.train.eval_every > 0 && rec.iteration % cfg.train.eval_every == 0 {
                metrics.flush()?;
                save_checkpoint(&state.params, &checkpoint_path(dir, rec.iteration))?;
            }
        }
        Ok(state)
    })();
    metrics.flush()?;
    drop(metrics);

    manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
    match result {
        Ok(state) => {
            let final_path = dir.join(CHECKPOINT_DIR).join("final.ckpt");
            save_checkpoint(&state.params, &final_path)?;
            manifest.final_checkpoint = Some(final_path.clone());
            manifest.status = "completed".into();
            manifest.write(dir)?;
            Ok(RunOutcome {
                output_dir: dir.clone(),
                iterations: state.iteration,
                final_checkpoint: final_path,
                last: state.metrics_log.last().cloned(),
            })
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            manifest.write(dir)?;
            Err(e)
        }
    }
}

/// Parses a metrics JSONL file; blank lines are ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub path: PathBuf,
    pub iterations: Vec<u64>,
    pub smoothed: Vec<f64>,
    pub final_value: Option<f64>,
    /// Trapezoidal area under the smoothed curve against iteration.
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub field: String,
    pub window: usize,
    pub runs: Vec<RunSeries>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "field {} (moving average, window {})", self.field, self.window)?;
        writeln!(f, "{:>8} {:>12} {:>12}  path", "points", "final", "auc")?;
        for r in &self.runs {
            let fin = r.final_value.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
            writeln!(f, "{:>8} {:>12} {:>12.4}  {}", r.smoothed.len(), fin, r.auc, r.path.display())?;
        }
        Ok(())
    }
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Smoothed series and summaries of `field` for each run, ordered by path.
pub fn compare_runs(paths: &[PathBuf], field: &str, window: usize) -> Result<Comparison> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("compare_runs needs at least one metrics file".into()));
    }
    if window == 0 {
        return Err(Error::InvalidInput("window must be >= 1".into()));
    }
    if !MetricsRecord::FIELDS.contains(&field) {
        return Err(Error::UnknownField {
            field: field.to_string(),
            available: MetricsRecord::FIELDS.iter().map(|s| s.to_string()).collect(),
        });
    }
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut runs = Vec::with_capacity(sorted.len());
    for path in sorted {
        let records = read_metrics(&path)?;
        let (iterations, raw): (Vec<u64>, Vec<f64>) = records
            .iter()
            .filter_map(|r| r.field(field).flatten().map(|v| (r.iteration, v)))
            .unzip();
        let smoothed = moving_average(&raw, window);
        let xs: Vec<f64> = iterations.iter().map(|&i| i as f64).collect();
        runs.push(RunSeries {
            auc: trapezoid(&xs, &smoothed),
            final_value: smoothed.last().copied(),
            path,
            iterations,
            smoothed,
        });
    }
    Ok(Comparison {
        field: field.to_string(),
        window,
        runs,
    })
}

/// Writes a header plus one row per record, columns in schema order;
/// returns the number of data rows.
pub fn export_csv(metrics_path: &Path, out_path: &Path) -> Result<usize> {
    let records = read_metrics(metrics_path)?;
    let mut w = csv::Writer::from_path(out_path)?;
    w.write_record(MetricsRecord::FIELDS)?;
    for r in &records {
        w.write_record([
            r.iteration.to_string(),
            r.train_accuracy.to_string(),
            r.mean_entropy.to_string(),
            r.kl_from_initial.to_string(),
            r.clip_fraction.to_string(),
            r.prompts_kept.to_string(),
            r.examples_kept.to_string(),
            r.surrogate_loss.to_string(),
            r.eval_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Reads a CSV written by [`export_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != MetricsRecord::FIELDS {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: m,
        };
        let num = |j: usize| row[j].parse::<f64>().map_err(|e| bad(format!("{}: {e}", MetricsRecord::FIELDS[j])));
        let int = |j: usize| row[j].parse::<u64>().map_err(|e| bad(format!("{}: {e}", MetricsRecord::FIELDS[j])));
        out.push(MetricsRecord {
            iteration: int(0)?,
            train_accuracy: num(1)?,
            mean_entropy: num(2)?,
            kl_from_initial: num(3)?,
            clip_fraction: num(4)?,
            prompts_kept: int(5)?,
            examples_kept: int(6)?,
            surrogate_loss: num(7)?,
            eval_accuracy: if row[8].is_empty() { None } else { Some(num(8)?) },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradSuiteEntry {
    pub algo: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSuiteReport {
    pub gradient: Vec<GradSuiteEntry>,
    /// Max |exact_gradient - finite differences of exact_objective|.
    pub enumeration_gradient_error: f64,
    pub bias_raw: oracle::BiasReport,
    pub bias_centered: oracle::BiasReport,
    /// Fraction of coordinates where the centered estimator's variance is
    /// at most the raw one's.
    pub variance_reduced_fraction: f64,
    pub pass: bool,
}

impl fmt::Display for OracleSuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient checks (max relative error)")?;
        for g in &self.gradient {
            writeln!(f, "  {:<20} {:>3} instances  {:.3e}", g.algo, g.instances, g.max_rel_error)?;
        }
        writeln!(f, "exact gradient vs finite differences: {:.3e}", self.enumeration_gradient_error)?;
        writeln!(f, "{}", self.bias_raw)?;
        writeln!(f, "{}", self.bias_centered)?;
        writeln!(f, "variance reduced on {:.1}% of coordinates", 100.0 * self.variance_reduced_fraction)?;
        write!(f, "suite {}", if self.pass { "pass" } else { "fail" })
    }
}

/// The oracle suites for a config's task and policy: gradient checks for
/// every kind, exact-gradient cross-check, and the raw / mean-centered
/// Reinforce bias and variance audit.
pub fn oracle_suite(cfg: &ExperimentConfig) -> Result<OracleSuiteReport> {
    let errors = cfg.violations();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let o = &cfg.oracle;
    let seed = cfg.train.seed;
    let spec = cfg.policy.spec(cfg.task.vocab_size());
    let scale = if cfg.policy.init_scale > 0.0 { cfg.policy.init_scale } else { 1.0 };

    let mut gradient = Vec::new();
    for (k, kind) in AlgoKind::ALL.into_iter().enumerate() {
        let algo = AlgoConfig::new(kind);
        let mut worst: f64 = 0.0;
        for i in 0..o.grad_instances {
            let mut rng = make_rng(seed, stream_id(Purpose::Oracle, k as u64, i as u64));
            let params = crate::policy::PolicyParams::init(spec.clone(), scale, &mut rng)?;
            let batch = oracle::random_grad_instance(&params, &cfg.task, &algo, o.grad_batch, o.max_len, 0.4, &mut rng)?;
            worst = worst.max(oracle::check_loss_grad(&params, &batch, &algo, o.fd_step)?.max_rel_error);
        }
        gradient.push(GradSuiteEntry {
            algo: kind.name().into(),
            instances: o.grad_instances,
            max_rel_error: worst,
        });
    }

    let domain = EnumerationDomain::new(cfg.task.clone(), o.max_len, o.budget)?;
    let params = initial_policy(spec.clone(), cfg.policy.init_scale, &cfg.task, &cfg.train)?;
    let mut rng = make_rng(seed, stream_id(Purpose::Oracle, 100, 0));
    let prompt = cfg.task.sample_prompt(&mut rng);
    let exact = oracle::exact_gradient(&params, &domain, &prompt)?;
    let fd = oracle::finite_diff_gradient(
        |theta| {
            let q = crate::policy::PolicyParams {
                spec: spec.clone(),
                theta: theta.to_vec(),
            };
            oracle::exact_objective(&q, &domain, &prompt).unwrap_or(f64::NAN)
        },
        &params.theta,
        o.fd_step,
    )?;
    let enumeration_gradient_error = exact
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let raw = AlgoConfig::new(AlgoKind::ReinforceToken).with_group_size(1);
    let mut centered = AlgoConfig::new(AlgoKind::ReinforceToken).with_group_size(2);
    centered.mean_center = true;
    let bias_raw = oracle::estimator_bias_check(
        &raw,
        &params,
        &domain,
        &prompt,
        o.bias_samples,
        &mut make_rng(seed, stream_id(Purpose::Oracle, 101, 0)),
    )?;
    let bias_centered = oracle::estimator_bias_check(
        &centered,
        &params,
        &domain,
        &prompt,
        o.bias_samples,
        &mut make_rng(seed, stream_id(Purpose::Oracle, 101, 0)),
    )?;
    let variance_reduced_fraction = variance_reduced_fraction(&bias_raw, &bias_centered);

    let pass = gradient.iter().all(|g| g.max_rel_error < 1e-4)
        && enumeration_gradient_error < 1e-6
        && bias_raw.pass
        && bias_centered.pass
        && variance_reduced_fraction >= 0.9;
    Ok(OracleSuiteReport {
        gradient,
        enumeration_gradient_error,
        bias_raw,
        bias_centered,
        variance_reduced_fraction,
        pass,
    })
}

/// Among coordinates where either estimator varies, the fraction whose
/// `candidate` variance is at most the `baseline` one.
pub fn variance_reduced_fraction(baseline: &oracle::BiasReport, candidate: &oracle::BiasReport) -> f64 {
    let pairs: Vec<(f64, f64)> = baseline
        .variances()
        .into_iter()
        .zip(candidate.variances())
        .filter(|(a, b)| *a > 0.0 || *b > 0.0)
        .collect();
    if pairs.is_empty() {
        return 1.0;
    }
    pairs.iter().filter(|(a, b)| b <= a).count() as f64 / pairs.len() as f64
}
