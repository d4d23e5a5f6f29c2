//! The outer loop: sample prompts, roll out groups from the current
//! snapshot, score, weight and filter, then take several mini-batch ascent
//! steps against the recorded behavior log-probs.

use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algo::response_weights;
use crate::config::{AlgoConfig, AlgoKind, Violation};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::policy::{
    adamw_step, entropy_sum, loss_grad, per_token_logprobs, sample_response, AdamWConfig,
    LossStats, OptState, PolicyParams,
};
use crate::rng::{make_rng, stream_id, Purpose, RngStream};
use crate::types::{MetricsRecord, PromptGroup, TrainExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompts_per_iter: usize,
    pub minibatch_size: usize,
    pub epochs_per_iter: usize,
    pub max_gen_len: usize,
    pub temperature: f64,
    pub adamw: AdamWConfig,
    pub total_iters: u64,
    /// Evaluate (and checkpoint, from the CLI) every this many iterations;
    /// 0 disables.
    pub eval_every: u64,
    pub eval_k: usize,
    pub eval_prompts: usize,
    /// Fresh rollouts used for the KL-from-initial estimate.
    pub kl_samples: usize,
    /// Supervised steps on well-formatted random answers before the
    /// reference snapshot is taken.
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub seed: u64,
    /// Rollout threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompts_per_iter: 64,
            minibatch_size: 64,
            epochs_per_iter: 2,
            max_gen_len: 16,
            temperature: 1.0,
            adamw: AdamWConfig::default(),
            total_iters: 300,
            eval_every: 10,
            eval_k: 16,
            eval_prompts: 64,
            kl_samples: 64,
            warmup_steps: 300,
            warmup_batch: 64,
            seed: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, group_size: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: String| out.push(Violation { field, message });
        for (field, v) in [
            ("prompts_per_iter", self.prompts_per_iter),
            ("minibatch_size", self.minibatch_size),
            ("epochs_per_iter", self.epochs_per_iter),
            ("max_gen_len", self.max_gen_len),
            ("eval_k", self.eval_k),
            ("eval_prompts", self.eval_prompts),
            ("kl_samples", self.kl_samples),
            ("warmup_batch", self.warmup_batch),
        ] {
            if v == 0 {
                push(field, format!("{field} must be positive"));
            }
        }
        if self.minibatch_size > self.prompts_per_iter * group_size {
            push(
                "minibatch_size",
                format!(
                    "minibatch_size {} exceeds prompts_per_iter * group_size = {}",
                    self.minibatch_size,
                    self.prompts_per_iter * group_size
                ),
            );
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            push("temperature", "temperature must be positive".into());
        }
        let a = &self.adamw;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            push("lr", "lr must be positive".into());
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            push("betas", "betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            push("adam_eps", "adam_eps must be positive".into());
        }
        if !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
            push("weight_decay", "weight_decay must be >= 0".into());
        }
        if self.total_iters == 0 {
            push("total_iters", "total_iters must be positive".into());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: PolicyParams,
    initial_params: PolicyParams,
    pub opt: OptState,
    pub iteration: u64,
    pub metrics_log: Vec<MetricsRecord>,
}

impl TrainState {
    pub fn new(params: PolicyParams) -> Self {
        let n = params.theta.len();
        TrainState {
            initial_params: params.clone(),
            params,
            opt: OptState::new(n),
            iteration: 0,
            metrics_log: Vec::new(),
        }
    }

    /// The frozen reference policy.
    pub fn initial_params(&self) -> &PolicyParams {
        &self.initial_params
    }
}

/// Hash of theta's bit patterns.
pub fn params_checksum(params: &PolicyParams) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for x in &params.theta {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Fresh policy for a run: seeded initialization, then `warmup_steps` of
/// supervised training on well-formatted random answers so the policy knows
/// the output format but not the task.
pub fn initial_policy(
    spec: crate::policy::PolicySpec,
    init_scale: f64,
    task: &TaskSpec,
    train: &TrainConfig,
) -> Result<PolicyParams> {
    if spec.vocab_size != task.vocab_size() {
        return Err(Error::InvalidInput(format!(
            "policy vocab_size {} does not match task vocabulary {}",
            spec.vocab_size,
            task.vocab_size()
        )));
    }
    let mut params = PolicyParams::init(spec, init_scale, &mut make_rng(train.seed, stream_id(Purpose::Init, 0, 0)))?;
    let mut opt = OptState::new(params.theta.len());
    let sft = AlgoConfig::new(AlgoKind::Raft);
    for step in 0..train.warmup_steps {
        let mut rng = make_rng(train.seed, stream_id(Purpose::Warmup, step as u64, 0));
        let batch: Vec<TrainExample> = (0..train.warmup_batch)
            .map(|_| {
                let prompt = task.sample_prompt(&mut rng);
                let response = task.format_response(&prompt, &mut rng);
                TrainExample {
                    prompt,
                    response,
                    weight: 1.0,
                    old_logprobs: Vec::new(),
                }
            })
            .collect();
        if let Some(lg) = loss_grad(&params, &batch, &sft)? {
            adamw_step(&mut params, &lg.grad, &mut opt, &train.adamw)?;
        }
    }
    Ok(params)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Samples `n` responses per prompt, each prompt on its own stream.
pub fn rollout_groups(
    params: &PolicyParams,
    task: &TaskSpec,
    prompts: Vec<crate::types::PromptInstance>,
    n: usize,
    train: &TrainConfig,
    iteration: u64,
) -> Result<Vec<PromptGroup>> {
    with_pool(train.workers, || {
        prompts
            .into_par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let mut rng = make_rng(train.seed, stream_id(Purpose::Rollout, iteration, i as u64));
                let rollouts = (0..n)
                    .map(|_| sample_response(params, &prompt, train.temperature, train.max_gen_len, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Ok(task.score_group(prompt, rollouts))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Filtered, weighted training buffer. DPO entries are adjacent
/// (chosen, rejected) pairs carrying reference-policy log-probs.
pub fn build_buffer(
    groups: &[PromptGroup],
    algo: &AlgoConfig,
    reference: &PolicyParams,
) -> Result<(Vec<TrainExample>, u64)> {
    let mut buffer = Vec::new();
    let mut kept = 0;
    for g in groups {
        let d = response_weights(g, algo)?;
        if !d.keep_prompt {
            continue;
        }
        kept += 1;
        let mut picked: Vec<usize> = (0..g.len()).filter(|&i| d.selected[i]).collect();
        if algo.kind == AlgoKind::DpoIter {
            // chosen first
            picked.sort_by(|&a, &b| d.weights[b].total_cmp(&d.weights[a]));
        }
        for i in picked {
            let r = &g.responses[i];
            let old_logprobs = if algo.kind == AlgoKind::DpoIter {
                per_token_logprobs(reference, &g.prompt, &r.tokens)
            } else {
                r.old_logprobs.clone()
            };
            buffer.push(TrainExample {
                prompt: g.prompt.clone(),
                response: r.tokens.clone(),
                weight: d.weights[i],
                old_logprobs,
            });
        }
    }
    Ok((buffer, kept))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateSummary {
    pub steps: usize,
    pub skipped: usize,
    pub stats: LossStats,
    pub mean_loss: f64,
}

/// `epochs` shuffled passes of mini-batch ascent over the buffer.
pub fn update_on_buffer(
    state: &mut TrainState,
    buffer: &[TrainExample],
    algo: &AlgoConfig,
    train: &TrainConfig,
    rng: &mut RngStream,
) -> Result<UpdateSummary> {
    let unit = if algo.kind == AlgoKind::DpoIter { 2 } else { 1 };
    let units = buffer.len() / unit;
    let per_batch = (train.minibatch_size / unit).max(1);
    let mut summary = UpdateSummary::default();
    let mut loss_sum = 0.0;
    let mut order: Vec<usize> = (0..units).collect();
    for _ in 0..train.epochs_per_iter {
        rng.shuffle(&mut order);
        for chunk in order.chunks(per_batch) {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .flat_map(|&u| buffer[u * unit..(u + 1) * unit].iter().cloned())
                .collect();
            if batch.iter().all(|e| e.weight == 0.0) {
                summary.skipped += 1;
                continue;
            }
            let Some(lg) = loss_grad(&state.params, &batch, algo)? else {
                summary.skipped += 1;
                continue;
            };
            adamw_step(&mut state.params, &lg.grad, &mut state.opt, &train.adamw)?;
            summary.steps += 1;
            summary.stats.merge(lg.stats);
            loss_sum += lg.loss;
        }
    }
    if summary.steps > 0 {
        summary.mean_loss = loss_sum / summary.steps as f64;
    }
    Ok(summary)
}

/// One full iteration; appends and returns its metrics record.
pub fn run_iteration(
    state: &mut TrainState,
    task: &TaskSpec,
    algo: &AlgoConfig,
    train: &TrainConfig,
) -> Result<MetricsRecord> {
    let iter = state.iteration + 1;
    let mut prompt_rng = make_rng(train.seed, stream_id(Purpose::Prompts, iter, 0));
    let prompts = (0..train.prompts_per_iter)
        .map(|_| task.sample_prompt(&mut prompt_rng))
        .collect();
    let groups = rollout_groups(&state.params, task, prompts, algo.group_size, train, iter)?;
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();

    let (buffer, prompts_kept) = build_buffer(&groups, algo, &state.initial_params)?;
    let mut shuffle_rng = make_rng(train.seed, stream_id(Purpose::Shuffle, iter, 0));
    let summary = update_on_buffer(state, &buffer, algo, train, &mut shuffle_rng)?;

    let params = &state.params;
    let (h_sum, h_count) = with_pool(train.workers, || {
        groups
            .par_iter()
            .map(|g| {
                g.responses
                    .iter()
                    .map(|r| entropy_sum(params, &g.prompt, &r.tokens))
                    .fold((0.0, 0), |(s, c), (s1, c1)| (s + s1, c + c1))
            })
            .collect::<Vec<_>>()
    })?
    .into_iter()
    .fold((0.0, 0usize), |(s, c), (s1, c1)| (s + s1, c + c1));
    let mean_entropy = if h_count > 0 { h_sum / h_count as f64 } else { 0.0 };

    let kl = kl_from_initial(
        params,
        &state.initial_params,
        task,
        train.kl_samples,
        train.max_gen_len,
        &mut make_rng(train.seed, stream_id(Purpose::Kl, iter, 0)),
    )?;
    let eval_accuracy = if train.eval_every > 0 && iter.is_multiple_of(train.eval_every) {
        Some(evaluate_avg_at_k(
            params,
            task,
            train.eval_prompts,
            train.eval_k,
            train.temperature,
            train.max_gen_len,
            &mut make_rng(train.seed, stream_id(Purpose::Eval, iter, 0)),
        )?)
    } else {
        None
    };

    let record = MetricsRecord {
        iteration: iter,
        train_accuracy: train_accuracy(&rewards),
        mean_entropy,
        kl_from_initial: kl,
        clip_fraction: summary.stats.clip_fraction(),
        prompts_kept,
        examples_kept: buffer.len() as u64,
        surrogate_loss: summary.mean_loss,
        eval_accuracy,
    };
    state.iteration = iter;
    state.metrics_log.push(record.clone());
    Ok(record)
}

/// Monte-Carlo estimate of `E_{x, a ~ pi}[log pi(a|x) - log pi_0(a|x)]`
/// from `n_samples` fresh prompt/response draws.
pub fn kl_from_initial(
    params: &PolicyParams,
    initial: &PolicyParams,
    task: &TaskSpec,
    n_samples: usize,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("kl_from_initial needs n_samples >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_samples {
        let prompt = task.sample_prompt(rng);
        let r = sample_response(params, &prompt, 1.0, max_len, rng)?;
        let now: f64 = r.logprobs.iter().sum();
        let then: f64 = per_token_logprobs(initial, &prompt, &r.tokens).iter().sum();
        total += now - then;
    }
    Ok(total / n_samples as f64)
}

/// average@k: mean of `(1 + r) / 2` over `n_prompts * k` fresh samples.
pub fn evaluate_avg_at_k(
    params: &PolicyParams,
    task: &TaskSpec,
    n_prompts: usize,
    k: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if k == 0 || n_prompts == 0 {
        return Err(Error::InvalidInput("evaluation needs k >= 1 and n_prompts >= 1".into()));
    }
    let mut rewards = Vec::with_capacity(n_prompts * k);
    for _ in 0..n_prompts {
        let prompt = task.sample_prompt(rng);
        for _ in 0..k {
            let r = sample_response(params, &prompt, temperature, max_len, rng)?;
            rewards.push(task.verify(&prompt, &r.tokens).reward.value());
        }
    }
    Ok(train_accuracy(&rewards))
}

/// Token-mean next-token entropy over responses sampled for `n_prompts`
/// fresh prompts.
pub fn policy_entropy(
    params: &PolicyParams,
    task: &TaskSpec,
    n_prompts: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for _ in 0..n_prompts {
        let prompt = task.sample_prompt(rng);
        let r = sample_response(params, &prompt, temperature, max_len, rng)?;
        let (s, c) = entropy_sum(params, &prompt, &r.tokens);
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidInput("policy_entropy needs n_prompts >= 1".into()));
    }
    Ok(sum / count as f64)
}

/// Mean of `(1 + r) / 2`; 0 for an empty list.
pub fn train_accuracy(rewards: &[f64]) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    rewards.iter().map(|r| (1.0 + r) / 2.0).sum::<f64>() / rewards.len() as f64
}

/// Trailing mean over the last `min(i + 1, window)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "moving_average window must be >= 1");
    (0..series.len())
        .map(|i| {
            let n = (i + 1).min(window);
            series[i + 1 - n..=i].iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// Runs `train.total_iters` iterations from `params`, calling `on_record`
/// after each one.
pub fn train_loop(
    params: PolicyParams,
    task: &TaskSpec,
    algo: &AlgoConfig,
    train: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(params);
    for _ in 0..train.total_iters {
        let rec = run_iteration(&mut state, task, algo, train)?;
        on_record(&rec, &state)?;
    }
    Ok(state)
}
