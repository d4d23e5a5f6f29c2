//! Brute-force ground truth on tiny instances: exact objective and policy
//! gradient by enumerating every outcome of the sampler, central finite
//! differences, and Monte-Carlo audits of gradient estimators.

use std::fmt;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::algo::response_weights;
use crate::config::{AlgoConfig, AlgoKind};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, loss_grad, sample_response, softmax, PolicyParams};
use crate::rng::{make_rng, RngStream};
use crate::types::{PromptGroup, PromptInstance, Reward, ScoredResponse, TokenSeq, TrainExample};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

/// The sampler's outcome space for a vocabulary and length cap: every
/// sequence ending in EOS at or before `max_len`, plus every EOS-free
/// sequence of exactly `max_len` tokens (truncations).
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationDomain {
    pub task: Option<TaskSpec>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sequence_count: u64,
}

/// `sum_{L=0}^{max_len-1} (V-1)^L + (V-1)^max_len`, or `None` on overflow.
pub fn outcome_count(vocab_size: usize, max_len: usize) -> Option<u64> {
    let b = vocab_size.checked_sub(1)? as u64;
    let mut total: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..max_len {
        total = total.checked_add(pow)?;
        pow = pow.checked_mul(b)?;
    }
    total.checked_add(pow)
}

impl EnumerationDomain {
    pub fn new(task: TaskSpec, max_len: usize, budget: u64) -> Result<Self> {
        task.validate()?;
        let mut d = Self::for_vocab(task.vocab_size(), max_len, budget)?;
        d.task = Some(task);
        Ok(d)
    }

    /// A domain without a task; rewards must then be supplied explicitly.
    pub fn for_vocab(vocab_size: usize, max_len: usize, budget: u64) -> Result<Self> {
        if vocab_size < 2 || max_len < 1 {
            return Err(Error::InvalidInput(
                "enumeration needs vocab_size >= 2 and max_len >= 1".into(),
            ));
        }
        let count = outcome_count(vocab_size, max_len).unwrap_or(u64::MAX);
        if count > budget {
            return Err(Error::BudgetExceeded { needed: count, budget });
        }
        Ok(EnumerationDomain {
            task: None,
            vocab_size,
            max_len,
            sequence_count: count,
        })
    }

    fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    fn task(&self) -> Result<&TaskSpec> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("enumeration domain has no task for rewards".into()))
    }
}

/// Every outcome in the domain, in depth-first lexicographic order.
pub fn enumerate_responses(domain: &EnumerationDomain) -> Vec<TokenSeq> {
    let eos = domain.eos();
    let mut out = Vec::with_capacity(domain.sequence_count as usize);
    let mut prefix = Vec::with_capacity(domain.max_len);
    fn walk(prefix: &mut Vec<u32>, eos: u32, vocab: u32, max_len: usize, out: &mut Vec<TokenSeq>) {
        for tok in 0..vocab {
            prefix.push(tok);
            if tok == eos || prefix.len() == max_len {
                out.push(TokenSeq(prefix.clone()));
            } else {
                walk(prefix, eos, vocab, max_len, out);
            }
            prefix.pop();
        }
    }
    walk(&mut prefix, eos, domain.vocab_size as u32, domain.max_len, &mut out);
    out
}

/// `pi(a | prompt)` for each enumerated sequence.
pub fn sequence_probabilities(
    params: &PolicyParams,
    prompt: &PromptInstance,
    seqs: &[TokenSeq],
) -> Result<Vec<f64>> {
    check_vocab(params, prompt)?;
    Ok(seqs
        .par_iter()
        .map(|a| seq_logprob(params, prompt, a).exp())
        .collect())
}

fn check_vocab(params: &PolicyParams, prompt: &PromptInstance) -> Result<()> {
    prompt.tokens.validate(params.vocab_size())
}

fn seq_logprob(params: &PolicyParams, prompt: &PromptInstance, a: &[u32]) -> f64 {
    let mut hist = prompt.tokens.to_vec();
    let mut total = 0.0;
    for &tok in a {
        total += log_softmax(&params.forward(&hist).logits)[tok as usize];
        hist.push(tok);
    }
    total
}

/// `grad_theta log pi(a | prompt)` through the architecture's backward pass.
pub fn grad_log_prob(params: &PolicyParams, prompt: &PromptInstance, a: &[u32]) -> Vec<f64> {
    let mut grad = vec![0.0; params.theta.len()];
    let mut hist = prompt.tokens.to_vec();
    for &tok in a {
        let fwd = params.forward(&hist);
        let mut d: Vec<f64> = softmax(&fwd.logits).iter().map(|p| -p).collect();
        d[tok as usize] += 1.0;
        params.backward(&fwd, &d, &mut grad);
        hist.push(tok);
    }
    grad
}

fn check_domain(params: &PolicyParams, domain: &EnumerationDomain) -> Result<()> {
    if params.vocab_size() != domain.vocab_size {
        return Err(Error::InvalidInput(format!(
            "policy vocab {} does not match enumeration vocab {}",
            params.vocab_size(),
            domain.vocab_size
        )));
    }
    Ok(())
}

/// `J = sum_a pi(a) r(a)` with caller-supplied rewards per enumerated
/// sequence.
pub fn exact_objective_with(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    prompt: &PromptInstance,
    reward: impl Fn(&TokenSeq) -> f64 + Sync,
) -> Result<f64> {
    check_domain(params, domain)?;
    let seqs = enumerate_responses(domain);
    let probs = sequence_probabilities(params, prompt, &seqs)?;
    Ok(seqs.iter().zip(&probs).map(|(a, p)| p * reward(a)).sum())
}

pub fn exact_objective(params: &PolicyParams, domain: &EnumerationDomain, prompt: &PromptInstance) -> Result<f64> {
    let task = domain.task()?;
    exact_objective_with(params, domain, prompt, |a| task.verify(prompt, a).reward.value())
}

/// Probability that a sampled response is verified correct.
pub fn success_probability(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    prompt: &PromptInstance,
) -> Result<f64> {
    let task = domain.task()?;
    exact_objective_with(params, domain, prompt, |a| {
        task.verify(prompt, a).reward.is_correct() as u8 as f64
    })
}

/// `sum_a pi(a) r(a) grad log pi(a)` with caller-supplied rewards.
pub fn exact_gradient_with(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    prompt: &PromptInstance,
    reward: impl Fn(&TokenSeq) -> f64 + Sync,
) -> Result<Vec<f64>> {
    check_domain(params, domain)?;
    let seqs = enumerate_responses(domain);
    let probs = sequence_probabilities(params, prompt, &seqs)?;
    let terms: Vec<Vec<f64>> = seqs
        .par_iter()
        .zip(probs.par_iter())
        .map(|(a, &p)| {
            let c = p * reward(a);
            let mut g = grad_log_prob(params, prompt, a);
            g.iter_mut().for_each(|x| *x *= c);
            g
        })
        .collect();
    let mut total = vec![0.0; params.theta.len()];
    for g in terms {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

pub fn exact_gradient(params: &PolicyParams, domain: &EnumerationDomain, prompt: &PromptInstance) -> Result<Vec<f64>> {
    let task = domain.task()?;
    exact_gradient_with(params, domain, prompt, |a| task.verify(prompt, a).reward.value())
}

/// Exact `KL(pi || pi_0)` for one prompt.
pub fn exact_kl(
    params: &PolicyParams,
    initial: &PolicyParams,
    domain: &EnumerationDomain,
    prompt: &PromptInstance,
) -> Result<f64> {
    check_domain(params, domain)?;
    check_domain(initial, domain)?;
    let seqs = enumerate_responses(domain);
    Ok(seqs
        .par_iter()
        .map(|a| {
            let lp = seq_logprob(params, prompt, a);
            lp.exp() * (lp - seq_logprob(initial, prompt, a))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum())
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive (got {h})")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `loss_grad`'s gradient against central differences of its loss.
pub fn check_loss_grad(
    params: &PolicyParams,
    minibatch: &[TrainExample],
    cfg: &AlgoConfig,
    h: f64,
) -> Result<GradCheck> {
    let lg = loss_grad(params, minibatch, cfg)?
        .ok_or_else(|| Error::InvalidInput("gradient check on an empty minibatch".into()))?;
    let spec = params.spec.clone();
    let numeric = finite_diff_gradient(
        |theta| {
            let p = PolicyParams {
                spec: spec.clone(),
                theta: theta.to_vec(),
            };
            match loss_grad(&p, minibatch, cfg) {
                Ok(Some(l)) => l.loss,
                _ => f64::NAN,
            }
        },
        &params.theta,
        h,
    )?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic: lg.grad,
        numeric,
    };
    for (i, (a, n)) in out.analytic.iter().zip(&out.numeric).enumerate() {
        let rel = relative_error(*a, *n);
        out.max_abs_error = out.max_abs_error.max((a - n).abs());
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    Ok(out)
}

/// Minimum distance kept between any log-ratio and a clip edge or the
/// ratio clamp, so central differences never straddle a kink.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(diff: f64, cfg: &AlgoConfig) -> bool {
    let edges = [
        (1.0 - cfg.eps_lo).ln(),
        (1.0 + cfg.eps_hi).ln(),
        cfg.ratio_clamp,
        -cfg.ratio_clamp,
    ];
    edges.iter().any(|e| (diff - e).abs() < KINK_MARGIN)
}

/// A random minibatch for gradient checks: responses sampled from `params`,
/// weights of the kind's shape, and behavior log-probs offset from the
/// current ones by up to `spread` nats per token (both inside and outside
/// the clip band, never within a small margin of an edge).
pub fn random_grad_instance(
    params: &PolicyParams,
    task: &TaskSpec,
    cfg: &AlgoConfig,
    size: usize,
    max_len: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Vec<TrainExample>> {
    if size == 0 {
        return Err(Error::InvalidInput("gradient instance needs size >= 1".into()));
    }
    let mut out = Vec::with_capacity(size);
    let units = if cfg.kind == AlgoKind::DpoIter { size.div_ceil(2) } else { size };
    for _ in 0..units {
        let prompt = task.sample_prompt(rng);
        let members = if cfg.kind == AlgoKind::DpoIter { 2 } else { 1 };
        for m in 0..members {
            let r = sample_response(params, &prompt, 1.0, max_len, rng)?;
            let weight = match cfg.kind {
                AlgoKind::Raft | AlgoKind::RaftPp => (rng.uniform() < 0.7) as u8 as f64,
                AlgoKind::DpoIter => {
                    if m == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                AlgoKind::Grpo => 4.0 * rng.uniform() - 2.0,
                _ => {
                    if rng.uniform() < 0.5 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            let old_logprobs = loop {
                let offsets: Vec<f64> = r
                    .logprobs
                    .iter()
                    .map(|_| spread * (2.0 * rng.uniform() - 1.0))
                    .collect();
                let total: f64 = offsets.iter().sum();
                if cfg.kind == AlgoKind::DpoIter
                    || (!offsets.iter().any(|&d| near_kink(d, cfg)) && !near_kink(total, cfg))
                {
                    break r.logprobs.iter().zip(&offsets).map(|(lp, d)| lp - d).collect();
                }
            };
            out.push(TrainExample {
                prompt: prompt.clone(),
                response: r.tokens,
                weight,
                old_logprobs,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordStat {
    pub index: usize,
    pub mean: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub algo: String,
    pub group_size: usize,
    pub n_samples: usize,
    /// `E[w | r = +1]` and `E[w | r = -1]` for the audited response.
    pub weight_given_correct: f64,
    pub weight_given_wrong: f64,
    pub success_probability: f64,
    /// Coordinates with a non-degenerate estimate.
    pub active: usize,
    /// `max(3, z_{1 - 0.00135 / active})`: the 3-sigma two-sided level
    /// Bonferroni-corrected over active coordinates.
    pub threshold: f64,
    pub max_abs_z: f64,
    pub within_3_sigma: bool,
    pub pass: bool,
    pub coords: Vec<CoordStat>,
}

impl BiasReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn variances(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.variance).collect()
    }
}

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} n={} samples={} P(correct)={:.6} E[w|+]={:.6} E[w|-]={:.6}",
            self.algo,
            self.group_size,
            self.n_samples,
            self.success_probability,
            self.weight_given_correct,
            self.weight_given_wrong
        )?;
        writeln!(
            f,
            "{:>6} {:>13} {:>13} {:>11} {:>8} {:>11}",
            "coord", "exact", "mean", "std_err", "z", "variance"
        )?;
        for c in self.coords.iter().filter(|c| c.variance > 0.0 || c.exact != 0.0) {
            writeln!(
                f,
                "{:>6} {:>13.6e} {:>13.6e} {:>11.3e} {:>8.3} {:>11.3e}",
                c.index, c.exact, c.mean, c.std_error, c.z, c.variance
            )?;
        }
        write!(
            f,
            "active={} max|z|={:.3} threshold={:.3} verdict={}",
            self.active,
            self.max_abs_z,
            self.threshold,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

fn dummy_group(prompt: &PromptInstance, rewards: &[bool]) -> PromptGroup {
    PromptGroup {
        prompt: prompt.clone(),
        responses: rewards
            .iter()
            .map(|&ok| ScoredResponse {
                tokens: TokenSeq(Vec::new()),
                reward: Reward::from_correct(ok),
                old_logprobs: Vec::new(),
                terminated: true,
            })
            .collect(),
    }
}

/// `E[w_0 | r_0]` where the other `n - 1` rewards are i.i.d. with success
/// probability `q`.
fn conditional_weight(cfg: &AlgoConfig, prompt: &PromptInstance, first: bool, q: f64) -> Result<f64> {
    let n = cfg.group_size;
    let mut total = 0.0;
    for mask in 0u64..(1u64 << (n - 1)) {
        let mut rewards = vec![first];
        let mut p = 1.0;
        for j in 0..n - 1 {
            let ok = mask >> j & 1 == 1;
            p *= if ok { q } else { 1.0 - q };
            rewards.push(ok);
        }
        if p == 0.0 {
            continue;
        }
        total += p * response_weights(&dummy_group(prompt, &rewards), cfg)?.weights[0];
    }
    Ok(total)
}

const SAMPLES_PER_CHUNK: usize = 1024;

/// Audits the unclipped single-response estimator `w(a_0) grad log pi(a_0)`,
/// where `a_0` is the first response of a sampled group and `w` is assigned
/// by `cfg`'s weighting. Its expectation is
/// `G_+ (E[w | +1] - E[w | -1])` with `G_+ = sum_{a correct} pi(a) grad log pi(a)`,
/// which reduces to the policy gradient for raw rewards.
pub fn estimator_bias_check(
    cfg: &AlgoConfig,
    params: &PolicyParams,
    domain: &EnumerationDomain,
    prompt: &PromptInstance,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<BiasReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidInput("estimator_bias_check needs n_samples >= 1000".into()));
    }
    if cfg.kind == AlgoKind::DpoIter {
        return Err(Error::InvalidInput("dpo_iter has no single-response gradient estimator".into()));
    }
    cfg.validate()?;
    if cfg.group_size > 20 {
        return Err(Error::InvalidInput("estimator_bias_check supports group_size <= 20".into()));
    }
    check_domain(params, domain)?;
    let task = domain.task()?;

    let g_plus = exact_gradient_with(params, domain, prompt, |a| {
        task.verify(prompt, a).reward.is_correct() as u8 as f64
    })?;
    let q = success_probability(params, domain, prompt)?;
    let w_plus = conditional_weight(cfg, prompt, true, q)?;
    let w_minus = conditional_weight(cfg, prompt, false, q)?;
    let target: Vec<f64> = g_plus.iter().map(|g| g * (w_plus - w_minus)).collect();

    let base = rng.next_u64();
    let dim = params.theta.len();
    let chunks = n_samples.div_ceil(SAMPLES_PER_CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = make_rng(base, c as u64);
            let count = SAMPLES_PER_CHUNK.min(n_samples - c * SAMPLES_PER_CHUNK);
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for _ in 0..count {
                let mut first = None;
                let mut rewards = Vec::with_capacity(cfg.group_size);
                for j in 0..cfg.group_size {
                    let r = sample_response(params, prompt, 1.0, domain.max_len, &mut rng)?;
                    rewards.push(task.verify(prompt, &r.tokens).reward.is_correct());
                    if j == 0 {
                        first = Some(r.tokens);
                    }
                }
                let w = response_weights(&dummy_group(prompt, &rewards), cfg)?.weights[0];
                if w == 0.0 {
                    continue;
                }
                let g = grad_log_prob(params, prompt, first.as_ref().expect("group_size >= 1"));
                for ((s, q), x) in sum.iter_mut().zip(sq.iter_mut()).zip(g) {
                    let e = w * x;
                    *s += e;
                    *q += e * e;
                }
            }
            Ok((sum, sq))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for (s, q) in partials {
        for i in 0..dim {
            sum[i] += s[i];
            sq[i] += q[i];
        }
    }
    let nf = n_samples as f64;
    let mut coords = Vec::with_capacity(dim);
    let mut active = 0;
    for i in 0..dim {
        let mean = sum[i] / nf;
        let variance = ((sq[i] - nf * mean * mean) / (nf - 1.0)).max(0.0);
        let se = (variance / nf).sqrt();
        let diff = mean - target[i];
        let z = if se > 0.0 {
            active += 1;
            diff / se
        } else if diff.abs() <= 1e-12 {
            0.0
        } else {
            active += 1;
            f64::INFINITY.copysign(diff)
        };
        coords.push(CoordStat {
            index: i,
            mean,
            std_error: se,
            exact: target[i],
            z,
            variance,
        });
    }
    let threshold = bonferroni_threshold(active);
    let max_abs_z = coords.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(BiasReport {
        algo: cfg.kind.name().to_string(),
        group_size: cfg.group_size,
        n_samples,
        weight_given_correct: w_plus,
        weight_given_wrong: w_minus,
        success_probability: q,
        active,
        threshold,
        max_abs_z,
        within_3_sigma: max_abs_z <= 3.0,
        pass: max_abs_z <= threshold,
        coords,
    })
}

/// Two-sided z level keeping the family-wise rate of a single 3-sigma test.
pub fn bonferroni_threshold(m: usize) -> f64 {
    let normal = Normal::standard();
    let tail = 1.0 - normal.cdf(3.0);
    let z = normal.inverse_cdf(1.0 - tail / m.max(1) as f64);
    z.max(3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;
    use crate::types::{Answer, Difficulty};
    use approx::assert_abs_diff_eq;

    fn bare_prompt(tokens: Vec<u32>) -> PromptInstance {
        PromptInstance {
            task_id: "toy".into(),
            tokens: TokenSeq(tokens),
            ground_truth: Answer::Int(0),
            difficulty: Difficulty::Easy,
        }
    }

    #[test]
    fn two_token_vocab_enumeration() {
        let d = EnumerationDomain::for_vocab(2, 2, DEFAULT_BUDGET).unwrap();
        let seqs: Vec<Vec<u32>> = enumerate_responses(&d).into_iter().map(|s| s.0).collect();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1], vec![1]]);
        assert_eq!(d.sequence_count, 3);
    }

    #[test]
    fn counts_follow_closed_form() {
        for v in 2..6 {
            for l in 1..5 {
                let d = EnumerationDomain::for_vocab(v, l, DEFAULT_BUDGET).unwrap();
                assert_eq!(enumerate_responses(&d).len() as u64, d.sequence_count);
                let b = (v - 1) as u64;
                let full: u64 = (0..l as u32).map(|i| b.pow(i)).sum::<u64>() + b.pow(l as u32);
                assert_eq!(d.sequence_count, full);
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let err = EnumerationDomain::for_vocab(12, 8, DEFAULT_BUDGET).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let d = EnumerationDomain::for_vocab(4, 3, DEFAULT_BUDGET).unwrap();
        let seqs = enumerate_responses(&d);
        for (scale, seed) in [(0.0, 0), (1.0, 1), (3.0, 2)] {
            let p = PolicyParams::init(PolicySpec::tabular(4, 2), scale, &mut make_rng(seed, 0)).unwrap();
            let probs = sequence_probabilities(&p, &bare_prompt(vec![1, 2]), &seqs).unwrap();
            assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_single_token_objective() {
        let d = EnumerationDomain::for_vocab(4, 1, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::zeros(PolicySpec::tabular(4, 1)).unwrap();
        let j = exact_objective_with(&p, &d, &bare_prompt(vec![0]), |a| if a[0] == 2 { 1.0 } else { -1.0 }).unwrap();
        assert_abs_diff_eq!(j, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn two_token_gradient() {
        let d = EnumerationDomain::for_vocab(2, 1, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::zeros(PolicySpec::tabular(2, 1)).unwrap();
        let prompt = bare_prompt(vec![0]);
        let r = |a: &TokenSeq| if a[0] == 0 { 1.0 } else { -1.0 };
        let g = exact_gradient_with(&p, &d, &prompt, r).unwrap();
        // row for context token 0 starts at index 0
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -0.5, epsilon = 1e-15);
        assert!(g[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn saturated_policy_has_vanishing_gradient() {
        let d = EnumerationDomain::for_vocab(3, 1, DEFAULT_BUDGET).unwrap();
        let mut p = PolicyParams::zeros(PolicySpec::tabular(3, 1)).unwrap();
        p.theta[0] = 60.0;
        let g = exact_gradient_with(&p, &d, &bare_prompt(vec![0]), |a| if a[0] == 0 { 1.0 } else { -1.0 }).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-20));
    }

    #[test]
    fn finite_difference_examples() {
        let slope = [1.5, -2.0, 0.25];
        let lin = |x: &[f64]| x.iter().zip(&slope).map(|(a, b)| a * b).sum::<f64>();
        let g = finite_diff_gradient(lin, &[0.3, 0.1, -0.7], 1e-3).unwrap();
        for (a, b) in g.iter().zip(&slope) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let g = finite_diff_gradient(|_| 4.0, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let cubic = |x: &[f64]| x[0].powi(3);
        let e1 = (finite_diff_gradient(cubic, &[1.0], 1e-2).unwrap()[0] - 3.0).abs();
        let e2 = (finite_diff_gradient(cubic, &[1.0], 5e-3).unwrap()[0] - 3.0).abs();
        assert!((e1 / e2 - 4.0).abs() < 0.05, "{}", e1 / e2);
        assert!(finite_diff_gradient(|_| f64::NAN, &[0.0], 1e-5).is_err());
        assert!(finite_diff_gradient(lin, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let task = TaskSpec::add_mod(2, 0, 1);
        let d = EnumerationDomain::new(task.clone(), 3, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::init(PolicySpec::tabular(4, 2), 1.0, &mut make_rng(9, 0)).unwrap();
        let prompt = task.sample_prompt(&mut make_rng(9, 1));
        let g = exact_gradient(&p, &d, &prompt).unwrap();
        let spec = p.spec.clone();
        let fd = finite_diff_gradient(
            |theta| {
                let q = PolicyParams::from_theta(spec.clone(), theta.to_vec()).unwrap();
                exact_objective(&q, &d, &prompt).unwrap()
            },
            &p.theta,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn objective_is_two_p_minus_one() {
        let task = TaskSpec::add_mod(3, 0, 2);
        let d = EnumerationDomain::new(task.clone(), 3, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::init(PolicySpec::tabular(5, 2), 1.0, &mut make_rng(4, 0)).unwrap();
        let prompt = task.sample_prompt(&mut make_rng(4, 1));
        let j = exact_objective(&p, &d, &prompt).unwrap();
        let s = success_probability(&p, &d, &prompt).unwrap();
        assert_abs_diff_eq!(j, 2.0 * s - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unsolvable_prompt_has_objective_minus_one() {
        let task = TaskSpec::add_mod(3, 0, 2).with_unsolvable(1.0);
        let d = EnumerationDomain::new(task.clone(), 3, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::init(PolicySpec::tabular(5, 2), 1.0, &mut make_rng(5, 0)).unwrap();
        let prompt = task.sample_prompt(&mut make_rng(5, 1));
        assert_abs_diff_eq!(exact_objective(&p, &d, &prompt).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn conditional_weights_for_raw_and_centered() {
        let prompt = bare_prompt(vec![0]);
        let raw = AlgoConfig::new(AlgoKind::ReinforceToken).with_group_size(1);
        assert_eq!(conditional_weight(&raw, &prompt, true, 0.3).unwrap(), 1.0);
        assert_eq!(conditional_weight(&raw, &prompt, false, 0.3).unwrap(), -1.0);
        let mut mc = AlgoConfig::new(AlgoKind::ReinforceToken).with_group_size(2);
        mc.mean_center = true;
        // E[w|+] = (1 - q) * 1, E[w|-] = -q
        let q = 0.3;
        let wp = conditional_weight(&mc, &prompt, true, q).unwrap();
        let wm = conditional_weight(&mc, &prompt, false, q).unwrap();
        assert_abs_diff_eq!(wp - wm, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bonferroni_threshold_grows_with_m() {
        assert_abs_diff_eq!(bonferroni_threshold(1), 3.0, epsilon = 1e-9);
        let t = bonferroni_threshold(30);
        assert!(t > 3.5 && t < 4.5, "{t}");
    }

    #[test]
    fn bias_report_renders() {
        let task = TaskSpec::add_mod(2, 0, 1);
        let d = EnumerationDomain::new(task.clone(), 3, DEFAULT_BUDGET).unwrap();
        let p = PolicyParams::init(PolicySpec::tabular(4, 1), 1.0, &mut make_rng(1, 0)).unwrap();
        let prompt = task.sample_prompt(&mut make_rng(1, 1));
        let cfg = AlgoConfig::new(AlgoKind::ReinforceToken).with_group_size(1);
        let rep = estimator_bias_check(&cfg, &p, &d, &prompt, 2000, &mut make_rng(1, 2)).unwrap();
        let text = rep.to_string();
        assert!(text.contains("verdict="));
        let back: BiasReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back.coords.len(), p.theta.len());
        assert!(estimator_bias_check(&cfg, &p, &d, &prompt, 10, &mut make_rng(1, 2)).is_err());
    }
}
