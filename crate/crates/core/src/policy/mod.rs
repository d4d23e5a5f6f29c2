//! Tiny autoregressive softmax policies with exact analytic gradients.
//!
//! Two architectures share one interface: a tabular k-gram model whose
//! logits are a direct table lookup, and a small tanh MLP over the embedded
//! last-k-token window. Both condition on the concatenation of prompt and
//! response prefix, left-padded with a reserved BOS id (`vocab_size`) when
//! shorter than `k`. The last vocabulary id is end-of-sequence.

mod adamw;
mod checkpoint;
mod loss;
mod mlp;
mod tabular;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, OptState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use loss::{loss_grad, LossGrad, LossStats};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{PromptInstance, Rollout, TokenSeq};

const MAX_PARAMS: u64 = 1 << 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TabularKgram,
    Mlp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::TabularKgram => "tabular_kgram",
            Arch::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular_kgram" => Ok(Arch::TabularKgram),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::InvalidInput(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicySpec {
    pub arch: Arch,
    pub vocab_size: usize,
    pub context_len: usize,
    /// MLP only.
    pub hidden_sizes: Vec<usize>,
    /// MLP only.
    pub embed_dim: usize,
}

impl PolicySpec {
    pub fn tabular(vocab_size: usize, context_len: usize) -> Self {
        PolicySpec {
            arch: Arch::TabularKgram,
            vocab_size,
            context_len,
            hidden_sizes: Vec::new(),
            embed_dim: 0,
        }
    }

    pub fn mlp(vocab_size: usize, context_len: usize, embed_dim: usize, hidden: Vec<usize>) -> Self {
        PolicySpec {
            arch: Arch::Mlp,
            vocab_size,
            context_len,
            hidden_sizes: hidden,
            embed_dim,
        }
    }

    pub fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn eos(&self) -> u32 {
        self.vocab_size as u32 - 1
    }

    /// Number of distinct context windows, counting BOS padding.
    fn context_count(&self) -> Option<u64> {
        (self.vocab_size as u64 + 1).checked_pow(self.context_len as u32)
    }

    pub fn param_count(&self) -> usize {
        self.checked_param_count()
            .expect("parameter count overflow; validate the spec first") as usize
    }

    fn checked_param_count(&self) -> Option<u64> {
        let v = self.vocab_size as u64;
        match self.arch {
            Arch::TabularKgram => self.context_count()?.checked_mul(v),
            Arch::Mlp => {
                let mut total = (v + 1) * self.embed_dim as u64;
                let mut fan_in = (self.context_len * self.embed_dim) as u64;
                for &h in &self.hidden_sizes {
                    total += h as u64 * fan_in + h as u64;
                    fan_in = h as u64;
                }
                Some(total + v * fan_in + v)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidInput(
                "vocab_size must be at least 2 (one token plus EOS)".into(),
            ));
        }
        if self.context_len < 1 {
            return Err(Error::InvalidInput("context_len must be at least 1".into()));
        }
        if self.arch == Arch::Mlp {
            if self.embed_dim < 1 {
                return Err(Error::InvalidInput("mlp embed_dim must be at least 1".into()));
            }
            if self.hidden_sizes.contains(&0) {
                return Err(Error::InvalidInput("mlp hidden sizes must be positive".into()));
            }
        }
        match self.checked_param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(Error::InvalidInput(format!(
                "policy too large (limit {MAX_PARAMS} parameters)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub spec: PolicySpec,
    pub theta: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Forward {
    pub logits: Vec<f64>,
    window: Vec<u32>,
    activations: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn zeros(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(PolicyParams {
            spec,
            theta: vec![0.0; n],
        })
    }

    pub fn from_theta(spec: PolicySpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(Error::InvalidInput(format!(
                "theta has {} entries, spec needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        Ok(PolicyParams { spec, theta })
    }

    /// Random initialization. Tabular entries are uniform in `[-scale, scale]`
    /// (scale 0 gives the uniform policy); MLP weights are uniform in
    /// `[-scale, scale] / sqrt(fan_in)` with zero biases.
    pub fn init(spec: PolicySpec, scale: f64, rng: &mut RngStream) -> Result<Self> {
        let mut params = PolicyParams::zeros(spec)?;
        if scale == 0.0 {
            return Ok(params);
        }
        match params.spec.arch {
            Arch::TabularKgram => {
                for x in params.theta.iter_mut() {
                    *x = scale * (2.0 * rng.uniform() - 1.0);
                }
            }
            Arch::Mlp => mlp::init(&params.spec, &mut params.theta, scale, rng),
        }
        Ok(params)
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    /// Last `k` tokens of `history`, left-padded with BOS.
    pub(crate) fn window(&self, history: &[u32]) -> Vec<u32> {
        let k = self.spec.context_len;
        let mut w = vec![self.spec.bos(); k.saturating_sub(history.len())];
        w.extend_from_slice(&history[history.len().saturating_sub(k)..]);
        w
    }

    pub(crate) fn forward(&self, history: &[u32]) -> Forward {
        let window = self.window(history);
        match self.spec.arch {
            Arch::TabularKgram => Forward {
                logits: tabular::logits(&self.spec, &self.theta, &window).to_vec(),
                window,
                activations: Vec::new(),
            },
            Arch::Mlp => {
                let (logits, activations) = mlp::forward(&self.spec, &self.theta, &window);
                Forward {
                    logits,
                    window,
                    activations,
                }
            }
        }
    }

    /// Accumulates `d(scalar)/d(theta)` into `grad` given `d(scalar)/d(logits)`.
    pub(crate) fn backward(&self, fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        match self.spec.arch {
            Arch::TabularKgram => tabular::backward(&self.spec, &fwd.window, dlogits, grad),
            Arch::Mlp => mlp::backward(
                &self.spec,
                &self.theta,
                &fwd.window,
                &fwd.activations,
                dlogits,
                grad,
            ),
        }
    }

    /// Next-token logits after `context` (prompt followed by response prefix).
    pub fn logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        check_tokens(context, self.spec.vocab_size)?;
        Ok(self.forward(context).logits)
    }
}

pub fn logits(params: &PolicyParams, context: &TokenSeq) -> Result<Vec<f64>> {
    params.logits(context)
}

fn check_tokens(tokens: &[u32], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(Error::InvalidToken { token, vocab_size }),
        None => Ok(()),
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    let h: f64 = lp
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * l
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

fn history(prompt: &PromptInstance, response: &[u32]) -> Vec<u32> {
    let mut h = Vec::with_capacity(prompt.tokens.len() + response.len());
    h.extend_from_slice(&prompt.tokens);
    h.extend_from_slice(response);
    h
}

/// Total and per-token log-probability of `response` given `prompt`, at
/// temperature 1.
pub fn log_prob(
    params: &PolicyParams,
    prompt: &PromptInstance,
    response: &TokenSeq,
) -> Result<(f64, Vec<f64>)> {
    if response.is_empty() {
        return Err(Error::InvalidInput("log_prob of an empty response".into()));
    }
    let vocab = params.vocab_size();
    check_tokens(&prompt.tokens, vocab)?;
    check_tokens(response, vocab)?;
    let per_token = per_token_logprobs(params, prompt, response);
    Ok((per_token.iter().sum(), per_token))
}

pub(crate) fn per_token_logprobs(
    params: &PolicyParams,
    prompt: &PromptInstance,
    response: &[u32],
) -> Vec<f64> {
    let hist = history(prompt, response);
    let offset = prompt.tokens.len();
    response
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let fwd = params.forward(&hist[..offset + t]);
            log_softmax(&fwd.logits)[tok as usize]
        })
        .collect()
}

/// Ancestral sampling from `softmax(logits / temperature)` until EOS or
/// `max_len` tokens. Recorded log-probs are always at temperature 1.
pub fn sample_response(
    params: &PolicyParams,
    prompt: &PromptInstance,
    temperature: f64,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<Rollout> {
    if max_len < 1 {
        return Err(Error::InvalidInput("max_len must be at least 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive (got {temperature})"
        )));
    }
    check_tokens(&prompt.tokens, params.vocab_size())?;
    let eos = params.spec.eos();
    let mut hist: Vec<u32> = prompt.tokens.to_vec();
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut terminated = false;
    for _ in 0..max_len {
        let logits = params.forward(&hist).logits;
        let lp = log_softmax(&logits);
        let probs: Vec<f64> = if temperature == 1.0 {
            lp.iter().map(|l| l.exp()).collect()
        } else {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            softmax(&scaled)
        };
        let tok = draw(&probs, rng.uniform()) as u32;
        tokens.push(tok);
        logprobs.push(lp[tok as usize]);
        hist.push(tok);
        if tok == eos {
            terminated = true;
            break;
        }
    }
    Ok(Rollout {
        tokens: TokenSeq(tokens),
        logprobs,
        terminated,
    })
}

/// Inverse-CDF draw; never returns a zero-probability index.
fn draw(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Mean over response positions of the exact next-token entropy (nats).
/// For an empty response, the entropy of the first position.
pub fn token_entropy(params: &PolicyParams, prompt: &PromptInstance, response: &TokenSeq) -> f64 {
    let (sum, count) = entropy_sum(params, prompt, response);
    if count == 0 {
        entropy_of_logits(&params.forward(&prompt.tokens).logits)
    } else {
        sum / count as f64
    }
}

/// Sum of per-position entropies and the number of positions.
pub(crate) fn entropy_sum(
    params: &PolicyParams,
    prompt: &PromptInstance,
    response: &[u32],
) -> (f64, usize) {
    let hist = history(prompt, response);
    let offset = prompt.tokens.len();
    let sum = (0..response.len())
        .map(|t| entropy_of_logits(&params.forward(&hist[..offset + t]).logits))
        .sum();
    (sum, response.len())
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::rng::make_rng;
    use crate::types::{Answer, Difficulty};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn prompt(tokens: Vec<u32>) -> PromptInstance {
        PromptInstance {
            task_id: "test".into(),
            tokens: TokenSeq(tokens),
            ground_truth: Answer::Int(0),
            difficulty: Difficulty::Easy,
        }
    }

    fn random_params(spec: PolicySpec, seed: u64) -> PolicyParams {
        PolicyParams::init(spec, 1.0, &mut make_rng(seed, 0)).unwrap()
    }

    #[test]
    fn tabular_param_count_includes_bos_contexts() {
        let spec = PolicySpec::tabular(12, 3);
        assert_eq!(spec.param_count(), 13 * 13 * 13 * 12);
    }

    #[test]
    fn zero_tabular_logits_are_zero() {
        let p = PolicyParams::zeros(PolicySpec::tabular(5, 2)).unwrap();
        assert_eq!(p.logits(&[1, 2]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn tabular_bump_changes_one_logit() {
        let mut p = PolicyParams::zeros(PolicySpec::tabular(5, 2)).unwrap();
        let ctx = [1u32, 2];
        // context index for window [1, 2] in base 6.
        let idx = 6 + 2;
        p.theta[idx * 5 + 3] += 2.5;
        let l = p.logits(&ctx).unwrap();
        assert_eq!(l, vec![0.0, 0.0, 0.0, 2.5, 0.0]);
        assert_eq!(p.logits(&[2, 1]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn zero_mlp_logits_are_zero() {
        let p = PolicyParams::zeros(PolicySpec::mlp(6, 3, 4, vec![5, 3])).unwrap();
        assert_eq!(p.logits(&[0, 1, 2, 3]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn invalid_token_is_rejected() {
        let p = PolicyParams::zeros(PolicySpec::tabular(4, 1)).unwrap();
        assert!(matches!(p.logits(&[4]), Err(Error::InvalidToken { token: 4, .. })));
        let pr = prompt(vec![0]);
        assert!(log_prob(&p, &pr, &TokenSeq(vec![7])).is_err());
    }

    #[test]
    fn uniform_log_prob() {
        let p = PolicyParams::zeros(PolicySpec::tabular(10, 2)).unwrap();
        let (total, per) = log_prob(&p, &prompt(vec![1]), &TokenSeq(vec![3, 4, 9])).unwrap();
        assert_abs_diff_eq!(total, 3.0 * (0.1f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(total, -6.9078, epsilon = 1e-4);
        assert_eq!(per.len(), 3);

        let p2 = PolicyParams::zeros(PolicySpec::tabular(2, 1)).unwrap();
        let (t2, _) = log_prob(&p2, &prompt(vec![0]), &TokenSeq(vec![1])).unwrap();
        assert_abs_diff_eq!(t2, -0.6931, epsilon = 1e-4);
    }

    #[test]
    fn empty_response_log_prob_errors() {
        let p = PolicyParams::zeros(PolicySpec::tabular(3, 1)).unwrap();
        assert!(log_prob(&p, &prompt(vec![0]), &TokenSeq(vec![])).is_err());
    }

    #[test]
    fn log_prob_matches_direct_normalizer() {
        for spec in [PolicySpec::tabular(5, 2), PolicySpec::mlp(5, 2, 3, vec![4])] {
            let p = random_params(spec, 11);
            let pr = prompt(vec![0, 2]);
            let resp = TokenSeq(vec![1, 3, 3, 4]);
            let (total, per) = log_prob(&p, &pr, &resp).unwrap();
            // Oracle: direct exp-sum normalizer, no max shift.
            let mut hist = pr.tokens.to_vec();
            let mut expect = 0.0;
            for (t, &tok) in resp.iter().enumerate() {
                let l = p.logits(&hist).unwrap();
                let z: f64 = l.iter().map(|x| x.exp()).sum();
                let lp = l[tok as usize] - z.ln();
                assert_abs_diff_eq!(per[t], lp, epsilon = 1e-12);
                expect += lp;
                hist.push(tok);
            }
            assert_abs_diff_eq!(total, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn forced_eos_terminates_immediately() {
        let mut p = PolicyParams::zeros(PolicySpec::tabular(4, 1)).unwrap();
        let pr = prompt(vec![1]);
        let window_idx = 1; // window [1]
        p.theta[window_idx * 4 + 3] = 20.0;
        let r = sample_response(&p, &pr, 1.0, 5, &mut make_rng(0, 0)).unwrap();
        assert_eq!(r.tokens.0, vec![3]);
        assert!(r.terminated);
    }

    #[test]
    fn max_len_one_truncates() {
        let p = PolicyParams::zeros(PolicySpec::tabular(4, 1)).unwrap();
        let mut rng = make_rng(3, 0);
        for _ in 0..100 {
            let r = sample_response(&p, &prompt(vec![0]), 1.0, 1, &mut rng).unwrap();
            assert_eq!(r.tokens.len(), 1);
            assert_eq!(r.terminated, r.tokens[0] == 3);
        }
    }

    #[test]
    fn uniform_first_token_frequencies() {
        let p = PolicyParams::zeros(PolicySpec::tabular(4, 1)).unwrap();
        let mut rng = make_rng(5, 0);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let r = sample_response(&p, &prompt(vec![0]), 1.0, 3, &mut rng).unwrap();
            counts[r.tokens[0] as usize] += 1;
        }
        // Binomial(n, 1/4): sigma = sqrt(n p (1-p)).
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 0.25 * n as f64).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn temperature_does_not_change_recorded_logprobs() {
        let p = random_params(PolicySpec::tabular(5, 2), 2);
        let pr = prompt(vec![1, 2]);
        let r = sample_response(&p, &pr, 0.5, 6, &mut make_rng(9, 0)).unwrap();
        let (_, per) = log_prob(&p, &pr, &r.tokens).unwrap();
        for (a, b) in per.iter().zip(&r.logprobs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        let p = PolicyParams::zeros(PolicySpec::tabular(10, 1)).unwrap();
        let pr = prompt(vec![0]);
        assert_abs_diff_eq!(
            token_entropy(&p, &pr, &TokenSeq(vec![1, 2])),
            (10f64).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(token_entropy(&p, &pr, &TokenSeq(vec![1])), 2.3026, epsilon = 1e-4);

        let mut sharp = PolicyParams::zeros(PolicySpec::tabular(10, 1)).unwrap();
        sharp.theta[4] = 50.0;
        assert!(token_entropy(&sharp, &pr, &TokenSeq(vec![4])) < 1e-15);

        // p = (1/4, 3/4): H = -(0.25 ln 0.25 + 0.75 ln 0.75).
        let h = entropy_of_logits(&[0.0, 3f64.ln()]);
        let expect = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert_abs_diff_eq!(h, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.5623, epsilon = 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(seed in 0u64..1000, ctx in proptest::collection::vec(0u32..6, 0..5)) {
            for spec in [PolicySpec::tabular(6, 2), PolicySpec::mlp(6, 3, 2, vec![4])] {
                let p = random_params(spec, seed);
                let lp = log_softmax(&p.logits(&ctx).unwrap());
                let total: f64 = lp.iter().map(|l| l.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sampled_logprobs_match_log_prob(seed in 0u64..1000) {
            for spec in [PolicySpec::tabular(5, 2), PolicySpec::mlp(5, 2, 3, vec![4])] {
                let p = random_params(spec, seed);
                let pr = prompt(vec![0, 1]);
                let r = sample_response(&p, &pr, 1.0, 8, &mut make_rng(seed, 1)).unwrap();
                let (total, _) = log_prob(&p, &pr, &r.tokens).unwrap();
                let recorded: f64 = r.logprobs.iter().sum();
                prop_assert!((total - recorded).abs() < 1e-10);
            }
        }

        #[test]
        fn entropy_bounded(seed in 0u64..1000, resp in proptest::collection::vec(0u32..7, 1..6)) {
            let p = PolicyParams::init(PolicySpec::tabular(7, 2), 5.0, &mut make_rng(seed, 0)).unwrap();
            let h = token_entropy(&p, &prompt(vec![2]), &TokenSeq(resp));
            prop_assert!(h >= 0.0 && h <= (7f64).ln() + 1e-12);
        }
    }
}
