//! Surrogate objectives and their exact gradients.
//!
//! Every kind is written as a scalar objective to be *maximized*. Each
//! example's contribution reduces to per-token coefficients
//! `c_t = d(objective) / d(log pi(a_t))`, which are pushed back through the
//! softmax (`onehot(a_t) - p`) and the architecture's backward pass.

use super::{log_softmax, softmax, Forward, PolicyParams};
use crate::algo::{clipped_surrogate, is_clipped, sigmoid, softplus};
use crate::config::{AlgoConfig, AlgoKind};
use crate::error::{Error, Result};
use crate::types::TrainExample;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    /// Terms (tokens, or sequences for the sentence-level kind) whose
    /// clipped branch was active.
    pub clipped: usize,
    pub total: usize,
}

impl LossStats {
    pub fn clip_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }

    pub fn unclipped(&self) -> usize {
        self.total - self.clipped
    }

    pub fn merge(&mut self, other: LossStats) {
        self.clipped += other.clipped;
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    /// Mean surrogate value over examples (pairs, for DPO).
    pub loss: f64,
    /// Gradient of `loss` with respect to theta (ascent direction).
    pub grad: Vec<f64>,
    pub stats: LossStats,
}

struct Evaluated {
    forwards: Vec<Forward>,
    logprobs: Vec<f64>,
}

fn evaluate(params: &PolicyParams, ex: &TrainExample) -> Result<Evaluated> {
    let mut hist: Vec<u32> = ex.prompt.tokens.to_vec();
    let mut forwards = Vec::with_capacity(ex.response.len());
    let mut logprobs = Vec::with_capacity(ex.response.len());
    for &tok in ex.response.iter() {
        let fwd = params.forward(&hist);
        let lp = log_softmax(&fwd.logits)[tok as usize];
        if !lp.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-prob of token {tok} (logits {:?})",
                fwd.logits
            )));
        }
        logprobs.push(lp);
        forwards.push(fwd);
        hist.push(tok);
    }
    Ok(Evaluated { forwards, logprobs })
}

fn push_back(
    params: &PolicyParams,
    ex: &TrainExample,
    ev: &Evaluated,
    coeffs: &[f64],
    grad: &mut [f64],
) {
    for ((fwd, &tok), &c) in ev.forwards.iter().zip(ex.response.iter()).zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let mut dlogits = softmax(&fwd.logits);
        for d in dlogits.iter_mut() {
            *d *= -c;
        }
        dlogits[tok as usize] += c;
        params.backward(fwd, &dlogits, grad);
    }
}

fn check_example(params: &PolicyParams, ex: &TrainExample, needs_old: bool) -> Result<()> {
    let v = params.vocab_size();
    ex.prompt.tokens.validate(v)?;
    ex.response.validate(v)?;
    if ex.response.is_empty() {
        return Err(Error::InvalidInput("training example with empty response".into()));
    }
    if !ex.weight.is_finite() {
        return Err(Error::NonFinite("example weight".into()));
    }
    if needs_old && ex.old_logprobs.len() != ex.response.len() {
        return Err(Error::InvalidInput(format!(
            "old_logprobs has {} entries for a {}-token response",
            ex.old_logprobs.len(),
            ex.response.len()
        )));
    }
    Ok(())
}

/// Mean per-example surrogate and its gradient. `Ok(None)` signals an empty
/// minibatch (skip the update).
pub fn loss_grad(
    params: &PolicyParams,
    minibatch: &[TrainExample],
    cfg: &AlgoConfig,
) -> Result<Option<LossGrad>> {
    if minibatch.is_empty() {
        return Ok(None);
    }
    let mut grad = vec![0.0; params.theta.len()];
    let mut stats = LossStats::default();
    let mut total = 0.0;
    let count;

    match cfg.kind {
        AlgoKind::DpoIter => {
            if !minibatch.len().is_multiple_of(2) {
                return Err(Error::InvalidInput(
                    "dpo minibatch must hold (chosen, rejected) pairs".into(),
                ));
            }
            count = minibatch.len() / 2;
            let scale = 1.0 / count as f64;
            for pair in minibatch.chunks_exact(2) {
                let (plus, minus) = (&pair[0], &pair[1]);
                if !(plus.weight > 0.0 && minus.weight < 0.0) {
                    return Err(Error::InvalidInput(
                        "dpo pair must be (chosen with weight > 0, rejected with weight < 0)".into(),
                    ));
                }
                check_example(params, plus, true)?;
                check_example(params, minus, true)?;
                let ev_p = evaluate(params, plus)?;
                let ev_m = evaluate(params, minus)?;
                let ratio = |ev: &Evaluated, ex: &TrainExample| {
                    ev.logprobs.iter().sum::<f64>() - ex.old_logprobs.iter().sum::<f64>()
                };
                let z = cfg.dpo_beta * (ratio(&ev_p, plus) - ratio(&ev_m, minus));
                // objective ln sigmoid(z); d/dz = sigmoid(-z)
                total += -softplus(-z);
                let c = scale * cfg.dpo_beta * sigmoid(-z);
                push_back(params, plus, &ev_p, &vec![c; plus.response.len()], &mut grad);
                push_back(params, minus, &ev_m, &vec![-c; minus.response.len()], &mut grad);
            }
        }
        kind => {
            count = minibatch.len();
            let scale = 1.0 / count as f64;
            for ex in minibatch {
                check_example(params, ex, kind != AlgoKind::Raft)?;
                let ev = evaluate(params, ex)?;
                let len = ex.response.len() as f64;
                let w = ex.weight;
                let (value, coeffs) = match kind {
                    AlgoKind::Raft => {
                        let norm = if cfg.raft_sum_form { 1.0 } else { 1.0 / len };
                        let ll: f64 = ev.logprobs.iter().sum();
                        (w * norm * ll, vec![scale * w * norm; ev.logprobs.len()])
                    }
                    AlgoKind::ReinforceSentence => {
                        let diff: f64 = ev.logprobs.iter().sum::<f64>()
                            - ex.old_logprobs.iter().sum::<f64>();
                        let (s, active) = clamped_ratio(diff, cfg.ratio_clamp);
                        let clipped = is_clipped(s, w, cfg.eps_lo, cfg.eps_hi);
                        stats.total += 1;
                        stats.clipped += clipped as usize;
                        let c = if clipped || !active { 0.0 } else { scale * w * s };
                        (
                            clipped_surrogate(s, w, cfg.eps_lo, cfg.eps_hi),
                            vec![c; ev.logprobs.len()],
                        )
                    }
                    _ => {
                        let mut value = 0.0;
                        let mut coeffs = Vec::with_capacity(ev.logprobs.len());
                        for (lp, old) in ev.logprobs.iter().zip(&ex.old_logprobs) {
                            let (s, active) = clamped_ratio(lp - old, cfg.ratio_clamp);
                            let clipped = is_clipped(s, w, cfg.eps_lo, cfg.eps_hi);
                            stats.total += 1;
                            stats.clipped += clipped as usize;
                            value += clipped_surrogate(s, w, cfg.eps_lo, cfg.eps_hi) / len;
                            coeffs.push(if clipped || !active {
                                0.0
                            } else {
                                scale * w * s / len
                            });
                        }
                        (value, coeffs)
                    }
                };
                total += value;
                push_back(params, ex, &ev, &coeffs, &mut grad);
            }
        }
    }

    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    Ok(Some(LossGrad { loss, grad, stats }))
}

/// Ratio from a log-prob difference and whether it still depends on theta
/// (false once the clamp binds).
fn clamped_ratio(diff: f64, clamp: f64) -> (f64, bool) {
    let c = diff.clamp(-clamp, clamp);
    (c.exp(), c == diff)
}
