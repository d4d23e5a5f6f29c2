//! Per-group mathematics of every algorithm: which responses enter the
//! buffer, with what weight, and the scalar surrogate terms.

use crate::config::{AlgoConfig, AlgoKind, FilterKind};
use crate::error::{ensure_finite, Error, Result};
use crate::types::{PromptGroup, ScoredResponse};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDecision {
    pub keep_prompt: bool,
    pub weights: Vec<f64>,
    pub selected: Vec<bool>,
}

impl GroupDecision {
    fn dropped(n: usize) -> Self {
        GroupDecision {
            keep_prompt: false,
            weights: vec![0.0; n],
            selected: vec![false; n],
        }
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Selects exactly the reward +1 responses with weight 1; drops the prompt
/// when none is correct.
pub fn raft_select(group: &PromptGroup) -> GroupDecision {
    raft_select_with(group, false)
}

fn raft_select_with(group: &PromptGroup, strict_argmax: bool) -> GroupDecision {
    let n = group.len();
    let any_correct = group.responses.iter().any(|r| r.reward.is_correct());
    if !any_correct && !(strict_argmax && n > 0) {
        return GroupDecision::dropped(n);
    }
    // With binary rewards the argmax set is the correct responses when any
    // exist, otherwise every response.
    let selected: Vec<bool> = group
        .responses
        .iter()
        .map(|r| r.reward.is_correct() || !any_correct)
        .collect();
    let weights = selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    GroupDecision {
        keep_prompt: true,
        weights,
        selected,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// Rewards relative to the first one, so that constant offsets cancel exactly.
fn pivoted(xs: &[f64]) -> Vec<f64> {
    let p = xs.first().copied().unwrap_or(0.0);
    xs.iter().map(|x| x - p).collect()
}

/// Group standard deviation; population (divide by n) unless `sample`.
pub fn group_std(rewards: &[f64], sample: bool) -> f64 {
    let d = pivoted(rewards);
    let m = mean(&d);
    let ss: f64 = d.iter().map(|r| (r - m) * (r - m)).sum();
    let denom = if sample {
        rewards.len() as f64 - 1.0
    } else {
        rewards.len() as f64
    };
    (ss / denom).sqrt()
}

/// `(r_i - mean) / (population_std + std_guard)`.
pub fn grpo_advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>> {
    grpo_advantages_with(rewards, std_guard, false)
}

pub fn grpo_advantages_with(rewards: &[f64], std_guard: f64, sample_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let d = pivoted(rewards);
    let m = mean(&d);
    let denom = group_std(rewards, sample_std) + std_guard;
    Ok(d
        .iter()
        .map(|r| {
            let centered = r - m;
            if centered == 0.0 {
                0.0
            } else {
                centered / denom
            }
        })
        .collect())
}

pub fn mean_center(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let m = mean(rewards);
    rewards.iter().map(|r| r - m).collect()
}

/// Whether a group with these rewards survives `filter`.
pub fn keep_rewards(rewards: &[f64], filter: FilterKind) -> bool {
    let all_correct = rewards.iter().all(|&r| r > 0.0);
    let all_wrong = rewards.iter().all(|&r| r < 0.0);
    match filter {
        FilterKind::None => true,
        FilterKind::DropAllCorrect => !all_correct,
        FilterKind::DropAllWrong => !all_wrong,
        FilterKind::DropBoth => !(all_correct || all_wrong),
    }
}

pub fn prompt_filter(group: &PromptGroup, filter: FilterKind) -> bool {
    keep_rewards(&group.rewards(), filter)
}

/// Filtering then weight assignment as dictated by `cfg.kind`.
pub fn response_weights(group: &PromptGroup, cfg: &AlgoConfig) -> Result<GroupDecision> {
    let n = group.len();
    let rewards = group.rewards();
    match cfg.kind {
        AlgoKind::Raft | AlgoKind::RaftPp => Ok(raft_select_with(group, cfg.raft_strict_argmax)),
        AlgoKind::DpoIter => Ok(match dpo_pair_indices(group) {
            Some((plus, minus)) => {
                let mut d = GroupDecision::dropped(n);
                d.keep_prompt = true;
                d.selected[plus] = true;
                d.selected[minus] = true;
                d.weights[plus] = 1.0;
                d.weights[minus] = -1.0;
                d
            }
            None => GroupDecision::dropped(n),
        }),
        AlgoKind::Grpo => {
            if !keep_rewards(&rewards, cfg.filter) {
                return Ok(GroupDecision::dropped(n));
            }
            Ok(GroupDecision {
                keep_prompt: true,
                weights: grpo_advantages_with(&rewards, cfg.std_guard, cfg.sample_std)?,
                selected: vec![true; n],
            })
        }
        AlgoKind::ReinforceToken | AlgoKind::ReinforceSentence | AlgoKind::ReinforceRej => {
            let filter = if cfg.kind == AlgoKind::ReinforceRej {
                FilterKind::DropBoth
            } else {
                cfg.filter
            };
            if n == 0 || !keep_rewards(&rewards, filter) {
                return Ok(GroupDecision::dropped(n));
            }
            let mut weights = if cfg.mean_center {
                mean_center(&rewards)
            } else {
                rewards.clone()
            };
            if cfg.std_normalize {
                let denom = group_std(&rewards, cfg.sample_std) + cfg.std_guard;
                for w in weights.iter_mut() {
                    *w /= denom;
                }
            }
            Ok(GroupDecision {
                keep_prompt: true,
                weights,
                selected: vec![true; n],
            })
        }
    }
}

/// `min(s * w, clip(s, 1 - eps_lo, 1 + eps_hi) * w)`.
pub fn clipped_surrogate(s: f64, w: f64, eps_lo: f64, eps_hi: f64) -> f64 {
    let clipped = s.clamp(1.0 - eps_lo, 1.0 + eps_hi);
    (s * w).min(clipped * w)
}

/// True when the clipped branch is strictly smaller, i.e. the gradient
/// through this term is zero.
pub fn is_clipped(s: f64, w: f64, eps_lo: f64, eps_hi: f64) -> bool {
    s.clamp(1.0 - eps_lo, 1.0 + eps_hi) * w < s * w
}

/// `exp(clamp(logp_new - logp_old, -clamp, clamp))`.
pub fn sequence_ratio(logp_new: f64, logp_old: f64, clamp: f64) -> Result<f64> {
    ensure_finite(logp_new, "new log-prob")?;
    ensure_finite(logp_old, "old log-prob")?;
    if !(clamp > 0.0) {
        return Err(Error::InvalidInput(format!("ratio clamp must be > 0 (got {clamp})")));
    }
    Ok((logp_new - logp_old).clamp(-clamp, clamp).exp())
}

/// First correct and first wrong response, in sampling order.
pub fn dpo_pair(group: &PromptGroup) -> Option<(&ScoredResponse, &ScoredResponse)> {
    dpo_pair_indices(group).map(|(p, m)| (&group.responses[p], &group.responses[m]))
}

pub fn dpo_pair_indices(group: &PromptGroup) -> Option<(usize, usize)> {
    let plus = group.responses.iter().position(|r| r.reward.is_correct())?;
    let minus = group.responses.iter().position(|r| !r.reward.is_correct())?;
    Some((plus, minus))
}

/// `-ln sigmoid(beta * (logratio_plus - logratio_minus))`.
pub fn dpo_loss(logratio_plus: f64, logratio_minus: f64, beta: f64) -> f64 {
    softplus(-beta * (logratio_plus - logratio_minus))
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::types::{Answer, Difficulty, PromptInstance, Reward, TokenSeq};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn group(rewards: &[i32]) -> PromptGroup {
        PromptGroup {
            prompt: PromptInstance {
                task_id: "t".into(),
                tokens: TokenSeq(vec![0]),
                ground_truth: Answer::Int(0),
                difficulty: Difficulty::Easy,
            },
            responses: rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| ScoredResponse {
                    tokens: TokenSeq(vec![i as u32]),
                    reward: Reward::from_correct(r > 0),
                    old_logprobs: vec![-1.0],
                    terminated: true,
                })
                .collect(),
        }
    }

    #[test]
    fn raft_selects_correct_only() {
        let d = raft_select(&group(&[1, -1, 1, -1]));
        assert!(d.keep_prompt);
        assert_eq!(d.selected, vec![true, false, true, false]);
        assert_eq!(d.weights, vec![1.0, 0.0, 1.0, 0.0]);

        let d = raft_select(&group(&[-1, -1, -1, -1]));
        assert!(!d.keep_prompt);
        assert_eq!(d.selected_count(), 0);

        let d = raft_select(&group(&[1, 1, 1, 1]));
        assert_eq!(d.selected, vec![true; 4]);
    }

    #[test]
    fn raft_strict_argmax_keeps_all_wrong() {
        let mut cfg = AlgoConfig::new(AlgoKind::Raft);
        cfg.raft_strict_argmax = true;
        let d = response_weights(&group(&[-1, -1]), &cfg).unwrap();
        assert!(d.keep_prompt);
        assert_eq!(d.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn grpo_advantage_examples() {
        let a = grpo_advantages(&[1.0, 1.0, -1.0, -1.0], 1e-6).unwrap();
        for (x, e) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((x - e).abs() < 1e-5);
        }
        assert_eq!(grpo_advantages(&[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);

        // mean -0.5, population std sqrt(0.75)
        let a = grpo_advantages(&[1.0, -1.0, -1.0, -1.0], 0.0).unwrap();
        let s = 0.75f64.sqrt();
        let expect = [1.5 / s, -0.5 / s, -0.5 / s, -0.5 / s];
        for (x, e) in a.iter().zip(expect) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a[0], 1.7321, epsilon = 1e-4);
        assert_abs_diff_eq!(a[1], -0.5774, epsilon = 1e-4);

        assert!(grpo_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn sample_std_variant() {
        // sample std of [1, -1] is sqrt(2)
        let a = grpo_advantages_with(&[1.0, -1.0], 0.0, true).unwrap();
        assert_abs_diff_eq!(a[0], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn mean_center_examples() {
        assert_eq!(mean_center(&[1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(mean_center(&[1.0, 1.0, 1.0, -1.0]), vec![0.5, 0.5, 0.5, -1.5]);
        assert_eq!(mean_center(&[-1.0, -1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn filter_examples() {
        assert!(!prompt_filter(&group(&[-1, -1, -1, -1]), FilterKind::DropAllWrong));
        assert!(prompt_filter(&group(&[1, -1, -1, -1]), FilterKind::DropBoth));
        assert!(prompt_filter(&group(&[1, 1, 1, 1]), FilterKind::DropAllWrong));
        assert!(!prompt_filter(&group(&[1, 1, 1, 1]), FilterKind::DropAllCorrect));
        assert!(!prompt_filter(&group(&[1, 1]), FilterKind::DropBoth));
        assert!(prompt_filter(&group(&[-1, -1]), FilterKind::None));
    }

    #[test]
    fn response_weight_examples() {
        let grpo = AlgoConfig::new(AlgoKind::Grpo);
        let d = response_weights(&group(&[-1, -1, -1, -1]), &grpo).unwrap();
        assert_eq!(d.weights, vec![0.0; 4]);

        let rej = AlgoConfig::new(AlgoKind::ReinforceRej);
        let d = response_weights(&group(&[-1, -1, -1, -1]), &rej).unwrap();
        assert!(!d.keep_prompt);
        assert_eq!(d.selected_count(), 0);
        let d = response_weights(&group(&[1, -1, -1, 1]), &rej).unwrap();
        assert_eq!(d.weights, vec![1.0, -1.0, -1.0, 1.0]);

        let tok = AlgoConfig::new(AlgoKind::ReinforceToken);
        let d = response_weights(&group(&[1, -1]), &tok).unwrap();
        assert_eq!(d.weights, vec![1.0, -1.0]);
        assert!(d.keep_prompt);

        let mut centered = AlgoConfig::new(AlgoKind::ReinforceToken);
        centered.mean_center = true;
        let d = response_weights(&group(&[1, 1, 1, -1]), &centered).unwrap();
        assert_eq!(d.weights, vec![0.5, 0.5, 0.5, -1.5]);

        // Remove both + normalized std: raw reward over guarded std.
        let mut norm = AlgoConfig::new(AlgoKind::ReinforceToken).with_filter(FilterKind::DropBoth);
        norm.std_normalize = true;
        let d = response_weights(&group(&[1, -1]), &norm).unwrap();
        assert_abs_diff_eq!(d.weights[0], 1.0 / (1.0 + 1e-6), epsilon = 1e-15);

        let dpo = AlgoConfig::new(AlgoKind::DpoIter);
        let d = response_weights(&group(&[-1, 1, 1, -1]), &dpo).unwrap();
        assert_eq!(d.weights, vec![-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.selected, vec![true, true, false, false]);
    }

    #[test]
    fn clipped_surrogate_examples() {
        assert_abs_diff_eq!(clipped_surrogate(1.5, 1.0, 0.2, 0.2), 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped_surrogate(0.5, -1.0, 0.2, 0.2), -0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped_surrogate(1.25, 1.0, 0.2, 0.28), 1.25, epsilon = 1e-15);
        assert!(is_clipped(1.5, 1.0, 0.2, 0.2));
        assert!(is_clipped(0.5, -1.0, 0.2, 0.2));
        assert!(!is_clipped(0.5, 1.0, 0.2, 0.2));
        assert!(!is_clipped(1.1, 1.0, 0.2, 0.2));
    }

    #[test]
    fn sequence_ratio_examples() {
        assert_eq!(sequence_ratio(-2.0, -2.0, 20.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            sequence_ratio(2f64.ln() - 1.0, -1.0, 20.0).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        let r = sequence_ratio(1000.0, 0.0, 20.0).unwrap();
        assert!(r.is_finite());
        assert_eq!(r, 20f64.exp());
        assert!(sequence_ratio(f64::NAN, 0.0, 20.0).is_err());
        assert!(sequence_ratio(f64::NEG_INFINITY, 0.0, 20.0).is_err());
    }

    #[test]
    fn dpo_pair_examples() {
        let g = group(&[1, -1, 1, -1]);
        assert_eq!(dpo_pair_indices(&g), Some((0, 1)));
        let (c, r) = dpo_pair(&g).unwrap();
        assert!(c.reward.is_correct() && !r.reward.is_correct());
        assert_eq!(dpo_pair_indices(&group(&[1, 1, 1])), None);
        assert_eq!(dpo_pair_indices(&group(&[-1, -1])), None);
    }

    #[test]
    fn dpo_loss_examples() {
        assert_abs_diff_eq!(dpo_loss(0.3, 0.3, 0.1), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(dpo_loss(0.6931, 0.6931, 0.1), 0.6931, epsilon = 1e-4);
        // sigma(ln 3) = 0.75
        assert_abs_diff_eq!(dpo_loss(3f64.ln(), 0.0, 1.0), -(0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(dpo_loss(3f64.ln(), 0.0, 1.0), 0.2877, epsilon = 1e-4);
        let sat = dpo_loss(1e6, -1e6, 0.1);
        assert!(sat >= 0.0 && sat < 1e-300);
        assert!(dpo_loss(-1e6, 1e6, 0.1).is_finite());
    }

    proptest! {
        #[test]
        fn advantages_shift_invariant(rs in proptest::collection::vec(-1.0f64..1.0, 2..9), c in -100.0f64..100.0) {
            let a = grpo_advantages(&rs, 1e-6).unwrap();
            let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
            let b = grpo_advantages(&shifted, 1e-6).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10, "{} vs {}", x, y);
            }
        }

        #[test]
        fn binary_zero_advantage_iff_drop_both(bits in proptest::collection::vec(any::<bool>(), 2..9)) {
            let rs: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let a = grpo_advantages(&rs, 1e-6).unwrap();
            let all_zero = a.iter().all(|&x| x == 0.0);
            prop_assert_eq!(all_zero, !keep_rewards(&rs, FilterKind::DropBoth));
        }

        #[test]
        fn mean_center_sums_to_zero(rs in proptest::collection::vec(-1.0f64..1.0, 1..20)) {
            let s: f64 = mean_center(&rs).iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn clipped_surrogate_is_pessimistic(s in 0.01f64..5.0, w in -3.0f64..3.0, eps in 0.0f64..0.9) {
            let v = clipped_surrogate(s, w, eps, eps);
            prop_assert!(v <= s * w + 1e-15);
            if s >= 1.0 - eps && s <= 1.0 + eps {
                prop_assert_eq!(v, s * w);
            }
        }

        #[test]
        fn raft_never_selects_wrong(bits in proptest::collection::vec(any::<bool>(), 1..9)) {
            let rs: Vec<i32> = bits.iter().map(|&b| if b { 1 } else { -1 }).collect();
            let g = group(&rs);
            let d = raft_select(&g);
            for (sel, r) in d.selected.iter().zip(&g.responses) {
                prop_assert!(!sel || r.reward.is_correct());
            }
            prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn dpo_loss_positive_and_decreasing(x in -50.0f64..50.0, dx in 0.001f64..10.0, beta in 0.01f64..2.0) {
            let a = dpo_loss(x, 0.0, beta);
            let b = dpo_loss(x + dx, 0.0, beta);
            prop_assert!(a > 0.0);
            prop_assert!(b < a);
        }
    }
}
