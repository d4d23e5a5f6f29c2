//! Domain types shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids of a prompt or response.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(&token) => Err(Error::InvalidToken { token, vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// Canonical answer value a verifier compares against.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Answer {
    Int(i64),
    Seq(Vec<u32>),
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Int(v) => write!(f, "{v}"),
            Answer::Seq(s) => {
                let parts: Vec<String> = s.iter().map(|t| t.to_string()).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    Unsolvable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptInstance {
    pub task_id: String,
    pub tokens: TokenSeq,
    pub ground_truth: Answer,
    pub difficulty: Difficulty,
}

/// Binary verifiable reward. No other value can be represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reward {
    Correct,
    Wrong,
}

impl Reward {
    pub fn value(self) -> f64 {
        match self {
            Reward::Correct => 1.0,
            Reward::Wrong => -1.0,
        }
    }

    pub fn from_correct(correct: bool) -> Self {
        if correct {
            Reward::Correct
        } else {
            Reward::Wrong
        }
    }

    pub fn is_correct(self) -> bool {
        self == Reward::Correct
    }
}

/// A sampled response before scoring. `logprobs` are per-token natural-log
/// probabilities under the sampling policy at temperature 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: TokenSeq,
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredResponse {
    pub tokens: TokenSeq,
    pub reward: Reward,
    pub old_logprobs: Vec<f64>,
    pub terminated: bool,
}

impl ScoredResponse {
    pub fn new(rollout: Rollout, reward: Reward) -> Self {
        ScoredResponse {
            tokens: rollout.tokens,
            reward,
            old_logprobs: rollout.logprobs,
            terminated: rollout.terminated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptGroup {
    pub prompt: PromptInstance,
    pub responses: Vec<ScoredResponse>,
}

impl PromptGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward.value()).collect()
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// One buffer entry. `weight` carries the raw reward, a group advantage, or
/// the RAFT selection indicator depending on the algorithm. For DPO the
/// examples come in adjacent (chosen, rejected) pairs with weights +1 / -1 and
/// `old_logprobs` hold the reference policy's log-probs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub prompt: PromptInstance,
    pub response: TokenSeq,
    pub weight: f64,
    pub old_logprobs: Vec<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(rename = "iter")]
    pub iteration: u64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    #[serde(rename = "entropy")]
    pub mean_entropy: f64,
    #[serde(rename = "kl")]
    pub kl_from_initial: f64,
    #[serde(rename = "clip_frac")]
    pub clip_fraction: f64,
    pub prompts_kept: u64,
    pub examples_kept: u64,
    #[serde(rename = "loss")]
    pub surrogate_loss: f64,
    #[serde(rename = "eval_acc", default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

impl MetricsRecord {
    /// JSONL keys in schema order.
    pub const FIELDS: [&'static str; 9] = [
        "iter",
        "train_acc",
        "entropy",
        "kl",
        "clip_frac",
        "prompts_kept",
        "examples_kept",
        "loss",
        "eval_acc",
    ];

    pub fn field(&self, name: &str) -> Option<Option<f64>> {
        let v = match name {
            "iter" => Some(self.iteration as f64),
            "train_acc" => Some(self.train_accuracy),
            "entropy" => Some(self.mean_entropy),
            "kl" => Some(self.kl_from_initial),
            "clip_frac" => Some(self.clip_fraction),
            "prompts_kept" => Some(self.prompts_kept as f64),
            "examples_kept" => Some(self.examples_kept as f64),
            "loss" => Some(self.surrogate_loss),
            "eval_acc" => self.eval_accuracy,
            _ => return None,
        };
        Some(v)
    }
}
