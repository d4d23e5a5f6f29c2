//! Algorithm selection and the knobs that distinguish the variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoKind {
    /// Rejection sampling fine-tuning: plain log-likelihood on correct samples.
    Raft,
    /// RAFT with per-token importance ratios and clipping.
    RaftPp,
    /// Clipped Reinforce with a whole-sequence ratio.
    ReinforceSentence,
    /// Clipped Reinforce with per-token ratios.
    ReinforceToken,
    Grpo,
    /// Token-level Reinforce on raw rewards after dropping all-correct and
    /// all-wrong groups.
    ReinforceRej,
    /// Iterative DPO on one (correct, wrong) pair per prompt.
    DpoIter,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 7] = [
        AlgoKind::Raft,
        AlgoKind::RaftPp,
        AlgoKind::ReinforceSentence,
        AlgoKind::ReinforceToken,
        AlgoKind::Grpo,
        AlgoKind::ReinforceRej,
        AlgoKind::DpoIter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::Raft => "raft",
            AlgoKind::RaftPp => "raft_pp",
            AlgoKind::ReinforceSentence => "reinforce_sentence",
            AlgoKind::ReinforceToken => "reinforce_token",
            AlgoKind::Grpo => "grpo",
            AlgoKind::ReinforceRej => "reinforce_rej",
            AlgoKind::DpoIter => "dpo_iter",
        }
    }

    /// Kinds whose per-token objective is the clipped surrogate.
    pub fn is_token_clipped(self) -> bool {
        matches!(
            self,
            AlgoKind::RaftPp | AlgoKind::ReinforceToken | AlgoKind::Grpo | AlgoKind::ReinforceRej
        )
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown algorithm kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    None,
    DropAllCorrect,
    DropAllWrong,
    DropBoth,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::DropAllCorrect => "drop_all_correct",
            FilterKind::DropAllWrong => "drop_all_wrong",
            FilterKind::DropBoth => "drop_both",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FilterKind::None,
            FilterKind::DropAllCorrect,
            FilterKind::DropAllWrong,
            FilterKind::DropBoth,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidInput(format!("unknown filter `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub kind: AlgoKind,
    /// Lower clip width: ratios below `1 - eps_lo` are clipped.
    pub eps_lo: f64,
    /// Upper clip width: ratios above `1 + eps_hi` are clipped.
    pub eps_hi: f64,
    pub mean_center: bool,
    pub std_normalize: bool,
    /// Added to the group standard deviation before dividing.
    pub std_guard: f64,
    /// Use the (n-1) sample standard deviation instead of the population one.
    pub sample_std: bool,
    pub filter: FilterKind,
    pub group_size: usize,
    pub dpo_beta: f64,
    /// Bound on |log ratio| before exponentiation.
    pub ratio_clamp: f64,
    /// RAFT selects the argmax-reward responses even when every response is
    /// wrong, instead of dropping the prompt.
    pub raft_strict_argmax: bool,
    /// RAFT objective as the summed log-likelihood instead of the per-token
    /// mean.
    pub raft_sum_form: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig::new(AlgoKind::ReinforceToken)
    }
}

impl AlgoConfig {
    /// Canonical configuration for `kind`, with the flags that kind implies.
    pub fn new(kind: AlgoKind) -> Self {
        let mut cfg = AlgoConfig {
            kind,
            eps_lo: 0.2,
            eps_hi: 0.2,
            mean_center: false,
            std_normalize: false,
            std_guard: 1e-6,
            sample_std: false,
            filter: FilterKind::None,
            group_size: 4,
            dpo_beta: 0.1,
            ratio_clamp: 20.0,
            raft_strict_argmax: false,
            raft_sum_form: false,
        };
        match kind {
            AlgoKind::Grpo => {
                cfg.mean_center = true;
                cfg.std_normalize = true;
            }
            AlgoKind::ReinforceRej => cfg.filter = FilterKind::DropBoth,
            _ => {}
        }
        cfg
    }

    pub fn with_group_size(mut self, n: usize) -> Self {
        self.group_size = n;
        self
    }

    pub fn with_filter(mut self, filter: FilterKind) -> Self {
        self.filter = filter;
        self
    }

    pub fn with_clip(mut self, eps_lo: f64, eps_hi: f64) -> Self {
        self.eps_lo = eps_lo;
        self.eps_hi = eps_hi;
        self
    }

    /// Every invariant violation; empty when the config is usable.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: String| out.push(Violation { field, message });

        if self.group_size < 1 {
            push("group_size", "group_size must be at least 1".into());
        }
        for (field, eps) in [("eps_lo", self.eps_lo), ("eps_hi", self.eps_hi)] {
            if !eps.is_finite() || eps < 0.0 {
                push(field, format!("{field} must be finite and >= 0 (got {eps})"));
            }
        }
        if self.eps_lo >= 1.0 {
            push("eps_lo", format!("eps_lo must be < 1 (got {})", self.eps_lo));
        }
        if !self.std_guard.is_finite() || self.std_guard <= 0.0 {
            push("std_guard", format!("std_guard must be > 0 (got {})", self.std_guard));
        }
        if !self.dpo_beta.is_finite() || self.dpo_beta <= 0.0 {
            push("dpo_beta", format!("dpo_beta must be > 0 (got {})", self.dpo_beta));
        }
        if !self.ratio_clamp.is_finite() || self.ratio_clamp <= 0.0 {
            push("ratio_clamp", format!("ratio_clamp must be > 0 (got {})", self.ratio_clamp));
        }
        match self.kind {
            AlgoKind::Grpo => {
                if self.group_size <= 1 {
                    push("group_size", "grpo requires n>1".into());
                }
                if !self.mean_center || !self.std_normalize {
                    push(
                        "kind",
                        "grpo requires mean_center=true and std_normalize=true".into(),
                    );
                }
            }
            AlgoKind::ReinforceRej => {
                if self.filter != FilterKind::DropBoth {
                    push("filter", "reinforce_rej requires filter=drop_both".into());
                }
                if self.mean_center || self.std_normalize {
                    push(
                        "kind",
                        "reinforce_rej requires mean_center=false and std_normalize=false".into(),
                    );
                }
            }
            AlgoKind::DpoIter => {
                if self.group_size <= 1 {
                    push("group_size", "dpo_iter requires n>1 to form pairs".into());
                }
            }
            _ => {}
        }
        if self.std_normalize && self.group_size <= 1 && self.kind != AlgoKind::Grpo {
            push("group_size", "std_normalize requires n>1".into());
        }
        if self.sample_std && self.group_size <= 1 {
            push("sample_std", "sample standard deviation requires n>1".into());
        }
        out
    }

    /// Combinations that are valid but do not correspond to a studied variant.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.std_normalize && !self.mean_center && self.filter != FilterKind::DropBoth {
            out.push(
                "std_normalize without mean_center divides raw rewards by the group std; \
                 only the drop_both variant uses this combination"
                    .to_string(),
            );
        }
        if self.eps_hi < self.eps_lo {
            out.push(format!(
                "eps_hi ({}) is narrower than eps_lo ({})",
                self.eps_hi, self.eps_lo
            ));
        }
        if matches!(self.kind, AlgoKind::Raft | AlgoKind::RaftPp | AlgoKind::DpoIter)
            && (self.mean_center || self.std_normalize || self.filter != FilterKind::None)
        {
            out.push(format!(
                "mean_center/std_normalize/filter are ignored by {}",
                self.kind
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// `ok` (empty list) or every violated invariant.
pub fn validate_config(cfg: &AlgoConfig) -> Vec<Violation> {
    cfg.violations()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}
