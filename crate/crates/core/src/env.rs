//! Synthetic verifiable tasks.
//!
//! Every task shares one vocabulary layout: ids `0..symbols` are value
//! tokens (digits or sequence symbols), then the answer delimiter, then EOS.
//! A response is graded by taking the span after the last delimiter up to
//! EOS. Unsolvable prompts look exactly like solvable ones but their answer
//! lies outside what the value tokens can express.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{Answer, Difficulty, PromptGroup, PromptInstance, Reward, Rollout, ScoredResponse, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    /// Prompt `[a, b]`, answer `(a + b) mod m` as one digit.
    AddMod,
    /// Prompt is a symbol sequence, answer is the same sequence.
    CopySeq,
    /// Prompt is a symbol sequence, answer is its reversal.
    ReverseSeq,
    /// Prompt is a bit string, answer is its XOR.
    Parity,
}

impl TaskName {
    pub fn name(self) -> &'static str {
        match self {
            TaskName::AddMod => "add_mod",
            TaskName::CopySeq => "copy_seq",
            TaskName::ReverseSeq => "reverse_seq",
            TaskName::Parity => "parity",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskName::AddMod, TaskName::CopySeq, TaskName::ReverseSeq, TaskName::Parity]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    /// Number of value tokens: the modulus for add_mod, the alphabet for the
    /// sequence tasks, 2 for parity.
    pub symbols: usize,
    /// add_mod operand bounds, inclusive.
    pub operand_min: usize,
    pub operand_max: usize,
    /// Prompt length bounds for the sequence tasks, inclusive.
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub unsolvable_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FailureReason {
    WrongAnswer,
    NoDelimiter,
    Truncated,
    Malformed,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::WrongAnswer => "wrong_answer",
            FailureReason::NoDelimiter => "no_delimiter",
            FailureReason::Truncated => "truncated",
            FailureReason::Malformed => "malformed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifierReport {
    pub reward: Reward,
    pub parsed_answer: Option<Answer>,
    /// `None` exactly when the reward is +1.
    pub failure_reason: Option<FailureReason>,
}

impl VerifierReport {
    fn fail(reason: FailureReason, parsed: Option<Answer>) -> Self {
        VerifierReport {
            reward: Reward::Wrong,
            parsed_answer: parsed,
            failure_reason: Some(reason),
        }
    }
}

impl TaskSpec {
    pub fn add_mod(modulus: usize, operand_min: usize, operand_max: usize) -> Self {
        TaskSpec {
            name: TaskName::AddMod,
            symbols: modulus,
            operand_min,
            operand_max,
            prompt_len_min: 2,
            prompt_len_max: 2,
            unsolvable_fraction: 0.0,
        }
    }

    /// Modulus 10, operands 0..=4: every sum is below the modulus.
    pub fn add_mod_easy() -> Self {
        TaskSpec::add_mod(10, 0, 4)
    }

    /// Modulus 10, operands 0..=9: a mix of wrapping and non-wrapping sums.
    pub fn add_mod_mixed() -> Self {
        TaskSpec::add_mod(10, 0, 9)
    }

    pub fn sequence(name: TaskName, symbols: usize, len_min: usize, len_max: usize) -> Self {
        TaskSpec {
            name,
            symbols: if name == TaskName::Parity { 2 } else { symbols },
            operand_min: 0,
            operand_max: 0,
            prompt_len_min: len_min,
            prompt_len_max: len_max,
            unsolvable_fraction: 0.0,
        }
    }

    pub fn with_unsolvable(mut self, fraction: f64) -> Self {
        self.unsolvable_fraction = fraction;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols + 2
    }

    pub fn delim(&self) -> u32 {
        self.symbols as u32
    }

    pub fn eos(&self) -> u32 {
        self.symbols as u32 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(0.0..=1.0).contains(&self.unsolvable_fraction) {
            return bad(format!(
                "unsolvable_fraction must lie in [0, 1] (got {})",
                self.unsolvable_fraction
            ));
        }
        match self.name {
            TaskName::AddMod => {
                if self.symbols < 2 {
                    return bad("add_mod modulus must be at least 2".into());
                }
                if self.operand_min > self.operand_max || self.operand_max >= self.symbols {
                    return bad(format!(
                        "add_mod operands must satisfy min <= max < modulus (got {}..={}, modulus {})",
                        self.operand_min, self.operand_max, self.symbols
                    ));
                }
            }
            TaskName::Parity if self.symbols != 2 => return bad("parity uses exactly 2 symbols".into()),
            _ => {
                if self.symbols < 1 {
                    return bad("sequence tasks need at least one symbol".into());
                }
            }
        }
        if self.name != TaskName::AddMod
            && (self.prompt_len_min < 1 || self.prompt_len_min > self.prompt_len_max)
        {
            return bad(format!(
                "prompt length bounds must satisfy 1 <= min <= max (got {}..={})",
                self.prompt_len_min, self.prompt_len_max
            ));
        }
        Ok(())
    }

    /// Human-readable name of every vocabulary id.
    pub fn vocab_table(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.symbols).map(|i| i.to_string()).collect();
        names.push("[DELIM]".into());
        names.push("[EOS]".into());
        names
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        let table = self.vocab_table();
        tokens
            .iter()
            .map(|&t| table.get(t as usize).cloned().unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sample_prompt(&self, rng: &mut RngStream) -> PromptInstance {
        let unsolvable = rng.uniform() < self.unsolvable_fraction;
        let m = self.symbols;
        let (tokens, answer, hard) = match self.name {
            TaskName::AddMod => {
                let span = self.operand_max - self.operand_min + 1;
                let a = self.operand_min + rng.below(span);
                let b = self.operand_min + rng.below(span);
                let sum = a + b;
                (vec![a as u32, b as u32], Answer::Int((sum % m) as i64), sum >= m)
            }
            TaskName::CopySeq | TaskName::ReverseSeq | TaskName::Parity => {
                let len = self.prompt_len_min + rng.below(self.prompt_len_max - self.prompt_len_min + 1);
                let seq: Vec<u32> = (0..len).map(|_| rng.below(m) as u32).collect();
                let midpoint = (self.prompt_len_min + self.prompt_len_max) as f64 / 2.0;
                let hard = len as f64 > midpoint;
                let answer = match self.name {
                    TaskName::CopySeq => Answer::Seq(seq.clone()),
                    TaskName::ReverseSeq => Answer::Seq(seq.iter().rev().cloned().collect()),
                    _ => Answer::Int(seq.iter().fold(0, |acc, &b| acc ^ b) as i64),
                };
                (seq, answer, hard)
            }
        };
        let (ground_truth, difficulty) = if unsolvable {
            (self.unreachable(answer), Difficulty::Unsolvable)
        } else if hard {
            (answer, Difficulty::Hard)
        } else {
            (answer, Difficulty::Easy)
        };
        PromptInstance {
            task_id: self.name.name().to_string(),
            tokens: TokenSeq(tokens),
            ground_truth,
            difficulty,
        }
    }

    /// Moves an answer outside the expressible range.
    fn unreachable(&self, answer: Answer) -> Answer {
        match answer {
            Answer::Int(v) => Answer::Int(v + self.symbols as i64),
            Answer::Seq(mut s) => {
                // the id one past EOS is not a vocabulary token
                if let Some(last) = s.last_mut() {
                    *last = self.vocab_size() as u32;
                }
                Answer::Seq(s)
            }
        }
    }

    fn canonicalize(&self, span: &[u32]) -> Option<Answer> {
        if span.is_empty() || span.iter().any(|&t| t as usize >= self.symbols) {
            return None;
        }
        match self.name {
            TaskName::AddMod | TaskName::Parity => match span {
                [d] => Some(Answer::Int(*d as i64)),
                _ => None,
            },
            TaskName::CopySeq | TaskName::ReverseSeq => Some(Answer::Seq(span.to_vec())),
        }
    }

    pub fn verify(&self, prompt: &PromptInstance, response: &[u32]) -> VerifierReport {
        let eos_at = response.iter().position(|&t| t == self.eos());
        let body = &response[..eos_at.unwrap_or(response.len())];
        let Some(delim_at) = body.iter().rposition(|&t| t == self.delim()) else {
            return VerifierReport::fail(FailureReason::NoDelimiter, None);
        };
        if eos_at.is_none() {
            return VerifierReport::fail(FailureReason::Truncated, None);
        }
        let Some(parsed) = self.canonicalize(&body[delim_at + 1..]) else {
            return VerifierReport::fail(FailureReason::Malformed, None);
        };
        if parsed == prompt.ground_truth {
            VerifierReport {
                reward: Reward::Correct,
                parsed_answer: Some(parsed),
                failure_reason: None,
            }
        } else {
            VerifierReport::fail(FailureReason::WrongAnswer, Some(parsed))
        }
    }

    /// `[DELIM] answer [EOS]`, or `None` for unsolvable prompts.
    pub fn gold_response(&self, prompt: &PromptInstance) -> Option<TokenSeq> {
        if prompt.difficulty == Difficulty::Unsolvable {
            return None;
        }
        let mut out = vec![self.delim()];
        match &prompt.ground_truth {
            Answer::Int(v) => out.push(*v as u32),
            Answer::Seq(s) => out.extend_from_slice(s),
        }
        out.push(self.eos());
        Some(TokenSeq(out))
    }

    /// A well-formatted response with a uniformly random answer of the
    /// right shape. Used to teach a fresh policy the output format.
    pub fn format_response(&self, prompt: &PromptInstance, rng: &mut RngStream) -> TokenSeq {
        let answer_len = match &prompt.ground_truth {
            Answer::Int(_) => 1,
            Answer::Seq(s) => s.len(),
        };
        let mut out = vec![self.delim()];
        out.extend((0..answer_len).map(|_| rng.below(self.symbols) as u32));
        out.push(self.eos());
        TokenSeq(out)
    }

    pub fn score_group(&self, prompt: PromptInstance, rollouts: Vec<Rollout>) -> PromptGroup {
        let responses = rollouts
            .into_iter()
            .map(|r| {
                let reward = self.verify(&prompt, &r.tokens).reward;
                ScoredResponse::new(r, reward)
            })
            .collect();
        PromptGroup { prompt, responses }
    }
}

pub fn sample_prompt(task: &TaskSpec, rng: &mut RngStream) -> PromptInstance {
    task.sample_prompt(rng)
}

pub fn verify(task: &TaskSpec, prompt: &PromptInstance, response: &TokenSeq) -> VerifierReport {
    task.verify(prompt, response)
}

pub fn score_group(task: &TaskSpec, prompt: PromptInstance, rollouts: Vec<Rollout>) -> PromptGroup {
    task.score_group(prompt, rollouts)
}
