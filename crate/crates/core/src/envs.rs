//! Deterministic toy "reasoning" tasks with verification-based terminal rewards.
//!
//! Every task shares one small vocabulary. A prompt encodes the question; a
//! response is free-form, and only the segment after the *last* answer marker
//! is checked against the ground truth. The reward is 1 for an exact match and
//! 0 otherwise, malformed responses included.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::SlotStatus;

/// Vocabulary index.
pub type Token = u8;

pub mod vocab {
    use super::Token;

    /// Digits occupy ids `0..=9` and stand for their own value.
    pub const PLUS: Token = 10;
    pub const XOR: Token = 11;
    pub const MOD: Token = 12;
    pub const LPAREN: Token = 13;
    pub const RPAREN: Token = 14;
    pub const LBRACK: Token = 15;
    pub const RBRACK: Token = 16;
    pub const EQUALS: Token = 17;
    /// Answer marker; the answer is whatever follows its last occurrence.
    pub const MARKER: Token = 18;
    pub const EOS: Token = 19;
    pub const PAD: Token = 20;

    pub const SIZE: usize = 21;

    pub fn is_digit(token: Token) -> bool {
        token <= 9
    }

    pub fn symbol(token: Token) -> &'static str {
        const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
        match token {
            0..=9 => DIGITS[token as usize],
            PLUS => "+",
            XOR => "^",
            MOD => "%",
            LPAREN => "(",
            RPAREN => ")",
            LBRACK => "[",
            RBRACK => "]",
            EQUALS => "=",
            MARKER => "#",
            EOS => "<eos>",
            PAD => "<pad>",
            _ => "?",
        }
    }
}

pub const MAX_PROMPT_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ParityChain,
    ModularSum,
    BracketBalance,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::ParityChain,
        TaskKind::ModularSum,
        TaskKind::BracketBalance,
    ];

    pub fn index(self) -> usize {
        match self {
            TaskKind::ParityChain => 0,
            TaskKind::ModularSum => 1,
            TaskKind::BracketBalance => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ParityChain => "parity_chain",
            TaskKind::ModularSum => "modular_sum",
            TaskKind::BracketBalance => "bracket_balance",
        }
    }

    fn salt(self) -> u64 {
        match self {
            TaskKind::ParityChain => 0x7061_7269_7479,
            TaskKind::ModularSum => 0x6d6f_6473_756d,
            TaskKind::BracketBalance => 0x6272_6163_6b74,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("task_kind", format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_kind: TaskKind,
    pub seed: u64,
    pub prompt_tokens: Vec<Token>,
    pub ground_truth: Vec<Token>,
}

impl TaskInstance {
    /// The shortest response that earns reward 1: marker, answer, EOS.
    pub fn canonical_response(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.ground_truth.len() + 2);
        out.push(vocab::MARKER);
        out.extend_from_slice(&self.ground_truth);
        out.push(vocab::EOS);
        out
    }
}

/// Builds the task instance for `(task_kind, seed)`; identical inputs always
/// yield identical instances.
pub fn sample_task(task_kind: TaskKind, seed: u64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ task_kind.salt());
    let (prompt_tokens, ground_truth) = match task_kind {
        TaskKind::ParityChain => parity_chain(&mut rng),
        TaskKind::ModularSum => modular_sum(&mut rng),
        TaskKind::BracketBalance => bracket_balance(&mut rng),
    };
    debug_assert!(prompt_tokens.len() <= MAX_PROMPT_LEN);
    TaskInstance {
        task_kind,
        seed,
        prompt_tokens,
        ground_truth,
    }
}

/// Same as [`sample_task`] but parses the kind from its name.
pub fn sample_task_named(task_kind: &str, seed: u64) -> Result<TaskInstance> {
    Ok(sample_task(task_kind.parse()?, seed))
}

// `b1 ^ b2 ^ b3 =` over random bits. The answer is the chain of running
// parities p1 = b1, p2 = b1 ^ b2, p3 = b1 ^ b2 ^ b3 read as the binary number
// p1 p2 p3 and written as one decimal digit, so there are 8 possible answers.
fn parity_chain(rng: &mut ChaCha8Rng) -> (Vec<Token>, Vec<Token>) {
    let bits: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..2));
    let mut prompt = Vec::with_capacity(6);
    let mut parity = 0;
    let mut answer = 0;
    for (i, &b) in bits.iter().enumerate() {
        if i > 0 {
            prompt.push(vocab::XOR);
        }
        prompt.push(b);
        parity ^= b;
        answer = answer << 1 | parity;
    }
    prompt.push(vocab::EQUALS);
    (prompt, vec![answer])
}

// `d1 + d2 (+ d3 (+ d4)) % 1 m =`, answer: the sum modulo 10..=19 in decimal.
fn modular_sum(rng: &mut ChaCha8Rng) -> (Vec<Token>, Vec<Token>) {
    let k: usize = rng.random_range(2..=4);
    let modulus: u32 = rng.random_range(10..=19);
    let mut prompt = Vec::with_capacity(2 * k + 3);
    let mut sum = 0u32;
    for i in 0..k {
        if i > 0 {
            prompt.push(vocab::PLUS);
        }
        let d: u8 = rng.random_range(0..10);
        sum += d as u32;
        prompt.push(d);
    }
    prompt.push(vocab::MOD);
    prompt.extend(decimal_digits(modulus));
    prompt.push(vocab::EQUALS);
    (prompt, decimal_digits(sum % modulus))
}

// A valid, still-open bracket prefix; answer: its minimal closing suffix.
fn bracket_balance(rng: &mut ChaCha8Rng) -> (Vec<Token>, Vec<Token>) {
    let n: usize = rng.random_range(4..=12);
    let mut prompt = Vec::with_capacity(n + 1);
    let mut stack: Vec<Token> = Vec::new();
    for i in 0..n {
        let last = i + 1 == n;
        let can_pop = !stack.is_empty() && !(last && stack.len() == 1);
        if can_pop && rng.random_bool(0.5) {
            let open = stack.pop().expect("non-empty stack");
            prompt.push(closer(open));
        } else {
            let open = if rng.random_bool(0.5) {
                vocab::LPAREN
            } else {
                vocab::LBRACK
            };
            stack.push(open);
            prompt.push(open);
        }
    }
    prompt.push(vocab::EQUALS);
    let answer = stack.iter().rev().map(|&t| closer(t)).collect();
    (prompt, answer)
}

fn closer(open: Token) -> Token {
    if open == vocab::LPAREN {
        vocab::RPAREN
    } else {
        vocab::RBRACK
    }
}

fn decimal_digits(value: u32) -> Vec<Token> {
    value.to_string().bytes().map(|b| b - b'0').collect()
}

/// `s_t`: the prompt plus everything generated so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub prompt_tokens: Vec<Token>,
    pub generated_tokens: Vec<Token>,
    pub max_len: usize,
    pub status: SlotStatus,
}

impl EnvState {
    pub fn new(instance: &TaskInstance, max_len: usize) -> Self {
        EnvState {
            prompt_tokens: instance.prompt_tokens.clone(),
            generated_tokens: Vec::new(),
            max_len,
            status: SlotStatus::Generating,
        }
    }

    pub fn finished(&self) -> bool {
        self.status.is_finished()
    }

    /// Appends one token. Finishes on EOS or when the response reaches `max_len`.
    pub fn step(&mut self, token: Token) -> Result<bool> {
        if self.finished() {
            return Err(Error::StepAfterTerminal);
        }
        self.generated_tokens.push(token);
        self.status = status_after(token, self.generated_tokens.len(), self.max_len);
        Ok(self.finished())
    }
}

/// Status of a response after emitting `token` as its `len`-th token.
pub fn status_after(token: Token, len: usize, max_len: usize) -> SlotStatus {
    if token == vocab::EOS {
        SlotStatus::FinishedEos
    } else if len >= max_len {
        SlotStatus::FinishedMaxlen
    } else {
        SlotStatus::Generating
    }
}

pub fn env_step(state: &EnvState, token: Token) -> Result<(EnvState, bool)> {
    let mut next = state.clone();
    let finished = next.step(token)?;
    Ok((next, finished))
}

/// Extracts the answer segment: tokens after the last marker, minus a trailing EOS.
pub fn extract_answer(response: &[Token]) -> Option<&[Token]> {
    let pos = response.iter().rposition(|&t| t == vocab::MARKER)?;
    let tail = &response[pos + 1..];
    Some(match tail.split_last() {
        Some((&vocab::EOS, rest)) => rest,
        _ => tail,
    })
}

pub fn verify_reward(instance: &TaskInstance, response: &[Token]) -> f64 {
    match extract_answer(response) {
        Some(answer) if answer == instance.ground_truth.as_slice() => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    pub task_kind: TaskKind,
    pub seed: u64,
}

impl TaskRef {
    pub fn instance(&self) -> TaskInstance {
        sample_task(self.task_kind, self.seed)
    }
}

/// Train/eval split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub train: Vec<TaskRef>,
    pub eval: Vec<TaskRef>,
}

impl TaskManifest {
    /// A manifest over one task kind: training seeds have the top bit clear,
    /// evaluation seeds have it set, so the two splits never share a seed.
    pub fn generate(task_kind: TaskKind, seed: u64, n_train: usize, n_eval: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = (0..n_train)
            .map(|_| TaskRef {
                task_kind,
                seed: rng.random::<u64>() >> 1,
            })
            .collect();
        let eval = eval_refs(task_kind, seed, n_eval);
        TaskManifest { train, eval }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::config("train", "training split is empty"));
        }
        let train: std::collections::HashSet<_> = self.train.iter().collect();
        if let Some(dup) = self.eval.iter().find(|r| train.contains(r)) {
            return Err(Error::config(
                "eval",
                format!("eval task ({}, {}) also in train split", dup.task_kind, dup.seed),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: TaskManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Evaluation split seeds: top bit set, disjoint from any training seed.
pub fn eval_refs(task_kind: TaskKind, seed: u64, n: usize) -> Vec<TaskRef> {
    let base = (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 20) << 16;
    (0..n as u64)
        .map(|i| TaskRef {
            task_kind,
            seed: (1 << 63) | ((base + i) & !(1 << 63)),
        })
        .collect()
}
