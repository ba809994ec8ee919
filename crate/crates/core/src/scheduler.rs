//! Successive batching over `K` persistent slots and per-step token filtering.
//!
//! Each training step every slot generates up to `window_len` tokens from a
//! frozen snapshot. A slot that finishes keeps its sequence until the start of
//! the next step, when a fresh prompt takes its place. After generation the
//! step's tokens are split into two training sets:
//!
//! * policy tokens: tokens generated in this window, minus the latest
//!   `exclusion_m` tokens of every still-unfinished slot;
//! * value tokens: every token of every sequence that finished in this window.
//!
//! A token therefore enters each set at most once over a run.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{egae_window, GaeConfig};
use crate::envs::{self, status_after, verify_reward, TaskInstance, TaskKind, TaskRef, Token};
use crate::error::{Error, Result, TrainTarget};
use crate::nn::{Featurizer, ParamSnapshot};
use crate::traj::{SequenceSlot, SlotStatus, StepRecord, WindowBatch, WindowEntry};

/// Deterministic 64-bit mixer used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    h
}

/// What a slot needs to know to produce its next token.
#[derive(Debug, Clone, Copy)]
pub struct ActQuery<'a> {
    pub slot_id: usize,
    pub sequence_id: u64,
    pub task: &'a TaskInstance,
    pub generated: &'a [Token],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub token: Token,
    pub logprob: f64,
    pub value: f64,
}

/// Source of tokens during generation: normally a frozen parameter snapshot,
/// or a script in tests.
pub trait Behavior {
    fn snapshot_id(&self) -> u64;
    fn act(&self, query: &ActQuery<'_>, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// Samples from the snapshot policy at temperature 1 and records the
/// snapshot value of the state.
pub struct SnapshotBehavior<'a> {
    pub snapshot: &'a ParamSnapshot,
    pub featurizer: Featurizer,
}

impl Behavior for SnapshotBehavior<'_> {
    fn snapshot_id(&self) -> u64 {
        self.snapshot.id()
    }

    fn act(&self, q: &ActQuery<'_>, rng: &mut ChaCha8Rng) -> Result<Action> {
        let x = self
            .featurizer
            .encode(q.task.task_kind, &q.task.prompt_tokens, q.generated);
        let logprobs = self.snapshot.policy().logprobs(&x)?;
        let token = sample_index(&logprobs, rng) as Token;
        Ok(Action {
            token,
            logprob: logprobs[token as usize],
            value: self.snapshot.value().predict(&x)?,
        })
    }
}

/// Inverse-CDF draw from a log-probability vector.
pub fn sample_index(logprobs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u beyond the accumulated mass: take the last token with mass
    logprobs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(logprobs.len() - 1)
}

enum Source {
    Generated { kind: TaskKind, rng: ChaCha8Rng },
    Cycle { refs: Vec<TaskRef>, pos: usize },
    Finite(VecDeque<TaskInstance>),
}

/// Deterministic stream of prompts; each prompt is yielded
/// `samples_per_prompt` times in a row.
pub struct PromptStream {
    source: Source,
    samples_per_prompt: usize,
    pending: Option<(TaskInstance, usize)>,
}

impl PromptStream {
    /// Endless stream of fresh instances; seeds keep the top bit clear so they
    /// never collide with evaluation seeds.
    pub fn generated(kind: TaskKind, seed: u64, samples_per_prompt: usize) -> Self {
        Self::with_source(
            Source::Generated {
                kind,
                rng: ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7072_6f6d_7074])),
            },
            samples_per_prompt,
        )
    }

    /// Cycles through a manifest's training split forever.
    pub fn cycle(refs: Vec<TaskRef>, samples_per_prompt: usize) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::config("train", "training split is empty"));
        }
        Ok(Self::with_source(
            Source::Cycle { refs, pos: 0 },
            samples_per_prompt,
        ))
    }

    pub fn finite(instances: impl IntoIterator<Item = TaskInstance>) -> Self {
        Self::with_source(Source::Finite(instances.into_iter().collect()), 1)
    }

    fn with_source(source: Source, samples_per_prompt: usize) -> Self {
        PromptStream {
            source,
            samples_per_prompt: samples_per_prompt.max(1),
            pending: None,
        }
    }

    pub fn next_prompt(&mut self) -> Result<TaskInstance> {
        if let Some((inst, left)) = self.pending.take() {
            if left > 1 {
                self.pending = Some((inst.clone(), left - 1));
            }
            return Ok(inst);
        }
        let inst = match &mut self.source {
            Source::Generated { kind, rng } => envs::sample_task(*kind, rng.random::<u64>() >> 1),
            Source::Cycle { refs, pos } => {
                let r = refs[*pos % refs.len()];
                *pos += 1;
                r.instance()
            }
            Source::Finite(queue) => queue.pop_front().ok_or(Error::PromptStreamExhausted)?,
        };
        if self.samples_per_prompt > 1 {
            self.pending = Some((inst.clone(), self.samples_per_prompt - 1));
        }
        Ok(inst)
    }
}

/// One line of the scheduler trace: what a slot did in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub window_id: u64,
    pub slot_id: usize,
    pub sequence_id: u64,
    pub prompt_seed: u64,
    pub birth_window: u64,
    /// Sequence evicted from this slot at the start of the window.
    pub replaced: Option<u64>,
    pub start: usize,
    pub generated: usize,
    pub finished: Option<SlotStatus>,
    pub policy_tokens: usize,
    pub value_tokens: usize,
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyToken {
    pub slot_id: usize,
    pub index: usize,
    pub advantage: f64,
    pub logprob_behavior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueToken {
    pub slot_id: usize,
    pub index: usize,
    pub return_target: f64,
}

/// Tokens eligible for the policy and value updates of one step, ordered by
/// slot then step index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSet {
    pub window_id: u64,
    pub policy: Vec<PolicyToken>,
    pub value: Vec<ValueToken>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub slots: usize,
    pub window_len: usize,
    pub max_len: usize,
    pub exclusion_m: usize,
    pub seed: u64,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::config("K", "need at least one slot"));
        }
        if self.window_len == 0 {
            return Err(Error::config("l", "window length must be positive"));
        }
        if self.window_len > self.max_len {
            return Err(Error::config(
                "l",
                format!("window length {} exceeds max length {}", self.window_len, self.max_len),
            ));
        }
        Ok(())
    }
}

pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub slots: Vec<SequenceSlot>,
    /// Id of the next window to be generated.
    pub window_counter: u64,
    prompt_stream: PromptStream,
    next_sequence_id: u64,
    pending_replaced: Vec<Option<u64>>,
    trace: Vec<TraceRecord>,
    /// Sequences evicted by `replace_finished`, kept for auditing when enabled.
    pub retired: Vec<SequenceSlot>,
    pub keep_retired: bool,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig, mut prompt_stream: PromptStream) -> Result<Self> {
        config.validate()?;
        let slots = (0..config.slots)
            .map(|i| Ok(SequenceSlot::new(i, i as u64, prompt_stream.next_prompt()?, 0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SchedulerState {
            config,
            slots,
            window_counter: 0,
            prompt_stream,
            next_sequence_id: config.slots as u64,
            pending_replaced: vec![None; config.slots],
            trace: Vec::new(),
            retired: Vec::new(),
            keep_retired: false,
        })
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Swaps every finished slot for a fresh prompt born in the upcoming window.
    /// Returns the evicted sequences' ids.
    pub fn replace_finished(&mut self) -> Result<Vec<u64>> {
        let mut evicted = Vec::new();
        for i in 0..self.slots.len() {
            if !self.slots[i].is_finished() {
                continue;
            }
            let prompt = self.prompt_stream.next_prompt()?;
            let fresh = SequenceSlot::new(i, self.next_sequence_id, prompt, self.window_counter);
            self.next_sequence_id += 1;
            let old = std::mem::replace(&mut self.slots[i], fresh);
            self.pending_replaced[i] = Some(old.sequence_id);
            evicted.push(old.sequence_id);
            if self.keep_retired {
                self.retired.push(old);
            }
        }
        Ok(evicted)
    }

    /// Generates up to `window_len` tokens per slot with `behavior`. Each slot
    /// draws from its own RNG stream keyed by (seed, window, slot), so the
    /// batch is independent of generation order.
    pub fn advance_window(&mut self, behavior: &dyn Behavior) -> Result<WindowBatch> {
        let window_id = self.window_counter;
        let cfg = self.config;
        let mut entries = Vec::with_capacity(self.slots.len());
        for slot in &mut self.slots {
            if slot.is_finished() {
                return Err(Error::config(
                    "slots",
                    format!("slot {} is finished but was not replaced", slot.slot_id),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                cfg.seed,
                window_id,
                slot.slot_id as u64,
            ]));
            let start = slot.steps.len();
            let mut generated = slot.tokens();
            let mut finished = None;
            while slot.steps.len() - start < cfg.window_len {
                let action = behavior.act(
                    &ActQuery {
                        slot_id: slot.slot_id,
                        sequence_id: slot.sequence_id,
                        task: &slot.prompt,
                        generated: &generated,
                    },
                    &mut rng,
                )?;
                let index = slot.steps.len();
                slot.steps.push(StepRecord::new(
                    action.token,
                    action.logprob,
                    action.value,
                    index,
                    window_id,
                ));
                generated.push(action.token);
                let status = status_after(action.token, generated.len(), cfg.max_len);
                if status.is_finished() {
                    slot.status = status;
                    finished = Some(status);
                    break;
                }
            }
            let entry = WindowEntry {
                slot_id: slot.slot_id,
                sequence_id: slot.sequence_id,
                start,
                len: slot.steps.len() - start,
                finished,
            };
            self.trace.push(TraceRecord {
                window_id,
                slot_id: slot.slot_id,
                sequence_id: slot.sequence_id,
                prompt_seed: slot.prompt.seed,
                birth_window: slot.birth_window,
                replaced: self.pending_replaced[slot.slot_id].take(),
                start,
                generated: entry.len,
                finished,
                policy_tokens: 0,
                value_tokens: 0,
            });
            entries.push(entry);
        }
        self.window_counter += 1;
        Ok(WindowBatch {
            window_id,
            snapshot_id: behavior.snapshot_id(),
            entries,
        })
    }

    /// Applies the verifier to every sequence that finished in `batch`,
    /// placing the reward on its final step. Returns (slot, reward) pairs.
    pub fn assign_rewards(&mut self, batch: &WindowBatch) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for entry in batch.entries.iter().filter(|e| e.finished.is_some()) {
            let slot = &mut self.slots[entry.slot_id];
            let reward = verify_reward(&slot.prompt, &slot.tokens());
            if let Some(last) = slot.steps.last_mut() {
                last.reward = reward;
            }
            out.push((entry.slot_id, reward));
        }
        out
    }

    /// `advance_window` followed by `assign_rewards`.
    pub fn step_window(&mut self, behavior: &dyn Behavior) -> Result<WindowBatch> {
        let batch = self.advance_window(behavior)?;
        self.assign_rewards(&batch);
        Ok(batch)
    }

    /// Extracts and marks the policy and value tokens of `batch`, computing
    /// windowed advantages for the former and returns for the latter.
    pub fn build_train_set(&mut self, batch: &WindowBatch, gae: &GaeConfig) -> Result<TrainSet> {
        let exclusion_m = self.config.exclusion_m;
        let mut set = TrainSet {
            window_id: batch.window_id,
            ..TrainSet::default()
        };
        let trace_base = self.trace.len().saturating_sub(batch.entries.len());
        for (k, entry) in batch.entries.iter().enumerate() {
            let slot = &mut self.slots[entry.slot_id];
            let finished = entry.finished.is_some();
            let window = &slot.steps[entry.range()];
            let values: Vec<f64> = window.iter().map(|s| s.value_at_state).collect();
            let rewards: Vec<f64> = window.iter().map(|s| s.reward).collect();
            let advantages = egae_window(&values, &rewards, finished, gae)?;
            let keep = if finished {
                entry.len
            } else {
                entry.len.saturating_sub(exclusion_m)
            };
            let policy_before = set.policy.len();
            for (offset, &advantage) in advantages.iter().enumerate() {
                let index = entry.start + offset;
                let step = &mut slot.steps[index];
                if offset >= keep {
                    step.policy_excluded = true;
                    continue;
                }
                step.mark_trained(TrainTarget::Policy)?;
                set.policy.push(PolicyToken {
                    slot_id: entry.slot_id,
                    index,
                    advantage,
                    logprob_behavior: step.logprob_behavior,
                });
            }
            let value_before = set.value.len();
            if finished {
                let returns = slot.returns(gae.gamma)?;
                for (index, ret) in returns.into_iter().enumerate() {
                    slot.steps[index].mark_trained(TrainTarget::Value)?;
                    set.value.push(ValueToken {
                        slot_id: entry.slot_id,
                        index,
                        return_target: ret,
                    });
                }
            }
            if let Some(record) = self.trace.get_mut(trace_base + k) {
                if record.window_id == batch.window_id && record.slot_id == entry.slot_id {
                    record.policy_tokens = set.policy.len() - policy_before;
                    record.value_tokens = set.value.len() - value_before;
                }
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_task, vocab};
    use std::collections::HashMap;

    /// Emits digit tokens and then EOS once the scripted length is reached;
    /// sequences without a script never stop on their own.
    struct Scripted {
        lengths: HashMap<u64, usize>,
    }

    impl Behavior for Scripted {
        fn snapshot_id(&self) -> u64 {
            0
        }

        fn act(&self, q: &ActQuery<'_>, _rng: &mut ChaCha8Rng) -> Result<Action> {
            let n = q.generated.len() + 1;
            let token = match self.lengths.get(&q.sequence_id) {
                Some(&len) if n == len => vocab::EOS,
                _ => (n % 10) as Token,
            };
            Ok(Action {
                token,
                logprob: (0.5f64).ln(),
                value: 0.25,
            })
        }
    }

    fn stream(n: u64) -> PromptStream {
        PromptStream::finite((0..n).map(|s| sample_task(TaskKind::ParityChain, s)))
    }

    fn state(k: usize, l: usize, max_len: usize, m: usize, prompts: u64) -> SchedulerState {
        SchedulerState::new(
            SchedulerConfig {
                slots: k,
                window_len: l,
                max_len,
                exclusion_m: m,
                seed: 1,
            },
            stream(prompts),
        )
        .unwrap()
    }

    #[test]
    fn full_window_when_nobody_finishes() {
        let mut s = state(4, 8, 96, 0, 4);
        let b = s
            .step_window(&Scripted {
                lengths: HashMap::new(),
            })
            .unwrap();
        assert_eq!(b.entries.len(), 4);
        assert_eq!(b.tokens_generated(), 32);
        assert_eq!(b.walltime(), 8);
        b.check_invariants(&s.slots).unwrap();
        let set = s.build_train_set(&b, &GaeConfig::default()).unwrap();
        assert_eq!(set.policy.len(), 32);
        assert!(set.value.is_empty());
    }

    #[test]
    fn early_eos_and_length_cap() {
        let mut s = state(2, 8, 10, 0, 2);
        let script = Scripted {
            lengths: HashMap::from([(0, 3)]),
        };
        let b = s.step_window(&script).unwrap();
        assert_eq!(b.entries[0].len, 3);
        assert_eq!(b.entries[0].finished, Some(SlotStatus::FinishedEos));
        assert_eq!(b.entries[1].len, 8);
        assert!(s.slots[1].status == SlotStatus::Generating);
        // slot 0 must be replaced before the next window
        assert!(s.advance_window(&script).is_err());
    }

    #[test]
    fn length_cap_mid_window() {
        let mut s = state(1, 8, 10, 0, 1);
        let script = Scripted {
            lengths: HashMap::new(),
        };
        s.step_window(&script).unwrap();
        let b = s.step_window(&script).unwrap();
        assert_eq!(b.entries[0].len, 2);
        assert_eq!(b.entries[0].finished, Some(SlotStatus::FinishedMaxlen));
        s.slots[0].check_invariants(8, 10).unwrap();
    }

    #[test]
    fn replacement_cases() {
        let script = Scripted {
            lengths: HashMap::from([(0, 1), (1, 1), (2, 1), (3, 1)]),
        };
        let mut s = state(4, 4, 16, 0, 8);
        assert!(s.replace_finished().unwrap().is_empty());
        s.step_window(&script).unwrap();
        let evicted = s.replace_finished().unwrap();
        assert_eq!(evicted, vec![0, 1, 2, 3]);
        assert_eq!(s.slots.len(), 4);
        assert!(s.slots.iter().all(|x| x.birth_window == 1 && x.steps.is_empty()));
    }

    #[test]
    fn exhausted_stream() {
        let script = Scripted {
            lengths: HashMap::from([(0, 1)]),
        };
        let mut s = state(2, 4, 16, 0, 2);
        s.step_window(&script).unwrap();
        assert!(matches!(s.replace_finished(), Err(Error::PromptStreamExhausted)));
    }

    #[test]
    fn exclusion_drops_latest_unfinished_tokens() {
        let mut s = state(1, 8, 96, 4, 1);
        let b = s
            .step_window(&Scripted {
                lengths: HashMap::new(),
            })
            .unwrap();
        let set = s.build_train_set(&b, &GaeConfig::default()).unwrap();
        assert_eq!(set.policy.len(), 4);
        assert!(s.slots[0].steps[4..].iter().all(|x| x.policy_excluded && !x.policy_trained));
        assert!(s.slots[0].steps[..4].iter().all(|x| x.policy_trained));
    }

    #[test]
    fn finished_slot_contributes_all_tokens_to_value() {
        // 20 tokens over three windows of 8
        let script = Scripted {
            lengths: HashMap::from([(0, 20)]),
        };
        let mut s = state(2, 8, 96, 0, 4);
        let gae = GaeConfig::default();
        let mut counts = Vec::new();
        for _ in 0..3 {
            s.replace_finished().unwrap();
            let b = s.step_window(&script).unwrap();
            let set = s.build_train_set(&b, &gae).unwrap();
            let pol = set.policy.iter().filter(|t| t.slot_id == 0).count();
            let val = set.value.iter().filter(|t| t.slot_id == 0).count();
            counts.push((pol, val));
        }
        assert_eq!(counts, vec![(8, 0), (8, 0), (4, 20)]);
        assert!(s.slots[0].steps.iter().all(|x| x.policy_trained && x.value_trained));
    }

    #[test]
    fn double_inclusion_detected() {
        let mut s = state(1, 4, 96, 0, 1);
        let b = s
            .step_window(&Scripted {
                lengths: HashMap::new(),
            })
            .unwrap();
        s.build_train_set(&b, &GaeConfig::default()).unwrap();
        assert!(matches!(
            s.build_train_set(&b, &GaeConfig::default()),
            Err(Error::DoubleTraining { .. })
        ));
    }

    #[test]
    fn prompt_stream_duplicates_samples() {
        let mut p = PromptStream::generated(TaskKind::ModularSum, 3, 3);
        let a: Vec<_> = (0..6).map(|_| p.next_prompt().unwrap()).collect();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        assert_ne!(a[2], a[3]);
        assert!(a.iter().all(|t| t.seed >> 63 == 0));
    }

    #[test]
    fn sample_index_follows_distribution() {
        let lp = [0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_index(&lp, &mut rng)] += 1;
        }
        assert!((counts[1] as f64 / 20_000.0 - 0.6).abs() < 0.02);
    }

    #[test]
    fn trace_roundtrip() {
        let mut s = state(2, 4, 16, 0, 2);
        let b = s
            .step_window(&Scripted {
                lengths: HashMap::from([(1, 2)]),
            })
            .unwrap();
        s.build_train_set(&b, &GaeConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, s.trace()).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), s.trace());
        assert_eq!(s.trace()[1].value_tokens, 2);
    }
}
