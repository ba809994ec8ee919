//! Trajectory, slot and window data model.
//!
//! A [`SequenceSlot`] owns one response as it grows across training steps; a
//! [`WindowBatch`] is a view over the tokens every slot produced during one
//! step. Each [`StepRecord`] carries two once-only training flags so that
//! the "every token trained exactly once" accounting can be audited.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::envs::{TaskInstance, TaskKind, Token};
use crate::error::{Error, Result, TrainTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: Token,
    /// log π_old(a_t | s_t) under the generating snapshot, in nats.
    pub logprob_behavior: f64,
    /// V_old(s_t) under the generating snapshot.
    pub value_at_state: f64,
    pub reward: f64,
    /// 0-based position within the full response.
    pub global_step_index: usize,
    pub window_id: u64,
    pub policy_trained: bool,
    pub value_trained: bool,
    /// Dropped from policy training by the latest-token exclusion rule.
    pub policy_excluded: bool,
}

impl StepRecord {
    pub fn new(
        token: Token,
        logprob_behavior: f64,
        value_at_state: f64,
        global_step_index: usize,
        window_id: u64,
    ) -> Self {
        debug_assert!(logprob_behavior <= 0.0);
        StepRecord {
            token,
            logprob_behavior,
            value_at_state,
            reward: 0.0,
            global_step_index,
            window_id,
            policy_trained: false,
            value_trained: false,
            policy_excluded: false,
        }
    }

    /// Sets the requested flag; setting it twice is an error.
    pub fn mark_trained(&mut self, target: TrainTarget) -> Result<()> {
        let flag = match target {
            TrainTarget::Policy => &mut self.policy_trained,
            TrainTarget::Value => &mut self.value_trained,
        };
        if *flag {
            return Err(Error::DoubleTraining {
                target,
                step: self.global_step_index,
            });
        }
        *flag = true;
        Ok(())
    }
}

pub fn mark_trained(step: &StepRecord, target: TrainTarget) -> Result<StepRecord> {
    let mut out = step.clone();
    out.mark_trained(target)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Generating,
    FinishedEos,
    FinishedMaxlen,
}

impl SlotStatus {
    pub fn is_finished(self) -> bool {
        !matches!(self, SlotStatus::Generating)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSlot {
    pub slot_id: usize,
    /// Unique, increasing id of the sequence currently held by the slot.
    pub sequence_id: u64,
    pub prompt: TaskInstance,
    pub steps: Vec<StepRecord>,
    pub status: SlotStatus,
    pub birth_window: u64,
}

impl SequenceSlot {
    pub fn new(slot_id: usize, sequence_id: u64, prompt: TaskInstance, birth_window: u64) -> Self {
        SequenceSlot {
            slot_id,
            sequence_id,
            prompt,
            steps: Vec::new(),
            status: SlotStatus::Generating,
            birth_window,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_finished()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index range of the steps generated in `window_id`.
    pub fn window_range(&self, window_id: u64) -> Range<usize> {
        let start = self.steps.partition_point(|s| s.window_id < window_id);
        let end = self.steps.partition_point(|s| s.window_id <= window_id);
        start..end
    }

    pub fn returns(&self, gamma: f64) -> Result<Vec<f64>> {
        compute_returns(&self.steps, self.status, gamma)
    }

    /// Checks the slot-level invariants against the window length `l` and cap `max_len`.
    pub fn check_invariants(&self, window_len: usize, max_len: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::config(format!("slot[{}]", self.slot_id), reason));
        if self.steps.len() > max_len {
            return fail(format!("{} steps exceed max length {max_len}", self.steps.len()));
        }
        let mut expected_window = self.birth_window;
        let mut in_window = 0usize;
        for (i, step) in self.steps.iter().enumerate() {
            if step.global_step_index != i {
                return fail(format!("step {i} has index {}", step.global_step_index));
            }
            if step.window_id == expected_window + 1 && in_window > 0 {
                expected_window += 1;
                in_window = 0;
            }
            if step.window_id != expected_window {
                return fail(format!("step {i} in window {} not consecutive", step.window_id));
            }
            in_window += 1;
            if in_window > window_len {
                return fail(format!("window {expected_window} holds more than {window_len} steps"));
            }
            let last = i + 1 == self.steps.len();
            if step.reward != 0.0 && !(last && self.is_finished()) {
                return fail(format!("non-terminal step {i} carries reward"));
            }
            if step.logprob_behavior > 0.0 {
                return fail(format!("step {i} has positive log-probability"));
            }
        }
        Ok(())
    }
}

/// Discounted returns by the backward recursion `R_t = r_t + γ R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn compute_returns(steps: &[StepRecord], status: SlotStatus, gamma: f64) -> Result<Vec<f64>> {
    if steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if !status.is_finished() {
        return Err(Error::UnfinishedTrajectory);
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    Ok(discounted_returns(&rewards, gamma))
}

/// One slot's contribution to a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub slot_id: usize,
    pub sequence_id: u64,
    /// First step index (within the slot's sequence) generated in this window.
    pub start: usize,
    pub len: usize,
    /// Set when the sequence finished during this window.
    pub finished: Option<SlotStatus>,
}

impl WindowEntry {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBatch {
    pub window_id: u64,
    pub snapshot_id: u64,
    /// Exactly one entry per slot, in slot order.
    pub entries: Vec<WindowEntry>,
}

impl WindowBatch {
    pub fn tokens_generated(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }

    /// Walltime of the window in decode steps: the longest slot contribution.
    pub fn walltime(&self) -> usize {
        self.entries.iter().map(|e| e.len).max().unwrap_or(0)
    }

    pub fn finished_count(&self) -> usize {
        self.entries.iter().filter(|e| e.finished.is_some()).count()
    }

    pub fn check_invariants(&self, slots: &[SequenceSlot]) -> Result<()> {
        if self.entries.len() != slots.len() {
            return Err(Error::config(
                "window",
                format!("{} entries for {} slots", self.entries.len(), slots.len()),
            ));
        }
        for (entry, slot) in self.entries.iter().zip(slots) {
            if entry.slot_id != slot.slot_id || entry.sequence_id != slot.sequence_id {
                return Err(Error::config("window", "entry does not match slot order"));
            }
            if slot.steps[entry.range()]
                .iter()
                .any(|s| s.window_id != self.window_id)
            {
                return Err(Error::config("window", "step tagged with foreign window id"));
            }
        }
        Ok(())
    }
}

/// One line of the trajectory dump: a whole sequence with per-token data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDump {
    pub slot_id: usize,
    pub sequence_id: u64,
    pub task_kind: TaskKind,
    pub prompt_seed: u64,
    pub birth_window: u64,
    pub status: SlotStatus,
    pub tokens: Vec<Token>,
    pub window_id: Vec<u64>,
    pub logprob: Vec<f64>,
    pub value: Vec<f64>,
    pub reward: Vec<f64>,
}

impl From<&SequenceSlot> for SequenceDump {
    fn from(slot: &SequenceSlot) -> Self {
        SequenceDump {
            slot_id: slot.slot_id,
            sequence_id: slot.sequence_id,
            task_kind: slot.prompt.task_kind,
            prompt_seed: slot.prompt.seed,
            birth_window: slot.birth_window,
            status: slot.status,
            tokens: slot.tokens(),
            window_id: slot.steps.iter().map(|s| s.window_id).collect(),
            logprob: slot.steps.iter().map(|s| s.logprob_behavior).collect(),
            value: slot.steps.iter().map(|s| s.value_at_state).collect(),
            reward: slot.steps.iter().map(|s| s.reward).collect(),
        }
    }
}

pub fn write_dump<'a, W: Write>(
    mut out: W,
    slots: impl IntoIterator<Item = &'a SequenceSlot>,
) -> Result<()> {
    for slot in slots {
        serde_json::to_writer(&mut out, &SequenceDump::from(slot))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<SequenceDump>> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_task, TaskKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finished_steps(rewards: &[f64]) -> Vec<StepRecord> {
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut s = StepRecord::new(1, -0.5, 0.0, i, 0);
                s.reward = r;
                s
            })
            .collect()
    }

    #[test]
    fn returns_sparse_unit_discount() {
        let r = compute_returns(&finished_steps(&[0.0, 0.0, 1.0]), SlotStatus::FinishedEos, 1.0);
        assert_eq!(r.unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn returns_half_discount() {
        let r = compute_returns(&finished_steps(&[0.0, 0.0, 1.0]), SlotStatus::FinishedEos, 0.5);
        assert_eq!(r.unwrap(), vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn returns_match_forward_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let rewards: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = 0.99;
        let got = compute_returns(&finished_steps(&rewards), SlotStatus::FinishedMaxlen, gamma)
            .unwrap();
        for t in 0..rewards.len() {
            let oracle: f64 = rewards[t..]
                .iter()
                .enumerate()
                .map(|(i, r)| gamma.powi(i as i32) * r)
                .sum();
            assert!((got[t] - oracle).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn returns_errors() {
        assert!(matches!(
            compute_returns(&[], SlotStatus::FinishedEos, 1.0),
            Err(Error::EmptyTrajectory)
        ));
        assert!(matches!(
            compute_returns(&finished_steps(&[0.0]), SlotStatus::Generating, 1.0),
            Err(Error::UnfinishedTrajectory)
        ));
    }

    #[test]
    fn flags_set_once() {
        let fresh = StepRecord::new(3, -1.0, 0.2, 0, 0);
        let p = mark_trained(&fresh, TrainTarget::Policy).unwrap();
        assert!(p.policy_trained && !p.value_trained);
        let v = mark_trained(&fresh, TrainTarget::Value).unwrap();
        assert!(v.value_trained && !v.policy_trained);
        assert!(matches!(
            mark_trained(&p, TrainTarget::Policy),
            Err(Error::DoubleTraining {
                target: TrainTarget::Policy,
                ..
            })
        ));
    }

    #[test]
    fn slot_window_ranges_and_invariants() {
        let mut slot = SequenceSlot::new(0, 0, sample_task(TaskKind::ParityChain, 1), 2);
        for i in 0..7 {
            slot.steps.push(StepRecord::new(1, -0.1, 0.0, i, 2 + (i / 3) as u64));
        }
        assert_eq!(slot.window_range(2), 0..3);
        assert_eq!(slot.window_range(3), 3..6);
        assert_eq!(slot.window_range(4), 6..7);
        assert_eq!(slot.window_range(9), 7..7);
        slot.check_invariants(3, 96).unwrap();
        assert!(slot.check_invariants(2, 96).is_err());
        assert!(slot.check_invariants(3, 6).is_err());
        slot.steps[6].reward = 1.0;
        assert!(slot.check_invariants(3, 96).is_err());
        slot.status = SlotStatus::FinishedEos;
        slot.check_invariants(3, 96).unwrap();
    }

    #[test]
    fn dump_roundtrip() {
        let mut slot = SequenceSlot::new(2, 5, sample_task(TaskKind::ModularSum, 4), 0);
        for i in 0..3 {
            slot.steps.push(StepRecord::new(i as u8, -0.25 * i as f64, 0.1, i, 0));
        }
        slot.status = SlotStatus::FinishedMaxlen;
        let mut buf = Vec::new();
        write_dump(&mut buf, [&slot]).unwrap();
        let back = read_dump(buf.as_slice()).unwrap();
        assert_eq!(back, vec![SequenceDump::from(&slot)]);
        assert!(matches!(read_dump(&b"{}\n"[..]), Err(Error::Parse { line: 1, .. })));
    }
}
