//! The scripted four-slot scenario shared by the golden-trace and acceptance tests.
//!
//! Slot layout (sequence ids are 0-based, so S1..S4 are ids 0..3):
//! window length 4, max length 12.
//!   S1: 10 tokens, finishes in window 2
//!   S2: 3 tokens, finishes in window 0
//!   S3: 4 tokens, finishes exactly at the window 0 boundary
//!   S4: runs into the 12-token cap in window 2
//!   S5: 6 tokens, enters slot 1 at window 1, finishes in window 2
//!   S6: 2 tokens, enters slot 2 at window 1, finishes in window 1
//!   S7: enters slot 2 at window 2

#![allow(dead_code)]

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use tppo_core::advantage::GaeConfig;
use tppo_core::envs::{sample_task, vocab, TaskKind, Token};
use tppo_core::scheduler::{
    read_trace, Action, ActQuery, Behavior, PromptStream, SchedulerConfig,
    SchedulerState, TraceRecord,
};

pub const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/four_slot_trace.jsonl");

pub struct Scripted(pub HashMap<u64, usize>);

impl Behavior for Scripted {
    fn snapshot_id(&self) -> u64 {
        0
    }

    fn act(&self, q: &ActQuery<'_>, _rng: &mut ChaCha8Rng) -> tppo_core::Result<Action> {
        let n = q.generated.len() + 1;
        let token = match self.0.get(&q.sequence_id) {
            Some(&len) if n == len => vocab::EOS,
            _ => (n % 10) as Token,
        };
        Ok(Action {
            token,
            logprob: -0.5,
            value: 0.0,
        })
    }
}

pub fn run_scenario() -> (Vec<TraceRecord>, SchedulerState) {
    let script = Scripted(HashMap::from([(0, 10), (1, 3), (2, 4), (4, 6), (5, 2)]));
    let stream = PromptStream::finite((0..8).map(|s| sample_task(TaskKind::ParityChain, s)));
    let mut state = SchedulerState::new(
        SchedulerConfig {
            slots: 4,
            window_len: 4,
            max_len: 12,
            exclusion_m: 0,
            seed: 0,
        },
        stream,
    )
    .unwrap();
    state.keep_retired = true;
    for _ in 0..3 {
        state.replace_finished().unwrap();
        assert_eq!(state.slots.len(), 4);
        let batch = state.step_window(&script).unwrap();
        batch.check_invariants(&state.slots).unwrap();
        state.build_train_set(&batch, &GaeConfig::default()).unwrap();
    }
    (state.trace().to_vec(), state)
}

pub fn checked_in() -> Vec<TraceRecord> {
    let file = std::fs::File::open(GOLDEN).expect("checked-in trace");
    read_trace(std::io::BufReader::new(file)).unwrap()
}

