//! Decode-bound generation-walltime model comparing full-batch rollouts with
//! windowed successive batching. One walltime unit is one batched decode step.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::TraceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    Fixed {
        length: usize,
    },
    /// Uniform over `[min, max]` inclusive.
    Uniform {
        min: usize,
        max: usize,
    },
    /// Lognormal with parameters of the underlying normal, rejected outside
    /// `[1, cap]` and rounded up to whole tokens.
    Lognormal {
        mu: f64,
        sigma: f64,
        cap: usize,
    },
    /// Per-slot queues of observed lengths, replayed in order.
    Empirical {
        per_slot: Vec<Vec<usize>>,
    },
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            LengthDistribution::Fixed { length } if *length == 0 => {
                Err(Error::config("length", "must be at least 1"))
            }
            LengthDistribution::Uniform { min, max } if *min == 0 || min > max => {
                Err(Error::config("uniform", format!("need 1 <= min <= max, got [{min}, {max}]")))
            }
            LengthDistribution::Lognormal { sigma, cap, mu } => {
                if !(sigma.is_finite() && *sigma >= 0.0 && mu.is_finite()) {
                    Err(Error::config("sigma", "lognormal parameters must be finite, sigma >= 0"))
                } else if *cap == 0 {
                    Err(Error::config("cap", "must be at least 1"))
                } else {
                    Ok(())
                }
            }
            LengthDistribution::Empirical { per_slot } => {
                match per_slot.iter().flatten().find(|&&l| l == 0) {
                    Some(_) => Err(Error::config("empirical", "lengths must be at least 1")),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// The largest length this distribution can produce.
    pub fn cap(&self) -> usize {
        match self {
            LengthDistribution::Fixed { length } => *length,
            LengthDistribution::Uniform { max, .. } => *max,
            LengthDistribution::Lognormal { cap, .. } => *cap,
            LengthDistribution::Empirical { per_slot } => {
                per_slot.iter().flatten().copied().max().unwrap_or(1)
            }
        }
    }

    /// Median-`median` lognormal truncated to `[1, cap]`.
    pub fn lognormal_with_median(median: f64, sigma: f64, cap: usize) -> Self {
        LengthDistribution::Lognormal {
            mu: median.ln(),
            sigma,
            cap,
        }
    }

    /// Rebuilds per-slot sequence lengths from a scheduler trace, ordered by
    /// each slot's sequence birth.
    pub fn from_trace(records: &[TraceRecord]) -> Result<Self> {
        let mut per_slot: BTreeMap<usize, Vec<(u64, u64, usize)>> = BTreeMap::new();
        for r in records {
            let seqs = per_slot.entry(r.slot_id).or_default();
            match seqs.iter_mut().find(|(id, _, _)| *id == r.sequence_id) {
                Some(entry) => entry.2 += r.generated,
                None => seqs.push((r.sequence_id, r.birth_window, r.generated)),
            }
        }
        let slots = per_slot.keys().next_back().map_or(0, |&s| s + 1);
        let mut out = vec![Vec::new(); slots];
        for (slot, mut seqs) in per_slot {
            seqs.sort_by_key(|&(id, birth, _)| (birth, id));
            out[slot] = seqs.into_iter().map(|(_, _, len)| len).collect();
        }
        if let Some(slot) = out.iter().position(|q| q.is_empty()) {
            return Err(Error::LengthSourceExhausted { slot });
        }
        Ok(LengthDistribution::Empirical { per_slot: out })
    }
}

struct LengthSource<'a> {
    dist: &'a LengthDistribution,
    rng: ChaCha8Rng,
    queues: Vec<VecDeque<usize>>,
    lognormal: Option<LogNormal<f64>>,
}

impl<'a> LengthSource<'a> {
    fn new(dist: &'a LengthDistribution, slots: usize, seed: u64) -> Result<Self> {
        dist.validate()?;
        let mut queues = Vec::new();
        if let LengthDistribution::Empirical { per_slot } = dist {
            if per_slot.len() < slots {
                return Err(Error::LengthSourceExhausted {
                    slot: per_slot.len(),
                });
            }
            queues = per_slot.iter().map(|q| q.iter().copied().collect()).collect();
        }
        let lognormal = match dist {
            LengthDistribution::Lognormal { mu, sigma, .. } => Some(
                LogNormal::new(*mu, *sigma)
                    .map_err(|e| Error::config("lognormal", e.to_string()))?,
            ),
            _ => None,
        };
        Ok(LengthSource {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queues,
            lognormal,
        })
    }

    /// Next length for `slot`; `None` once an empirical queue runs dry.
    fn draw(&mut self, slot: usize) -> Option<usize> {
        match self.dist {
            LengthDistribution::Fixed { length } => Some(*length),
            LengthDistribution::Uniform { min, max } => Some(self.rng.random_range(*min..=*max)),
            LengthDistribution::Lognormal { cap, .. } => {
                let d = self.lognormal.as_ref().expect("lognormal built in new");
                loop {
                    let x = d.sample(&mut self.rng).ceil();
                    if x >= 1.0 && x <= *cap as f64 {
                        return Some(x as usize);
                    }
                }
            }
            LengthDistribution::Empirical { .. } => self.queues[slot].pop_front(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub steps: usize,
    /// Sequence-level windows consumed (one per sequence per step it is active).
    pub total_windows: usize,
    pub step_walltime: Vec<usize>,
    pub step_tokens: Vec<usize>,
    pub total_walltime: u64,
    pub tokens_generated: u64,
    /// Tokens belonging to sequences that completed within the run.
    pub completed_tokens: u64,
    pub sequences_completed: u64,
}

impl SimReport {
    fn new() -> Self {
        SimReport {
            steps: 0,
            total_windows: 0,
            step_walltime: Vec::new(),
            step_tokens: Vec::new(),
            total_walltime: 0,
            tokens_generated: 0,
            completed_tokens: 0,
            sequences_completed: 0,
        }
    }

    fn push(&mut self, walltime: usize, tokens: usize, windows: usize) {
        self.steps += 1;
        self.total_windows += windows;
        self.step_walltime.push(walltime);
        self.step_tokens.push(tokens);
        self.total_walltime += walltime as u64;
        self.tokens_generated += tokens as u64;
    }

    /// Trained-token throughput: tokens per walltime unit.
    pub fn throughput(&self) -> f64 {
        if self.total_walltime == 0 {
            0.0
        } else {
            self.tokens_generated as f64 / self.total_walltime as f64
        }
    }

    pub fn mean_step_walltime(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total_walltime as f64 / self.steps as f64
        }
    }
}

/// Every step draws `k` fresh lengths and decodes until the longest finishes.
pub fn simulate_vanilla(
    k: usize,
    dist: &LengthDistribution,
    num_steps: usize,
    seed: u64,
) -> Result<SimReport> {
    if k == 0 {
        return Err(Error::config("K", "must be at least 1"));
    }
    let mut source = LengthSource::new(dist, k, seed)?;
    let mut report = SimReport::new();
    for _ in 0..num_steps {
        let lengths: Vec<usize> = (0..k).filter_map(|slot| source.draw(slot)).collect();
        if lengths.is_empty() {
            break;
        }
        let tokens: usize = lengths.iter().sum();
        report.push(*lengths.iter().max().unwrap(), tokens, lengths.len());
        report.completed_tokens += tokens as u64;
        report.sequences_completed += lengths.len() as u64;
    }
    Ok(report)
}

/// `k` slots with residual lengths; each step every active slot emits up to
/// `l` tokens, and finished slots are refilled at the start of the next step.
pub fn simulate_windowed(
    k: usize,
    l: usize,
    dist: &LengthDistribution,
    num_steps: usize,
    seed: u64,
) -> Result<SimReport> {
    if k == 0 {
        return Err(Error::config("K", "must be at least 1"));
    }
    let bounded = !matches!(dist, LengthDistribution::Empirical { .. });
    if l == 0 || (bounded && l > dist.cap()) {
        return Err(Error::config(
            "l",
            format!("window length {l} must lie in [1, {}]", dist.cap()),
        ));
    }
    let mut source = LengthSource::new(dist, k, seed)?;
    // (total length, remaining) per slot; None when an empirical slot is drained.
    let mut slots: Vec<Option<(usize, usize)>> = vec![None; k];
    let mut needs_refill = vec![true; k];
    let mut report = SimReport::new();
    for _ in 0..num_steps {
        for slot in 0..k {
            if needs_refill[slot] {
                slots[slot] = source.draw(slot).map(|len| (len, len));
                needs_refill[slot] = false;
            }
        }
        let mut walltime = 0;
        let mut tokens = 0;
        let mut windows = 0;
        for slot in 0..k {
            if let Some((total, remaining)) = slots[slot].as_mut() {
                let emitted = (*remaining).min(l);
                *remaining -= emitted;
                walltime = walltime.max(emitted);
                tokens += emitted;
                windows += 1;
                if *remaining == 0 {
                    report.completed_tokens += *total as u64;
                    report.sequences_completed += 1;
                    needs_refill[slot] = true;
                }
            }
        }
        if windows == 0 {
            break;
        }
        report.push(walltime, tokens, windows);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub vanilla: SimReport,
    pub windowed: SimReport,
    /// Ratio of mean per-step generation walltime, vanilla over windowed.
    pub speedup: f64,
    /// Ratio of token throughput, windowed over vanilla.
    pub throughput_ratio: f64,
    /// Per-step speedup when training time (proportional to trained tokens,
    /// `train_cost_per_token` units each) is added to both sides.
    pub end_to_end_speedup: f64,
}

pub fn compare(
    k: usize,
    l: usize,
    dist: &LengthDistribution,
    num_steps: usize,
    seed: u64,
) -> Result<Comparison> {
    compare_with_training(k, l, dist, num_steps, seed, 0.0)
}

pub fn compare_with_training(
    k: usize,
    l: usize,
    dist: &LengthDistribution,
    num_steps: usize,
    seed: u64,
    train_cost_per_token: f64,
) -> Result<Comparison> {
    let vanilla = simulate_vanilla(k, dist, num_steps, seed)?;
    let windowed = simulate_windowed(k, l, dist, num_steps, seed)?;
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let per_step = |r: &SimReport| {
        ratio(
            r.total_walltime as f64 + train_cost_per_token * r.tokens_generated as f64,
            r.steps as f64,
        )
    };
    Ok(Comparison {
        speedup: ratio(vanilla.mean_step_walltime(), windowed.mean_step_walltime()),
        throughput_ratio: ratio(windowed.throughput(), vanilla.throughput()),
        end_to_end_speedup: ratio(per_step(&vanilla), per_step(&windowed)),
        vanilla,
        windowed,
    })
}

/// CSV with columns `step,vanilla_walltime,windowed_walltime,cumulative_speedup`.
pub fn write_comparison_csv<W: Write>(mut out: W, cmp: &Comparison) -> Result<()> {
    writeln!(out, "step,vanilla_walltime,windowed_walltime,cumulative_speedup")?;
    let (mut cv, mut cw) = (0u64, 0u64);
    let steps = cmp.vanilla.steps.min(cmp.windowed.steps);
    for i in 0..steps {
        let (v, w) = (cmp.vanilla.step_walltime[i], cmp.windowed.step_walltime[i]);
        cv += v as u64;
        cw += w as u64;
        writeln!(out, "{i},{v},{w},{}", cv as f64 / cw as f64)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_vanilla_totals() {
        let r = simulate_vanilla(8, &LengthDistribution::Fixed { length: 96 }, 10, 0).unwrap();
        assert_eq!(r.total_walltime, 960);
        assert_eq!(r.tokens_generated, 7680);
    }

    #[test]
    fn vanilla_step_is_batch_max() {
        let d = LengthDistribution::Empirical {
            per_slot: vec![vec![10], vec![40], vec![96]],
        };
        let r = simulate_vanilla(3, &d, 1, 0).unwrap();
        assert_eq!(r.step_walltime, vec![96]);
    }

    #[test]
    fn uniform_max_matches_order_statistic() {
        let (k, l) = (32usize, 96usize);
        let r = simulate_vanilla(k, &LengthDistribution::Uniform { min: 1, max: l }, 10_000, 3)
            .unwrap();
        // E[max of K iid uniform on {1..L}] = L - sum_{j<L} (j/L)^K
        let discrete: f64 =
            l as f64 - (1..l).map(|j| (j as f64 / l as f64).powi(k as i32)).sum::<f64>();
        let continuous = k as f64 / (k as f64 + 1.0) * l as f64;
        let mean = r.mean_step_walltime();
        assert!((mean - continuous).abs() / continuous < 0.02, "{mean} vs {continuous}");
        assert!((mean - discrete).abs() / discrete < 0.01);
    }

    #[test]
    fn fixed_windowed_three_windows_per_sequence() {
        let r = simulate_windowed(4, 32, &LengthDistribution::Fixed { length: 96 }, 30, 0)
            .unwrap();
        assert!(r.step_walltime.iter().all(|&w| w == 32));
        assert_eq!(r.sequences_completed, 40);
    }

    #[test]
    fn short_lengths_degenerate_to_vanilla() {
        let d = LengthDistribution::Uniform { min: 1, max: 20 };
        let v = simulate_vanilla(8, &d, 50, 9).unwrap();
        let w = simulate_windowed(8, 20, &d, 50, 9).unwrap();
        assert_eq!(v.step_walltime, w.step_walltime);
        assert_eq!(v.step_tokens, w.step_tokens);
    }

    #[test]
    fn deterministic_speedup_is_k() {
        let c = compare(8, 32, &LengthDistribution::Fixed { length: 96 }, 300, 0).unwrap();
        assert_eq!(c.speedup, 3.0);
        let c = compare(8, 96, &LengthDistribution::Fixed { length: 96 }, 300, 0).unwrap();
        assert_eq!(c.speedup, 1.0);
    }

    #[test]
    fn work_conservation_on_shared_draws() {
        let per_slot: Vec<Vec<usize>> = (0..4)
            .map(|s| (0..6).map(|i| 1 + (s * 37 + i * 53) % 96).collect())
            .collect();
        let d = LengthDistribution::Empirical { per_slot };
        let v = simulate_vanilla(4, &d, 1000, 0).unwrap();
        let w = simulate_windowed(4, 32, &d, 1000, 0).unwrap();
        assert_eq!(v.tokens_generated, w.tokens_generated);
        assert_eq!(w.completed_tokens, w.tokens_generated);
        assert!(w.step_walltime.iter().all(|&x| x <= 32));
    }

    #[test]
    fn lognormal_lengths_in_range() {
        let d = LengthDistribution::lognormal_with_median(24.0, 1.5, 96);
        let mut src = LengthSource::new(&d, 1, 5).unwrap();
        for _ in 0..10_000 {
            let x = src.draw(0).unwrap();
            assert!((1..=96).contains(&x));
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(simulate_vanilla(0, &LengthDistribution::Fixed { length: 5 }, 1, 0).is_err());
        assert!(simulate_vanilla(1, &LengthDistribution::Fixed { length: 0 }, 1, 0).is_err());
        let bad = LengthDistribution::Uniform { min: 5, max: 2 };
        assert!(simulate_vanilla(1, &bad, 1, 0).is_err());
        let d = LengthDistribution::Fixed { length: 96 };
        assert!(simulate_windowed(1, 100, &d, 1, 0).is_err());
        assert!(simulate_windowed(1, 0, &d, 1, 0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = compare(2, 32, &LengthDistribution::Fixed { length: 96 }, 3, 0).unwrap();
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,vanilla_walltime,windowed_walltime,cumulative_speedup");
        assert_eq!(lines[1], "0,96,32,3");
        assert_eq!(lines.len(), 4);
    }
}
