//! The training loop: truncated PPO over windowed rollouts, and the vanilla
//! PPO baseline that generates every sequence to completion.
//!
//! One step runs, in order: slot replacement, snapshot, window generation,
//! reward assignment, advantage/return extraction, then `minibatch_count`
//! paired policy/value updates. Every phase is appended to an event log.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::envs::{self, TaskInstance, TaskManifest, Token};
use crate::error::{Error, Result};
use crate::nn::{
    seeded_nets, Activations, Featurizer, Optimized, ParamSnapshot, PolicyNet, ValueNet,
};
use crate::objectives::{
    ppo_batch_loss, value_batch_loss, ClipConfig, PolicyTokenInput, ValueTokenInput,
};
use crate::scheduler::{
    mix_seed, sample_index, PromptStream, SchedulerConfig, SchedulerState, SnapshotBehavior,
    TraceRecord, TrainSet,
};
use crate::traj::{write_dump, SequenceSlot, WindowBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub window_id: u64,
    pub finished: usize,
    /// Mean terminal reward of sequences finished this step (0 when none).
    pub mean_reward: f64,
    pub mean_response_length: f64,
    pub max_response_length: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub value_updated: bool,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub tokens_generated: usize,
    pub policy_tokens: usize,
    pub value_tokens: usize,
    /// Simulated generation walltime: the longest per-slot contribution.
    pub walltime: usize,
    pub cumulative_walltime: u64,
    /// max |ρ − 1| over the first minibatch's policy tokens.
    pub first_minibatch_max_ratio_dev: f64,
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Replace,
    Snapshot,
    Generate,
    Reward,
    Advantage,
    PolicyUpdate,
    ValueUpdate,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub phase: Phase,
    pub minibatch: Option<usize>,
}

/// One policy-gradient example: the state's features, the taken action,
/// and its frozen behavior log-probability and advantage.
#[derive(Debug, Clone)]
pub struct PolicyExample {
    pub features: Vec<f64>,
    pub action: Token,
    pub logprob_behavior: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct ValueExample {
    pub features: Vec<f64>,
    pub v_old: f64,
    pub return_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

/// Pooled token-level clipped-surrogate loss over `batch` and its exact
/// gradient with respect to the policy parameters.
pub fn policy_loss_and_grad(
    policy: &PolicyNet,
    batch: &[PolicyExample],
    clip: &ClipConfig,
) -> Result<PolicyGrad> {
    let mut cache: Vec<(Vec<f64>, Activations)> = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let (lp, acts) = policy.logprobs_with(&ex.features)?;
        inputs.push(PolicyTokenInput {
            logprob_new: lp[ex.action as usize],
            logprob_behavior: ex.logprob_behavior,
            advantage: ex.advantage,
        });
        cache.push((lp, acts));
    }
    let out = ppo_batch_loss(&inputs, clip)?;
    let mut grad = vec![0.0; policy.net.params().len()];
    for ((ex, (lp, acts)), &g) in batch.iter().zip(&cache).zip(&out.grads) {
        if g != 0.0 {
            policy.accumulate_logprob_grad(&ex.features, acts, lp, ex.action, g, &mut grad)?;
        }
    }
    Ok(PolicyGrad {
        loss: out.loss,
        grad,
        clip_fraction: out.clip_fraction,
        max_ratio_deviation: out.max_ratio_deviation,
    })
}

/// Mean clipped value loss over `batch` and its gradient in the value parameters.
pub fn value_loss_and_grad(
    value: &ValueNet,
    batch: &[ValueExample],
    clip: &ClipConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut acts_cache = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let (v, acts) = value.predict_with(&ex.features)?;
        inputs.push(ValueTokenInput {
            v_new: v,
            v_old: ex.v_old,
            return_target: ex.return_target,
        });
        acts_cache.push(acts);
    }
    let (loss, grads) = value_batch_loss(&inputs, clip)?;
    let mut grad = vec![0.0; value.net.params().len()];
    for ((ex, acts), &g) in batch.iter().zip(&acts_cache).zip(&grads) {
        if g != 0.0 {
            value
                .net
                .accumulate_grad(&ex.features, acts, &[g], &mut grad)?;
        }
    }
    Ok((loss, grad))
}

/// Produces response tokens for evaluation.
pub trait Decoder {
    fn next_token(
        &self,
        task: &TaskInstance,
        generated: &[Token],
        rng: &mut ChaCha8Rng,
    ) -> Result<Token>;
}

/// Temperature plus nucleus (top-p) sampling from a policy network.
pub struct NetDecoder<'a> {
    pub policy: &'a PolicyNet,
    pub featurizer: Featurizer,
    pub temperature: f64,
    pub top_p: f64,
}

impl Decoder for NetDecoder<'_> {
    fn next_token(
        &self,
        task: &TaskInstance,
        generated: &[Token],
        rng: &mut ChaCha8Rng,
    ) -> Result<Token> {
        let x = self
            .featurizer
            .encode(task.task_kind, &task.prompt_tokens, generated);
        let lp = self.policy.logprobs(&x)?;
        let scaled: Vec<f64> = lp.iter().map(|l| l / self.temperature).collect();
        let probs = crate::nn::log_softmax(&scaled);
        Ok(sample_index(&nucleus(&probs, self.top_p), rng) as Token)
    }
}

/// Restricts a log-distribution to its smallest top-mass set reaching `top_p`
/// and renormalizes; dropped entries become `-inf`.
pub fn nucleus(logprobs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return logprobs.to_vec();
    }
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; logprobs.len()];
    let mut mass = 0.0;
    for &i in &order {
        keep[i] = true;
        mass += logprobs[i].exp();
        if mass >= top_p {
            break;
        }
    }
    let log_mass = mass.ln();
    logprobs
        .iter()
        .zip(&keep)
        .map(|(&l, &k)| if k { l - log_mass } else { f64::NEG_INFINITY })
        .collect()
}

/// Mean verifier success over `tasks × samples_per_task` sampled responses.
pub fn evaluate(
    decoder: &dyn Decoder,
    tasks: &[TaskInstance],
    samples_per_task: usize,
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() || samples_per_task == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        for j in 0..samples_per_task {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64, j as u64]));
            let mut state = envs::EnvState::new(task, max_len);
            while !state.finished() {
                let token = decoder.next_token(task, &state.generated_tokens, &mut rng)?;
                state.step(token)?;
            }
            total += envs::verify_reward(task, &state.generated_tokens);
        }
    }
    Ok(total / (tasks.len() * samples_per_task) as f64)
}

/// Hook called after every completed step.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep evicted sequences for post-run auditing.
    pub keep_history: bool,
    /// Where to dump the offending window if training diverges.
    pub dump_dir: Option<PathBuf>,
}

pub struct RunOutcome {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<Event>,
    pub trace: Vec<TraceRecord>,
    /// Sequences evicted during the run (only with `keep_history`).
    pub retired: Vec<SequenceSlot>,
    /// Sequences still in their slots when the run ended.
    pub in_flight: Vec<SequenceSlot>,
    /// First step whose evaluation reached `target_success`.
    pub reached_target: Option<u64>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub featurizer: Featurizer,
    pub policy: PolicyNet,
    pub value: ValueNet,
    policy_opt: Optimized,
    value_opt: Optimized,
    scheduler: SchedulerState,
    eval_tasks: Vec<TaskInstance>,
    events: Vec<Event>,
    step: u64,
    cumulative_walltime: u64,
    options: RunOptions,
}

impl Trainer {
    pub fn new(config: RunConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let featurizer = Featurizer::new(config.history, config.max_len);
        let (policy, value) = seeded_nets(&featurizer, config.hidden, config.init_scale, config.seed);
        let (stream, eval_tasks) = match &config.tasks_manifest {
            Some(path) => {
                let manifest = TaskManifest::load(path.as_ref())?;
                let eval = manifest.eval.iter().map(|r| r.instance()).collect();
                (
                    PromptStream::cycle(manifest.train, config.samples_per_prompt)?,
                    eval,
                )
            }
            None => (
                PromptStream::generated(config.task, config.seed, config.samples_per_prompt),
                envs::eval_refs(config.task, config.seed, config.eval_tasks)
                    .iter()
                    .map(|r| r.instance())
                    .collect(),
            ),
        };
        let window_len = match config.algorithm {
            Algorithm::Tppo => config.window_len,
            Algorithm::VanillaPpo => config.max_len,
        };
        let exclusion_m = match config.algorithm {
            Algorithm::Tppo => config.exclusion_m,
            Algorithm::VanillaPpo => 0,
        };
        let mut scheduler = SchedulerState::new(
            SchedulerConfig {
                slots: config.slots(),
                window_len,
                max_len: config.max_len,
                exclusion_m,
                seed: config.seed,
            },
            stream,
        )?;
        scheduler.keep_retired = options.keep_history;
        Ok(Trainer {
            policy_opt: Optimized::new(config.policy_optimizer(), policy.net.params().len()),
            value_opt: Optimized::new(config.value_optimizer(), value.net.params().len()),
            config,
            featurizer,
            policy,
            value,
            scheduler,
            eval_tasks,
            events: Vec::new(),
            step: 0,
            cumulative_walltime: 0,
            options,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn eval_tasks(&self) -> &[TaskInstance] {
        &self.eval_tasks
    }

    fn log(&mut self, phase: Phase, minibatch: Option<usize>) {
        self.events.push(Event {
            step: self.step,
            phase,
            minibatch,
        });
    }

    fn diverged(&self, window: u64) -> Error {
        let dump = self.options.dump_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("diverged_window_{window}.jsonl"));
            let file = std::fs::File::create(&path).ok()?;
            write_dump(std::io::BufWriter::new(file), &self.scheduler.slots).ok()?;
            Some(path)
        });
        Error::TrainingDiverged { window, dump }
    }

    fn features_at(&self, slot: &SequenceSlot, tokens: &[Token], index: usize) -> Vec<f64> {
        self.featurizer
            .encode(slot.prompt.task_kind, &slot.prompt.prompt_tokens, &tokens[..index])
    }

    /// Runs one training step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let clip = self.config.clip();
        let gae = self.config.gae();

        self.scheduler.replace_finished()?;
        self.log(Phase::Replace, None);

        let snapshot = ParamSnapshot::capture(self.step, &self.policy, &self.value)
            .map_err(|_| self.diverged(self.scheduler.window_counter))?;
        self.log(Phase::Snapshot, None);

        let batch = self.scheduler.advance_window(&SnapshotBehavior {
            snapshot: &snapshot,
            featurizer: self.featurizer,
        })?;
        if self.config.algorithm == Algorithm::VanillaPpo {
            debug_assert_eq!(batch.finished_count(), batch.entries.len());
        }
        self.log(Phase::Generate, None);

        let rewards = self.scheduler.assign_rewards(&batch);
        self.log(Phase::Reward, None);

        let train_set = self.scheduler.build_train_set(&batch, &gae)?;
        self.log(Phase::Advantage, None);

        let (policy_examples, value_examples) = self.examples(&train_set, &snapshot)?;

        let m = self.config.minibatch_count;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.step, 0x6d62]));
        let policy_chunks = partition(policy_examples.len(), m, &mut rng);
        let value_chunks = partition(value_examples.len(), m, &mut rng);

        let mut policy_loss = 0.0;
        let mut value_loss = 0.0;
        let mut clipped = 0.0;
        let mut first_dev = 0.0;
        for i in 0..m {
            if !policy_chunks[i].is_empty() {
                let mb: Vec<PolicyExample> = policy_chunks[i]
                    .iter()
                    .map(|&k| policy_examples[k].clone())
                    .collect();
                let out = policy_loss_and_grad(&self.policy, &mb, &clip)?;
                if !out.loss.is_finite() {
                    return Err(self.diverged(batch.window_id));
                }
                if i == 0 {
                    first_dev = out.max_ratio_deviation;
                }
                let w = mb.len() as f64 / policy_examples.len() as f64;
                policy_loss += w * out.loss;
                clipped += w * out.clip_fraction;
                if self.policy_opt.step(&mut self.policy.net, &out.grad).is_err() {
                    return Err(self.diverged(batch.window_id));
                }
                self.log(Phase::PolicyUpdate, Some(i));
            }
            if !value_chunks[i].is_empty() {
                let mb: Vec<ValueExample> = value_chunks[i]
                    .iter()
                    .map(|&k| value_examples[k].clone())
                    .collect();
                let (loss, grad) = value_loss_and_grad(&self.value, &mb, &clip)?;
                if !loss.is_finite() {
                    return Err(self.diverged(batch.window_id));
                }
                value_loss += mb.len() as f64 / value_examples.len() as f64 * loss;
                if self.value_opt.step(&mut self.value.net, &grad).is_err() {
                    return Err(self.diverged(batch.window_id));
                }
                self.log(Phase::ValueUpdate, Some(i));
            }
        }

        let metrics = self.step_metrics(
            &batch,
            &train_set,
            &rewards,
            policy_loss,
            value_loss,
            clipped,
            first_dev,
        );
        self.step += 1;
        Ok(metrics)
    }

    fn examples(
        &self,
        set: &TrainSet,
        snapshot: &ParamSnapshot,
    ) -> Result<(Vec<PolicyExample>, Vec<ValueExample>)> {
        let tokens: Vec<Vec<Token>> = self.scheduler.slots.iter().map(|s| s.tokens()).collect();
        let slots = &self.scheduler.slots;
        let policy = set
            .policy
            .iter()
            .map(|t| {
                let slot = &slots[t.slot_id];
                PolicyExample {
                    features: self.features_at(slot, &tokens[t.slot_id], t.index),
                    action: tokens[t.slot_id][t.index],
                    logprob_behavior: t.logprob_behavior,
                    advantage: t.advantage,
                }
            })
            .collect();
        let value = set
            .value
            .iter()
            .map(|t| {
                let slot = &slots[t.slot_id];
                let features = self.features_at(slot, &tokens[t.slot_id], t.index);
                Ok(ValueExample {
                    v_old: snapshot.value().predict(&features)?,
                    features,
                    return_target: t.return_target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((policy, value))
    }

    #[allow(clippy::too_many_arguments)]
    fn step_metrics(
        &mut self,
        batch: &WindowBatch,
        set: &TrainSet,
        rewards: &[(usize, f64)],
        policy_loss: f64,
        value_loss: f64,
        clip_fraction: f64,
        first_dev: f64,
    ) -> StepMetrics {
        let lengths: Vec<usize> = rewards
            .iter()
            .map(|&(slot, _)| self.scheduler.slots[slot].len())
            .collect();
        let finished = rewards.len();
        let mean = |xs: &mut dyn Iterator<Item = f64>| {
            let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        };
        let walltime = batch.walltime();
        self.cumulative_walltime += walltime as u64;
        StepMetrics {
            step: self.step,
            window_id: batch.window_id,
            finished,
            mean_reward: mean(&mut rewards.iter().map(|r| r.1)),
            mean_response_length: mean(&mut lengths.iter().map(|&l| l as f64)),
            max_response_length: lengths.iter().copied().max().unwrap_or(0),
            policy_loss,
            value_loss,
            value_updated: !set.value.is_empty(),
            mean_abs_advantage: mean(&mut set.policy.iter().map(|t| t.advantage.abs())),
            clip_fraction,
            tokens_generated: batch.tokens_generated(),
            policy_tokens: set.policy.len(),
            value_tokens: set.value.len(),
            walltime,
            cumulative_walltime: self.cumulative_walltime,
            first_minibatch_max_ratio_dev: first_dev,
            eval_success: None,
        }
    }

    /// Success rate of the live policy on the evaluation split.
    pub fn evaluate_now(&mut self) -> Result<f64> {
        // Evaluation belongs to the step that just completed.
        self.events.push(Event {
            step: self.step.saturating_sub(1),
            phase: Phase::Evaluate,
            minibatch: None,
        });
        let decoder = NetDecoder {
            policy: &self.policy,
            featurizer: self.featurizer,
            temperature: self.config.eval_temperature,
            top_p: self.config.eval_top_p,
        };
        evaluate(
            &decoder,
            &self.eval_tasks,
            self.config.eval_samples,
            self.config.max_len,
            mix_seed(&[self.config.seed, self.step, 0x6576_616c]),
        )
    }

    /// Runs up to `total_steps` steps, evaluating every `eval_every` steps and
    /// stopping early once `target_success` is reached.
    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<RunOutcome> {
        let mut metrics = Vec::with_capacity(self.config.total_steps as usize);
        let mut reached_target = None;
        while self.step < self.config.total_steps {
            let mut m = self.train_step()?;
            let every = self.config.eval_every;
            if every > 0 && self.step % every == 0 {
                let success = self.evaluate_now()?;
                m.eval_success = Some(success);
                if let Some(target) = self.config.target_success {
                    if success >= target && reached_target.is_none() {
                        reached_target = Some(m.step);
                    }
                }
            }
            observer.on_step(&m, &self)?;
            metrics.push(m);
            if reached_target.is_some() {
                break;
            }
        }
        let trace = self.scheduler.take_trace();
        Ok(RunOutcome {
            policy: self.policy,
            value: self.value,
            metrics,
            events: self.events,
            trace,
            retired: std::mem::take(&mut self.scheduler.retired),
            in_flight: self.scheduler.slots.clone(),
            reached_target,
        })
    }
}

/// Splits a random permutation of `0..n` into `m` near-equal chunks, each
/// sorted so reductions run in slot-then-step order.
fn partition(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    (0..m)
        .map(|i| {
            let mut chunk = perm[i * n / m..(i + 1) * n / m].to_vec();
            chunk.sort_unstable();
            chunk
        })
        .collect()
}

fn require(config: &RunConfig, algorithm: Algorithm) -> Result<()> {
    if config.algorithm != algorithm {
        return Err(Error::config(
            "algorithm",
            format!("expected {algorithm}, config says {}", config.algorithm),
        ));
    }
    Ok(())
}

/// Truncated PPO: windows of `window_len` tokens, successive batching,
/// windowed advantages.
pub fn tppo_train(config: &RunConfig, options: RunOptions) -> Result<RunOutcome> {
    require(config, Algorithm::Tppo)?;
    Trainer::new(config.clone(), options)?.run(&mut ())
}

/// Baseline: every step generates all sequences to completion and trains on
/// all their tokens with plain GAE.
pub fn vanilla_ppo_train(config: &RunConfig, options: RunOptions) -> Result<RunOutcome> {
    require(config, Algorithm::VanillaPpo)?;
    Trainer::new(config.clone(), options)?.run(&mut ())
}

pub fn train(config: &RunConfig, options: RunOptions) -> Result<RunOutcome> {
    Trainer::new(config.clone(), options)?.run(&mut ())
}
