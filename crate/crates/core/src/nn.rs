//! Two-layer tanh perceptrons for the policy and value function, exact
//! hand-derived gradients, AdamW, frozen snapshots and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{vocab, TaskKind, Token, MAX_PROMPT_LEN};
use crate::error::{Error, Result};

pub const DEFAULT_HISTORY: usize = 2;
pub const DEFAULT_HIDDEN: usize = 64;
/// Half-width of the uniform init for the first (input to hidden) layer.
pub const DEFAULT_INIT_SCALE: f64 = 2.0;
/// Half-width of the uniform init for the output layer; kept small so the
/// initial policy is close to uniform.
pub const OUTPUT_INIT_SCALE: f64 = 0.0;

/// Encodes `s_t` as: a one-hot of every prompt position (PAD-filled up to
/// `MAX_PROMPT_LEN`), a one-hot of the last `history` generated tokens (oldest
/// first, PAD-filled), then `t / max_len`, then a flag that is 1 once an
/// answer marker has been generated, then a one-hot of the task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub history: usize,
    pub max_len: usize,
}

impl Featurizer {
    pub fn new(history: usize, max_len: usize) -> Self {
        Featurizer { history, max_len }
    }

    pub fn width(&self) -> usize {
        (MAX_PROMPT_LEN + self.history) * vocab::SIZE + 2 + TaskKind::ALL.len()
    }

    pub fn encode(&self, task_kind: TaskKind, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        for pos in 0..MAX_PROMPT_LEN {
            let token = prompt.get(pos).copied().unwrap_or(vocab::PAD);
            x[pos * vocab::SIZE + token as usize] = 1.0;
        }
        let offset = MAX_PROMPT_LEN * vocab::SIZE;
        for slot in 0..self.history {
            // slot 0 is the oldest position in the history
            let back = self.history - slot;
            let token = if back <= generated.len() {
                generated[generated.len() - back]
            } else {
                vocab::PAD
            };
            x[offset + slot * vocab::SIZE + token as usize] = 1.0;
        }
        let base = (MAX_PROMPT_LEN + self.history) * vocab::SIZE;
        x[base] = generated.len() as f64 / self.max_len as f64;
        if generated.contains(&vocab::MARKER) {
            x[base + 1] = 1.0;
        }
        x[base + 2 + task_kind.index()] = 1.0;
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Shape {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }
}

/// Hidden activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// `out = W2 · tanh(W1 · x + b1) + b2`, parameters stored flat as
/// `[W1 (row-major, hidden × input), b1, W2 (output × hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shape: Shape,
    params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(shape: Shape) -> Self {
        Mlp {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    /// First-layer weights uniform in `[-hidden_scale, hidden_scale]`,
    /// output weights uniform in `[-output_scale, output_scale]`, biases zero.
    pub fn init(shape: Shape, hidden_scale: f64, output_scale: f64, rng: &mut impl Rng) -> Self {
        let mut net = Mlp::zeros(shape);
        let (w1, _, w2, _) = net.offsets();
        for p in &mut net.params[w1.clone()] {
            *p = rng.random_range(-hidden_scale..=hidden_scale);
        }
        for p in &mut net.params[w2.clone()] {
            *p = rng.random_range(-output_scale..=output_scale);
        }
        net
    }

    pub fn from_params(shape: Shape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::ShapeMismatch {
                expected: shape.param_count(),
                got: params.len(),
            });
        }
        let net = Mlp { shape, params };
        net.check_finite()?;
        Ok(net)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::DivergedParameters)
        }
    }

    fn offsets(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let Shape {
            input,
            hidden,
            output,
        } = self.shape;
        let w1 = 0..hidden * input;
        let b1 = w1.end..w1.end + hidden;
        let w2 = b1.end..b1.end + output * hidden;
        let b2 = w2.end..w2.end + output;
        (w1, b1, w2, b2)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input {
            return Err(Error::ShapeMismatch {
                expected: self.shape.input,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        let Shape {
            input,
            hidden,
            output,
        } = self.shape;
        let (w1, b1, w2, b2) = self.offsets();
        let (w1, b1, w2, b2) = (
            &self.params[w1],
            &self.params[b1],
            &self.params[w2],
            &self.params[b2],
        );
        let active: Vec<(usize, f64)> = x
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let row = &w1[j * input..(j + 1) * input];
                let z = active.iter().fold(b1[j], |acc, &(i, v)| acc + row[i] * v);
                z.tanh()
            })
            .collect();
        let out = (0..output)
            .map(|o| {
                let row = &w2[o * hidden..(o + 1) * hidden];
                row.iter().zip(&h).fold(b2[o], |acc, (w, a)| acc + w * a)
            })
            .collect();
        Ok(Activations {
            hidden: h,
            output: out,
        })
    }

    /// Adds `upstreamᵀ · ∂out/∂params` at input `x` into `grad`.
    pub fn accumulate_grad(
        &self,
        x: &[f64],
        acts: &Activations,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        if upstream.len() != self.shape.output {
            return Err(Error::ShapeMismatch {
                expected: self.shape.output,
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let Shape { input, hidden, .. } = self.shape;
        let (w1r, b1r, w2r, b2r) = self.offsets();
        let w2 = &self.params[w2r.clone()];
        let mut dz = vec![0.0; hidden];
        for (o, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            grad[b2r.start + o] += u;
            let base = w2r.start + o * hidden;
            for j in 0..hidden {
                grad[base + j] += u * acts.hidden[j];
                dz[j] += u * w2[o * hidden + j];
            }
        }
        for j in 0..hidden {
            let h = acts.hidden[j];
            dz[j] *= 1.0 - h * h;
            grad[b1r.start + j] += dz[j];
        }
        for (i, &v) in x.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for j in 0..hidden {
                grad[w1r.start + j * input + i] += dz[j] * v;
            }
        }
        Ok(())
    }

    /// Exact gradient of `upstream · out(x)` with respect to the parameters.
    pub fn backprop(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let acts = self.forward(x)?;
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad(x, &acts, upstream, &mut grad)?;
        Ok(grad)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// π_θ: softmax over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
}

impl PolicyNet {
    pub fn new(featurizer: &Featurizer, hidden: usize, init_scale: f64, rng: &mut impl Rng) -> Self {
        PolicyNet {
            net: Mlp::init(Self::shape(featurizer, hidden), init_scale, OUTPUT_INIT_SCALE, rng),
        }
    }

    pub fn zeros(featurizer: &Featurizer, hidden: usize) -> Self {
        PolicyNet {
            net: Mlp::zeros(Self::shape(featurizer, hidden)),
        }
    }

    pub fn shape(featurizer: &Featurizer, hidden: usize) -> Shape {
        Shape {
            input: featurizer.width(),
            hidden,
            output: vocab::SIZE,
        }
    }

    pub fn logprobs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logprobs_with(x)?.0)
    }

    pub(crate) fn logprobs_with(&self, x: &[f64]) -> Result<(Vec<f64>, Activations)> {
        let acts = self.net.forward(x)?;
        if acts.output.iter().any(|l| !l.is_finite()) {
            return Err(Error::DivergedParameters);
        }
        Ok((log_softmax(&acts.output), acts))
    }

    /// Accumulates `scale · ∂ log π(action | x) / ∂θ` into `grad`.
    pub(crate) fn accumulate_logprob_grad(
        &self,
        x: &[f64],
        acts: &Activations,
        logprobs: &[f64],
        action: Token,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let upstream: Vec<f64> = logprobs
            .iter()
            .enumerate()
            .map(|(b, lp)| scale * ((b == action as usize) as u8 as f64 - lp.exp()))
            .collect();
        self.net.accumulate_grad(x, acts, &upstream, grad)
    }
}

/// V_φ: scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new(featurizer: &Featurizer, hidden: usize, init_scale: f64, rng: &mut impl Rng) -> Self {
        ValueNet {
            net: Mlp::init(Self::shape(featurizer, hidden), init_scale, OUTPUT_INIT_SCALE, rng),
        }
    }

    pub fn zeros(featurizer: &Featurizer, hidden: usize) -> Self {
        ValueNet {
            net: Mlp::zeros(Self::shape(featurizer, hidden)),
        }
    }

    pub fn shape(featurizer: &Featurizer, hidden: usize) -> Shape {
        Shape {
            input: featurizer.width(),
            hidden,
            output: 1,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_with(x)?.0)
    }

    pub(crate) fn predict_with(&self, x: &[f64]) -> Result<(f64, Activations)> {
        let acts = self.net.forward(x)?;
        let v = acts.output[0];
        if !v.is_finite() {
            return Err(Error::DivergedParameters);
        }
        Ok((v, acts))
    }
}

pub fn policy_logprobs(net: &PolicyNet, features: &[f64]) -> Result<Vec<f64>> {
    net.logprobs(features)
}

pub fn value_predict(net: &ValueNet, features: &[f64]) -> Result<f64> {
    net.predict(features)
}

pub fn backprop(net: &Mlp, features: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    net.backprop(features, upstream)
}

/// Frozen (π_old, V_old) pair used for one window of generation.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    id: u64,
    policy: PolicyNet,
    value: ValueNet,
}

impl ParamSnapshot {
    pub fn capture(id: u64, policy: &PolicyNet, value: &ValueNet) -> Result<Self> {
        policy.net.check_finite()?;
        value.net.check_finite()?;
        Ok(ParamSnapshot {
            id,
            policy: policy.clone(),
            value: value.clone(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn value(&self) -> &ValueNet {
        &self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay:
/// `p ← p − lr · (m̂ / (√v̂ + ε) + wd · p)`.
pub fn adamw_update(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// A network paired with its optimizer state.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl Optimized {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Optimized {
            config,
            state: AdamWState::new(len),
        }
    }

    /// Applies one step; a zero learning rate leaves the parameters untouched.
    pub fn step(&mut self, net: &mut Mlp, grad: &[f64]) -> Result<()> {
        if self.config.lr == 0.0 {
            return Ok(());
        }
        adamw_update(net.params_mut(), grad, &mut self.state, &self.config)?;
        net.check_finite()
    }
}

pub fn seeded_nets(
    featurizer: &Featurizer,
    hidden: usize,
    init_scale: f64,
    seed: u64,
) -> (PolicyNet, ValueNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7473);
    let policy = PolicyNet::new(featurizer, hidden, init_scale, &mut rng);
    let value = ValueNet::new(featurizer, hidden, init_scale, &mut rng);
    (policy, value)
}

const CHECKPOINT_FORMAT: &str = "tppo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub featurizer: Featurizer,
    pub policy: Shape,
    pub value: Shape,
    pub step: u64,
}

/// Policy and value parameters plus what is needed to rebuild their inputs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub featurizer: Featurizer,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub step: u64,
}

impl Checkpoint {
    /// One JSON header line, then every parameter (policy first) as a
    /// little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            featurizer: self.featurizer,
            policy: self.policy.net.shape(),
            value: self.value.net.shape(),
            step: self.step,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in self.policy.net.params().iter().chain(self.value.net.params()) {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let body = &bytes[nl + 1..];
        let np = header.policy.param_count();
        let nv = header.value.param_count();
        if body.len() != 8 * (np + nv) {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * (np + nv),
                body.len()
            )));
        }
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let policy = Mlp::from_params(header.policy, floats[..np].to_vec())?;
        let value = Mlp::from_params(header.value, floats[np..].to_vec())?;
        Ok(Checkpoint {
            featurizer: header.featurizer,
            policy: PolicyNet { net: policy },
            value: ValueNet { net: value },
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
