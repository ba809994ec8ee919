//! TD residuals, GAE, and the windowed extension used on truncated rollouts.
//!
//! A truncated window has no successor state yet. Its bootstrap value is taken
//! to be the value of the last generated state, `V(s_n) = V(s_{n-1})`, after
//! which the estimator is ordinary GAE over the window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig {
            gamma: 1.0,
            lambda: 0.95,
        }
    }
}

impl GaeConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        let cfg = GaeConfig { gamma, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// How the span ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// The sequence finished: `V(s_n) = 0`.
    Terminal,
    /// Cut off by the window: `V(s_n) = V(s_{n-1})`.
    Truncated,
}

/// `δ_t = r_t + γ V(s_{t+1}) − V(s_t)`, with the bootstrap at `t = n−1`
/// chosen by `boundary`.
pub fn td_residuals(
    rewards: &[f64],
    values: &[f64],
    boundary: Boundary,
    cfg: &GaeConfig,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: values.len(),
        });
    }
    let n = values.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let bootstrap = match boundary {
        Boundary::Terminal => 0.0,
        Boundary::Truncated => values[n - 1],
    };
    Ok((0..n)
        .map(|t| {
            let next = if t + 1 < n { values[t + 1] } else { bootstrap };
            rewards[t] + cfg.gamma * next - values[t]
        })
        .collect())
}

/// `Â_t = δ_t + γλ Â_{t+1}` over the whole residual list.
pub fn gae(residuals: &[f64], cfg: &GaeConfig) -> Vec<f64> {
    let decay = cfg.gamma * cfg.lambda;
    let mut out = vec![0.0; residuals.len()];
    let mut acc = 0.0;
    for (t, &delta) in residuals.iter().enumerate().rev() {
        acc = delta + decay * acc;
        out[t] = acc;
    }
    out
}

/// Advantages for the tokens one sequence generated in the current window.
///
/// `window_values` must come from the value snapshot of this window. Tokens
/// from earlier windows are never part of the span.
pub fn egae_window(
    window_values: &[f64],
    window_rewards: &[f64],
    finished_in_window: bool,
    cfg: &GaeConfig,
) -> Result<Vec<f64>> {
    if window_values.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let boundary = if finished_in_window {
        Boundary::Terminal
    } else {
        Boundary::Truncated
    };
    let deltas = td_residuals(window_rewards, window_values, boundary, cfg)?;
    Ok(gae(&deltas, cfg))
}
