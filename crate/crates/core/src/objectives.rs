//! Clipped policy surrogate and clipped Monte-Carlo value loss, with exact
//! (sub)gradients.
//!
//! Ties between the clipped and unclipped branches resolve to the unclipped
//! branch, so a gradient is only ever zeroed where the clamp is strictly flat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub xi_low: f64,
    pub xi_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            xi_low: 0.5,
            xi_high: 0.6,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_low", self.eps_low),
            ("eps_high", self.eps_high),
            ("xi_low", self.xi_low),
            ("xi_high", self.xi_high),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be positive")));
            }
        }
        if self.eps_low >= 1.0 {
            return Err(Error::config("eps_low", "must be below 1"));
        }
        Ok(())
    }
}

/// Per-token surrogate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenObjective {
    pub value: f64,
    /// d value / d logprob_new.
    pub grad: f64,
    pub ratio: f64,
    /// The flat clipped branch was selected.
    pub clipped: bool,
}

pub fn ppo_token_objective(
    logprob_new: f64,
    logprob_behavior: f64,
    advantage: f64,
    cfg: &ClipConfig,
) -> TokenObjective {
    let ratio = (logprob_new - logprob_behavior).exp();
    let unclipped = ratio * advantage;
    let clipped_ratio = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let clipped = clipped_ratio * advantage;
    if unclipped <= clipped {
        TokenObjective {
            value: unclipped,
            grad: unclipped,
            ratio,
            clipped: false,
        }
    } else {
        TokenObjective {
            value: clipped,
            grad: 0.0,
            ratio,
            clipped: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTokenInput {
    pub logprob_new: f64,
    pub logprob_behavior: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatchLoss {
    /// Negated pooled mean of the per-token objectives.
    pub loss: f64,
    /// d loss / d logprob_new, per token.
    pub grads: Vec<f64>,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

/// Token-level loss: every token in the set weighs the same, regardless of
/// which sequence it came from.
pub fn ppo_batch_loss(tokens: &[PolicyTokenInput], cfg: &ClipConfig) -> Result<PolicyBatchLoss> {
    if tokens.is_empty() {
        return Err(Error::EmptyPolicyBatch);
    }
    let n = tokens.len() as f64;
    let mut total = 0.0;
    let mut clipped = 0usize;
    let mut max_dev = 0.0f64;
    let grads = tokens
        .iter()
        .map(|t| {
            let obj = ppo_token_objective(t.logprob_new, t.logprob_behavior, t.advantage, cfg);
            total += obj.value;
            clipped += obj.clipped as usize;
            max_dev = max_dev.max((obj.ratio - 1.0).abs());
            -obj.grad / n
        })
        .collect();
    Ok(PolicyBatchLoss {
        loss: -total / n,
        grads,
        clip_fraction: clipped as f64 / n,
        max_ratio_deviation: max_dev,
    })
}

pub fn value_clip(v_new: f64, v_old: f64, cfg: &ClipConfig) -> f64 {
    v_new.clamp(v_old - cfg.xi_low, v_old + cfg.xi_high)
}

/// `0.5 · max((v − R)², (clip(v) − R)²)` and its derivative in `v_new`.
pub fn value_loss(v_new: f64, v_old: f64, return_target: f64, cfg: &ClipConfig) -> (f64, f64) {
    let err = v_new - return_target;
    let clipped_err = value_clip(v_new, v_old, cfg) - return_target;
    let (sq, sq_clipped) = (err * err, clipped_err * clipped_err);
    if sq >= sq_clipped {
        (0.5 * sq, err)
    } else {
        (0.5 * sq_clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueTokenInput {
    pub v_new: f64,
    pub v_old: f64,
    pub return_target: f64,
}

/// Mean value loss over the batch with per-token derivatives.
pub fn value_batch_loss(tokens: &[ValueTokenInput], cfg: &ClipConfig) -> Result<(f64, Vec<f64>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let n = tokens.len() as f64;
    let mut total = 0.0;
    let grads = tokens
        .iter()
        .map(|t| {
            let (l, g) = value_loss(t.v_new, t.v_old, t.return_target, cfg);
            total += l;
            g / n
        })
        .collect();
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ClipConfig {
        ClipConfig::default()
    }

    #[test]
    fn clipped_high_ratio_is_flat() {
        let obj = ppo_token_objective(1.5f64.ln(), 0.0, 1.0, &cfg());
        assert!((obj.value - 1.28).abs() < 1e-12);
        assert_eq!(obj.grad, 0.0);
        assert!(obj.clipped);
    }

    #[test]
    fn identity_ratio_uses_unclipped_branch() {
        for adv in [-2.0, -0.3, 0.0, 0.7, 5.0] {
            let obj = ppo_token_objective(-1.3, -1.3, adv, &cfg());
            assert_eq!(obj.value, adv);
            assert_eq!(obj.grad, adv);
            assert!(!obj.clipped);
        }
    }

    #[test]
    fn clipped_low_ratio_negative_advantage() {
        let obj = ppo_token_objective(0.5f64.ln(), 0.0, -1.0, &cfg());
        // branches: -0.5 vs 0.8 * -1 = -0.8
        assert!((obj.value + 0.8).abs() < 1e-12);
        assert_eq!(obj.grad, 0.0);
    }

    #[test]
    fn batch_mean_and_errors() {
        let c = cfg();
        let toks = [
            PolicyTokenInput {
                logprob_new: 1.5f64.ln(),
                logprob_behavior: 0.0,
                advantage: 1.0,
            },
            PolicyTokenInput {
                logprob_new: -0.1,
                logprob_behavior: -0.1,
                advantage: 0.72,
            },
        ];
        let out = ppo_batch_loss(&toks, &c).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-12);
        assert!(matches!(ppo_batch_loss(&[], &c), Err(Error::EmptyPolicyBatch)));

        let zeros: Vec<_> = (0..5)
            .map(|i| PolicyTokenInput {
                logprob_new: -0.1 * i as f64,
                logprob_behavior: -0.2,
                advantage: 0.0,
            })
            .collect();
        let out = ppo_batch_loss(&zeros, &c).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn value_clip_cases() {
        let c = cfg();
        assert!((value_clip(2.0, 1.0, &c) - 1.6).abs() < 1e-15);
        assert_eq!(value_clip(1.0, 1.0, &c), 1.0);
        assert_eq!(value_clip(0.0, 1.0, &c), 0.5);
    }

    #[test]
    fn value_loss_cases() {
        let c = cfg();
        let (l, _) = value_loss(2.0, 1.0, 1.2, &c);
        assert!((l - 0.32).abs() < 1e-12);
        assert_eq!(value_loss(0.7, 0.7, 0.7, &c), (0.0, 0.0));
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let v_old = rng.random_range(-2.0..2.0);
            let v_new = v_old + rng.random_range(-1.5..1.5);
            let ret = rng.random_range(-2.0..2.0);
            // skip triples within h of a kink
            let kinks = [v_old - c.xi_low, v_old + c.xi_high, ret];
            if kinks.iter().any(|k| (v_new - k).abs() < 1e-4) {
                continue;
            }
            let (_, g) = value_loss(v_new, v_old, ret, &c);
            let fd = (value_loss(v_new + h, v_old, ret, &c).0
                - value_loss(v_new - h, v_old, ret, &c).0)
                / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6 || (g - fd).abs() < 1e-9, "g={g} fd={fd}");
            checked += 1;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn surrogate_is_lower_bound(lp in -3.0f64..0.0, lb in -3.0f64..0.0, adv in -5.0f64..5.0) {
                let obj = ppo_token_objective(lp, lb, adv, &cfg());
                prop_assert!(obj.value <= obj.ratio * adv + 1e-12);
            }

            #[test]
            fn positive_homogeneity(lp in -3.0f64..0.0, lb in -3.0f64..0.0, adv in -5.0f64..5.0, c in 0.01f64..10.0) {
                let a = ppo_token_objective(lp, lb, adv, &cfg());
                let b = ppo_token_objective(lp, lb, c * adv, &cfg());
                prop_assert!((b.value - c * a.value).abs() < 1e-9 * (1.0 + b.value.abs()));
                prop_assert!((b.grad - c * a.grad).abs() < 1e-9 * (1.0 + b.grad.abs()));
            }

            #[test]
            fn value_pessimism(v_new in -3.0f64..3.0, v_old in -3.0f64..3.0, ret in -3.0f64..3.0) {
                let (l, _) = value_loss(v_new, v_old, ret, &cfg());
                let plain = 0.5 * (v_new - ret).powi(2);
                prop_assert!(l >= plain);
                let clipped = 0.5 * (value_clip(v_new, v_old, &cfg()) - ret).powi(2);
                prop_assert_eq!(l == plain, clipped <= plain);
            }
        }
    }
}
