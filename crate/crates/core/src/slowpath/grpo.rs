//! Group-relative policy optimization over a [`SequenceModel`].
//!
//! Each iteration samples `group_size` completions per prompt, scores them,
//! and maximizes the clipped surrogate
//!
//! ```text
//! A_i = (r_i - mean(r)) / max(std(r), floor)
//! L   = -1/G sum_i 1/|o_i| sum_t min(rho_t A_i, clip(rho_t, 1-eps, 1+eps) A_i)
//! rho_t = p_theta(o_t | ...) / p_old(o_t | ...)
//! ```
//!
//! with probabilities taken at the sampling temperature. There is no KL term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, Grads, ParamMask, PolicyToken, Support, Tape};
use crate::seqmodel::{sample_constrained, AutoregressiveModel, SequenceModel, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub temperature: f64,
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    /// Optimizer steps taken on each batch of rollouts.
    pub inner_updates: usize,
    pub seed: u64,
    pub advantage_std_floor: f64,
    pub max_new_tokens: usize,
    pub clip_norm: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_epsilon: 0.2,
            temperature: 0.7,
            lr: 1e-3,
            iterations: 20,
            prompts_per_iteration: 4,
            inner_updates: 1,
            seed: 0,
            advantage_std_floor: 1e-6,
            max_new_tokens: 56,
            clip_norm: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0) {
            return Err(Error::invalid("clip_epsilon must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.prompts_per_iteration == 0 || self.max_new_tokens == 0 {
            return Err(Error::invalid(
                "lr, prompts_per_iteration and max_new_tokens must be positive",
            ));
        }
        if !(self.advantage_std_floor.is_finite() && self.advantage_std_floor > 0.0) {
            return Err(Error::invalid("advantage_std_floor must be positive"));
        }
        Ok(())
    }
}

/// What a policy is trained against: prompts, decoding constraints, rewards.
pub trait RolloutEnv {
    fn num_prompts(&self) -> usize;
    fn prompt(&self, i: usize) -> Vec<TokenId>;
    /// Allowed next tokens after `generated`, or `None` to end the rollout.
    fn constraint(&self, i: usize, generated: &[TokenId]) -> Option<Support>;
    fn stop_token(&self) -> Option<TokenId>;
    fn reward(&self, i: usize, generated: &[TokenId]) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAdvantages {
    /// `r_i - mean(r)`.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Group-relative advantages with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> GroupAdvantages {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let raw: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (raw.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let normalized = if rewards.iter().all(|&r| r == rewards[0]) {
        vec![0.0; rewards.len()]
    } else {
        raw.iter().map(|a| a / std.max(std_floor)).collect()
    };
    GroupAdvantages { raw, normalized }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub groups: usize,
    /// Groups whose rewards were all equal (no learning signal).
    pub degenerate_groups: usize,
    /// `sum_i (r_i - mean)` per group.
    pub raw_advantage_sums: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrpoReport {
    pub iterations: Vec<IterationStats>,
}

struct Rollout {
    tokens: Vec<TokenId>,
    prompt_len: usize,
    logps: Vec<f64>,
    supports: Vec<Support>,
    advantage: f64,
}

/// Runs GRPO. `on_iteration` observes the model after every update.
pub fn grpo_train(
    model: &mut SequenceModel,
    env: &dyn RolloutEnv,
    cfg: &GrpoConfig,
    mut on_iteration: impl FnMut(&IterationStats, &SequenceModel),
) -> Result<GrpoReport> {
    cfg.validate()?;
    if env.num_prompts() == 0 {
        return Err(Error::invalid("GRPO needs at least one prompt"));
    }
    let window = model.config().max_len;
    if cfg.max_new_tokens >= window {
        return Err(Error::invalid("max_new_tokens must be smaller than the model window"));
    }
    let masks = vec![ParamMask::All; model.params().len()];
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GrpoReport::default();

    for iteration in 0..cfg.iterations {
        let mut rollouts: Vec<Rollout> = Vec::new();
        let mut stats = IterationStats {
            iteration,
            mean_reward: 0.0,
            groups: 0,
            degenerate_groups: 0,
            raw_advantage_sums: Vec::new(),
            loss: 0.0,
        };
        let mut reward_sum = 0.0;
        for _ in 0..cfg.prompts_per_iteration {
            let pi = rng.random_range(0..env.num_prompts());
            let mut prompt = env.prompt(pi);
            let keep = window - cfg.max_new_tokens;
            if prompt.len() > keep {
                prompt.drain(..prompt.len() - keep);
            }
            let start = model.start(&prompt);
            let mut group = Vec::with_capacity(cfg.group_size);
            let mut rewards = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                let (s, _) = sample_constrained(
                    &*model,
                    start.clone(),
                    cfg.temperature,
                    cfg.max_new_tokens,
                    env.stop_token(),
                    &mut rng,
                    |g| env.constraint(pi, g),
                )?;
                rewards.push(env.reward(pi, &s.tokens));
                group.push(s);
            }
            reward_sum += rewards.iter().sum::<f64>();
            let adv = group_advantages(&rewards, cfg.advantage_std_floor);
            stats.raw_advantage_sums.push(adv.raw.iter().sum());
            stats.groups += 1;
            if adv.normalized.iter().all(|&a| a == 0.0) {
                stats.degenerate_groups += 1;
                continue;
            }
            for (s, a) in group.into_iter().zip(adv.normalized) {
                if s.tokens.is_empty() || a == 0.0 {
                    continue;
                }
                let mut tokens = prompt.clone();
                tokens.extend_from_slice(&s.tokens);
                rollouts.push(Rollout {
                    tokens,
                    prompt_len: prompt.len(),
                    logps: s.logps,
                    supports: s.supports,
                    advantage: a,
                });
            }
        }
        stats.mean_reward = reward_sum / (stats.groups * cfg.group_size) as f64;

        if !rollouts.is_empty() {
            let n_seq = rollouts.len() as f64;
            for _ in 0..cfg.inner_updates.max(1) {
                let mut grads = Grads::for_store(model.params());
                let mut loss = 0.0;
                for r in &rollouts {
                    let gen = r.tokens.len() - r.prompt_len;
                    let weight = 1.0 / (gen as f64 * n_seq);
                    // with an empty prompt the first token has no predicting row
                    let seq = &r.tokens[..];
                    let offset = usize::from(r.prompt_len == 0);
                    let toks: Vec<PolicyToken> = (offset..gen)
                        .map(|k| PolicyToken {
                            row: r.prompt_len + k - 1,
                            token: seq[r.prompt_len + k],
                            support: r.supports[k].clone(),
                            old_logp: r.logps[k],
                            advantage: r.advantage,
                            weight,
                        })
                        .collect();
                    if toks.is_empty() {
                        continue;
                    }
                    let mut tape = Tape::new(model.params());
                    let logits = model.forward(&mut tape, seq);
                    let l = tape.clipped_policy_loss(logits, toks, cfg.temperature, cfg.clip_epsilon);
                    loss += tape.value(l).item();
                    grads.merge(tape.backward(l));
                }
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite GRPO loss at iteration {iteration}"
                    )));
                }
                if cfg.clip_norm > 0.0 {
                    clip_grad_norm(&mut grads, cfg.clip_norm);
                }
                adam.step(model.params_mut(), &grads, &masks);
                stats.loss = loss;
            }
        }
        log::debug!(
            "grpo iteration {iteration}: mean reward {:.4}, {} of {} groups degenerate",
            stats.mean_reward,
            stats.degenerate_groups,
            stats.groups
        );
        on_iteration(&stats, model);
        report.iterations.push(stats);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_for_one_two_three() {
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-6);
        let s = (2.0f64 / 3.0).sqrt();
        assert_eq!(a.raw, vec![-1.0, 0.0, 1.0]);
        for (x, want) in a.normalized.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((x - want).abs() < 1e-12);
        }
        assert!((a.normalized[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn identical_rewards_give_zero_advantages() {
        let a = group_advantages(&[0.7; 5], 1e-6);
        assert!(a.normalized.iter().all(|&x| x == 0.0));
        assert!(a.raw.iter().all(|&x| x == 0.0));
    }
}
