//! Token-level planner: a sequence model reads the SID history and emits a
//! tool-call sequence under a small grammar.
//!
//! ```text
//! history <|plan|> (tool arg+){1,3} <|end_plan|>
//! ```
//!
//! The first call must retrieve (`<fast_rec>` or `<think_and_rec>`);
//! `<fast_rec>` and `<think_and_rec>` take one number token, `<rank>` takes
//! two. Grammar-valid outputs always decode to a call list; whether that list
//! can run is decided at execution time.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Support;
use crate::seqmodel::{
    draw, train_lm, AutoregressiveModel, LmExample, LmTarget, SequenceModel, TokenId, TrainConfig, TrainReport,
    Vocabulary,
};
use crate::slowpath::RolloutEnv;

use super::{execute_route, reward_total, CostTable, Episode, Path, ToolCall, Tools};

pub const MAX_CALLS: usize = 3;

/// Longest grammar-valid plan: three `<rank> m n` calls plus `<|end_plan|>`.
pub const MAX_PLAN_TOKENS: usize = MAX_CALLS * 3 + 1;

fn arity(vocab: &Vocabulary, tool: TokenId) -> Option<usize> {
    if tool == vocab.tool_fast() || tool == vocab.tool_slow() {
        Some(1)
    } else if tool == vocab.tool_rank() {
        Some(2)
    } else {
        None
    }
}

fn number_support(vocab: &Vocabulary) -> Support {
    let ids: Vec<usize> = vocab
        .spec()
        .numbers
        .iter()
        .filter_map(|&n| vocab.number_token(n))
        .collect();
    Support::List(Arc::from(ids))
}

/// Allowed next tokens after `generated` plan tokens, `None` once the plan
/// is closed or malformed.
pub fn plan_constraint(vocab: &Vocabulary, generated: &[TokenId]) -> Option<Support> {
    let mut calls = 0;
    let mut pending = 0;
    for &t in generated {
        if t == vocab.end_plan() {
            return None;
        }
        if pending > 0 {
            vocab.number_of(t)?;
            pending -= 1;
        } else {
            pending = arity(vocab, t)?;
            calls += 1;
        }
    }
    if pending > 0 {
        return Some(number_support(vocab));
    }
    let ids: Vec<usize> = match calls {
        0 => vec![vocab.tool_fast(), vocab.tool_slow()],
        c if c >= MAX_CALLS => vec![vocab.end_plan()],
        _ => {
            let mut v = vec![
                vocab.tool_fast(),
                vocab.tool_rank(),
                vocab.tool_slow(),
                vocab.end_plan(),
            ];
            v.sort_unstable();
            v
        }
    };
    Some(Support::List(Arc::from(ids)))
}

/// Plan tokens for `calls`, closed with `<|end_plan|>`.
pub fn encode_calls(calls: &[ToolCall], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let num = |n: usize| {
        vocab
            .number_token(n)
            .ok_or_else(|| Error::invalid(format!("argument {n} has no number token")))
    };
    let mut out = Vec::new();
    for c in calls {
        match *c {
            ToolCall::FastRec { k } => out.extend([vocab.tool_fast(), num(k)?]),
            ToolCall::RankCandidates { m, n } => out.extend([vocab.tool_rank(), num(m)?, num(n)?]),
            ToolCall::ThinkAndRec { j } => out.extend([vocab.tool_slow(), num(j)?]),
        }
    }
    out.push(vocab.end_plan());
    Ok(out)
}

/// Calls of a plan. `None` unless the plan is closed and well formed.
pub fn decode_calls(tokens: &[TokenId], vocab: &Vocabulary) -> Option<Vec<ToolCall>> {
    let mut calls = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if t == vocab.end_plan() {
            return (i + 1 == tokens.len()).then_some(calls);
        }
        let a = arity(vocab, t)?;
        let args: Vec<usize> = tokens
            .get(i + 1..i + 1 + a)?
            .iter()
            .map(|&x| vocab.number_of(x))
            .collect::<Option<_>>()?;
        calls.push(if t == vocab.tool_fast() {
            ToolCall::FastRec { k: args[0] }
        } else if t == vocab.tool_slow() {
            ToolCall::ThinkAndRec { j: args[0] }
        } else {
            ToolCall::RankCandidates { m: args[0], n: args[1] }
        });
        i += 1 + a;
    }
    None
}

/// `history <|plan|>`, left-truncated so a full plan fits the window.
pub fn planner_prompt(history: &[TokenId], vocab: &Vocabulary, max_len: usize) -> Vec<TokenId> {
    let keep = max_len.saturating_sub(MAX_PLAN_TOKENS + 1);
    let start = history.len().saturating_sub(keep);
    let mut p = history[start..].to_vec();
    p.push(vocab.plan());
    p
}

/// Imitation examples: supervised on the plan tokens, each normalized over
/// its grammar support.
pub fn warmup_examples(
    prompts: &[Vec<TokenId>],
    labels: &[Vec<ToolCall>],
    vocab: &Vocabulary,
) -> Result<Vec<LmExample>> {
    if prompts.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: prompts.len(),
            actual: labels.len(),
        });
    }
    prompts
        .iter()
        .zip(labels)
        .map(|(p, calls)| {
            let plan = encode_calls(calls, vocab)?;
            let mut tokens = p.clone();
            let mut targets = Vec::with_capacity(plan.len());
            for (k, &t) in plan.iter().enumerate() {
                let support = plan_constraint(vocab, &plan[..k])
                    .filter(|s| s.contains(t))
                    .ok_or_else(|| Error::invalid("label violates the plan grammar"))?;
                targets.push(LmTarget {
                    pos: tokens.len(),
                    support,
                    weight: 1.0,
                });
                tokens.push(t);
            }
            Ok(LmExample { tokens, targets })
        })
        .collect()
}

/// Supervised imitation of labeled routes. Returns the training report and
/// the greedy policy's exact-match agreement with the labels.
pub fn warmup_train(
    model: &mut SequenceModel,
    prompts: &[Vec<TokenId>],
    labels: &[Vec<ToolCall>],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(TrainReport, f64)> {
    let examples = warmup_examples(prompts, labels, vocab)?;
    let report = train_lm(model, &examples, cfg)?;
    let policy = PlannerPolicy { model, vocab };
    Ok((report, policy.agreement(prompts, labels)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub tokens: Vec<TokenId>,
    /// `None` when the plan is malformed.
    pub calls: Option<Vec<ToolCall>>,
}

/// Greedy grammar-constrained decoding of plans.
pub struct PlannerPolicy<'a> {
    pub model: &'a SequenceModel,
    pub vocab: &'a Vocabulary,
}

impl PlannerPolicy<'_> {
    pub fn decide(&self, prompt: &[TokenId]) -> PlanOutput {
        let mut state = self.model.start(prompt);
        let mut tokens = Vec::new();
        // argmax decoding never consults the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while tokens.len() < MAX_PLAN_TOKENS {
            let Some(support) = plan_constraint(self.vocab, &tokens) else {
                break;
            };
            let Some((t, _)) = draw(self.model.next_logits(&state), &support, 0.0, &mut rng) else {
                break;
            };
            self.model.push(&mut state, t);
            tokens.push(t);
        }
        let calls = decode_calls(&tokens, self.vocab);
        PlanOutput { tokens, calls }
    }

    /// Probability of emitting exactly `calls` under grammar-normalized
    /// softmaxes at temperature 1.
    pub fn probability(&self, prompt: &[TokenId], calls: &[ToolCall]) -> Result<f64> {
        let plan = encode_calls(calls, self.vocab)?;
        let mut state = self.model.start(prompt);
        let mut logp = 0.0;
        for (k, &t) in plan.iter().enumerate() {
            let support =
                plan_constraint(self.vocab, &plan[..k]).ok_or_else(|| Error::invalid("plan violates the grammar"))?;
            logp += support.log_prob(self.model.next_logits(&state), t);
            self.model.push(&mut state, t);
        }
        Ok(logp.exp())
    }

    /// Fraction of prompts whose greedy plan equals the label exactly.
    pub fn agreement(&self, prompts: &[Vec<TokenId>], labels: &[Vec<ToolCall>]) -> f64 {
        if prompts.is_empty() {
            return 0.0;
        }
        let hits = prompts
            .iter()
            .zip(labels)
            .filter(|(p, l)| self.decide(p).calls.as_ref() == Some(*l))
            .count();
        hits as f64 / prompts.len() as f64
    }

    pub fn path(&self, prompt: &[TokenId]) -> Option<Path> {
        self.decide(prompt).calls.as_deref().and_then(Path::of_calls)
    }
}

/// Routing episodes as a rollout environment; the reward is `R_total`.
pub struct PlannerEnv<'a> {
    pub prompts: &'a [Vec<TokenId>],
    pub episodes: &'a [Episode],
    pub tools: &'a dyn Tools,
    pub cost: CostTable,
    pub vocab: &'a Vocabulary,
    /// Length of the final list the route returns.
    pub k_final: usize,
}

impl PlannerEnv<'_> {
    pub fn route_reward(&self, i: usize, generated: &[TokenId]) -> Result<f64> {
        match decode_calls(generated, self.vocab) {
            Some(calls) => Ok(
                execute_route(&calls, self.episodes[i], self.tools, &self.cost, self.k_final)?
                    .reward
                    .total,
            ),
            None => Ok(reward_total(0.0, false, 0.0, &self.cost).total),
        }
    }
}

impl RolloutEnv for PlannerEnv<'_> {
    fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    fn prompt(&self, i: usize) -> Vec<TokenId> {
        self.prompts[i].clone()
    }

    fn constraint(&self, _i: usize, generated: &[TokenId]) -> Option<Support> {
        plan_constraint(self.vocab, generated)
    }

    fn stop_token(&self) -> Option<TokenId> {
        Some(self.vocab.end_plan())
    }

    fn reward(&self, i: usize, generated: &[TokenId]) -> f64 {
        // tools are frozen services; a failure here is a bug in the caller's setup
        self.route_reward(i, generated)
            .expect("tool call failed during a rollout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::VocabSpec;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabSpec {
            n_levels: 2,
            codes_per_level: 4,
            n_disambig: 0,
            numbers: vec![10, 50],
            words: Default::default(),
        })
        .unwrap()
    }

    #[test]
    fn every_template_round_trips_through_the_grammar() {
        let v = vocab();
        for p in Path::ALL {
            let calls = p.calls(10, 50);
            let toks = encode_calls(&calls, &v).unwrap();
            assert_eq!(decode_calls(&toks, &v), Some(calls));
            for k in 0..toks.len() {
                assert!(plan_constraint(&v, &toks[..k]).unwrap().contains(toks[k]));
            }
            assert_eq!(plan_constraint(&v, &toks), None);
        }
    }

    #[test]
    fn grammar_limits() {
        let v = vocab();
        let first = plan_constraint(&v, &[]).unwrap();
        assert!(!first.contains(v.tool_rank()) && !first.contains(v.end_plan()));
        let ten = v.number_token(10).unwrap();
        let three = [v.tool_fast(), ten, v.tool_fast(), ten, v.tool_slow(), ten];
        assert_eq!(
            plan_constraint(&v, &three),
            Some(Support::List(Arc::from([v.end_plan()])))
        );
        assert_eq!(decode_calls(&three, &v), None);
        assert_eq!(decode_calls(&[v.tool_fast(), v.end_plan()], &v), None);
        assert!(encode_calls(&[ToolCall::FastRec { k: 7 }], &v).is_err());
    }
}
