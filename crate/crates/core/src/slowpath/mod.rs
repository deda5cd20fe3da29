//! The slow reasoning path: a sequence model that writes a think block before
//! emitting a semantic ID, trained with shaped rewards on hard samples.

pub mod grpo;
pub mod i2i;
pub mod reward;

use std::sync::Arc;

pub use grpo::{group_advantages, grpo_train, GroupAdvantages, GrpoConfig, GrpoReport, IterationStats, RolloutEnv};
#[cfg(feature = "http-teacher")]
pub use i2i::HttpTeacher;
pub use i2i::{
    build_i2i_instructions, collab_example, explain_all, i2i_instruction, mix_one_to_one, ExplainStats, FixtureTeacher,
    I2IInstruction, RetryingTeacher, TeacherClient, MIN_EXPLANATION_TOKENS,
};
pub use reward::{
    parse_slow_output, reward_hit, reward_sid, reward_slow_total, reward_think, ParsedSid, RewardBreakdown, SlowOutput,
    SlowRewardWeights, HIT_REWARDS, MIN_THINK_CHARS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemIdx, SplitCorpus};
use crate::decoder::{beam_search_from, BeamConfig, Candidate, SidTrie};
use crate::error::{Error, Result};
use crate::nn::Support;
use crate::quantizer::SidMap;
use crate::seqmodel::{
    draw, history_tokens, history_window, AutoregressiveModel, LmExample, LmTarget, SequenceModel, TokenId, Vocabulary,
};

/// Default cap on generated think-block tokens.
pub const DEFAULT_MAX_THINK: usize = 48;

/// Hard-sample cutoff: the fast model's candidate depth.
pub const HARD_SAMPLE_DEPTH: usize = 50;

/// One training prompt for the slow path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardSample {
    pub user: usize,
    pub history: Vec<ItemIdx>,
    pub target: ItemIdx,
}

/// True when `target` is absent from the first `depth` candidates.
pub fn is_hard(candidates: &[ItemIdx], target: ItemIdx, depth: usize) -> bool {
    !candidates.iter().take(depth).any(|&c| c == target)
}

/// Last training pair of every user whose fast candidates miss the target
/// within the top [`HARD_SAMPLE_DEPTH`]. `candidates[u]` belongs to user `u`.
pub fn select_hard_samples(split: &SplitCorpus, candidates: &[Vec<ItemIdx>]) -> Result<Vec<HardSample>> {
    if candidates.len() != split.num_users() {
        return Err(Error::DimensionMismatch {
            expected: split.num_users(),
            actual: candidates.len(),
        });
    }
    let mut out = Vec::new();
    for (user, cands) in candidates.iter().enumerate() {
        let Some(ex) = split.last_train_example(user) else {
            continue;
        };
        if is_hard(cands, ex.target, HARD_SAMPLE_DEPTH) {
            out.push(HardSample {
                user,
                history: ex.history.to_vec(),
                target: ex.target,
            });
        }
    }
    Ok(out)
}

/// How rollouts may emit their semantic ID.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SidDecoding {
    /// Any token at any step; the format rewards carry the whole signal.
    #[default]
    Free,
    /// Words inside the think block, then the wrapped SID grammar.
    Grammar,
}

/// `history <think>`: the slow-path prompt.
pub fn slow_prompt(history: &[ItemIdx], sid_map: &SidMap, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut p = history_tokens(history, sid_map, vocab);
    p.push(vocab.think_open());
    p
}

/// Warm start for the slow output format:
/// `history <think> </think> <|sid_begin|> sid <|sid_end|>`, supervised on
/// the wrapped SID only. Each code token is normalized over its level's
/// family. The history keeps the newest whole items that fit `max_len`.
pub fn slow_format_example(
    history: &[ItemIdx],
    target: ItemIdx,
    sid_map: &SidMap,
    vocab: &Vocabulary,
    max_len: usize,
) -> LmExample {
    let sid = vocab.wrapped_sid_tokens(sid_map.sid(target));
    let budget = max_len.saturating_sub(sid.len() + 2);
    let mut tokens = history_window(history, sid_map, vocab, budget);
    tokens.push(vocab.think_open());
    tokens.push(vocab.think_close());
    let mut targets = Vec::with_capacity(sid.len());
    for &t in &sid {
        let support = match vocab.sid_code(t) {
            Some((level, _)) => {
                let (lo, hi) = vocab.level_range(level);
                Support::Range(lo, hi)
            }
            None if vocab.disambig_of(t).is_some() => {
                let (lo, hi) = vocab.disambig_range();
                Support::Range(lo, hi)
            }
            None => Support::Full,
        };
        targets.push(LmTarget {
            pos: tokens.len(),
            support,
            weight: 1.0,
        });
        tokens.push(t);
    }
    LmExample { tokens, targets }
}

/// Rollout environment over hard samples scored by the slow reward.
pub struct SlowEnv<'a> {
    pub samples: &'a [HardSample],
    pub sid_map: &'a SidMap,
    pub vocab: &'a Vocabulary,
    pub weights: SlowRewardWeights,
    pub decoding: SidDecoding,
    pub max_think: usize,
    think_support: Support,
}

impl<'a> SlowEnv<'a> {
    pub fn new(
        samples: &'a [HardSample],
        sid_map: &'a SidMap,
        vocab: &'a Vocabulary,
        weights: SlowRewardWeights,
        decoding: SidDecoding,
        max_think: usize,
    ) -> Self {
        Self {
            samples,
            sid_map,
            vocab,
            weights,
            decoding,
            max_think,
            think_support: think_support(vocab),
        }
    }

    /// Reward breakdown of a completion; the prompt's `<think>` is prepended
    /// before parsing.
    pub fn breakdown(&self, i: usize, generated: &[TokenId]) -> RewardBreakdown {
        let mut full = Vec::with_capacity(generated.len() + 1);
        full.push(self.vocab.think_open());
        full.extend_from_slice(generated);
        let parsed = parse_slow_output(&full, self.vocab);
        let gt = &self.sid_map.sid(self.samples[i].target).codes;
        reward_slow_total(&parsed, gt, &self.weights)
    }
}

/// Tokens allowed inside a think block: words, `<|unk|>` and the closer.
pub fn think_support(vocab: &Vocabulary) -> Support {
    let (lo, hi) = vocab.word_range();
    let mut ids: Vec<usize> = (lo..hi).collect();
    ids.push(vocab.unk());
    ids.push(vocab.think_close());
    ids.sort_unstable();
    Support::List(Arc::from(ids))
}

impl RolloutEnv for SlowEnv<'_> {
    fn num_prompts(&self) -> usize {
        self.samples.len()
    }

    fn prompt(&self, i: usize) -> Vec<TokenId> {
        slow_prompt(&self.samples[i].history, self.sid_map, self.vocab)
    }

    fn constraint(&self, _i: usize, g: &[TokenId]) -> Option<Support> {
        if self.decoding == SidDecoding::Free {
            return Some(Support::Full);
        }
        let v = self.vocab;
        let Some(close) = g.iter().position(|&t| t == v.think_close()) else {
            return Some(if g.len() < self.max_think {
                self.think_support.clone()
            } else {
                Support::List(Arc::from([v.think_close()]))
            });
        };
        let k = g.len() - close - 1;
        let l = v.n_levels();
        match k {
            0 => Some(Support::List(Arc::from([v.sid_begin()]))),
            k if k <= l => {
                let (lo, hi) = v.level_range(k - 1);
                Some(Support::Range(lo, hi))
            }
            k if k == l + 1 => Some(Support::List(Arc::from([v.sid_end()]))),
            k if k == l + 2 => Some(Support::List(Arc::from([v.eos()]))),
            _ => None,
        }
    }

    fn stop_token(&self) -> Option<TokenId> {
        Some(self.vocab.eos())
    }

    fn reward(&self, i: usize, generated: &[TokenId]) -> f64 {
        self.breakdown(i, generated).total
    }
}

/// Output of one slow-path call.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowRecommendation {
    /// Think-block tokens, excluding the delimiters.
    pub think: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
}

/// Inference routine of the slow path: greedily write a think block, then
/// beam-search `beam.width` SIDs through the trie conditioned on both.
pub struct ThinkAndRec<'a> {
    pub model: &'a SequenceModel,
    pub vocab: &'a Vocabulary,
    pub sid_map: &'a SidMap,
    pub trie: &'a SidTrie,
    pub max_think: usize,
}

impl ThinkAndRec<'_> {
    pub fn run(&self, history: &[ItemIdx], beam: &BeamConfig) -> Result<SlowRecommendation> {
        let v = self.vocab;
        let mut prompt = slow_prompt(history, self.sid_map, v);
        // room for the think block, its closer, the opener and one full SID
        let reserve = self.max_think + v.n_levels() + 3;
        let window = self.model.config().max_len;
        if reserve >= window {
            return Err(Error::invalid("max_think does not fit the model window"));
        }
        if prompt.len() > window - reserve {
            prompt.drain(..prompt.len() - (window - reserve));
        }
        let mut state = self.model.start(&prompt);
        let support = think_support(v);
        let mut think = Vec::new();
        // argmax decoding never consults the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while think.len() < self.max_think {
            let Some((tok, _)) = draw(self.model.next_logits(&state), &support, 0.0, &mut rng) else {
                break;
            };
            self.model.push(&mut state, tok);
            if tok == v.think_close() {
                break;
            }
            think.push(tok);
        }
        if think.len() == self.max_think {
            self.model.push(&mut state, v.think_close());
        }
        self.model.push(&mut state, v.sid_begin());
        let candidates = beam_search_from(self.model, state, self.trie, beam)?;
        Ok(SlowRecommendation { think, candidates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_example_supervises_the_wrapped_sid() {
        use crate::quantizer::SemanticId;
        use crate::seqmodel::VocabSpec;
        let v = Vocabulary::new(VocabSpec {
            n_levels: 2,
            codes_per_level: 3,
            n_disambig: 0,
            numbers: vec![],
            words: Default::default(),
        })
        .unwrap();
        let map = SidMap::new(
            (0..4).map(|i| SemanticId::new(vec![i % 3 + 1, i / 3 + 1])).collect(),
            2,
            3,
        )
        .unwrap();
        let ex = slow_format_example(&[0, 1, 2], 3, &map, &v, 10);
        // 4 wrapped SID tokens + 2 think tokens leave room for two history items
        assert_eq!(ex.tokens.len(), 10);
        assert_eq!(&ex.tokens[..4], history_tokens(&[1, 2], &map, &v).as_slice());
        assert_eq!(ex.targets.len(), 4);
        assert_eq!(ex.targets[0].pos, 6);
        assert_eq!(ex.tokens[6], v.sid_begin());
        assert_eq!(
            ex.targets[1].support,
            Support::Range(v.level_range(0).0, v.level_range(0).1)
        );
    }

    #[test]
    fn top_fifty_is_inclusive() {
        let mut c: Vec<ItemIdx> = (100..149).collect();
        c.push(7);
        assert!(!is_hard(&c, 7, 50));
        c.insert(0, 99);
        assert!(is_hard(&c, 7, 50));
        assert!(is_hard(&[], 7, 50));
    }
}
