//! Output parsing and the three shaped rewards of the slow path.
//!
//! ```text
//! R_slow = l_think * r_think + l_sid * r_sid + l_hit * r_hit
//! r_think in {+1, -1}        block present with >= 20 characters
//! r_sid   in {+1, +0.2, -1}  strict / soft / none
//! r_hit   in {0, 1, 2, 5}    longest matching code prefix of length 0..3
//! ```

use serde::{Deserialize, Serialize};

use crate::seqmodel::{TokenId, Vocabulary};

pub const MIN_THINK_CHARS: usize = 20;
pub const HIT_REWARDS: [f64; 4] = [0.0, 1.0, 2.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedSid {
    /// `<|sid_begin|>` level codes in order (optional disambiguator) `<|sid_end|>`.
    Strict(Vec<u32>),
    /// A run of level-ordered code tokens without the full wrapper.
    Soft(Vec<u32>),
    None,
}

impl ParsedSid {
    pub fn codes(&self) -> Option<&[u32]> {
        match self {
            ParsedSid::Strict(c) | ParsedSid::Soft(c) => Some(c),
            ParsedSid::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowOutput {
    pub tokens: Vec<TokenId>,
    /// Detokenized text of the first closed think block.
    pub think: Option<String>,
    pub sid: ParsedSid,
}

impl SlowOutput {
    pub fn think_chars(&self) -> Option<usize> {
        self.think.as_ref().map(|t| t.chars().count())
    }
}

/// Code run of `L` level-ordered SID tokens starting at `i`.
fn code_run(tokens: &[TokenId], i: usize, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let l = vocab.n_levels();
    if i + l > tokens.len() {
        return None;
    }
    let mut codes = Vec::with_capacity(l);
    for (level, &t) in tokens[i..i + l].iter().enumerate() {
        match vocab.sid_code(t) {
            Some((lv, c)) if lv == level => codes.push(c),
            _ => return None,
        }
    }
    Some(codes)
}

/// Pure parse of a raw slow-path output.
pub fn parse_slow_output(tokens: &[TokenId], vocab: &Vocabulary) -> SlowOutput {
    let think = tokens.iter().position(|&t| t == vocab.think_open()).and_then(|open| {
        tokens[open + 1..]
            .iter()
            .position(|&t| t == vocab.think_close())
            .map(|len| vocab.detokenize(&tokens[open + 1..open + 1 + len]))
    });

    let l = vocab.n_levels();
    let mut strict = None;
    for i in 0..tokens.len() {
        if tokens[i] != vocab.sid_begin() {
            continue;
        }
        if let Some(codes) = code_run(tokens, i + 1, vocab) {
            let mut end = i + 1 + l;
            if end < tokens.len() && vocab.disambig_of(tokens[end]).is_some() {
                end += 1;
            }
            if tokens.get(end) == Some(&vocab.sid_end()) {
                strict = Some(codes);
                break;
            }
        }
    }
    let sid = match strict {
        Some(c) => ParsedSid::Strict(c),
        None => (0..tokens.len())
            .find_map(|i| code_run(tokens, i, vocab))
            .map_or(ParsedSid::None, ParsedSid::Soft),
    };
    SlowOutput {
        tokens: tokens.to_vec(),
        think,
        sid,
    }
}

pub fn reward_think(parsed: &SlowOutput) -> f64 {
    match parsed.think_chars() {
        Some(n) if n >= MIN_THINK_CHARS => 1.0,
        _ => -1.0,
    }
}

pub fn reward_sid(parsed: &SlowOutput) -> f64 {
    match parsed.sid {
        ParsedSid::Strict(_) => 1.0,
        ParsedSid::Soft(_) => 0.2,
        ParsedSid::None => -1.0,
    }
}

/// Reward of the longest common code prefix over the first three levels.
pub fn reward_hit(gt: &[u32], pred: Option<&[u32]>) -> f64 {
    let Some(pred) = pred else { return 0.0 };
    let depth = gt
        .iter()
        .zip(pred)
        .take(HIT_REWARDS.len() - 1)
        .take_while(|(a, b)| a == b)
        .count();
    HIT_REWARDS[depth]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowRewardWeights {
    pub think: f64,
    pub sid: f64,
    pub hit: f64,
}

impl Default for SlowRewardWeights {
    fn default() -> Self {
        Self {
            think: 1.0,
            sid: 1.0,
            hit: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_think: f64,
    pub r_sid: f64,
    pub r_hit: f64,
    pub total: f64,
}

pub fn reward_slow_total(parsed: &SlowOutput, gt: &[u32], w: &SlowRewardWeights) -> RewardBreakdown {
    let r_think = reward_think(parsed);
    let r_sid = reward_sid(parsed);
    let r_hit = reward_hit(gt, parsed.sid.codes());
    RewardBreakdown {
        r_think,
        r_sid,
        r_hit,
        total: w.think * r_think + w.sid * r_sid + w.hit * r_hit,
    }
}
