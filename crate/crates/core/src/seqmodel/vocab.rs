//! Dense token vocabulary shared by the fast, slow and planner models.
//!
//! Layout (ids are contiguous within each block, blocks in this order):
//! structural tokens, `L x K` level-tagged SID codes, disambiguation codes,
//! planner tokens, then plain words in ascending order.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantizer::SemanticId;

pub const PAD: &str = "<|pad|>";
pub const EOS: &str = "<|eos|>";
pub const UNK: &str = "<|unk|>";
pub const SID_BEGIN: &str = "<|sid_begin|>";
pub const SID_END: &str = "<|sid_end|>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const PLAN: &str = "<|plan|>";
pub const END_PLAN: &str = "<|end_plan|>";
pub const TOOL_FAST: &str = "<fast_rec>";
pub const TOOL_RANK: &str = "<rank>";
pub const TOOL_SLOW: &str = "<think_and_rec>";

const STRUCTURAL: [&str; 7] = [PAD, EOS, UNK, SID_BEGIN, SID_END, THINK_OPEN, THINK_CLOSE];
const PLANNER: [&str; 5] = [PLAN, END_PLAN, TOOL_FAST, TOOL_RANK, TOOL_SLOW];

pub type TokenId = usize;

/// Lower-cased alphanumeric words, the unit of text tokenization.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Letter tag of a 0-based SID level: `a`, `b`, `c`, ...
fn level_tag(level: usize) -> char {
    (b'a' + (level % 26) as u8) as char
}

pub fn sid_token_name(level: usize, code: u32) -> String {
    format!("<s_{}_{code}>", level_tag(level))
}

pub fn number_token_name(n: usize) -> String {
    format!("<n_{n}>")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub n_levels: usize,
    pub codes_per_level: usize,
    pub n_disambig: usize,
    /// Values the planner may pass as tool arguments.
    pub numbers: Vec<usize>,
    pub words: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    spec: VocabSpec,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    sid_lo: TokenId,
    dis_lo: TokenId,
    plan_lo: TokenId,
    num_lo: TokenId,
    word_lo: TokenId,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    pub fn new(mut spec: VocabSpec) -> Result<Self> {
        if spec.n_levels == 0 || spec.codes_per_level == 0 {
            return Err(Error::invalid("vocabulary needs at least one SID level and code"));
        }
        spec.numbers.sort_unstable();
        spec.numbers.dedup();
        let mut tokens: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
        let sid_lo = tokens.len();
        for level in 0..spec.n_levels {
            for code in 1..=spec.codes_per_level as u32 {
                tokens.push(sid_token_name(level, code));
            }
        }
        let dis_lo = tokens.len();
        for d in 0..spec.n_disambig {
            tokens.push(format!("<dis_{d}>"));
        }
        let plan_lo = tokens.len();
        tokens.extend(PLANNER.iter().map(|s| s.to_string()));
        let num_lo = tokens.len();
        tokens.extend(spec.numbers.iter().map(|&n| number_token_name(n)));
        let word_lo = tokens.len();
        for w in &spec.words {
            if w.is_empty() || !w.chars().all(char::is_alphanumeric) {
                return Err(Error::invalid(format!("vocabulary word {w:?} is not alphanumeric")));
            }
            tokens.push(w.clone());
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            spec,
            tokens,
            index,
            sid_lo,
            dis_lo,
            plan_lo,
            num_lo,
            word_lo,
        })
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.spec.n_levels
    }

    pub fn codes_per_level(&self) -> usize {
        self.spec.codes_per_level
    }

    /// First 8 bytes of the SHA-256 of the newline-joined token strings.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn fixed(&self, token: &str) -> TokenId {
        self.index[token]
    }

    pub fn pad(&self) -> TokenId {
        self.fixed(PAD)
    }
    pub fn eos(&self) -> TokenId {
        self.fixed(EOS)
    }
    pub fn unk(&self) -> TokenId {
        self.fixed(UNK)
    }
    pub fn sid_begin(&self) -> TokenId {
        self.fixed(SID_BEGIN)
    }
    pub fn sid_end(&self) -> TokenId {
        self.fixed(SID_END)
    }
    pub fn think_open(&self) -> TokenId {
        self.fixed(THINK_OPEN)
    }
    pub fn think_close(&self) -> TokenId {
        self.fixed(THINK_CLOSE)
    }
    pub fn plan(&self) -> TokenId {
        self.fixed(PLAN)
    }
    pub fn end_plan(&self) -> TokenId {
        self.fixed(END_PLAN)
    }
    pub fn tool_fast(&self) -> TokenId {
        self.fixed(TOOL_FAST)
    }
    pub fn tool_rank(&self) -> TokenId {
        self.fixed(TOOL_RANK)
    }
    pub fn tool_slow(&self) -> TokenId {
        self.fixed(TOOL_SLOW)
    }

    /// Token of 1-based `code` at 0-based `level`.
    pub fn sid_token(&self, level: usize, code: u32) -> TokenId {
        assert!(level < self.spec.n_levels && code >= 1 && code as usize <= self.spec.codes_per_level);
        self.sid_lo + level * self.spec.codes_per_level + code as usize - 1
    }

    /// Half-open id range of level `level`'s code family.
    pub fn level_range(&self, level: usize) -> (TokenId, TokenId) {
        let lo = self.sid_lo + level * self.spec.codes_per_level;
        (lo, lo + self.spec.codes_per_level)
    }

    /// Half-open id range of all level-tagged SID code tokens.
    pub fn sid_range(&self) -> (TokenId, TokenId) {
        (self.sid_lo, self.dis_lo)
    }

    pub fn disambig_range(&self) -> (TokenId, TokenId) {
        (self.dis_lo, self.plan_lo)
    }

    pub fn disambig_token(&self, d: u32) -> Option<TokenId> {
        ((d as usize) < self.spec.n_disambig).then(|| self.dis_lo + d as usize)
    }

    /// `(level, code)` of a level-tagged SID token.
    pub fn sid_code(&self, id: TokenId) -> Option<(usize, u32)> {
        (self.sid_lo..self.dis_lo).contains(&id).then(|| {
            let off = id - self.sid_lo;
            (
                off / self.spec.codes_per_level,
                (off % self.spec.codes_per_level) as u32 + 1,
            )
        })
    }

    pub fn disambig_of(&self, id: TokenId) -> Option<u32> {
        (self.dis_lo..self.plan_lo)
            .contains(&id)
            .then(|| (id - self.dis_lo) as u32)
    }

    pub fn number_token(&self, n: usize) -> Option<TokenId> {
        self.spec.numbers.binary_search(&n).ok().map(|i| self.num_lo + i)
    }

    pub fn number_of(&self, id: TokenId) -> Option<usize> {
        (self.num_lo..self.word_lo)
            .contains(&id)
            .then(|| self.spec.numbers[id - self.num_lo])
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        id >= self.word_lo
    }

    pub fn word_range(&self) -> (TokenId, TokenId) {
        (self.word_lo, self.tokens.len())
    }

    /// Code tokens of a Semantic ID (plus its disambiguator), without wrappers.
    pub fn sid_tokens(&self, sid: &SemanticId) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = sid
            .codes
            .iter()
            .enumerate()
            .map(|(l, &c)| self.sid_token(l, c))
            .collect();
        if let Some(d) = sid.disambig {
            out.push(self.disambig_token(d).expect("disambiguator within vocabulary"));
        }
        out
    }

    /// `<|sid_begin|> codes.. <|sid_end|>`.
    pub fn wrapped_sid_tokens(&self, sid: &SemanticId) -> Vec<TokenId> {
        let mut out = vec![self.sid_begin()];
        out.extend(self.sid_tokens(sid));
        out.push(self.sid_end());
        out
    }

    /// Words of `text`, unknown words mapped to `<|unk|>`.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Token strings joined by single spaces.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabSpec {
            n_levels: 3,
            codes_per_level: 4,
            n_disambig: 2,
            numbers: vec![50, 10],
            words: ["rose", "serum"].iter().map(|s| s.to_string()).collect(),
        })
        .unwrap()
    }

    #[test]
    fn ids_are_dense_and_families_disjoint() {
        let v = vocab();
        assert_eq!(v.len(), 7 + 12 + 2 + 5 + 2 + 2);
        for level in 0..3 {
            let (lo, hi) = v.level_range(level);
            assert_eq!(hi - lo, 4);
            for code in 1..=4 {
                let t = v.sid_token(level, code);
                assert!((lo..hi).contains(&t));
                assert_eq!(v.sid_code(t), Some((level, code)));
                assert_eq!(v.id(&sid_token_name(level, code)), Some(t));
            }
        }
        assert_eq!(v.token(v.sid_token(0, 3)), "<s_a_3>");
        assert_eq!(v.token(v.sid_token(2, 1)), "<s_c_1>");
        assert_eq!(v.number_of(v.number_token(10).unwrap()), Some(10));
        assert!(v.number_token(7).is_none());
    }

    #[test]
    fn strict_wrapped_format() {
        let v = vocab();
        let sid = SemanticId::new(vec![3, 4, 1]);
        assert_eq!(
            v.detokenize(&v.wrapped_sid_tokens(&sid)),
            "<|sid_begin|> <s_a_3> <s_b_4> <s_c_1> <|sid_end|>"
        );
        let with_d = SemanticId {
            codes: vec![1, 1, 1],
            disambig: Some(1),
        };
        assert_eq!(v.disambig_of(*v.sid_tokens(&with_d).last().unwrap()), Some(1));
    }

    #[test]
    fn hash_tracks_content() {
        let a = vocab();
        assert_eq!(a.hash(), vocab().hash());
        let mut spec = a.spec().clone();
        spec.words.insert("oil".into());
        assert_ne!(a.hash(), Vocabulary::new(spec).unwrap().hash());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        assert_eq!(
            v.encode_text("Rose, Cedar SERUM"),
            vec![v.id("rose").unwrap(), v.unk(), v.id("serum").unwrap()]
        );
    }
}
