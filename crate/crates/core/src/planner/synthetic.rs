//! A constructed routing environment whose optimal tool is predictable from
//! the history: the level-1 code of the last item decides whether the fast
//! model hits at rank 1 (codes 1-2), only inside the wide candidate set at
//! rank 30 (codes 3-4), or not at all (codes 5-6). The slow tool always
//! hits at rank 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ItemIdx;
use crate::error::Result;
use crate::seqmodel::{TokenId, VocabSpec, Vocabulary};

use super::{label_rng, path_for_rank, planner_prompt, pseudo_label, Episode, Path, Tools};

pub const SYNTH_K1: usize = 10;
pub const SYNTH_K2: usize = 50;
pub const SYNTH_ITEMS: usize = 500;
const HISTORY_ITEMS: usize = 3;
const CODES: usize = 6;
/// Where the fast model places the target for rank-kind users.
const RANK_KIND_POSITION: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUser {
    pub history: Vec<TokenId>,
    /// The cheapest template that hits at rank 1.
    pub kind: Path,
    pub target: ItemIdx,
}

#[derive(Clone, Debug)]
pub struct SyntheticRouting {
    pub vocab: Vocabulary,
    pub users: Vec<SyntheticUser>,
}

pub fn synthetic_vocab() -> Vocabulary {
    Vocabulary::new(VocabSpec {
        n_levels: 2,
        codes_per_level: CODES,
        n_disambig: 0,
        numbers: vec![SYNTH_K1, SYNTH_K2],
        words: Default::default(),
    })
    .expect("static vocabulary spec is valid")
}

pub fn synthetic_routing(n_users: usize, seed: u64) -> SyntheticRouting {
    let vocab = synthetic_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n_users)
        .map(|_| {
            let mut history = Vec::with_capacity(HISTORY_ITEMS * 2);
            let mut last = 1;
            for _ in 0..HISTORY_ITEMS {
                last = rng.random_range(1..=CODES as u32);
                history.push(vocab.sid_token(0, last));
                history.push(vocab.sid_token(1, rng.random_range(1..=CODES as u32)));
            }
            let kind = match last {
                1 | 2 => Path::Fast,
                3 | 4 => Path::Rank,
                _ => Path::Slow,
            };
            SyntheticUser {
                history,
                kind,
                target: rng.random_range(0..SYNTH_ITEMS),
            }
        })
        .collect();
    SyntheticRouting { vocab, users }
}

impl SyntheticRouting {
    pub fn prompts(&self, max_len: usize) -> Vec<Vec<TokenId>> {
        self.users
            .iter()
            .map(|u| planner_prompt(&u.history, &self.vocab, max_len))
            .collect()
    }

    pub fn episodes(&self) -> Vec<Episode> {
        self.users
            .iter()
            .enumerate()
            .map(|(user, u)| Episode { user, target: u.target })
            .collect()
    }

    pub fn tools(&self) -> SyntheticTools<'_> {
        SyntheticTools { env: self }
    }

    /// Pseudo-labels from the fast tool's top-`K2` hit rank.
    pub fn pseudo_labels(&self, flip_prob: f64, seed: u64) -> Result<Vec<Path>> {
        let tools = self.tools();
        (0..self.users.len())
            .map(|u| {
                let top = tools.fast_rec(u, SYNTH_K2)?;
                let rank = top.iter().position(|&i| i == self.users[u].target).map(|p| p + 1);
                let mut rng = label_rng(seed, u);
                debug_assert_eq!(path_for_rank(rank, SYNTH_K1, SYNTH_K2), self.users[u].kind);
                Ok(pseudo_label(rank, SYNTH_K1, SYNTH_K2, flip_prob, &mut rng).path)
            })
            .collect()
    }
}

pub struct SyntheticTools<'a> {
    env: &'a SyntheticRouting,
}

impl SyntheticTools<'_> {
    /// `len` distinct non-target items, deterministic per user.
    fn filler(&self, user: usize, len: usize) -> Vec<ItemIdx> {
        let target = self.env.users[user].target;
        let start = (user * 7919) % SYNTH_ITEMS;
        (0..SYNTH_ITEMS)
            .map(|i| (start + i) % SYNTH_ITEMS)
            .filter(|&i| i != target)
            .take(len)
            .collect()
    }

    fn with_target_at(&self, user: usize, pos: Option<usize>, len: usize) -> Vec<ItemIdx> {
        let mut v = self.filler(user, len);
        if let Some(p) = pos {
            if p <= len {
                v.insert(p - 1, self.env.users[user].target);
                v.truncate(len);
            }
        }
        v
    }
}

impl Tools for SyntheticTools<'_> {
    fn fast_rec(&self, user: usize, k: usize) -> Result<Vec<ItemIdx>> {
        let pos = match self.env.users[user].kind {
            Path::Fast => Some(1),
            Path::Rank => Some(RANK_KIND_POSITION),
            Path::Slow => None,
        };
        Ok(self.with_target_at(user, pos, k))
    }

    fn rank_candidates(&self, user: usize, candidates: &[ItemIdx], n: usize) -> Result<Vec<ItemIdx>> {
        let target = self.env.users[user].target;
        let mut v: Vec<ItemIdx> = candidates.iter().copied().filter(|&c| c == target).collect();
        v.extend(candidates.iter().copied().filter(|&c| c != target));
        v.truncate(n);
        Ok(v)
    }

    fn think_and_rec(&self, user: usize, j: usize) -> Result<Vec<ItemIdx>> {
        Ok(self.with_target_at(user, Some(1), j))
    }
}
