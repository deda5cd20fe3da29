//! A deterministic pseudo-random [`AutoregressiveModel`] for exercising
//! decoders without training: logits are a hash of the consumed prefix.

use super::model::AutoregressiveModel;
use super::vocab::TokenId;

#[derive(Clone, Debug)]
pub struct HashedModel {
    vocab_size: usize,
    seed: u64,
    /// Logits are uniform in `[-scale, scale]`.
    scale: f64,
}

#[derive(Clone, Debug)]
pub struct HashedState {
    hash: u64,
    logits: Vec<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl HashedModel {
    pub fn new(vocab_size: usize, seed: u64, scale: f64) -> Self {
        Self {
            vocab_size,
            seed,
            scale,
        }
    }

    fn fill(&self, state: &mut HashedState) {
        state.logits = (0..self.vocab_size as u64)
            .map(|i| {
                let u = (splitmix(state.hash ^ splitmix(i)) >> 11) as f64 / (1u64 << 53) as f64;
                self.scale * (2.0 * u - 1.0)
            })
            .collect();
    }
}

impl AutoregressiveModel for HashedModel {
    type State = HashedState;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, context: &[TokenId]) -> HashedState {
        let mut s = HashedState {
            hash: splitmix(self.seed),
            logits: Vec::new(),
        };
        for &t in context {
            s.hash = splitmix(s.hash ^ t as u64);
        }
        self.fill(&mut s);
        s
    }

    fn push(&self, state: &mut HashedState, token: TokenId) {
        state.hash = splitmix(state.hash ^ token as u64);
        self.fill(state);
    }

    fn next_logits<'s>(&self, state: &'s HashedState) -> &'s [f64] {
        &state.logits
    }
}
