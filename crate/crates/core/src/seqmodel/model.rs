//! Pre-LayerNorm causal transformer over token ids.
//!
//! ```text
//! x_0 = E[tok_t] + P[t]
//! x'  = x + Attn(LN(x))          (causal, multi-head)
//! x'' = x' + W2 gelu(W1 LN(x') + b1) + b2
//! logits = LN(x_L) W_out + b_out
//! ```
//!
//! Training runs the whole sequence through a [`Tape`]. Inference uses an
//! incremental key/value cache ([`KvState`]) that reproduces the tape's
//! logits position by position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::matrix::{gelu, layer_norm_row, log_softmax, vec_mat};
use crate::nn::{Checkpoint, Matrix, ParamId, ParamMask, ParamStore, Support, Tape, TokenTarget, Var};

use super::vocab::{TokenId, Vocabulary};

pub const CHECKPOINT_KIND: &str = "seqmodel";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_len: 128,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::invalid("d_ff must be positive and max_len at least 2"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::invalid("init_std must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Architecture {
    config: ModelConfig,
    vocab_size: usize,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct SequenceModel {
    config: ModelConfig,
    vocab_size: usize,
    vocab_hash: u64,
    params: ParamStore,
    ids: Ids,
}

/// Which parameters an optimizer may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only the embedding rows in the half-open token range.
    EmbeddingRows(TokenId, TokenId),
    /// Every parameter whose group is listed.
    Groups(Vec<String>),
}

impl SequenceModel {
    pub fn new(config: ModelConfig, vocab: &Vocabulary) -> Result<Self> {
        Self::with_vocab_size(config, vocab.len(), vocab.hash())
    }

    pub fn with_vocab_size(config: ModelConfig, vocab_size: usize, vocab_hash: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::invalid("vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, ff, v, s) = (config.d_model, config.d_ff, vocab_size, config.init_std);
        let mut p = ParamStore::new();
        let tok_emb = p.add("tok_emb", "embedding", Matrix::randn(v, d, s, &mut rng));
        let pos_emb = p.add("pos_emb", "position", Matrix::randn(config.max_len, d, s, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerIds {
                ln1_g: p.add(format!("l{l}.ln1_g"), "norm", Matrix::filled(1, d, 1.0)),
                ln1_b: p.add(format!("l{l}.ln1_b"), "norm", Matrix::zeros(1, d)),
                wq: p.add(format!("l{l}.wq"), "attention", Matrix::randn(d, d, s, &mut rng)),
                wk: p.add(format!("l{l}.wk"), "attention", Matrix::randn(d, d, s, &mut rng)),
                wv: p.add(format!("l{l}.wv"), "attention", Matrix::randn(d, d, s, &mut rng)),
                wo: p.add(format!("l{l}.wo"), "attention", Matrix::randn(d, d, s, &mut rng)),
                ln2_g: p.add(format!("l{l}.ln2_g"), "norm", Matrix::filled(1, d, 1.0)),
                ln2_b: p.add(format!("l{l}.ln2_b"), "norm", Matrix::zeros(1, d)),
                w1: p.add(format!("l{l}.w1"), "ffn", Matrix::randn(d, ff, s, &mut rng)),
                b1: p.add(format!("l{l}.b1"), "ffn", Matrix::zeros(1, ff)),
                w2: p.add(format!("l{l}.w2"), "ffn", Matrix::randn(ff, d, s, &mut rng)),
                b2: p.add(format!("l{l}.b2"), "ffn", Matrix::zeros(1, d)),
            });
        }
        let lnf_g = p.add("lnf_g", "norm", Matrix::filled(1, d, 1.0));
        let lnf_b = p.add("lnf_b", "norm", Matrix::zeros(1, d));
        let w_out = p.add("w_out", "output", Matrix::randn(d, v, s, &mut rng));
        let b_out = p.add("b_out", "output", Matrix::zeros(1, v));
        Ok(Self {
            config,
            vocab_size,
            vocab_hash,
            params: p,
            ids: Ids {
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Optimizer masks selecting the trainable parameters.
    pub fn masks(&self, trainable: &Trainable) -> Vec<ParamMask> {
        self.params
            .iter()
            .map(|(id, p)| match trainable {
                Trainable::All => ParamMask::All,
                Trainable::EmbeddingRows(lo, hi) if id == self.ids.tok_emb => ParamMask::Rows(*lo, *hi),
                Trainable::EmbeddingRows(..) => ParamMask::Frozen,
                Trainable::Groups(g) if g.iter().any(|x| x == p.group) => ParamMask::All,
                Trainable::Groups(_) => ParamMask::Frozen,
            })
            .collect()
    }

    /// Records the forward pass of `tokens` (length `1..=max_len`) and
    /// returns the `T x V` logits.
    pub fn forward(&self, tape: &mut Tape, tokens: &[TokenId]) -> Var {
        let t = tokens.len();
        assert!(
            t >= 1 && t <= self.config.max_len,
            "sequence length {t} outside 1..={}",
            self.config.max_len
        );
        let ids = &self.ids;
        let dh = self.config.d_model / self.config.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let emb = tape.param(ids.tok_emb);
        let pos = tape.param(ids.pos_emb);
        let e = tape.gather(emb, tokens.to_vec());
        let p = tape.gather(pos, (0..t).collect());
        let mut x = tape.add(e, p);
        for l in &ids.layers {
            let (g, b) = (tape.param(l.ln1_g), tape.param(l.ln1_b));
            let h = tape.layer_norm(x, g, b);
            let (wq, wk, wv, wo) = (tape.param(l.wq), tape.param(l.wk), tape.param(l.wv), tape.param(l.wo));
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_t(qh, false, kh, true);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.causal_softmax(s);
                heads.push(tape.matmul(a, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(heads)
            };
            let o = tape.matmul(cat, wo);
            x = tape.add(x, o);

            let (g, b) = (tape.param(l.ln2_g), tape.param(l.ln2_b));
            let h = tape.layer_norm(x, g, b);
            let (w1, b1, w2, b2) = (tape.param(l.w1), tape.param(l.b1), tape.param(l.w2), tape.param(l.b2));
            let f = tape.matmul(h, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        let (g, b) = (tape.param(ids.lnf_g), tape.param(ids.lnf_b));
        let h = tape.layer_norm(x, g, b);
        let (w, b) = (tape.param(ids.w_out), tape.param(ids.b_out));
        let logits = tape.matmul(h, w);
        tape.add_row(logits, b)
    }

    /// Weighted next-token NLL of `example` recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, example: &LmExample) -> Var {
        let logits = self.forward(tape, &example.tokens);
        let targets = example
            .targets
            .iter()
            .map(|t| TokenTarget {
                row: t.pos - 1,
                token: example.tokens[t.pos],
                support: t.support.clone(),
                weight: t.weight,
            })
            .collect();
        tape.cross_entropy(logits, targets)
    }

    /// Full-sequence logits without recording gradients.
    pub fn logits(&self, tokens: &[TokenId]) -> Matrix {
        let mut tape = Tape::new(&self.params);
        let v = self.forward(&mut tape, tokens);
        tape.value(v).clone()
    }

    /// Log-softmax over the whole vocabulary at the position after `context`.
    /// Contexts longer than `max_len` keep their newest tokens.
    pub fn logprobs_next(&self, context: &[TokenId]) -> Vec<f64> {
        let state = self.start(context);
        log_softmax(self.next_logits(&state))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            vocab_hash: self.vocab_hash,
            architecture: serde_json::to_string(&Architecture {
                config: self.config.clone(),
                vocab_size: self.vocab_size,
            })
            .expect("serializable"),
            params: self.params.flatten(),
        }
    }

    /// Rebuilds a model; refuses checkpoints built for a different vocabulary.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        if ckpt.vocab_hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: vocab.hash(),
                actual: ckpt.vocab_hash,
            });
        }
        let arch: Architecture = serde_json::from_str(&ckpt.architecture)
            .map_err(|e| Error::Checkpoint(format!("bad architecture block: {e}")))?;
        if arch.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary size {} but vocabulary has {}",
                arch.vocab_size,
                vocab.len()
            )));
        }
        let mut m = Self::with_vocab_size(arch.config, arch.vocab_size, ckpt.vocab_hash)?;
        if !m.params.load_flat(&ckpt.params) {
            return Err(Error::Checkpoint(format!(
                "payload has {} values, architecture needs {}",
                ckpt.params.len(),
                m.params.num_scalars()
            )));
        }
        Ok(m)
    }
}

/// One supervised target: predict `tokens[pos]` from `tokens[..pos]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmTarget {
    pub pos: usize,
    pub support: Support,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<LmTarget>,
}

impl LmExample {
    /// Every position after the first is a full-vocabulary target.
    pub fn language_model(tokens: Vec<TokenId>) -> Self {
        let targets = (1..tokens.len())
            .map(|pos| LmTarget {
                pos,
                support: Support::Full,
                weight: 1.0,
            })
            .collect();
        Self { tokens, targets }
    }

    /// Drops the oldest `tokens.len() - max_len` tokens and the targets they
    /// orphan.
    pub fn truncate_left(mut self, max_len: usize) -> Self {
        if self.tokens.len() <= max_len {
            return self;
        }
        let cut = self.tokens.len() - max_len;
        self.tokens.drain(..cut);
        self.targets.retain(|t| t.pos > cut);
        for t in &mut self.targets {
            t.pos -= cut;
        }
        self
    }
}

/// Incremental decoding interface, implemented by [`SequenceModel`] and by
/// test doubles.
pub trait AutoregressiveModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    /// State after consuming `context`.
    fn start(&self, context: &[TokenId]) -> Self::State;
    fn push(&self, state: &mut Self::State, token: TokenId);
    /// Unnormalized scores for the next token.
    fn next_logits<'s>(&self, state: &'s Self::State) -> &'s [f64];
}

/// Key/value cache for one decoding stream.
#[derive(Clone, Debug)]
pub struct KvState {
    tokens: Vec<TokenId>,
    /// Per layer, `pos * d_model` keys and values.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl KvState {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

impl SequenceModel {
    fn empty_state(&self) -> KvState {
        KvState {
            tokens: Vec::new(),
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            logits: vec![0.0; self.vocab_size],
        }
    }

    fn step(&self, state: &mut KvState, token: TokenId) {
        let cfg = &self.config;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let pos = state.tokens.len();
        let p = &self.params;
        let ids = &self.ids;

        let mut x: Vec<f64> = p
            .get(ids.tok_emb)
            .row(token)
            .iter()
            .zip(p.get(ids.pos_emb).row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut h = vec![0.0; d];
        for (li, l) in ids.layers.iter().enumerate() {
            layer_norm_row(&x, p.get(l.ln1_g).data(), p.get(l.ln1_b).data(), &mut h);
            let q = vec_mat(&h, p.get(l.wq));
            let k = vec_mat(&h, p.get(l.wk));
            let v = vec_mat(&h, p.get(l.wv));
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            let (keys, vals) = (&state.keys[li], &state.values[li]);
            let n = pos + 1;
            let mut cat = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..nh {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                }
                crate::nn::matrix::softmax_in_place(&mut scores);
                let out = &mut cat[off..off + dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vj = &vals[j * d + off..j * d + off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            let o = vec_mat(&cat, p.get(l.wo));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            layer_norm_row(&x, p.get(l.ln2_g).data(), p.get(l.ln2_b).data(), &mut h);
            let mut f = vec_mat(&h, p.get(l.w1));
            for (fi, bi) in f.iter_mut().zip(p.get(l.b1).data()) {
                *fi = gelu(*fi + bi);
            }
            let f = vec_mat(&f, p.get(l.w2));
            for ((xi, fi), bi) in x.iter_mut().zip(&f).zip(p.get(l.b2).data()) {
                *xi += fi + bi;
            }
        }
        layer_norm_row(&x, p.get(ids.lnf_g).data(), p.get(ids.lnf_b).data(), &mut h);
        let mut logits = vec_mat(&h, p.get(ids.w_out));
        for (z, b) in logits.iter_mut().zip(p.get(ids.b_out).data()) {
            *z += b;
        }
        state.tokens.push(token);
        state.logits = logits;
    }
}

impl AutoregressiveModel for SequenceModel {
    type State = KvState;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Contexts longer than `max_len` keep their newest tokens.
    fn start(&self, context: &[TokenId]) -> KvState {
        let keep = context.len().saturating_sub(self.config.max_len);
        let mut s = self.empty_state();
        for &t in &context[keep..] {
            self.step(&mut s, t);
        }
        s
    }

    /// Once the window is full the oldest token is dropped and the cache rebuilt.
    fn push(&self, state: &mut KvState, token: TokenId) {
        if state.tokens.len() >= self.config.max_len {
            let mut ctx = state.tokens[state.tokens.len() + 1 - self.config.max_len..].to_vec();
            ctx.push(token);
            *state = self.start(&ctx);
        } else {
            self.step(state, token);
        }
    }

    fn next_logits<'s>(&self, state: &'s KvState) -> &'s [f64] {
        &state.logits
    }
}
