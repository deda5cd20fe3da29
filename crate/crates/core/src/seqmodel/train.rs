//! Cross-entropy training loops and the corpora they consume.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Catalog, ItemIdx, SplitCorpus};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, Grads, Support, Tape};
use crate::quantizer::SidMap;

use super::model::{LmExample, LmTarget, SequenceModel, Trainable};
use super::vocab::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Examples longer than this (or the model window) are left-truncated.
    pub max_len: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            max_len: 128,
            clip_norm: 1.0,
            trainable: Trainable::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_len < 2 {
            return Err(Error::invalid("batch_size must be positive and max_len at least 2"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip_norm must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Weighted mean per-token loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the weighted token cross-entropy of `examples`.
///
/// Examples are put in a canonical order before the seeded per-epoch
/// shuffle, so the result does not depend on the order they were passed in.
pub fn train_lm(model: &mut SequenceModel, examples: &[LmExample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let max_len = cfg.max_len.min(model.config().max_len);
    let mut data: Vec<LmExample> = examples
        .iter()
        .map(|e| e.clone().truncate_left(max_len))
        .filter(|e| !e.targets.is_empty())
        .collect();
    if data.is_empty() {
        return Err(Error::invalid("training corpus has no targets"));
    }
    data.sort_by(|a, b| {
        a.tokens.cmp(&b.tokens).then_with(|| {
            let pa = a.targets.iter().map(|t| t.pos);
            let pb = b.targets.iter().map(|t| t.pos);
            pa.cmp(pb)
        })
    });

    let masks = model.masks(&cfg.trainable);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_weight) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Grads::for_store(model.params());
            let (mut loss, mut weight) = (0.0, 0.0);
            for &i in batch {
                let ex = &data[i];
                let mut tape = Tape::new(model.params());
                let l = model.loss(&mut tape, ex);
                loss += tape.value(l).item();
                weight += ex.targets.iter().map(|t| t.weight).sum::<f64>();
                grads.merge(tape.backward(l));
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b}"
                )));
            }
            if weight > 0.0 {
                grads.scale(1.0 / weight);
            }
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            adam.step(model.params_mut(), &grads, &masks);
            epoch_loss += loss;
            epoch_weight += weight;
        }
        let mean = epoch_loss / epoch_weight.max(f64::MIN_POSITIVE);
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Embedding rows of every SID code and disambiguation token.
pub fn sid_embedding_rows(vocab: &Vocabulary) -> Trainable {
    Trainable::EmbeddingRows(vocab.sid_range().0, vocab.disambig_range().1)
}

/// One sequence per catalog item: the wrapped SID, then its title and
/// category words, then `<|eos|>`.
pub fn build_alignment_corpus(sid_map: &SidMap, catalog: &Catalog, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    (0..catalog.len())
        .map(|i| {
            let mut toks = vocab.wrapped_sid_tokens(sid_map.sid(i));
            toks.extend(vocab.encode_text(&catalog.get(i).text()));
            toks.push(vocab.eos());
            toks
        })
        .collect()
}

/// Embedding-only alignment: SID rows learn to predict item text and vice versa.
pub fn train_alignment(
    model: &mut SequenceModel,
    sid_map: &SidMap,
    catalog: &Catalog,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let corpus: Vec<LmExample> = build_alignment_corpus(sid_map, catalog, vocab)
        .into_iter()
        .map(LmExample::language_model)
        .collect();
    train_lm(model, &corpus, cfg)
}

/// Concatenated SID code tokens of `items`: the fast path's input format.
pub fn history_tokens(items: &[ItemIdx], sid_map: &SidMap, vocab: &Vocabulary) -> Vec<TokenId> {
    items.iter().flat_map(|&i| vocab.sid_tokens(sid_map.sid(i))).collect()
}

/// [`history_tokens`] of the newest whole items whose tokens fit in `budget`.
pub fn history_window(items: &[ItemIdx], sid_map: &SidMap, vocab: &Vocabulary, budget: usize) -> Vec<TokenId> {
    let mut start = items.len();
    let mut len = 0;
    while start > 0 {
        let n = vocab.sid_tokens(sid_map.sid(items[start - 1])).len();
        if len + n > budget {
            break;
        }
        len += n;
        start -= 1;
    }
    history_tokens(&items[start..], sid_map, vocab)
}

/// Support of the softmax used for each token of an item's SID.
fn code_support(vocab: &Vocabulary, token: TokenId) -> Support {
    match vocab.sid_code(token) {
        Some((level, _)) => {
            let (lo, hi) = vocab.level_range(level);
            Support::Range(lo, hi)
        }
        None => {
            let (lo, hi) = vocab.disambig_range();
            Support::Range(lo, hi)
        }
    }
}

/// Next-item examples over one item sequence. Every item after the first is a
/// target; each of its SID tokens is predicted within its own level's code
/// family. Sequences longer than `max_len` tokens are cut into item-aligned
/// windows so that every target keeps at least one item of history.
pub fn sequence_examples(
    items: &[ItemIdx],
    sid_map: &SidMap,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<LmExample>> {
    let per_item: Vec<Vec<TokenId>> = items.iter().map(|&i| vocab.sid_tokens(sid_map.sid(i))).collect();
    let mut out = Vec::new();
    let mut end = items.len();
    while end > 1 {
        let mut start = end;
        let mut len = 0;
        while start > 0 && len + per_item[start - 1].len() <= max_len {
            start -= 1;
            len += per_item[start].len();
        }
        if start + 2 > end {
            return Err(Error::invalid(format!(
                "max_len {max_len} cannot hold two consecutive items"
            )));
        }
        let mut tokens = Vec::with_capacity(len);
        let mut targets = Vec::new();
        for (k, toks) in per_item[start..end].iter().enumerate() {
            for &t in toks {
                if k > 0 {
                    targets.push(LmTarget {
                        pos: tokens.len(),
                        support: code_support(vocab, t),
                        weight: 1.0,
                    });
                }
                tokens.push(t);
            }
        }
        out.push(LmExample { tokens, targets });
        end = start + 1;
    }
    out.reverse();
    Ok(out)
}

/// Examples for every user's training sequence.
pub fn build_fast_examples(
    split: &SplitCorpus,
    sid_map: &SidMap,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<LmExample>> {
    let mut out = Vec::new();
    for seq in split.training_sequences() {
        out.extend(sequence_examples(seq, sid_map, vocab, max_len)?);
    }
    Ok(out)
}

/// Trains the fast path on all training prefix -> next item pairs.
pub fn train_fast(
    model: &mut SequenceModel,
    split: &SplitCorpus,
    sid_map: &SidMap,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let max_len = cfg.max_len.min(model.config().max_len);
    let examples = build_fast_examples(split, sid_map, vocab, max_len)?;
    train_lm(model, &examples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::SemanticId;
    use crate::seqmodel::model::ModelConfig;
    use crate::seqmodel::vocab::VocabSpec;

    fn vocab(k: usize) -> Vocabulary {
        Vocabulary::new(VocabSpec {
            n_levels: 3,
            codes_per_level: k,
            n_disambig: 0,
            numbers: vec![],
            words: Default::default(),
        })
        .unwrap()
    }

    fn sid_map(n: usize, k: usize) -> SidMap {
        let sids = (0..n)
            .map(|i| SemanticId::new(vec![(i % k) as u32 + 1, (i / k % k) as u32 + 1, 1]))
            .collect();
        SidMap::new(sids, 3, k).unwrap()
    }

    fn small_model(v: &Vocabulary, seed: u64) -> SequenceModel {
        SequenceModel::new(
            ModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_len: 32,
                init_std: 0.02,
                seed,
            },
            v,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let v = vocab(4);
        let mut m = small_model(&v, 0);
        let before = m.params().flatten();
        let ex = vec![LmExample::language_model(vec![7, 8, 9])];
        let r = train_lm(
            &mut m,
            &ex,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.epoch_losses.is_empty());
        assert_eq!(before, m.params().flatten());
    }

    #[test]
    fn frozen_groups_are_bitwise_unchanged() {
        let v = vocab(4);
        let map = sid_map(6, 4);
        let mut m = small_model(&v, 1);
        let before = m.params().clone();
        let corpus: Vec<LmExample> = build_alignment_corpus(&map, &Catalog::new(vec![]).unwrap(), &v)
            .into_iter()
            .map(LmExample::language_model)
            .collect();
        assert!(corpus.is_empty());
        let ex = vec![LmExample::language_model(history_tokens(&[0, 1, 2], &map, &v))];
        let cfg = TrainConfig {
            epochs: 3,
            trainable: sid_embedding_rows(&v),
            ..Default::default()
        };
        train_lm(&mut m, &ex, &cfg).unwrap();
        let (lo, hi) = v.sid_range();
        for ((_, a), (_, b)) in before.iter().zip(m.params().iter()) {
            if a.name == "tok_emb" {
                for r in 0..a.value.rows() {
                    if r < lo || r >= hi {
                        assert_eq!(a.value.row(r), b.value.row(r));
                    }
                }
                assert_ne!(a.value, b.value);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn memorizes_a_repeated_sequence_with_monotone_loss() {
        let v = vocab(4);
        let mut m = small_model(&v, 2);
        let seq = vec![7, 12, 9, 14];
        let ex: Vec<LmExample> = (0..8).map(|_| LmExample::language_model(seq.clone())).collect();
        let cfg = TrainConfig {
            epochs: 60,
            lr: 1e-2,
            batch_size: 8,
            ..Default::default()
        };
        let r = train_lm(&mut m, &ex, &cfg).unwrap();
        assert!(*r.epoch_losses.last().unwrap() < 0.05, "{:?}", r.epoch_losses.last());
        let tail = &r.epoch_losses[r.epoch_losses.len() / 5..];
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fast_examples_restrict_support_to_level_family() {
        let v = vocab(4);
        let map = sid_map(6, 4);
        let ex = sequence_examples(&[0, 1, 2], &map, &v, 64).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].tokens.len(), 9);
        assert_eq!(ex[0].targets.len(), 6);
        for t in &ex[0].targets {
            let (level, _) = v.sid_code(ex[0].tokens[t.pos]).unwrap();
            let (lo, hi) = v.level_range(level);
            assert_eq!(t.support, Support::Range(lo, hi));
        }
        // initial loss is ln K per target under near-uniform logits
        let m = small_model(&v, 3);
        let mut tape = Tape::new(m.params());
        let l = m.loss(&mut tape, &ex[0]);
        let per = tape.value(l).item() / 6.0;
        assert!((per - 4f64.ln()).abs() < 0.05, "{per}");
    }

    #[test]
    fn long_sequences_split_into_covering_windows() {
        let v = vocab(4);
        let map = sid_map(6, 4);
        let items = [0, 1, 2, 3, 4, 5];
        let ex = sequence_examples(&items, &map, &v, 9).unwrap();
        let targets: usize = ex.iter().map(|e| e.targets.len()).sum();
        assert_eq!(targets, 5 * 3);
        assert!(ex
            .iter()
            .all(|e| e.tokens.len() <= 9 && e.targets.iter().all(|t| t.pos >= 3)));
        assert!(sequence_examples(&items, &map, &v, 5).is_err());
    }

    #[test]
    fn example_order_does_not_change_the_result() {
        let v = vocab(4);
        let map = sid_map(6, 4);
        let mut ex = Vec::new();
        for s in [[0, 1, 2], [3, 4, 5], [1, 3, 5], [2, 0, 4]] {
            ex.extend(sequence_examples(&s, &map, &v, 64).unwrap());
        }
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let mut a = small_model(&v, 4);
        let mut b = small_model(&v, 4);
        let ra = train_lm(&mut a, &ex, &cfg).unwrap();
        ex.reverse();
        let rb = train_lm(&mut b, &ex, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params().flatten(), b.params().flatten());
    }
}
