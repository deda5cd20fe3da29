//! Candidate ranker with a local activation unit over the user's history.
//!
//! For history items `h_1..h_T` and candidate `c` (all embedded):
//!
//! ```text
//! a_i    = w2 . relu(W1 [h_i, c, h_i*c, h_i-c] + b1) + b2
//! pooled = sum_i a_i m_i h_i          (m_i = 1, or a recency decay)
//! logit  = v2 . relu(V1 [pooled, c] + d1) + d2
//! ```
//!
//! Attention weights are not normalized, so the pooled vector also carries
//! how much of the history is relevant.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Catalog, ItemIdx};
use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, Grads, Matrix, ParamId, ParamMask, ParamStore, Tape, Var};

pub const CHECKPOINT_KIND: &str = "ranker";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub mlp_hidden: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Multiplies the weight of the `k`-th most recent history item by
    /// `decay^k`. Off by default, which makes pooling order-invariant.
    pub recency_decay: Option<f64>,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            attention_hidden: 32,
            mlp_hidden: 64,
            init_std: 0.1,
            seed: 0,
            recency_decay: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Ids {
    item_emb: ParamId,
    att_w1: ParamId,
    att_b1: ParamId,
    att_w2: ParamId,
    att_b2: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct RankerModel {
    config: RankerConfig,
    n_items: usize,
    catalog_hash: u64,
    params: ParamStore,
    ids: Ids,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Architecture {
    config: RankerConfig,
    n_items: usize,
}

/// First 8 bytes of the SHA-256 of the newline-joined item ids.
pub fn catalog_hash(catalog: &Catalog) -> u64 {
    let mut h = Sha256::new();
    for it in catalog.items() {
        h.update(it.item_id.as_bytes());
        h.update(b"\n");
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl RankerModel {
    pub fn new(config: RankerConfig, n_items: usize, catalog_hash: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.attention_hidden == 0 || config.mlp_hidden == 0 || n_items == 0 {
            return Err(Error::invalid("ranker dimensions and catalog size must be positive"));
        }
        if let Some(d) = config.recency_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::invalid("recency_decay must be in (0, 1]"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, ha, hm, s) = (
            config.embed_dim,
            config.attention_hidden,
            config.mlp_hidden,
            config.init_std,
        );
        let mut p = ParamStore::new();
        let ids = Ids {
            item_emb: p.add("item_emb", "embedding", Matrix::randn(n_items, d, s, &mut rng)),
            att_w1: p.add(
                "att_w1",
                "attention",
                Matrix::randn(4 * d, ha, (1.0 / (4 * d) as f64).sqrt(), &mut rng),
            ),
            att_b1: p.add("att_b1", "attention", Matrix::zeros(1, ha)),
            att_w2: p.add(
                "att_w2",
                "attention",
                Matrix::randn(ha, 1, (1.0 / ha as f64).sqrt(), &mut rng),
            ),
            att_b2: p.add("att_b2", "attention", Matrix::zeros(1, 1)),
            mlp_w1: p.add(
                "mlp_w1",
                "mlp",
                Matrix::randn(2 * d, hm, (1.0 / (2 * d) as f64).sqrt(), &mut rng),
            ),
            mlp_b1: p.add("mlp_b1", "mlp", Matrix::zeros(1, hm)),
            mlp_w2: p.add(
                "mlp_w2",
                "mlp",
                Matrix::randn(hm, 1, (1.0 / hm as f64).sqrt(), &mut rng),
            ),
            mlp_b2: p.add("mlp_b2", "mlp", Matrix::zeros(1, 1)),
        };
        Ok(Self {
            config,
            n_items,
            catalog_hash,
            params: p,
            ids,
        })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Pooling multiplier of each history position (oldest first).
    fn position_weights(&self, len: usize) -> Vec<f64> {
        match self.config.recency_decay {
            None => vec![1.0; len],
            Some(d) => (0..len).map(|i| d.powi((len - 1 - i) as i32)).collect(),
        }
    }

    /// Records logits (`n x 1`) for `(history, candidate)` pairs.
    pub fn forward(&self, tape: &mut Tape, pairs: &[(&[ItemIdx], ItemIdx)]) -> Var {
        let n = pairs.len();
        let t = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0).max(1);
        let mut hist_idx = Vec::with_capacity(n * t);
        let mut cand_rep = Vec::with_capacity(n * t);
        let mut mask = Matrix::zeros(n * t, 1);
        for (g, (hist, cand)) in pairs.iter().enumerate() {
            let w = self.position_weights(hist.len());
            for i in 0..t {
                hist_idx.push(hist.get(i).copied().unwrap_or(0));
                cand_rep.push(*cand);
                if i < hist.len() {
                    mask.set(g * t + i, 0, w[i]);
                }
            }
        }
        let ids = &self.ids;
        let emb = tape.param(ids.item_emb);
        let h = tape.gather(emb, hist_idx);
        let c = tape.gather(emb, cand_rep);
        let hc = tape.mul(h, c);
        let hmc = tape.sub(h, c);
        let feats = tape.concat_cols(vec![h, c, hc, hmc]);
        let (w1, b1, w2, b2) = (
            tape.param(ids.att_w1),
            tape.param(ids.att_b1),
            tape.param(ids.att_w2),
            tape.param(ids.att_b2),
        );
        let a = tape.matmul(feats, w1);
        let a = tape.add_row(a, b1);
        let a = tape.relu(a);
        let a = tape.matmul(a, w2);
        let a = tape.add_row(a, b2);
        let m = tape.input(mask);
        let a = tape.mul(a, m);
        let pooled = tape.weighted_pool(a, h, n);
        let cands = tape.gather(emb, pairs.iter().map(|p| p.1).collect());
        let z = tape.concat_cols(vec![pooled, cands]);
        let (v1, d1, v2, d2) = (
            tape.param(ids.mlp_w1),
            tape.param(ids.mlp_b1),
            tape.param(ids.mlp_w2),
            tape.param(ids.mlp_b2),
        );
        let z = tape.matmul(z, v1);
        let z = tape.add_row(z, d1);
        let z = tape.relu(z);
        let z = tape.matmul(z, v2);
        tape.add_row(z, d2)
    }

    /// Relevance logit of each candidate for one history.
    pub fn score(&self, history: &[ItemIdx], candidates: &[ItemIdx]) -> Vec<f64> {
        if candidates.is_empty() {
            return Vec::new();
        }
        let pairs: Vec<(&[ItemIdx], ItemIdx)> = candidates.iter().map(|&c| (history, c)).collect();
        let mut tape = Tape::new(&self.params);
        let z = self.forward(&mut tape, &pairs);
        tape.value(z).data().to_vec()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            vocab_hash: self.catalog_hash,
            architecture: serde_json::to_string(&Architecture {
                config: self.config.clone(),
                n_items: self.n_items,
            })
            .expect("serializable"),
            params: self.params.flatten(),
        }
    }

    /// Rebuilds a ranker; refuses checkpoints trained on a different catalog.
    pub fn from_checkpoint(ckpt: &Checkpoint, catalog: &Catalog) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let expected = catalog_hash(catalog);
        if ckpt.vocab_hash != expected {
            return Err(Error::VocabMismatch {
                expected,
                actual: ckpt.vocab_hash,
            });
        }
        let arch: Architecture = serde_json::from_str(&ckpt.architecture)
            .map_err(|e| Error::Checkpoint(format!("bad architecture block: {e}")))?;
        let mut m = Self::new(arch.config, arch.n_items, expected)?;
        if !m.params.load_flat(&ckpt.params) {
            return Err(Error::Checkpoint("ranker payload size mismatch".into()));
        }
        Ok(m)
    }
}

/// Reorders `candidates` by descending score (stable on ties) and keeps `n`.
pub fn rank_candidates(
    model: &RankerModel,
    history: &[ItemIdx],
    candidates: &[ItemIdx],
    n: usize,
) -> Vec<(ItemIdx, f64)> {
    let scores = model.score(history, candidates);
    let mut order: Vec<(ItemIdx, f64)> = candidates.iter().copied().zip(scores).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    order.truncate(n);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingInstance {
    /// Index of the user group this instance belongs to.
    pub group: usize,
    pub history: Vec<ItemIdx>,
    pub candidate: ItemIdx,
    pub label: u8,
}

/// One user's retrieval output and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct RankerSource<'a> {
    pub history: &'a [ItemIdx],
    pub target: ItemIdx,
    pub candidates: &'a [ItemIdx],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetStats {
    pub groups: usize,
    /// Groups whose candidates could not supply `k1 - 1` negatives.
    pub short_groups: usize,
    /// Groups whose positive was absent from the candidates and inserted.
    pub inserted_positives: usize,
}

/// Per source: the ground truth as the single positive plus `k1 - 1`
/// negatives sampled without replacement from the remaining candidates.
pub fn build_ranker_dataset(
    sources: &[RankerSource],
    k1: usize,
    seed: u64,
) -> Result<(Vec<RankingInstance>, DatasetStats)> {
    if k1 < 2 {
        return Err(Error::invalid("K1 must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sources.len() * k1);
    let mut stats = DatasetStats::default();
    for (g, s) in sources.iter().enumerate() {
        let mut pool: Vec<ItemIdx> = Vec::with_capacity(s.candidates.len());
        for &c in s.candidates {
            if c != s.target && !pool.contains(&c) {
                pool.push(c);
            }
        }
        if !s.candidates.contains(&s.target) {
            stats.inserted_positives += 1;
        }
        if pool.len() < k1 - 1 {
            stats.short_groups += 1;
        }
        let negs: Vec<ItemIdx> = pool.choose_multiple(&mut rng, k1 - 1).copied().collect();
        out.push(RankingInstance {
            group: g,
            history: s.history.to_vec(),
            candidate: s.target,
            label: 1,
        });
        for c in negs {
            out.push(RankingInstance {
                group: g,
                history: s.history.to_vec(),
                candidate: c,
                label: 0,
            });
        }
        stats.groups += 1;
    }
    if stats.short_groups > 0 {
        log::warn!(
            "{} ranking groups have fewer than {} negatives",
            stats.short_groups,
            k1 - 1
        );
    }
    Ok((out, stats))
}

/// Area under the ROC curve in Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the sum of positive mid-ranks (1-based), kept integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos_here = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum += twice_mid * pos_here;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankerReport {
    pub epoch_losses: Vec<f64>,
    pub valid_aucs: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

pub fn instance_scores(model: &RankerModel, data: &[RankingInstance]) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        let pairs: Vec<(&[ItemIdx], ItemIdx)> = chunk.iter().map(|r| (r.history.as_slice(), r.candidate)).collect();
        let mut tape = Tape::new(model.params());
        let z = model.forward(&mut tape, &pairs);
        out.extend_from_slice(tape.value(z).data());
    }
    out
}

pub fn dataset_auc(model: &RankerModel, data: &[RankingInstance]) -> Result<f64> {
    let labels: Vec<u8> = data.iter().map(|r| r.label).collect();
    auc(&instance_scores(model, data), &labels)
}

/// Binary cross-entropy training with early stopping on validation AUC.
/// Training stops once `patience` epochs pass without improvement (so
/// `patience == 0` runs exactly one epoch); the best epoch's parameters are
/// restored.
pub fn train_ranker(
    model: &mut RankerModel,
    train: &[RankingInstance],
    valid: &[RankingInstance],
    cfg: &RankerTrainConfig,
) -> Result<RankerReport> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("ranker datasets must be non-empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::invalid("ranker batch_size and lr must be positive"));
    }
    if let Some(bad) = train
        .iter()
        .chain(valid)
        .find(|r| r.candidate >= model.n_items || r.history.iter().any(|&h| h >= model.n_items))
    {
        return Err(Error::invalid(format!(
            "item index out of range in group {}",
            bad.group
        )));
    }
    let masks = vec![ParamMask::All; model.params.len()];
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = RankerReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<(&[ItemIdx], ItemIdx)> = batch
                .iter()
                .map(|&i| (train[i].history.as_slice(), train[i].candidate))
                .collect();
            let labels: Vec<f64> = batch.iter().map(|&i| train[i].label as f64).collect();
            let mut tape = Tape::new(&model.params);
            let z = model.forward(&mut tape, &pairs);
            let loss = tape.bce_with_logits(z, labels);
            let l = tape.value(loss).item();
            let grads: Grads = tape.backward(loss);
            if !l.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite ranker loss at epoch {epoch}")));
            }
            total += l * batch.len() as f64;
            adam.step(&mut model.params, &grads, &masks);
        }
        let mean = total / train.len() as f64;
        let a = dataset_auc(model, valid)?;
        log::debug!("ranker epoch {epoch}: loss {mean:.5} valid auc {a:.4}");
        report.epoch_losses.push(mean);
        report.valid_aucs.push(a);
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, model.params.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(report)
}
