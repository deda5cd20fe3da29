//! Prefix trie over catalog Semantic IDs and trie-constrained beam search.
//!
//! A hypothesis's score is its summed per-token log-probability divided by
//! `len ^ length_penalty`, where `len` counts SID tokens only. Finished
//! hypotheses wait in a pool while shorter-or-equal beams keep expanding;
//! the final list is sorted by score, ties broken by ascending item index
//! (which is ascending `item_id`).

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemIdx};
use crate::error::{Error, Result};
use crate::nn::matrix::log_sum_exp;
use crate::nn::Support;
use crate::quantizer::SidMap;
use crate::seqmodel::{history_window, AutoregressiveModel, SequenceModel, TokenId, Vocabulary};

#[derive(Clone, Debug)]
struct Node {
    /// Sorted by token id.
    children: Vec<(TokenId, usize)>,
    item: Option<ItemIdx>,
    depth: usize,
    /// Smallest item index in this subtree.
    min_item: ItemIdx,
}

#[derive(Clone, Debug)]
pub struct SidTrie {
    nodes: Vec<Node>,
    n_leaves: usize,
    /// Softmax support of the token emitted at each depth.
    depth_support: Vec<Support>,
}

pub const ROOT: usize = 0;

impl SidTrie {
    /// One root-to-leaf path per catalog item, labeled by its SID tokens.
    pub fn build(sid_map: &SidMap, vocab: &Vocabulary) -> Result<Self> {
        let mut nodes = vec![Node {
            children: Vec::new(),
            item: None,
            depth: 0,
            min_item: usize::MAX,
        }];
        for item in 0..sid_map.len() {
            let path = vocab.sid_tokens(sid_map.sid(item));
            let mut cur = ROOT;
            for &tok in &path {
                if nodes[cur].item.is_some() {
                    return Err(Error::DuplicateSid {
                        codes: sid_map.sid(item).codes.clone(),
                    });
                }
                nodes[cur].min_item = nodes[cur].min_item.min(item);
                cur = match nodes[cur].children.binary_search_by_key(&tok, |c| c.0) {
                    Ok(i) => nodes[cur].children[i].1,
                    Err(i) => {
                        let depth = nodes[cur].depth + 1;
                        nodes.push(Node {
                            children: Vec::new(),
                            item: None,
                            depth,
                            min_item: item,
                        });
                        let id = nodes.len() - 1;
                        nodes[cur].children.insert(i, (tok, id));
                        id
                    }
                };
            }
            if nodes[cur].item.is_some() || !nodes[cur].children.is_empty() {
                return Err(Error::DuplicateSid {
                    codes: sid_map.sid(item).codes.clone(),
                });
            }
            nodes[cur].item = Some(item);
            nodes[cur].min_item = nodes[cur].min_item.min(item);
        }
        let mut depth_support: Vec<Support> = (0..vocab.n_levels())
            .map(|l| {
                let (lo, hi) = vocab.level_range(l);
                Support::Range(lo, hi)
            })
            .collect();
        let (lo, hi) = vocab.disambig_range();
        depth_support.push(Support::Range(lo, hi));
        Ok(Self {
            n_leaves: sid_map.len(),
            nodes,
            depth_support,
        })
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn children(&self, node: usize) -> &[(TokenId, usize)] {
        &self.nodes[node].children
    }

    pub fn item(&self, node: usize) -> Option<ItemIdx> {
        self.nodes[node].item
    }

    pub fn depth(&self, node: usize) -> usize {
        self.nodes[node].depth
    }

    /// Child reached from `node` by `token`.
    pub fn step(&self, node: usize, token: TokenId) -> Option<usize> {
        let c = &self.nodes[node].children;
        c.binary_search_by_key(&token, |x| x.0).ok().map(|i| c[i].1)
    }

    /// Allowed next tokens at `node`.
    pub fn allowed(&self, node: usize) -> Support {
        Support::List(self.nodes[node].children.iter().map(|c| c.0).collect())
    }

    /// Softmax support of the token chosen at `node` (its level's code family).
    pub fn level_support(&self, node: usize) -> &Support {
        let d = self.nodes[node].depth.min(self.depth_support.len() - 1);
        &self.depth_support[d]
    }

    /// Every root-to-leaf path, in item order.
    pub fn paths(&self) -> Vec<(Vec<TokenId>, ItemIdx)> {
        let mut out = Vec::with_capacity(self.n_leaves);
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(item) = self.nodes[n].item {
                out.push((path.clone(), item));
            }
            for &(tok, child) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(tok);
                stack.push((child, p));
            }
        }
        out.sort_by_key(|p| p.1);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub width: usize,
    pub length_penalty: f64,
    /// Normalize each step's softmax over the current level's code family
    /// instead of the whole vocabulary.
    pub level_softmax: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 50,
            length_penalty: 1.0,
            level_softmax: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub item: ItemIdx,
    pub score: f64,
}

struct Beam<S> {
    node: usize,
    logp: f64,
    len: usize,
    state: S,
}

/// Log-probability of `token` given `logits` under the configured normalization.
pub fn step_logprob(logits: &[f64], token: TokenId, support: &Support, level_softmax: bool) -> f64 {
    let lz = if level_softmax {
        support.log_norm(logits)
    } else {
        log_sum_exp(logits)
    };
    logits[token] - lz
}

fn normalized(logp: f64, len: usize, penalty: f64) -> f64 {
    logp / (len as f64).powf(penalty)
}

/// Returns up to `width` distinct catalog items ranked by normalized score.
/// `context` is everything consumed before the first SID token.
pub fn beam_search<M: AutoregressiveModel>(
    model: &M,
    context: &[TokenId],
    trie: &SidTrie,
    cfg: &BeamConfig,
) -> Result<Vec<Candidate>> {
    beam_search_from(model, model.start(context), trie, cfg)
}

/// [`beam_search`] starting from an already-primed decoder state.
pub fn beam_search_from<M: AutoregressiveModel>(
    model: &M,
    state: M::State,
    trie: &SidTrie,
    cfg: &BeamConfig,
) -> Result<Vec<Candidate>> {
    if cfg.width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if trie.n_leaves() == 0 {
        return Err(Error::invalid("trie is empty"));
    }
    let mut beams = vec![Beam {
        node: ROOT,
        logp: 0.0,
        len: 0,
        state,
    }];
    let mut finished: Vec<Candidate> = Vec::new();
    while !beams.is_empty() {
        // (parent beam, token, child node, cumulative logp)
        let mut alive: Vec<(usize, TokenId, usize, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let logits = model.next_logits(&b.state);
            let support = trie.level_support(b.node);
            let lz = if cfg.level_softmax {
                support.log_norm(logits)
            } else {
                log_sum_exp(logits)
            };
            for &(tok, child) in trie.children(b.node) {
                let logp = b.logp + logits[tok] - lz;
                if !logp.is_finite() && logp != f64::NEG_INFINITY {
                    return Err(Error::Numerical(format!("non-finite score for token {tok}")));
                }
                match trie.item(child) {
                    Some(item) => finished.push(Candidate {
                        item,
                        score: normalized(logp, b.len + 1, cfg.length_penalty),
                    }),
                    None => alive.push((bi, tok, child, logp)),
                }
            }
        }
        alive.sort_by(|a, b| {
            b.3.total_cmp(&a.3)
                .then_with(|| trie.nodes[a.2].min_item.cmp(&trie.nodes[b.2].min_item))
        });
        alive.truncate(cfg.width);
        beams = alive
            .into_iter()
            .map(|(bi, tok, child, logp)| {
                let parent = &beams[bi];
                let mut state = parent.state.clone();
                model.push(&mut state, tok);
                Beam {
                    node: child,
                    logp,
                    len: parent.len + 1,
                    state,
                }
            })
            .collect();
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    finished.truncate(cfg.width);
    Ok(finished)
}

/// Fast-path retrieval for one user: the newest whole history items that
/// leave room for a full SID in the model window, then beam search.
pub fn recommend(
    model: &SequenceModel,
    history: &[ItemIdx],
    sid_map: &SidMap,
    vocab: &Vocabulary,
    trie: &SidTrie,
    cfg: &BeamConfig,
) -> Result<Vec<Candidate>> {
    let budget = model.config().max_len.saturating_sub(vocab.n_levels() + 1);
    let context = history_window(history, sid_map, vocab, budget);
    beam_search(model, &context, trie, cfg)
}

/// 1-based position of `item` in `candidates`.
pub fn hit_rank(candidates: &[ItemIdx], item: ItemIdx) -> Option<usize> {
    candidates.iter().position(|&c| c == item).map(|p| p + 1)
}

/// One line of `candidates.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub user_id: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

impl CandidateRecord {
    pub fn new(user_id: &str, candidates: &[Candidate], catalog: &Catalog) -> Self {
        Self {
            user_id: user_id.to_string(),
            items: candidates.iter().map(|c| catalog.id(c.item).to_string()).collect(),
            scores: candidates.iter().map(|c| c.score).collect(),
        }
    }

    pub fn to_candidates(&self, catalog: &Catalog) -> Result<Vec<Candidate>> {
        if self.items.len() != self.scores.len() {
            return Err(Error::Schema(format!(
                "user {}: {} items but {} scores",
                self.user_id,
                self.items.len(),
                self.scores.len()
            )));
        }
        self.items
            .iter()
            .zip(&self.scores)
            .map(|(id, &score)| {
                let item = catalog.idx(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
                Ok(Candidate { item, score })
            })
            .collect()
    }
}
