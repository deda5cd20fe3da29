//! Discriminative I2I probe: given a source item, pick its collaborative
//! partner out of a seeded candidate set of the partner plus distractors.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{I2IPair, ItemIdx};
use crate::error::{Error, Result};
use crate::quantizer::SidMap;

/// Scores every candidate for a source item; higher is more related.
pub trait ProbeScorer {
    fn score(&mut self, source: ItemIdx, candidates: &[ItemIdx]) -> Vec<f64>;
}

impl<F: FnMut(ItemIdx, &[ItemIdx]) -> Vec<f64>> ProbeScorer for F {
    fn score(&mut self, source: ItemIdx, candidates: &[ItemIdx]) -> Vec<f64> {
        self(source, candidates)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResult {
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Candidate set for one pair: the target plus `n_distractors` distinct items
/// other than source and target, in shuffled order.
pub fn probe_candidates(pair: &I2IPair, n_items: usize, n_distractors: usize, rng: &mut ChaCha8Rng) -> Vec<ItemIdx> {
    let pool: Vec<ItemIdx> = (0..n_items).filter(|&i| i != pair.source && i != pair.target).collect();
    let mut out: Vec<ItemIdx> = index::sample(rng, pool.len(), n_distractors)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.push(pair.target);
    out.shuffle(rng);
    out
}

/// Fraction of pairs whose target is the scorer's top candidate. Ties go to
/// the earliest candidate in the shuffled order; NaN scores never win.
pub fn i2i_probe(
    pairs: &[I2IPair],
    n_items: usize,
    scorer: &mut dyn ProbeScorer,
    n_distractors: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if n_items < n_distractors + 2 {
        return Err(Error::invalid(format!(
            "{n_items} items cannot supply {n_distractors} distractors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    for pair in pairs {
        let cands = probe_candidates(pair, n_items, n_distractors, &mut rng);
        let scores = scorer.score(pair.source, &cands);
        if scores.len() != cands.len() {
            return Err(Error::DimensionMismatch {
                expected: cands.len(),
                actual: scores.len(),
            });
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            let b = scores[best];
            if !s.is_nan() && (b.is_nan() || *s > b) {
                best = i;
            }
        }
        if cands[best] == pair.target {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        trials: pairs.len(),
        correct,
        accuracy: if pairs.is_empty() {
            0.0
        } else {
            correct as f64 / pairs.len() as f64
        },
    })
}

/// Cosine similarity between item vectors, indexed by item.
pub fn cosine_scorer(vectors: &[Vec<f64>]) -> impl ProbeScorer + '_ {
    move |src: ItemIdx, cands: &[ItemIdx]| {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = &vectors[src];
        let ns = norm(s);
        cands
            .iter()
            .map(|&c| {
                let v = &vectors[c];
                let d: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
                let den = ns * norm(v);
                if den > 0.0 {
                    d / den
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Fractions of pairs sharing the level-1 code and the level-1..2 prefix.
pub fn sid_prefix_overlap(pairs: &[I2IPair], sid_map: &SidMap) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let (mut l1, mut l12) = (0usize, 0usize);
    for p in pairs {
        let (a, b) = (&sid_map.sid(p.source).codes, &sid_map.sid(p.target).codes);
        if a[0] == b[0] {
            l1 += 1;
            if a.len() > 1 && a[1] == b[1] {
                l12 += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    (l1 as f64 / n, l12 as f64 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::SemanticId;

    fn pair(s: usize, t: usize) -> I2IPair {
        I2IPair {
            source: s,
            target: t,
            cooccurrence_count: 1,
        }
    }

    #[test]
    fn candidates_exclude_pair_and_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = probe_candidates(&pair(2, 5), 12, 9, &mut rng);
        assert_eq!(c.len(), 10);
        assert!(!c.contains(&2));
        assert_eq!(c.iter().filter(|&&x| x == 5).count(), 1);
        let mut s = c.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn hand_counted_overlap() {
        let sids = vec![
            SemanticId::new(vec![1, 1, 1]),
            SemanticId::new(vec![1, 2, 1]),
            SemanticId::new(vec![2, 1, 1]),
            SemanticId::new(vec![1, 1, 2]),
            SemanticId::new(vec![3, 3, 3]),
        ];
        let map = SidMap::new(sids, 3, 4).unwrap();
        let pairs = [pair(0, 1), pair(0, 3), pair(0, 2), pair(2, 4)];
        assert_eq!(sid_prefix_overlap(&pairs, &map), (0.5, 0.25));
    }
}
