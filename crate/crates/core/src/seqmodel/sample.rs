//! Ancestral sampling with temperature and per-step token constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Support;

use super::model::AutoregressiveModel;
use super::vocab::TokenId;

/// A generated continuation and the log-probability of each token under the
/// distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<f64>,
    pub supports: Vec<Support>,
}

/// Draws one token from `softmax(logits / temperature)` restricted to
/// `support`. `temperature == 0` is the argmax limit (ties to the smallest id).
/// Returns the token and its log-probability (0 for argmax).
pub fn draw(logits: &[f64], support: &Support, temperature: f64, rng: &mut impl Rng) -> Option<(TokenId, f64)> {
    if temperature == 0.0 {
        let mut best: Option<(TokenId, f64)> = None;
        support.for_each(logits.len(), |t| {
            if best.is_none_or(|(_, v)| logits[t] > v) {
                best = Some((t, logits[t]));
            }
        });
        return best.map(|(t, _)| (t, 0.0));
    }
    let inv = 1.0 / temperature;
    let mut ids = Vec::new();
    let mut max = f64::NEG_INFINITY;
    support.for_each(logits.len(), |t| {
        ids.push(t);
        max = max.max(logits[t] * inv);
    });
    if ids.is_empty() {
        return None;
    }
    let weights: Vec<f64> = ids.iter().map(|&t| (logits[t] * inv - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut pick = ids.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            pick = i;
            break;
        }
        u -= w;
    }
    let logp = (weights[pick] / total).ln();
    Some((ids[pick], logp))
}

/// Samples from `state` onward. `constraint` sees the tokens generated so far
/// and returns the allowed next tokens, or `None` to stop. Generation also
/// stops after emitting `stop` or `max_new` tokens.
pub fn sample_constrained<M: AutoregressiveModel>(
    model: &M,
    mut state: M::State,
    temperature: f64,
    max_new: usize,
    stop: Option<TokenId>,
    rng: &mut impl Rng,
    mut constraint: impl FnMut(&[TokenId]) -> Option<Support>,
) -> Result<(Sampled, M::State)> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(Error::invalid(format!("temperature must be >= 0, got {temperature}")));
    }
    let mut out = Sampled {
        tokens: Vec::new(),
        logps: Vec::new(),
        supports: Vec::new(),
    };
    while out.tokens.len() < max_new {
        let Some(support) = constraint(&out.tokens) else { break };
        let Some((tok, logp)) = draw(model.next_logits(&state), &support, temperature, rng) else {
            break;
        };
        model.push(&mut state, tok);
        out.tokens.push(tok);
        out.logps.push(logp);
        out.supports.push(support);
        if Some(tok) == stop {
            break;
        }
    }
    Ok((out, state))
}

/// Unconstrained ancestral sampling of up to `max_len` new tokens after
/// `prompt`, stopping at `eos`.
pub fn sample_sequence<M: AutoregressiveModel>(
    model: &M,
    prompt: &[TokenId],
    temperature: f64,
    max_len: usize,
    eos: TokenId,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(Error::invalid(format!("temperature must be >= 0, got {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = model.start(prompt);
    let (s, _) = sample_constrained(model, state, temperature, max_len, Some(eos), &mut rng, |_| {
        Some(Support::Full)
    })?;
    Ok(s.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::softmax_in_place;

    /// Emits the same logits at every step.
    struct Fixed(Vec<f64>);

    impl AutoregressiveModel for Fixed {
        type State = Vec<f64>;
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn start(&self, _: &[TokenId]) -> Vec<f64> {
            self.0.clone()
        }
        fn push(&self, _: &mut Vec<f64>, _: TokenId) {}
        fn next_logits<'s>(&self, state: &'s Vec<f64>) -> &'s [f64] {
            state
        }
    }

    #[test]
    fn seeded_sampling_repeats_and_stops_at_eos() {
        let m = Fixed(vec![0.1, 0.5, 0.2, -0.3]);
        let a = sample_sequence(&m, &[1], 0.7, 40, 3, 9).unwrap();
        assert_eq!(a, sample_sequence(&m, &[1], 0.7, 40, 3, 9).unwrap());
        assert!(a.len() <= 40);
        assert!(a[..a.len() - 1].iter().all(|&t| t != 3));
        assert_eq!(sample_sequence(&m, &[], 0.0, 5, 3, 0).unwrap(), vec![1; 5]);
        assert!(sample_sequence(&m, &[], -1.0, 5, 3, 0).is_err());
    }

    #[test]
    fn monte_carlo_frequencies_match_softmax() {
        let logits = [0.3, -1.0, 1.2];
        let t = 0.7;
        let mut p: Vec<f64> = logits.iter().map(|x| x / t).collect();
        softmax_in_place(&mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (tok, logp) = draw(&logits, &Support::Full, t, &mut rng).unwrap();
            assert!((logp - p[tok].ln()).abs() < 1e-12);
            counts[tok] += 1;
        }
        for i in 0..3 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - p[i]).abs() < 0.02, "token {i}: {f} vs {}", p[i]);
        }
    }

    #[test]
    fn zero_temperature_is_argmax_with_low_id_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw(&[0.0, 2.0, 2.0], &Support::Full, 0.0, &mut rng), Some((1, 0.0)));
        assert_eq!(
            draw(&[5.0, 1.0, 2.0], &Support::Range(1, 3), 0.0, &mut rng),
            Some((2, 0.0))
        );
        assert_eq!(draw(&[5.0], &Support::Range(1, 1), 0.7, &mut rng), None);
    }
}
