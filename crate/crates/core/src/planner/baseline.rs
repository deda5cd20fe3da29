//! Feature-based routing baseline: multinomial logistic regression over a
//! handful of history statistics.

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemIdx};
use crate::error::{Error, Result};

use super::{distinct_categories, Path};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteFeatures {
    pub history_len: usize,
    /// Distinct categories at levels 1, 2 and 3.
    pub distinct: [usize; 3],
    /// Score gap between the fast model's first and second candidates.
    pub top1_margin: f64,
}

impl RouteFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.history_len as f64,
            self.distinct[0] as f64,
            self.distinct[1] as f64,
            self.distinct[2] as f64,
            self.top1_margin,
        ]
    }
}

pub fn route_features(history: &[ItemIdx], catalog: &Catalog, fast_scores: &[f64]) -> RouteFeatures {
    let margin = match fast_scores {
        [a, b, ..] => a - b,
        _ => 0.0,
    };
    RouteFeatures {
        history_len: history.len(),
        distinct: [1, 2, 3].map(|l| distinct_categories(history, catalog, l)),
        top1_margin: margin,
    }
}

/// Softmax regression over standardized features, fit by full-batch
/// gradient descent from zero weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticBaseline {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `3 x (features + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LogisticBaseline {
    pub fn fit(x: &[Vec<f64>], y: &[Path], epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid("baseline needs matching, non-empty features and labels"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let scale: Vec<f64> = scale
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        let mut model = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d + 1]; 3],
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        for _ in 0..epochs {
            let mut grad = vec![vec![0.0; d + 1]; 3];
            for (zi, yi) in z.iter().zip(y) {
                let p = model.probs_std(zi);
                for c in 0..3 {
                    let g = p[c] - if yi.index() == c { 1.0 } else { 0.0 };
                    for j in 0..d {
                        grad[c][j] += g * zi[j] / n;
                    }
                    grad[c][d] += g / n;
                }
            }
            for c in 0..3 {
                for j in 0..=d {
                    let reg = if j < d { l2 * model.weights[c][j] } else { 0.0 };
                    model.weights[c][j] -= lr * (grad[c][j] + reg);
                }
            }
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probs_std(&self, z: &[f64]) -> [f64; 3] {
        let d = z.len();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        [e[0] / s, e[1] / s, e[2] / s]
    }

    pub fn probs(&self, x: &[f64]) -> [f64; 3] {
        self.probs_std(&self.standardize(x))
    }

    /// Most probable path; ties go to the cheaper path.
    pub fn predict(&self, x: &[f64]) -> Path {
        let p = self.probs(x);
        let mut best = 0;
        for c in 1..3 {
            if p[c] > p[best] {
                best = c;
            }
        }
        Path::ALL[best]
    }
}
