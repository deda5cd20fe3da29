//! Lloyd's k-means with k-means++ seeding over rows of a [`Matrix`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Debug)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids`; ties go to the smallest index.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // floating error can leave `chosen` on a zero-distance point
            if d2[chosen] <= 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `points`. An empty cluster is reseeded to the point
/// currently farthest from its own centroid.
pub fn kmeans(points: &Matrix, params: &KMeansParams, rng: &mut impl Rng) -> Result<KMeansFit> {
    let (n, d) = points.shape();
    if params.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < params.k {
        return Err(Error::TooFewPoints { points: n, k: params.k });
    }
    let k = params.k;
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut iterations = 0;

    for _ in 0..params.max_iters.max(1) {
        iterations += 1;
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centroids);
            assignments[i] = c;
            dists[i] = dd;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut new_centroids = Matrix::zeros(k, d);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                log::debug!("k-means: reseeding empty cluster {c} to point {far}");
                new_centroids.row_mut(c).copy_from_slice(points.row(far));
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (o, s) in new_centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s * inv;
                }
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(centroids.row(c), new_centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if shift < params.tol {
            break;
        }
    }
    for i in 0..n {
        assignments[i] = nearest(points.row(i), &centroids).0;
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_one_is_the_mean() {
        let pts = Matrix::from_vec(4, 2, vec![0., 0., 2., 0., 0., 4., 2., 4.]);
        let fit = kmeans(
            &pts,
            &KMeansParams {
                k: 1,
                max_iters: 10,
                tol: 1e-12,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(fit.centroids.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn separated_points_become_their_own_centroids() {
        let mut data = Vec::new();
        for i in 0..8 {
            data.push((i % 4) as f64 * 10.0);
            data.push((i / 4) as f64 * 10.0);
        }
        let pts = Matrix::from_vec(8, 2, data);
        for seed in 0..5 {
            let fit = kmeans(
                &pts,
                &KMeansParams {
                    k: 8,
                    max_iters: 20,
                    tol: 1e-12,
                },
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            for i in 0..8 {
                assert_eq!(fit.centroids.row(fit.assignments[i]), pts.row(i));
            }
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = Matrix::zeros(2, 3);
        let r = kmeans(
            &pts,
            &KMeansParams {
                k: 3,
                max_iters: 5,
                tol: 0.0,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::TooFewPoints { points: 2, k: 3 })));
    }

    #[test]
    fn duplicate_points_still_fill_every_centroid() {
        // only two distinct locations but k = 3: one cluster must be reseeded
        let pts = Matrix::from_vec(5, 1, vec![0., 0., 0., 5., 5.]);
        let fit = kmeans(
            &pts,
            &KMeansParams {
                k: 3,
                max_iters: 10,
                tol: 0.0,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(fit.centroids.is_finite());
        for i in 0..5 {
            assert_eq!(fit.centroids.get(fit.assignments[i], 0), pts.get(i, 0));
        }
    }
}
