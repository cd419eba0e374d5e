//! Spherical k-means (cosine similarity) with k-means++ seeding.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ThemeError;
use crate::features::l2_normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Mean cosine between each point and its centroid, after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(point, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        // squared cosine distance to the closest chosen centroid
        let weights: Vec<f64> = points.iter().map(|p| (1.0 - nearest(p, &centroids).1).max(0.0).powi(2)).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Cluster unit-normalized copies of `embeddings` into `k` groups. Points
/// go to the most similar centroid (lowest index on ties); a centroid whose
/// cluster empties keeps its previous position.
pub fn cluster_turns(embeddings: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Clustering, ThemeError> {
    if k == 0 {
        return Err(ThemeError::ZeroK);
    }
    if embeddings.len() < k {
        return Err(ThemeError::TooFewTurns { n: embeddings.len(), k });
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(ThemeError::Dimension);
    }
    let points: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let mut v = e.clone();
            l2_normalize(&mut v);
            v
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignment) {
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, mut s) in centroids.iter_mut().zip(sums) {
            if l2_normalize(&mut s) {
                *c = s;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let score = points.iter().zip(&next).map(|(p, &a)| dot(p, &centroids[a])).sum::<f64>() / points.len() as f64;
        objective.push(score);
        let changed = next != assignment;
        assignment = next;
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(Clustering { assignment, centroids, objective, iterations, converged })
}
