//! Lloyd's k-means on 3-vectors with k-means++ seeding.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec3>,
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn nearest(p: &Vec3, centroids: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec3], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Runs at most `iters` Lloyd iterations, stopping early once assignments
/// settle. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[Vec3], k: usize, seed: u64, iters: usize) -> Clustering {
    debug_assert!(!points.is_empty() && k >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..iters {
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            for d in 0..3 {
                sums[a][d] += p[d];
            }
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    Clustering {
        centroids,
        assignment,
        counts,
    }
}

/// Index of the most populous cluster; ties go to the larger centroid `z`,
/// then to the lower index.
pub fn largest_cluster(counts: &[usize], centroids: &[Vec3]) -> usize {
    let mut best = 0;
    for i in 1..counts.len() {
        let better = counts[i] > counts[best] || (counts[i] == counts[best] && centroids[i][2] > centroids[best][2]);
        if better {
            best = i;
        }
    }
    best
}
