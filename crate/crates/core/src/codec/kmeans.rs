//! Seeded k-means with k-means++ seeding, used to fit each RVQ stage.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Squared Euclidean distance accumulated in double precision.
#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the smallest index.
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub struct KMeansResult {
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    /// True when the data had fewer than `k` distinct points and the tail of
    /// the codebook is zero padding.
    pub padded: bool,
}

/// Fits `k` centroids to `data` (`n × dim`, row-major).
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> KMeansResult {
    let n = data.len() / dim;
    let points: Vec<&[f32]> = data.chunks_exact(dim).collect();

    let mut seen = HashSet::new();
    let mut distinct: Vec<&[f32]> = Vec::new();
    for p in &points {
        let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            distinct.push(p);
            if distinct.len() > k {
                break;
            }
        }
    }
    if distinct.len() <= k {
        let mut centroids: Vec<f32> = distinct.iter().flat_map(|p| p.iter().copied()).collect();
        let padded = distinct.len() < k;
        centroids.resize(k * dim, 0.0);
        return KMeansResult { centroids, padded };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.par_iter().map(|p| sq_dist(p, &centroids[..dim])).collect();
    for c in 1..k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // all remaining mass is zero: every point coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.extend_from_slice(points[next]);
        let new_c = &centroids[c * dim..(c + 1) * dim];
        d2.par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(d, p)| *d = d.min(sq_dist(p, new_c)));
    }

    for _ in 0..iters {
        let assign: Vec<usize> = points
            .par_iter()
            .map(|p| nearest(p, &centroids, dim).0)
            .collect();
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                let v = (sums[c * dim + d] / counts[c] as f64) as f32;
                if v != centroids[c * dim + d] {
                    moved = true;
                }
                centroids[c * dim + d] = v;
            }
        }
        if !moved {
            break;
        }
    }
    KMeansResult {
        centroids,
        padded: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_well_separated_clusters() {
        let centers = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = Vec::new();
        for i in 0..300 {
            let c = centers[i % 3];
            data.push(c[0] + rng.random_range(-0.5..0.5));
            data.push(c[1] + rng.random_range(-0.5..0.5));
        }
        let r = kmeans(&data, 2, 3, 20, 5);
        for c in centers {
            let (_, d) = nearest(&c, &r.centroids, 2);
            assert!(d < 0.1, "center {c:?} missed");
        }
    }

    #[test]
    fn few_distinct_points_pad_with_zeros() {
        let data = vec![1.0f32, 2.0, 1.0, 2.0, 3.0, 4.0];
        let r = kmeans(&data, 2, 4, 20, 0);
        assert!(r.padded);
        assert_eq!(r.centroids, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let cents = vec![1.0f32, -1.0, 1.0];
        assert_eq!(nearest(&[0.0], &cents, 1).0, 0);
    }
}
