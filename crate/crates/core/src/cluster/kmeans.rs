use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BatchClusterer;

/// Lloyd's k-means with k-means++ seeding. Clusters that end up smaller
/// than `min_size` are reported as noise so the output obeys the same
/// partition contract as DBSCAN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub min_size: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeans {
    pub fn new(k: usize, min_size: usize, seed: u64) -> Self {
        KMeans {
            k,
            min_size,
            max_iter: 100,
            seed,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one centroid")
}

impl BatchClusterer for KMeans {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn fit(&self, points: &[Vec<f64>]) -> Vec<Option<u32>> {
        if points.is_empty() || self.k == 0 {
            return vec![None; points.len()];
        }
        let k = self.k.min(points.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                break;
            }
            let mut x = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if x < *d {
                    pick = i;
                    break;
                }
                x -= d;
            }
            centroids.push(points[pick].clone());
            for (i, p) in points.iter().enumerate() {
                d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
            }
        }

        let dim = points[0].len();
        let mut assign = vec![0usize; points.len()];
        for iter in 0..self.max_iter {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let (c, _) = nearest(p, &centroids);
                if c != assign[i] || iter == 0 {
                    changed |= c != assign[i];
                    assign[i] = c;
                }
            }
            if !changed && iter > 0 {
                break;
            }
            let mut sums = vec![vec![0.0; dim]; centroids.len()];
            let mut counts = vec![0usize; centroids.len()];
            for (p, &c) in points.iter().zip(&assign) {
                counts[c] += 1;
                for (s, x) in sums[c].iter_mut().zip(p) {
                    *s += x;
                }
            }
            for (c, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
                if n > 0 {
                    centroids[c] = sum.into_iter().map(|s| s / n as f64).collect();
                }
            }
        }

        let mut sizes = vec![0usize; centroids.len()];
        assign.iter().for_each(|&c| sizes[c] += 1);
        // renumber surviving clusters in order of first member
        let mut remap: Vec<Option<u32>> = vec![None; centroids.len()];
        let mut next = 0u32;
        assign
            .iter()
            .map(|&c| {
                if sizes[c] < self.min_size {
                    return None;
                }
                Some(*remap[c].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                }))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut pts = vec![vec![0.0, 0.0]; 20];
        pts.extend(vec![vec![10.0, 10.0]; 20]);
        let labels = KMeans::new(2, 2, 7).fit(&pts);
        assert!(labels[..20].iter().all(|l| *l == Some(0)));
        assert!(labels[20..].iter().all(|l| *l == Some(1)));
    }

    #[test]
    fn small_clusters_become_noise() {
        let mut pts = vec![vec![0.0]; 10];
        pts.push(vec![100.0]);
        let labels = KMeans::new(2, 5, 1).fit(&pts);
        assert_eq!(labels[10], None);
        assert!(labels[..10].iter().all(|l| *l == Some(0)));
    }
}
