use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;

use super::BatchClusterer;

/// Density-based clustering.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are the connected components of core points,
/// numbered in order of their first core point in the input. A non-core
/// point within `eps` of one or more cores joins the lowest-numbered of
/// their clusters; everything else is noise.
///
/// Identical points are collapsed into one weighted point first. They
/// share a neighbourhood, so the labelling is unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dbscan {
    pub eps: f64,
    pub min_pts: usize,
}

impl Dbscan {
    pub fn new(eps: f64, min_pts: usize) -> Self {
        Dbscan { eps, min_pts }
    }
}

#[inline]
fn within(a: &[f64], b: &[f64], eps_sq: f64) -> bool {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
        if acc > eps_sq {
            return false;
        }
    }
    true
}

struct Deduped<'a> {
    points: Vec<&'a [f64]>,
    weights: Vec<usize>,
    of_input: Vec<usize>,
}

fn dedupe(points: &[Vec<f64>]) -> Deduped<'_> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out = Deduped {
        points: Vec::new(),
        weights: Vec::new(),
        of_input: Vec::with_capacity(points.len()),
    };
    for p in points {
        // -0.0 and 0.0 are the same point
        let bits: Vec<u64> = p.iter().map(|x| (x + 0.0).to_bits()).collect();
        let u = *index.entry(bits).or_insert_with(|| {
            out.points.push(p);
            out.weights.push(0);
            out.points.len() - 1
        });
        out.weights[u] += 1;
        out.of_input.push(u);
    }
    out
}

impl BatchClusterer for Dbscan {
    fn name(&self) -> &'static str {
        "dbscan"
    }

    fn fit(&self, points: &[Vec<f64>]) -> Vec<Option<u32>> {
        let d = dedupe(points);
        let n = d.points.len();
        let eps_sq = self.eps * self.eps;

        let neighbours: Vec<Vec<u32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && within(d.points[i], d.points[j], eps_sq))
                    .map(|j| j as u32)
                    .collect()
            })
            .collect();
        let core: Vec<bool> = (0..n)
            .map(|i| d.weights[i] + neighbours[i].iter().map(|&j| d.weights[j as usize]).sum::<usize>() >= self.min_pts)
            .collect();

        // unique points are in order of first appearance, so this visits
        // components in input order
        let mut label: Vec<Option<u32>> = vec![None; n];
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if !core[start] || label[start].is_some() {
                continue;
            }
            label[start] = Some(next);
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in &neighbours[u] {
                    let v = v as usize;
                    if core[v] && label[v].is_none() {
                        label[v] = Some(next);
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        for i in 0..n {
            if !core[i] {
                label[i] = neighbours[i]
                    .iter()
                    .filter(|&&j| core[j as usize])
                    .filter_map(|&j| label[j as usize])
                    .min();
            }
        }
        d.of_input.iter().map(|&u| label[u]).collect()
    }
}
