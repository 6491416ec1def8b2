//! Binary random forest used for the one-vs-all concept models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForestError {
    #[error("no {0} training examples")]
    EmptyClass(&'static str),
    #[error("expected dimension {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid forest parameters: {0}")]
    BadParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈√d⌉.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    /// Bootstrap each class to the size of the larger one, so a handful of
    /// negatives still yields leaves of `min_leaf` rows.
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 50,
            max_depth: 12,
            min_leaf: 5,
            max_features: None,
            bootstrap: true,
            balance_classes: true,
            seed: 1,
        }
    }
}

/// One tree as parallel node arrays. `feature[i] < 0` marks a leaf whose
/// positive fraction is `value[i]`; otherwise `x[feature] <= threshold`
/// goes to `left[i]`, else `right[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    fn new() -> Self {
        Tree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
        }
    }

    fn push_leaf(&mut self, value: f64) -> u32 {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        (self.feature.len() - 1) as u32
    }

    /// A single leaf; used to build forests by hand.
    pub fn leaf(value: f64) -> Self {
        let mut t = Tree::new();
        t.push_leaf(value);
        t
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if x[f as usize] <= self.threshold[node] {
                self.left[node]
            } else {
                self.right[node]
            } as usize;
        }
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub dim: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn from_trees(dim: usize, trees: Vec<Tree>) -> Self {
        Forest { dim, trees }
    }

    /// Mean of per-tree leaf fractions; always in `[0, 1]`.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.dim {
            return Err(ForestError::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        if self.trees.is_empty() {
            return Ok(0.0);
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }
}

struct Data<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<bool>,
    dim: usize,
}

struct Builder<'a, 'b> {
    data: &'b Data<'a>,
    params: &'b ForestParams,
    max_features: usize,
    rng: ChaCha8Rng,
    tree: Tree,
    order: Vec<(f64, bool)>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl Builder<'_, '_> {
    /// Best split among features as `(feature, threshold, weighted impurity)`.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut features: Vec<usize> = (0..self.data.dim).collect();
        features.shuffle(&mut self.rng);
        let mut best: Option<(usize, f64, f64)> = None;
        let total_pos = idx.iter().filter(|&&i| self.data.labels[i]).count();
        for (tried, &f) in features.iter().enumerate() {
            if tried >= self.max_features && best.is_some() {
                break;
            }
            self.order.clear();
            self.order
                .extend(idx.iter().map(|&i| (self.data.rows[i][f], self.data.labels[i])));
            self.order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0usize;
            for k in 0..n - 1 {
                left_pos += usize::from(self.order[k].1);
                let left_n = k + 1;
                if left_n < min_leaf {
                    continue;
                }
                if n - left_n < min_leaf {
                    break;
                }
                let (a, b) = (self.order[k].0, self.order[k + 1].0);
                if a == b {
                    continue;
                }
                let impurity = (left_n as f64 * gini(left_pos, left_n)
                    + (n - left_n) as f64 * gini(total_pos - left_pos, n - left_n))
                    / n as f64;
                if best.is_none_or(|(_, _, s)| impurity < s) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some((f, threshold, impurity));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> u32 {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.data.labels[i]).count();
        let value = if n == 0 { 0.0 } else { pos as f64 / n as f64 };
        if depth >= self.params.max_depth || pos == 0 || pos == n || n < 2 * self.params.min_leaf.max(1) {
            return self.tree.push_leaf(value);
        }
        let Some((f, threshold, impurity)) = self.best_split(&idx) else {
            return self.tree.push_leaf(value);
        };
        if impurity >= gini(pos, n) {
            return self.tree.push_leaf(value);
        }
        let node = self.tree.push_leaf(value);
        self.tree.feature[node as usize] = f as i32;
        self.tree.threshold[node as usize] = threshold;
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.data.rows[i][f] <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.tree.left[node as usize] = left;
        self.tree.right[node as usize] = right;
        node
    }
}

/// Train a forest with `positives` labelled 1 and `negatives` labelled 0.
/// Deterministic for a given seed.
pub fn forest_train(positives: &[&[f64]], negatives: &[&[f64]], params: &ForestParams) -> Result<Forest, ForestError> {
    if positives.is_empty() {
        return Err(ForestError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(ForestError::EmptyClass("negative"));
    }
    if params.n_trees == 0 || params.max_depth == 0 {
        return Err(ForestError::BadParams("n_trees and max_depth must be positive"));
    }
    let dim = positives[0].len();
    if let Some(bad) = positives.iter().chain(negatives).find(|r| r.len() != dim) {
        return Err(ForestError::DimMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    if dim == 0 {
        return Err(ForestError::BadParams("zero-dimensional input"));
    }
    let data = Data {
        rows: positives.iter().chain(negatives).copied().collect(),
        labels: std::iter::repeat_n(true, positives.len())
            .chain(std::iter::repeat_n(false, negatives.len()))
            .collect(),
        dim,
    };
    let max_features = params
        .max_features
        .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
        .clamp(1, dim);
    let n = data.rows.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64 + 1);
            let idx: Vec<usize> = if params.bootstrap && params.balance_classes {
                let (np, nn) = (positives.len(), negatives.len());
                let m = np.max(nn);
                let mut idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..np)).collect();
                idx.extend((0..m).map(|_| np + rng.gen_range(0..nn)));
                idx
            } else if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = Builder {
                data: &data,
                params,
                max_features,
                rng,
                tree: Tree::new(),
                order: Vec::with_capacity(n),
            };
            b.build(idx, 0);
            b.tree
        })
        .collect();
    Ok(Forest { dim, trees })
}
