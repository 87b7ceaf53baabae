//! Least-squares gradient boosting over axis-aligned regression trees.
//!
//! Trees are grown level by level. At each level every feature is scanned once
//! in presorted order, accumulating left-child sums for all open nodes at the
//! same time, so one level costs O(d·n). Candidate thresholds are midpoints
//! between consecutive distinct training values; the split with the largest
//! variance reduction wins, ties going to the lower feature index and then the
//! smaller threshold.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
}

impl Default for GbrParams {
    fn default() -> Self {
        GbrParams {
            n_trees: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 5,
            subsample: 1.0,
        }
    }
}

impl GbrParams {
    /// The 24-point search grid: trees {100, 300} × depth {2, 3, 4} ×
    /// learning rate {0.05, 0.1} × min leaf {5, 20}.
    pub fn default_grid() -> Vec<GbrParams> {
        let mut grid = Vec::with_capacity(24);
        for &n_trees in &[100, 300] {
            for &max_depth in &[2, 3, 4] {
                for &learning_rate in &[0.05, 0.1] {
                    for &min_leaf in &[5, 20] {
                        grid.push(GbrParams {
                            n_trees,
                            learning_rate,
                            max_depth,
                            min_leaf,
                            subsample: 1.0,
                        });
                    }
                }
            }
        }
        grid
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::contract("boosting needs at least one tree"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::contract("learning rate must lie in (0, 1]"));
        }
        if self.max_depth == 0 {
            return Err(Error::contract("max depth must be at least 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::contract("min leaf must be at least 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::contract("subsample must lie in (0, 1]"));
        }
        if n < self.min_leaf {
            return Err(Error::contract(format!(
                "{n} rows is fewer than min leaf {}",
                self.min_leaf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[(row, feature)] <= threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTreeModel {
    /// Training mean of the target.
    pub initial: f64,
    pub trees: Vec<RegressionTree>,
    pub params: GbrParams,
    pub n_features: usize,
    /// Training MSE after each boosting stage.
    pub train_loss: Vec<f64>,
}

impl BoostedTreeModel {
    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(x, row)).sum();
        self.initial + self.params.learning_rate * sum
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }

    /// True when no tree has a split, i.e. the model is a constant.
    pub fn is_constant(&self) -> bool {
        self.trees.iter().all(|t| t.nodes.len() == 1)
    }

    pub fn used_features(&self) -> Vec<bool> {
        let mut used = vec![false; self.n_features];
        for t in &self.trees {
            for f in t.split_features() {
                used[f] = true;
            }
        }
        used
    }
}

#[derive(Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct OpenNode {
    arena: usize,
    count: usize,
    sum: f64,
}

pub fn fit_gbr(
    x: &DMatrix<f64>,
    y: &[f64],
    params: &GbrParams,
    seed: u64,
) -> Result<BoostedTreeModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::contract("feature rows and target length differ"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("target contains non-finite values"));
    }
    params.validate(n)?;
    let d = x.ncols();
    let initial = y.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![initial; n];
    let order: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
            idx
        })
        .collect();
    let sorted_x: Vec<Vec<f64>> = order
        .iter()
        .enumerate()
        .map(|(j, idx)| idx.iter().map(|&i| x[(i, j)]).collect())
        .collect();
    let mut rng = rng_from(seed);
    let bag_size = ((params.subsample * n as f64).floor() as usize).clamp(params.min_leaf, n);
    let mut in_bag = vec![true; n];
    let mut residual = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_loss = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        for i in 0..n {
            residual[i] = y[i] - fitted[i];
        }
        if residual.iter().all(|&r| r == 0.0) {
            break;
        }
        if bag_size < n {
            in_bag.iter_mut().for_each(|b| *b = false);
            for i in sample(&mut rng, n, bag_size).iter() {
                in_bag[i] = true;
            }
        }
        let tree = grow_tree(x, &residual, &in_bag, &order, &sorted_x, params);
        let eta = params.learning_rate;
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += eta * tree.predict_row(x, i);
        }
        let mse = y
            .iter()
            .zip(&fitted)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        train_loss.push(mse);
        trees.push(tree);
    }
    Ok(BoostedTreeModel {
        initial,
        trees,
        params: *params,
        n_features: d,
        train_loss,
    })
}

fn grow_tree(
    x: &DMatrix<f64>,
    target: &[f64],
    in_bag: &[bool],
    order: &[Vec<usize>],
    sorted_x: &[Vec<f64>],
    params: &GbrParams,
) -> RegressionTree {
    const NONE: usize = usize::MAX;
    let n = target.len();
    let d = x.ncols();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // Slot of the open node each row belongs to, NONE once the row sits in a final leaf.
    let mut slot_of = vec![NONE; n];
    let mut root = OpenNode {
        arena: 0,
        count: 0,
        sum: 0.0,
    };
    for i in 0..n {
        if in_bag[i] {
            slot_of[i] = 0;
            root.count += 1;
            root.sum += target[i];
        }
    }
    let mut open = vec![root];

    for depth in 0..=params.max_depth {
        if open.is_empty() {
            break;
        }
        let mut best: Vec<Option<SplitCandidate>> = vec![None; open.len()];
        if depth < params.max_depth {
            let m = open.len();
            let mut left_count = vec![0usize; m];
            let mut left_sum = vec![0.0f64; m];
            let mut last_value = vec![f64::NAN; m];
            for j in 0..d {
                left_count.iter_mut().for_each(|c| *c = 0);
                left_sum.iter_mut().for_each(|s| *s = 0.0);
                last_value.iter_mut().for_each(|v| *v = f64::NAN);
                for (&i, &v) in order[j].iter().zip(&sorted_x[j]) {
                    let s = slot_of[i];
                    if s == NONE {
                        continue;
                    }
                    let node = &open[s];
                    let nl = left_count[s];
                    if nl > 0 && v > last_value[s] {
                        let nr = node.count - nl;
                        if nl >= params.min_leaf && nr >= params.min_leaf {
                            let sl = left_sum[s];
                            let sr = node.sum - sl;
                            let gain = sl * sl / nl as f64 + sr * sr / nr as f64
                                - node.sum * node.sum / node.count as f64;
                            let better = match best[s] {
                                None => true,
                                Some(b) => gain > b.gain,
                            };
                            if better {
                                best[s] = Some(SplitCandidate {
                                    gain,
                                    feature: j,
                                    threshold: 0.5 * (last_value[s] + v),
                                });
                            }
                        }
                    }
                    left_count[s] += 1;
                    left_sum[s] += target[i];
                    last_value[s] = v;
                }
            }
        }

        let mut next: Vec<OpenNode> = Vec::new();
        let mut child_slots: Vec<Option<(usize, usize)>> = vec![None; open.len()];
        for (s, node) in open.iter().enumerate() {
            let scale = node.sum * node.sum / node.count.max(1) as f64;
            match best[s] {
                Some(c) if c.gain > 1e-12 * (1.0 + scale) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[node.arena] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    let l = next.len();
                    next.push(OpenNode {
                        arena: left,
                        count: 0,
                        sum: 0.0,
                    });
                    next.push(OpenNode {
                        arena: left + 1,
                        count: 0,
                        sum: 0.0,
                    });
                    child_slots[s] = Some((l, l + 1));
                }
                _ => {
                    nodes[node.arena] = Node::Leaf {
                        value: if node.count > 0 {
                            node.sum / node.count as f64
                        } else {
                            0.0
                        },
                    };
                }
            }
        }
        for i in 0..n {
            let s = slot_of[i];
            if s == NONE {
                continue;
            }
            match child_slots[s] {
                None => slot_of[i] = NONE,
                Some((l, r)) => {
                    let (feature, threshold) = match nodes[open[s].arena] {
                        Node::Split {
                            feature, threshold, ..
                        } => (feature, threshold),
                        Node::Leaf { .. } => unreachable!(),
                    };
                    let c = if x[(i, feature)] <= threshold { l } else { r };
                    slot_of[i] = c;
                    next[c].count += 1;
                    next[c].sum += target[i];
                }
            }
        }
        open = next;
    }
    RegressionTree { nodes }
}
