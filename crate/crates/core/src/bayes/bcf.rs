//! Bayesian causal forest
//!
//! `y ~ N(μ(x, ρ(x)) + t·τ(x), σ²)` with sum-of-trees priors on μ and τ,
//! fitted by Bayesian backfitting. Each sweep visits every tree once, proposes
//! a grow or prune move by Metropolis-Hastings, redraws its leaf values from
//! their conjugate normal conditional, and finally redraws σ² from its
//! inverse-gamma conditional.
//!
//! Splits are of the form `x_f ≤ c_k` over a fixed grid of quantile
//! cutpoints. A node at depth q is nonterminal with prior probability
//! `α(1+q)^−β`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{inv_gamma, split_rhat, PosteriorEffect};
use crate::data::{quantile_sorted, Dataset};
use crate::error::{Error, Result};
use crate::meta::{EstimatorTag, PropensityModel, MIN_ARM_SIZE};
use crate::rng::{derived_rng, Rng};

/// Lower 10% quantile of χ² with 3 degrees of freedom.
const CHISQ3_Q10: f64 = 0.584_374_4;
const SIGMA_DF: f64 = 3.0;
const MAX_SWEEP_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcfConfig {
    pub trees_prognostic: usize,
    pub trees_treatment: usize,
    pub alpha_prognostic: f64,
    pub beta_prognostic: f64,
    pub alpha_treatment: f64,
    pub beta_treatment: f64,
    pub burn_in: usize,
    pub kept: usize,
    pub cutpoints: usize,
}

impl Default for BcfConfig {
    fn default() -> Self {
        BcfConfig {
            trees_prognostic: 200,
            trees_treatment: 50,
            alpha_prognostic: 0.95,
            beta_prognostic: 2.0,
            alpha_treatment: 0.25,
            beta_treatment: 3.0,
            burn_in: 500,
            kept: 2000,
            cutpoints: 30,
        }
    }
}

impl BcfConfig {
    pub fn validate(&self) -> Result<()> {
        for a in [self.alpha_prognostic, self.alpha_treatment] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::contract("tree prior alpha must lie in (0, 1)"));
            }
        }
        for b in [self.beta_prognostic, self.beta_treatment] {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::contract("tree prior beta must be positive"));
            }
        }
        if self.trees_prognostic == 0 || self.trees_treatment == 0 {
            return Err(Error::contract("each forest needs at least one tree"));
        }
        if self.burn_in == 0 || self.kept == 0 {
            return Err(Error::contract(
                "burn-in and kept sweeps must be at least 1",
            ));
        }
        if self.cutpoints == 0 || self.cutpoints > 255 {
            return Err(Error::contract("cutpoints must be between 1 and 255"));
        }
        Ok(())
    }
}

/// Sorted, distinct quantile cutpoints of `values`.
fn cutpoint_grid(values: &[f64], count: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Snap each quantile down to an observed value so that distinct cuts give
    // distinct partitions.
    let mut cuts: Vec<f64> = (1..=count)
        .map(|k| {
            let q = quantile_sorted(&sorted, k as f64 / (count + 1) as f64);
            sorted[sorted.partition_point(|&v| v <= q) - 1]
        })
        .collect();
    cuts.dedup();
    // A cut at the maximum sends nothing right.
    let max = *sorted.last().unwrap();
    cuts.retain(|&c| c < max);
    cuts
}

/// Feature values replaced by the number of cutpoints strictly below them, so
/// that `x ≤ cut[k]` is `rank ≤ k`.
struct Binned {
    ranks: Vec<Vec<u8>>,
    n_cuts: Vec<usize>,
}

impl Binned {
    fn new(columns: &[Vec<f64>], count: usize) -> Self {
        let mut ranks = Vec::with_capacity(columns.len());
        let mut n_cuts = Vec::with_capacity(columns.len());
        for col in columns {
            let cuts = cutpoint_grid(col, count);
            ranks.push(
                col.iter()
                    .map(|&v| cuts.partition_point(|&c| c < v) as u8)
                    .collect(),
            );
            n_cuts.push(cuts.len());
        }
        Binned { ranks, n_cuts }
    }

    fn n(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Node {
    feature: usize,
    cut: usize,
    left: usize,
    right: usize,
    parent: usize,
    depth: usize,
    leaf: bool,
    alive: bool,
    value: f64,
}

impl Node {
    fn leaf(parent: usize, depth: usize) -> Self {
        Node {
            feature: 0,
            cut: 0,
            left: NONE,
            right: NONE,
            parent,
            depth,
            leaf: true,
            alive: true,
            value: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    /// Leaf node of each observation.
    assign: Vec<u32>,
}

impl Tree {
    fn stump(n: usize) -> Self {
        Tree {
            nodes: vec![Node::leaf(NONE, 0)],
            assign: vec![0; n],
        }
    }

    fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].alive && self.nodes[i].leaf)
            .collect()
    }

    /// Internal nodes whose children are both leaves.
    fn nogs(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| {
                let nd = &self.nodes[i];
                nd.alive && !nd.leaf && self.nodes[nd.left].leaf && self.nodes[nd.right].leaf
            })
            .collect()
    }

    fn is_stump(&self) -> bool {
        self.nodes[0].leaf
    }

    /// Available cut-index interval `[lo, hi)` of `feature` at `node`.
    fn cut_range(&self, node: usize, feature: usize, n_cuts: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (0, n_cuts);
        let mut child = node;
        let mut p = self.nodes[node].parent;
        while p != NONE {
            let pn = &self.nodes[p];
            if pn.feature == feature {
                if pn.left == child {
                    hi = hi.min(pn.cut);
                } else {
                    lo = lo.max(pn.cut + 1);
                }
            }
            child = p;
            p = pn.parent;
        }
        (lo, hi.max(lo))
    }

    fn splittable_features(&self, node: usize, bins: &Binned) -> Vec<usize> {
        (0..bins.n_cuts.len())
            .filter(|&f| {
                let (lo, hi) = self.cut_range(node, f, bins.n_cuts[f]);
                hi > lo
            })
            .collect()
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(i) = self.nodes.iter().position(|n| !n.alive) {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn value_of(&self, i: usize) -> f64 {
        self.nodes[self.assign[i] as usize].value
    }
}

/// Gaussian leaf model: leaf values ~ N(0, s²), data within a leaf with
/// weighted count `n` and weighted residual sum `sum`.
#[derive(Clone, Copy)]
struct LeafModel {
    s2: f64,
    sigma2: f64,
}

impl LeafModel {
    fn log_marginal(&self, n: f64, sum: f64) -> f64 {
        let denom = self.sigma2 + n * self.s2;
        -0.5 * (denom / self.sigma2).ln() + self.s2 * sum * sum / (2.0 * self.sigma2 * denom)
    }

    fn draw(&self, n: f64, sum: f64, rng: &mut Rng) -> f64 {
        let denom = self.sigma2 + n * self.s2;
        let mean = self.s2 * sum / denom;
        let var = self.s2 * self.sigma2 / denom;
        mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }
}

struct TreePrior {
    alpha: f64,
    beta: f64,
}

impl TreePrior {
    fn split_prob(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Data seen by one tree update: residuals and basis weights (1 for the
/// prognostic forest, tᵢ for the treatment forest).
struct Target<'a> {
    residual: &'a [f64],
    weight: &'a [f64],
}

fn leaf_stats(tree: &Tree, leaf: usize, data: &Target) -> (f64, f64) {
    let (mut n, mut s) = (0.0, 0.0);
    for i in 0..tree.assign.len() {
        if tree.assign[i] as usize == leaf {
            let w = data.weight[i];
            n += w * w;
            s += w * data.residual[i];
        }
    }
    (n, s)
}

fn child_stats(
    tree: &Tree,
    leaf: usize,
    feature: usize,
    cut: usize,
    bins: &Binned,
    data: &Target,
) -> [(f64, f64, usize); 2] {
    let mut out = [(0.0, 0.0, 0usize); 2];
    let ranks = &bins.ranks[feature];
    for i in 0..tree.assign.len() {
        if tree.assign[i] as usize == leaf {
            let side = usize::from(ranks[i] as usize > cut);
            let w = data.weight[i];
            out[side].0 += w * w;
            out[side].1 += w * data.residual[i];
            if w != 0.0 {
                out[side].2 += 1;
            }
        }
    }
    out
}

/// One grow-or-prune Metropolis-Hastings proposal on `tree`.
fn structure_step(
    tree: &mut Tree,
    bins: &Binned,
    prior: &TreePrior,
    leaf: &LeafModel,
    data: Option<&Target>,
    rng: &mut Rng,
) {
    let grow = tree.is_stump() || rng.random::<f64>() < 0.5;
    let p_grow_here = if tree.is_stump() { 1.0 } else { 0.5 };
    if grow {
        let leaves = tree.leaves();
        let growable: Vec<usize> = leaves
            .iter()
            .copied()
            .filter(|&l| !tree.splittable_features(l, bins).is_empty())
            .collect();
        if growable.is_empty() {
            return;
        }
        let node = growable[rng.random_range(0..growable.len())];
        let feats = tree.splittable_features(node, bins);
        let feature = feats[rng.random_range(0..feats.len())];
        let (lo, hi) = tree.cut_range(node, feature, bins.n_cuts[feature]);
        let cut = rng.random_range(lo..hi);
        let depth = tree.nodes[node].depth;

        let log_lr = match data {
            Some(d) => {
                let [l, r] = child_stats(tree, node, feature, cut, bins, d);
                if l.2 == 0 || r.2 == 0 {
                    return;
                }
                leaf.log_marginal(l.0, l.1) + leaf.log_marginal(r.0, r.1)
                    - leaf.log_marginal(l.0 + r.0, l.1 + r.1)
            }
            None => 0.0,
        };
        // Number of nog nodes after the grow: the new node is one, and its
        // parent stops being one if it was.
        let mut nogs_after = tree.nogs().len() + 1;
        let parent = tree.nodes[node].parent;
        if parent != NONE {
            let pn = &tree.nodes[parent];
            let sibling = if pn.left == node { pn.right } else { pn.left };
            if tree.nodes[sibling].leaf {
                nogs_after -= 1;
            }
        }
        let pd = prior.split_prob(depth);
        let pc = prior.split_prob(depth + 1);
        let log_prior = pd.ln() + 2.0 * (1.0 - pc).ln() - (1.0 - pd).ln();
        let log_proposal =
            (0.5f64 / p_grow_here).ln() + (growable.len() as f64 / nogs_after as f64).ln();
        let log_ratio = log_lr + log_prior + log_proposal;
        if rng.random::<f64>().ln() < log_ratio {
            let left = tree.alloc(Node::leaf(node, depth + 1));
            let right = tree.alloc(Node::leaf(node, depth + 1));
            let nd = &mut tree.nodes[node];
            nd.leaf = false;
            nd.feature = feature;
            nd.cut = cut;
            nd.left = left;
            nd.right = right;
            let ranks = &bins.ranks[feature];
            for i in 0..tree.assign.len() {
                if tree.assign[i] as usize == node {
                    tree.assign[i] = if ranks[i] as usize > cut { right } else { left } as u32;
                }
            }
        }
    } else {
        let nogs = tree.nogs();
        if nogs.is_empty() {
            return;
        }
        let node = nogs[rng.random_range(0..nogs.len())];
        let (left, right, depth) = {
            let nd = &tree.nodes[node];
            (nd.left, nd.right, nd.depth)
        };
        let log_lr = match data {
            Some(d) => {
                let l = leaf_stats(tree, left, d);
                let r = leaf_stats(tree, right, d);
                leaf.log_marginal(l.0 + r.0, l.1 + r.1)
                    - leaf.log_marginal(l.0, l.1)
                    - leaf.log_marginal(r.0, r.1)
            }
            None => 0.0,
        };
        // Growable leaves after the prune: the merged node is growable (it
        // was split before), its children stop being leaves.
        let leaves_before = tree.leaves();
        let growable_after = leaves_before
            .iter()
            .filter(|&&l| l != left && l != right && !tree.splittable_features(l, bins).is_empty())
            .count()
            + 1;
        let after_is_stump = node == 0;
        let p_grow_after: f64 = if after_is_stump { 1.0 } else { 0.5 };
        let pd = prior.split_prob(depth);
        let pc = prior.split_prob(depth + 1);
        let log_prior = (1.0 - pd).ln() - pd.ln() - 2.0 * (1.0 - pc).ln();
        let log_proposal =
            (p_grow_after / 0.5).ln() + (nogs.len() as f64 / growable_after as f64).ln();
        let log_ratio = log_lr + log_prior + log_proposal;
        if rng.random::<f64>().ln() < log_ratio {
            tree.nodes[left].alive = false;
            tree.nodes[right].alive = false;
            let nd = &mut tree.nodes[node];
            nd.leaf = true;
            nd.left = NONE;
            nd.right = NONE;
            for a in tree.assign.iter_mut() {
                if *a as usize == left || *a as usize == right {
                    *a = node as u32;
                }
            }
        }
    }
}

fn draw_leaves(tree: &mut Tree, leaf: &LeafModel, data: &Target, rng: &mut Rng) {
    let m = tree.nodes.len();
    let (mut n, mut s) = (vec![0.0; m], vec![0.0; m]);
    for i in 0..tree.assign.len() {
        let a = tree.assign[i] as usize;
        let w = data.weight[i];
        n[a] += w * w;
        s[a] += w * data.residual[i];
    }
    for l in tree.leaves() {
        tree.nodes[l].value = leaf.draw(n[l], s[l], rng);
    }
}

/// Run the grow/prune chain on a single tree with no data, so that it targets
/// the tree-structure prior, and report the fraction of `draws` (taken every
/// `thin` steps) in which the root is split.
pub fn sample_tree_prior(
    alpha: f64,
    beta: f64,
    n_features: usize,
    n_cuts: usize,
    draws: usize,
    thin: usize,
    seed: u64,
) -> f64 {
    let bins = Binned {
        ranks: vec![Vec::new(); n_features],
        n_cuts: vec![n_cuts; n_features],
    };
    let prior = TreePrior { alpha, beta };
    let leaf = LeafModel {
        s2: 1.0,
        sigma2: 1.0,
    };
    let mut rng = derived_rng(seed, "bcf-prior", 0);
    let mut tree = Tree::stump(0);
    let mut split = 0usize;
    for _ in 0..draws {
        for _ in 0..thin.max(1) {
            structure_step(&mut tree, &bins, &prior, &leaf, None, &mut rng);
        }
        split += usize::from(!tree.is_stump());
    }
    split as f64 / draws as f64
}

struct Forest {
    trees: Vec<Tree>,
    prior: TreePrior,
    leaf_s2: f64,
}

impl Forest {
    fn new(m: usize, n: usize, alpha: f64, beta: f64, leaf_sd: f64) -> Self {
        Forest {
            trees: (0..m).map(|_| Tree::stump(n)).collect(),
            prior: TreePrior { alpha, beta },
            leaf_s2: leaf_sd * leaf_sd,
        }
    }

    /// Backfit every tree against `residual`, which holds y minus the full fit
    /// and is kept current.
    fn sweep(
        &mut self,
        bins: &Binned,
        weight: &[f64],
        residual: &mut [f64],
        sigma2: f64,
        rng: &mut Rng,
    ) {
        let leaf = LeafModel {
            s2: self.leaf_s2,
            sigma2,
        };
        for tree in &mut self.trees {
            for i in 0..residual.len() {
                residual[i] += weight[i] * tree.value_of(i);
            }
            {
                let target = Target { residual, weight };
                structure_step(tree, bins, &self.prior, &leaf, Some(&target), rng);
                draw_leaves(tree, &leaf, &target, rng);
            }
            for i in 0..residual.len() {
                residual[i] -= weight[i] * tree.value_of(i);
            }
        }
    }

    fn fit_at(&self, i: usize) -> f64 {
        self.trees.iter().map(|t| t.value_of(i)).sum()
    }
}

fn columns(x: &nalgebra::DMatrix<f64>, extra: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..x.ncols())
        .map(|j| x.column(j).iter().copied().collect())
        .collect();
    if let Some(e) = extra {
        cols.push(e.to_vec());
    }
    cols
}

pub fn fit_bcf(
    ds: &Dataset,
    rho: &PropensityModel,
    config: &BcfConfig,
    seed: u64,
) -> Result<PosteriorEffect> {
    config.validate()?;
    ds.require_arms(MIN_ARM_SIZE)?;
    if rho.n_features() != ds.d() {
        return Err(Error::contract(
            "propensity model and dataset disagree on features",
        ));
    }
    let n = ds.n();
    let y_mean = ds.y().iter().sum::<f64>() / n as f64;
    let y_sd = (ds.y().iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let y_sd = if y_sd > 0.0 { y_sd } else { 1.0 };
    let y: Vec<f64> = ds.y().iter().map(|v| (v - y_mean) / y_sd).collect();
    let rho_x = rho.predict(ds.x());
    let bins_mu = Binned::new(&columns(ds.x(), Some(&rho_x)), config.cutpoints);
    let bins_tau = Binned::new(&columns(ds.x(), None), config.cutpoints);
    debug_assert_eq!(bins_mu.n(), n);

    let range = y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - y.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let sd_for = |m: usize| range / (4.0 * (m as f64).sqrt());
    let mut mu = Forest::new(
        config.trees_prognostic,
        n,
        config.alpha_prognostic,
        config.beta_prognostic,
        sd_for(config.trees_prognostic),
    );
    let mut tau = Forest::new(
        config.trees_treatment,
        n,
        config.alpha_treatment,
        config.beta_treatment,
        sd_for(config.trees_treatment),
    );
    let ones = vec![1.0; n];
    let t: Vec<f64> = ds.t().iter().map(|&v| v as f64).collect();
    // y is standardized, so its variance is the rough noise scale.
    let lambda = CHISQ3_Q10 / SIGMA_DF;

    let mut rng = derived_rng(seed, "bcf", 0);
    let mut residual = y.clone();
    let mut sigma2 = 1.0f64;
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(config.kept);
    for sweep in 0..(config.burn_in + config.kept) {
        let mut attempt = 0;
        loop {
            let snapshot = (
                mu.trees.clone(),
                tau.trees.clone(),
                residual.clone(),
                sigma2,
            );
            mu.sweep(&bins_mu, &ones, &mut residual, sigma2, &mut rng);
            tau.sweep(&bins_tau, &t, &mut residual, sigma2, &mut rng);
            let ssr: f64 = residual.iter().map(|r| r * r).sum();
            let s2 = inv_gamma(
                &mut rng,
                (SIGMA_DF + n as f64) / 2.0,
                (SIGMA_DF * lambda + ssr) / 2.0,
            );
            if ssr.is_finite() && s2.is_finite() && s2 > 0.0 {
                sigma2 = s2;
                break;
            }
            attempt += 1;
            log::warn!("BCF sweep {sweep} produced non-finite values; resampling");
            (mu.trees, tau.trees, residual, sigma2) = snapshot;
            if attempt >= MAX_SWEEP_RETRIES {
                return Err(Error::numerical(format!(
                    "BCF sweep {sweep} failed {MAX_SWEEP_RETRIES} times"
                )));
            }
        }
        if sweep >= config.burn_in {
            draws.push((0..n).map(|i| tau.fit_at(i) * y_sd).collect());
        }
    }
    let mut effect = PosteriorEffect::from_draws(EstimatorTag::Bcf, draws)?;
    let rhat = split_rhat(&effect.ate_draws);
    effect.rhat = Some(rhat);
    effect.converged = rhat.is_finite() && rhat < 1.1;
    if !effect.converged {
        log::warn!("BCF chain flagged as non-converged: split R-hat on the ATE = {rhat:.3}");
    }
    Ok(effect)
}
