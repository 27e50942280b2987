//! Partial fuzzification of a trained forest.
//!
//! Each internal node r keeps its single feature f_r but routes softly:
//! `s_r = σ(c_r (y[f_r] − a_r))` is the probability of the child a hard
//! traversal takes when `y[f_r] ≥ a_r` (the right child), and `1 − s_r` of
//! the other. A leaf is reached with the product of routing probabilities on
//! its path, and the raw score is
//! `base_score + learning_rate · Σ_trees Σ_leaves π_l μ_l`.
//! As every c_r grows the score converges to [`predict_hard`] on the refined
//! thresholds and leaf values.
//!
//! [`predict_hard`]: crate::gbdt::predict_hard

mod joint;

use thiserror::Error;

pub use joint::{joint_gradient, joint_loss, joint_train, FuzzConfig, JointReport};

use crate::gbdt::doc::{parse_doc, write_doc};
use crate::gbdt::{Forest, ForestError, Node, Tree};
use crate::nn::{Embedder, NnError, StackedDataset};
use crate::numfmt::sigmoid;
use crate::tally::Tally;

pub(crate) const FUZZY_TAG: &str = "fuzzy-forest v1";

/// Exponent clamp for the routing sigmoid.
pub const ROUTE_CLAMP: f64 = 500.0;
/// Lower bound kept on every inverse width during training.
pub const MIN_INV_WIDTH: f64 = 1e-8;
/// Spread floor used when initializing inverse widths.
pub const MIN_SPREAD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FuzzyError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: input has {got} values, forest expects {want}")]
    Dim { got: usize, want: usize },
    #[error("empty dataset")]
    Empty,
    #[error(
        "loss became non-finite at epoch {epoch}, batch {batch}; \
         the last finite parameters are attached (lower the learning rates)"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Box<(Embedder, FuzzyForest)>,
    },
}

/// Forest with soft single-feature splits, stored as flat per-node arrays.
///
/// Trees are laid out back to back, each in pre-order; child links are global
/// node indices. `a` and `c` are meaningful on internal nodes, `pi` on
/// leaves; the other entries stay 0 and receive zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyForest {
    tree_start: Vec<usize>,
    feature: Vec<u32>,
    left: Vec<u32>,
    right: Vec<u32>,
    leaf: Vec<bool>,
    a: Vec<f64>,
    c: Vec<f64>,
    pi: Vec<f64>,
    pub base_score: f64,
    pub learning_rate: f64,
    width: usize,
}

impl FuzzyForest {
    /// Soft version of `forest` with inverse width `c_of(feature)` per node.
    pub fn from_forest(forest: &Forest, mut c_of: impl FnMut(u32) -> f64) -> Result<Self, FuzzyError> {
        forest.validate()?;
        let mut f = Self {
            tree_start: vec![0],
            feature: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            leaf: Vec::new(),
            a: Vec::new(),
            c: Vec::new(),
            pi: Vec::new(),
            base_score: forest.base_score,
            learning_rate: forest.learning_rate,
            width: forest.width,
        };
        for tree in &forest.trees {
            let t = tree.to_preorder();
            let base = f.leaf.len() as u32;
            for node in &t.nodes {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let c = c_of(feature);
                        if !(c > 0.0) || !c.is_finite() {
                            return Err(FuzzyError::Config(format!("inverse width {c} must be positive")));
                        }
                        f.feature.push(feature);
                        f.left.push(base + left);
                        f.right.push(base + right);
                        f.leaf.push(false);
                        f.a.push(threshold);
                        f.c.push(c);
                        f.pi.push(0.0);
                    }
                    Node::Leaf { value } => {
                        f.feature.push(0);
                        f.left.push(0);
                        f.right.push(0);
                        f.leaf.push(true);
                        f.a.push(0.0);
                        f.c.push(0.0);
                        f.pi.push(value);
                    }
                }
            }
            f.tree_start.push(f.leaf.len());
        }
        Ok(f)
    }

    /// Hard forest over the current thresholds and leaf values.
    pub fn to_forest(&self) -> Forest {
        let trees = (0..self.n_trees())
            .map(|t| {
                let r = self.tree_range(t);
                let base = r.start as u32;
                Tree {
                    nodes: r
                        .map(|i| {
                            if self.leaf[i] {
                                Node::Leaf { value: self.pi[i] }
                            } else {
                                Node::Split {
                                    feature: self.feature[i],
                                    threshold: self.a[i],
                                    left: self.left[i] - base,
                                    right: self.right[i] - base,
                                }
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        Forest {
            trees,
            base_score: self.base_score,
            learning_rate: self.learning_rate,
            width: self.width,
        }
    }

    pub fn n_trees(&self) -> usize {
        self.tree_start.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.leaf.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tree_range(&self, t: usize) -> std::ops::Range<usize> {
        self.tree_start[t]..self.tree_start[t + 1]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.leaf[i]
    }

    pub fn feature(&self, i: usize) -> u32 {
        self.feature[i]
    }

    /// Global ids of the lower (`y < a`) and upper children of node `i`.
    pub fn children(&self, i: usize) -> (usize, usize) {
        (self.left[i] as usize, self.right[i] as usize)
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn c_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }

    pub fn pi_mut(&mut self) -> &mut [f64] {
        &mut self.pi
    }

    /// Multiplies every internal node's inverse width by `k`.
    pub fn scale_widths(&mut self, k: f64) {
        for (c, &l) in self.c.iter_mut().zip(&self.leaf) {
            if !l {
                *c *= k;
            }
        }
    }

    /// Trainable slices in the order a, c, pi.
    pub fn params(&self) -> [&[f64]; 3] {
        [&self.a, &self.c, &self.pi]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.a, &mut self.c, &mut self.pi]
    }

    fn check_input(&self, y: &[f64]) -> Result<(), FuzzyError> {
        if y.len() != self.width {
            return Err(FuzzyError::Dim {
                got: y.len(),
                want: self.width,
            });
        }
        Ok(())
    }
}

/// `(lower, upper)` routing probabilities of one node; `upper` is the
/// probability of the branch taken by a hard split when `y ≥ a`.
pub fn node_routing(c: f64, a: f64, y: f64) -> (f64, f64) {
    let upper = sigmoid((c * (y - a)).clamp(-ROUTE_CLAMP, ROUTE_CLAMP));
    (1.0 - upper, upper)
}

/// Per-node routing state of one forward pass. `reach[i]` is the probability
/// of arriving at node i; on leaves it is the path product μ_l.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingProbs {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub reach: Vec<f64>,
}

impl RoutingProbs {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            lower: vec![0.0; n_nodes],
            upper: vec![0.0; n_nodes],
            reach: vec![0.0; n_nodes],
        }
    }

    /// Σ μ_l over the leaves of tree `t`.
    pub fn leaf_mass(&self, forest: &FuzzyForest, t: usize) -> f64 {
        forest.tree_range(t).filter(|&i| forest.leaf[i]).map(|i| self.reach[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyOutput {
    pub raw: f64,
    pub probs: RoutingProbs,
}

pub fn fuzzy_forward(forest: &FuzzyForest, y: &[f64]) -> Result<FuzzyOutput, FuzzyError> {
    forest.check_input(y)?;
    let mut probs = RoutingProbs::new(forest.n_nodes());
    let raw = forward_into(forest, y, &mut probs, &mut ());
    Ok(FuzzyOutput { raw, probs })
}

/// Single top-down sweep; every node is visited once.
pub fn forward_into<T: Tally>(forest: &FuzzyForest, y: &[f64], probs: &mut RoutingProbs, tally: &mut T) -> f64 {
    assert_eq!(probs.reach.len(), forest.n_nodes(), "routing buffer does not match forest");
    let mut sum = 0.0;
    for t in 0..forest.n_trees() {
        let r = forest.tree_range(t);
        probs.reach[r.start] = 1.0;
        let mut tree_sum = 0.0;
        for i in r {
            tally.visit(1);
            let p = probs.reach[i];
            if forest.leaf[i] {
                tree_sum += forest.pi[i] * p;
                continue;
            }
            let (lo, up) = node_routing(forest.c[i], forest.a[i], y[forest.feature[i] as usize]);
            probs.lower[i] = lo;
            probs.upper[i] = up;
            probs.reach[forest.left[i] as usize] = p * lo;
            probs.reach[forest.right[i] as usize] = p * up;
        }
        sum += tree_sum;
    }
    forest.base_score + forest.learning_rate * sum
}

/// Gradients of `delta · raw` with respect to every forest parameter and the
/// input. Per-node vectors are indexed like the forest arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGradients {
    pub d_pi: Vec<f64>,
    pub d_c: Vec<f64>,
    pub d_a: Vec<f64>,
    pub d_y: Vec<f64>,
}

impl FuzzyGradients {
    pub fn zeros(forest: &FuzzyForest) -> Self {
        let n = forest.n_nodes();
        Self {
            d_pi: vec![0.0; n],
            d_c: vec![0.0; n],
            d_a: vec![0.0; n],
            d_y: vec![0.0; forest.width],
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.d_pi, &mut self.d_c, &mut self.d_a, &mut self.d_y] {
            v.fill(0.0);
        }
    }
}

pub fn fuzzy_backward(forest: &FuzzyForest, y: &[f64], probs: &RoutingProbs, delta: f64) -> FuzzyGradients {
    let mut g = FuzzyGradients::zeros(forest);
    let mut scratch = Vec::new();
    backward_accumulate(forest, y, probs, delta, &mut g, &mut scratch);
    g
}

/// Adds the gradient of `delta · raw` into `g`.
///
/// The bottom-up pass computes each node's subtree value
/// `V(i) = (1 − s_i) V(lower) + s_i V(upper)`, with `V(leaf) = π`. The raw
/// score depends on a node's routing only through `reach(i) · (V(upper) −
/// V(lower)) · s_i`, which gives every split derivative in O(1) per node.
pub fn backward_accumulate(
    forest: &FuzzyForest,
    y: &[f64],
    probs: &RoutingProbs,
    delta: f64,
    g: &mut FuzzyGradients,
    scratch: &mut Vec<f64>,
) {
    let n = forest.n_nodes();
    assert!(
        probs.reach.len() == n && g.d_pi.len() == n && y.len() == forest.width && g.d_y.len() == forest.width,
        "stale routing state or gradient buffer"
    );
    let scale = delta * forest.learning_rate;
    scratch.clear();
    scratch.resize(n, 0.0);
    let value = scratch;
    for i in (0..n).rev() {
        if forest.leaf[i] {
            value[i] = forest.pi[i];
            g.d_pi[i] += scale * probs.reach[i];
            continue;
        }
        let (lo, up) = (forest.left[i] as usize, forest.right[i] as usize);
        let s = probs.upper[i];
        value[i] = probs.lower[i] * value[lo] + s * value[up];
        let ds = scale * probs.reach[i] * (value[up] - value[lo]);
        if ds == 0.0 {
            continue;
        }
        let slope = s * (1.0 - s);
        let c = forest.c[i];
        let f = forest.feature[i] as usize;
        g.d_c[i] += ds * slope * (y[f] - forest.a[i]);
        g.d_a[i] -= ds * slope * c;
        g.d_y[f] += ds * slope * c;
    }
}

/// Type-7 quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn interquartile_range(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

/// Thresholds and leaf values from `forest`; `c_r = kappa / max(IQR(y[f_r]), 1e-6)`.
pub fn init_fuzzy(forest: &Forest, data: &StackedDataset, kappa: f64) -> Result<FuzzyForest, FuzzyError> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(FuzzyError::Config("kappa must be positive".into()));
    }
    if data.is_empty() {
        return Err(FuzzyError::Empty);
    }
    if data.width() != forest.width {
        return Err(FuzzyError::Dim {
            got: data.width(),
            want: forest.width,
        });
    }
    let mut spread: Vec<Option<f64>> = vec![None; forest.width];
    FuzzyForest::from_forest(forest, |f| {
        let iqr = *spread[f as usize].get_or_insert_with(|| interquartile_range(&data.column(f as usize)));
        kappa / iqr.max(MIN_SPREAD)
    })
}

pub fn export_fuzzy(forest: &FuzzyForest) -> String {
    let hard = forest.to_forest();
    let widths: Vec<Vec<f64>> = (0..forest.n_trees()).map(|t| forest.c[forest.tree_range(t)].to_vec()).collect();
    write_doc(
        FUZZY_TAG,
        hard.base_score,
        hard.learning_rate,
        hard.width,
        &hard.trees,
        Some(&widths),
    )
}

pub fn import_fuzzy(text: &str) -> Result<FuzzyForest, FuzzyError> {
    let doc = parse_doc(text, FUZZY_TAG, true)?;
    let widths: Vec<f64> = doc.widths.concat();
    let forest = Forest {
        trees: doc.trees,
        base_score: doc.base_score,
        learning_rate: doc.learning_rate,
        width: doc.width,
    };
    let mut f = FuzzyForest::from_forest(&forest, |_| 1.0)?;
    for (i, w) in widths.into_iter().enumerate() {
        if !f.leaf[i] {
            f.c[i] = w;
        }
    }
    Ok(f)
}

/// Structural counts behind the soft-versus-hard serving cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityStats {
    pub n_t: usize,
    /// Mean over trees of the mean leaf depth.
    pub d_t: f64,
    /// Mean node count per tree.
    pub l_t: f64,
    /// `l_t / max(d_t, 1)`.
    pub ratio: f64,
}

pub fn complexity_stats(forest: &Forest) -> Result<ComplexityStats, FuzzyError> {
    if forest.trees.is_empty() {
        return Err(ForestError::Empty.into());
    }
    let n_t = forest.trees.len();
    let mut depth_sum = 0.0;
    let mut node_sum = 0.0;
    for t in &forest.trees {
        let d = t.leaf_depths();
        depth_sum += d.iter().sum::<usize>() as f64 / d.len() as f64;
        node_sum += t.nodes.len() as f64;
    }
    let d_t = depth_sum / n_t as f64;
    let l_t = node_sum / n_t as f64;
    Ok(ComplexityStats {
        n_t,
        d_t,
        l_t,
        ratio: l_t / d_t.max(1.0),
    })
}
