//! Leaf-wise second-order boosting with exact greedy splits.

use serde::{Deserialize, Serialize};

use super::split::{scan_sorted, SplitPoint};
use super::{ForestError, Forest, Node, Tree};
use crate::nn::{mean_log_loss_raw, StackedDataset, PROB_EPS};
use crate::numfmt::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_leaves: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Exact greedy training draws no random numbers; the seed is carried so
    /// run manifests record it alongside the other stages.
    pub seed: u64,
    /// Raw-score offset; defaults to the label-prior log-odds.
    pub base_score: Option<f64>,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_leaves: 128,
            max_depth: 7,
            min_samples_leaf: 20,
            lambda: 1.0,
            learning_rate: 0.1,
            seed: 7,
            base_score: None,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::Config("n_trees must be at least 1".into()));
        }
        if self.max_leaves < 2 {
            return Err(ForestError::Config("max_leaves must be at least 2".into()));
        }
        if self.max_depth == 0 {
            return Err(ForestError::Config("max_depth must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(ForestError::Config("lambda must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ForestError::Config("learning_rate must be positive".into()));
        }
        if matches!(self.base_score, Some(b) if !b.is_finite()) {
            return Err(ForestError::Config("base_score must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtReport {
    pub initial_loss: f64,
    /// Train log loss after each round.
    pub round_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub node: u32,
    pub samples: Vec<u32>,
    pub feature: u32,
    pub threshold: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafRecord {
    pub node: u32,
    pub samples: Vec<u32>,
    /// Unshrunk Newton value.
    pub value: f64,
}

/// Everything needed to re-derive one boosting round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub splits: Vec<SplitRecord>,
    pub leaves: Vec<LeafRecord>,
}

struct Candidate {
    feature: u32,
    point: SplitPoint,
}

struct OpenLeaf {
    node: u32,
    depth: usize,
    /// Sample ids sorted by value, one list per feature.
    sorted: Vec<Vec<u32>>,
    g: f64,
    h: f64,
    best: Option<Candidate>,
}

impl OpenLeaf {
    fn len(&self) -> usize {
        self.sorted[0].len()
    }

    fn members(&self) -> Vec<u32> {
        let mut m = self.sorted[0].clone();
        m.sort_unstable();
        m
    }
}

struct Columns {
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn new(ds: &StackedDataset) -> Self {
        Self {
            cols: (0..ds.width()).map(|k| ds.column(k)).collect(),
        }
    }
}

fn find_best(leaf: &OpenLeaf, cols: &Columns, grad: &[f64], hess: &[f64], cfg: &GbdtConfig) -> Option<Candidate> {
    if leaf.depth >= cfg.max_depth || leaf.len() < 2 * cfg.min_samples_leaf.max(1) {
        return None;
    }
    let mut best: Option<Candidate> = None;
    for (f, order) in leaf.sorted.iter().enumerate() {
        let col = &cols.cols[f];
        let items = order.iter().map(|&i| {
            let i = i as usize;
            (col[i], grad[i], hess[i])
        });
        if let Some(p) = scan_sorted(items, order.len(), leaf.g, leaf.h, cfg.lambda, cfg.min_samples_leaf) {
            if p.gain > 0.0 && best.as_ref().map_or(true, |b| p.gain > b.point.gain) {
                best = Some(Candidate {
                    feature: f as u32,
                    point: p,
                });
            }
        }
    }
    best
}

fn grow_tree(
    cols: &Columns,
    root_sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    cfg: &GbdtConfig,
    trace: Option<&mut RoundTrace>,
) -> (Tree, Vec<(u32, Vec<u32>)>) {
    let n = grad.len();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut root = OpenLeaf {
        node: 0,
        depth: 0,
        sorted: root_sorted.to_vec(),
        g: grad.iter().sum(),
        h: hess.iter().sum(),
        best: None,
    };
    root.best = find_best(&root, cols, grad, hess, cfg);
    let mut open = vec![root];
    let mut goes_left = vec![false; n];
    let mut trace = trace;

    while open.len() < cfg.max_leaves {
        // Highest gain; ties keep the earliest-created node.
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(k, l)| l.best.as_ref().map(|b| (k, b.point.gain, l.node)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)));
        let Some((k, _, _)) = pick else { break };
        let leaf = open.swap_remove(k);
        let cand = leaf.best.as_ref().expect("picked leaf has a split");
        let f = cand.feature as usize;
        let threshold = cand.point.threshold;
        let col = &cols.cols[f];
        for &i in &leaf.sorted[0] {
            goes_left[i as usize] = col[i as usize] < threshold;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.splits.push(SplitRecord {
                node: leaf.node,
                samples: leaf.members(),
                feature: cand.feature,
                threshold,
                gain: cand.point.gain,
            });
        }
        let mut left_sorted = Vec::with_capacity(leaf.sorted.len());
        let mut right_sorted = Vec::with_capacity(leaf.sorted.len());
        for order in &leaf.sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = order.iter().partition(|&&i| goes_left[i as usize]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let sums = |ids: &[u32]| {
            ids.iter().fold((0.0, 0.0), |(g, h), &i| (g + grad[i as usize], h + hess[i as usize]))
        };
        let (lg, lh) = sums(&left_sorted[0]);
        let left_id = nodes.len() as u32;
        let right_id = left_id + 1;
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[leaf.node as usize] = Node::Split {
            feature: cand.feature,
            threshold,
            left: left_id,
            right: right_id,
        };
        for (id, sorted, g, h) in [
            (left_id, left_sorted, lg, lh),
            (right_id, right_sorted, leaf.g - lg, leaf.h - lh),
        ] {
            let mut child = OpenLeaf {
                node: id,
                depth: leaf.depth + 1,
                sorted,
                g,
                h,
                best: None,
            };
            child.best = find_best(&child, cols, grad, hess, cfg);
            open.push(child);
        }
    }

    let mut members = Vec::with_capacity(open.len());
    open.sort_by_key(|l| l.node);
    for leaf in open {
        let ids = leaf.members();
        let (g, h) = ids
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + grad[i as usize], h + hess[i as usize]));
        let denom = h + cfg.lambda;
        let value = if denom > 0.0 { -g / denom } else { 0.0 };
        nodes[leaf.node as usize] = Node::Leaf { value };
        if let Some(t) = trace.as_deref_mut() {
            t.leaves.push(LeafRecord {
                node: leaf.node,
                samples: ids.clone(),
                value,
            });
        }
        members.push((leaf.node, ids));
    }
    // Renumber to canonical pre-order, which is also the document order.
    let raw = Tree { nodes };
    let mut new_id = vec![0u32; raw.nodes.len()];
    for (k, old) in raw.preorder_ids().into_iter().enumerate() {
        new_id[old as usize] = k as u32;
    }
    if let Some(t) = trace {
        t.splits.iter_mut().for_each(|s| s.node = new_id[s.node as usize]);
        t.leaves.iter_mut().for_each(|l| l.node = new_id[l.node as usize]);
    }
    for (node, _) in &mut members {
        *node = new_id[*node as usize];
    }
    (raw.to_preorder(), members)
}

fn prior_log_odds(labels: &[u8]) -> f64 {
    let p = labels.iter().map(|&l| l as f64).sum::<f64>() / labels.len() as f64;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

pub fn train_gbdt(ds: &StackedDataset, cfg: &GbdtConfig) -> Result<(Forest, GbdtReport), ForestError> {
    train_impl(ds, cfg, None)
}

/// Like [`train_gbdt`], also recording per-round gradients, chosen splits
/// and leaf memberships.
pub fn train_gbdt_traced(
    ds: &StackedDataset,
    cfg: &GbdtConfig,
) -> Result<(Forest, GbdtReport, Vec<RoundTrace>), ForestError> {
    let mut traces = Vec::new();
    let (f, r) = train_impl(ds, cfg, Some(&mut traces))?;
    Ok((f, r, traces))
}

fn train_impl(
    ds: &StackedDataset,
    cfg: &GbdtConfig,
    mut traces: Option<&mut Vec<RoundTrace>>,
) -> Result<(Forest, GbdtReport), ForestError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ForestError::Empty);
    }
    let n = ds.len();
    let labels = ds.labels();
    let cols = Columns::new(ds);
    let root_sorted: Vec<Vec<u32>> = cols
        .cols
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let base_score = cfg.base_score.unwrap_or_else(|| prior_log_odds(labels));
    let mut raw = vec![base_score; n];
    let initial_loss = mean_log_loss_raw(&raw, labels);
    let mut round_losses = Vec::with_capacity(cfg.n_trees);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    // Tree sums are accumulated separately so training scores equal
    // base + ν·Σ exactly as predict_hard evaluates them.
    let mut tree_sum = vec![0.0; n];

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = p - labels[i] as f64;
            hess[i] = p * (1.0 - p);
        }
        let mut round = traces.as_ref().map(|_| RoundTrace {
            grad: grad.clone(),
            hess: hess.clone(),
            splits: Vec::new(),
            leaves: Vec::new(),
        });
        let (tree, members) = grow_tree(&cols, &root_sorted, &grad, &hess, cfg, round.as_mut());
        for (node, ids) in &members {
            let Node::Leaf { value } = tree.nodes[*node as usize] else { unreachable!() };
            for &i in ids {
                tree_sum[i as usize] += value;
            }
        }
        for i in 0..n {
            raw[i] = base_score + cfg.learning_rate * tree_sum[i];
        }
        round_losses.push(mean_log_loss_raw(&raw, labels));
        trees.push(tree);
        if let (Some(t), Some(r)) = (traces.as_deref_mut(), round) {
            t.push(r);
        }
    }

    let forest = Forest {
        trees,
        base_score,
        learning_rate: cfg.learning_rate,
        width: ds.width(),
    };
    Ok((
        forest,
        GbdtReport {
            initial_loss,
            round_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::predict_hard;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GbdtConfig {
        GbdtConfig {
            n_trees: 5,
            max_leaves: 8,
            max_depth: 4,
            min_samples_leaf: 1,
            lambda: 1.0,
            learning_rate: 0.5,
            seed: 7,
            base_score: None,
        }
    }

    #[test]
    fn constant_labels_give_one_newton_leaf() {
        let ds = StackedDataset::new(1, vec![1; 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = GbdtConfig { n_trees: 1, base_score: Some(0.0), lambda: 1.0, ..cfg() };
        let (f, _) = train_gbdt(&ds, &c).unwrap();
        assert_eq!(f.trees[0].nodes, vec![Node::Leaf { value: 1.0 }]);
    }

    #[test]
    fn separable_on_first_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(u8, Vec<f64>)> = (0..60)
            .map(|i| {
                let label = (i % 2) as u8;
                let x0 = if label == 1 { rng.gen_range(0.6..1.0) } else { rng.gen_range(0.0..0.4) };
                (label, vec![x0, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            })
            .collect();
        let ds = StackedDataset::from_rows(&rows).unwrap();
        let (f, rep) = train_gbdt(&ds, &cfg()).unwrap();
        match f.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!((0.4..=0.6).contains(&threshold));
            }
            _ => panic!("root should split"),
        }
        let mut prev = rep.initial_loss;
        for &l in &rep.round_losses {
            assert!(l < prev, "{:?}", rep.round_losses);
            prev = l;
        }
    }

    #[test]
    fn training_scores_equal_hard_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<(u8, Vec<f64>)> = (0..200)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                ((x[0] + x[1] > 1.0) as u8, x)
            })
            .collect();
        let ds = StackedDataset::from_rows(&rows).unwrap();
        let (f, rep) = train_gbdt(&ds, &cfg()).unwrap();
        let raw: Vec<f64> = ds.rows().map(|r| predict_hard(&f, r).unwrap()).collect();
        assert_eq!(mean_log_loss_raw(&raw, ds.labels()), *rep.round_losses.last().unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(GbdtConfig { n_trees: 0, ..cfg() }.validate().is_err());
        assert!(GbdtConfig { max_leaves: 1, ..cfg() }.validate().is_err());
        assert!(GbdtConfig { lambda: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn all_same_label_is_not_an_error() {
        let ds = StackedDataset::new(2, vec![0; 6], (0..12).map(|v| v as f64).collect()).unwrap();
        let (f, _) = train_gbdt(&ds, &cfg()).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn deterministic() {
        let ds = StackedDataset::new(2, vec![0, 1, 1, 0, 1, 0, 1, 1], vec![0.1, 0.9, 0.8, 0.2, 0.7, 0.3, 0.4, 0.6, 0.9, 0.1, 0.2, 0.5, 0.6, 0.6, 0.3, 0.8]).unwrap();
        let a = train_gbdt(&ds, &cfg()).unwrap().0;
        let b = train_gbdt(&ds, &cfg()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn respects_leaf_and_depth_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<(u8, Vec<f64>)> = (0..500)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                (rng.gen_bool(x[0]) as u8, x)
            })
            .collect();
        let ds = StackedDataset::from_rows(&rows).unwrap();
        let c = GbdtConfig { max_leaves: 6, max_depth: 3, min_samples_leaf: 20, ..cfg() };
        let (f, _, traces) = train_gbdt_traced(&ds, &c).unwrap();
        for (t, tr) in f.trees.iter().zip(&traces) {
            assert!(t.n_leaves() <= 6);
            assert!(t.max_depth() <= 3);
            assert!(tr.leaves.iter().all(|l| l.samples.len() >= 20));
        }
    }

    #[test]
    fn leaf_values_reaggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<(u8, Vec<f64>)> = (0..300)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                (rng.gen_bool(0.2 + 0.6 * x[1]) as u8, x)
            })
            .collect();
        let ds = StackedDataset::from_rows(&rows).unwrap();
        let (f, _, traces) = train_gbdt_traced(&ds, &cfg()).unwrap();
        for (tree, tr) in f.trees.iter().zip(&traces) {
            for leaf in &tr.leaves {
                let g: f64 = leaf.samples.iter().map(|&i| tr.grad[i as usize]).sum();
                let h: f64 = leaf.samples.iter().map(|&i| tr.hess[i as usize]).sum();
                let Node::Leaf { value } = tree.nodes[leaf.node as usize] else { panic!() };
                assert!((value - (-g / (h + 1.0))).abs() < 1e-12);
            }
        }
    }
}
