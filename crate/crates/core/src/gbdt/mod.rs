//! Gradient-boosted forests over stacking vectors.
//!
//! Every internal node tests a single stacking dimension: a sample goes left
//! iff `y[feature] < threshold`. Hard traversal therefore costs one comparison
//! per level, independent of the stacking width.

pub(crate) mod doc;
mod split;
mod train;

use thiserror::Error;

pub use doc::{export_forest, import_forest};
pub use split::{best_split, split_gain, SplitPoint};
pub use train::{train_gbdt, train_gbdt_traced, GbdtConfig, GbdtReport, LeafRecord, RoundTrace, SplitRecord};

use crate::tally::Tally;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: input has {got} values, forest expects {want}")]
    Dim { got: usize, want: usize },
    #[error("tree {tree}: {msg}")]
    Structure { tree: usize, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// Binary tree in a contiguous node array, root at index 0. After
/// [`Tree::new`] every child id is greater than its parent's, so index order
/// is a valid top-down order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Validates the node graph and renumbers it into pre-order.
    pub fn new(nodes: Vec<Node>) -> Result<Self, String> {
        let t = Self { nodes };
        t.check()?;
        Ok(t.to_preorder())
    }

    /// Every node reachable exactly once from the root, finite values.
    pub fn check(&self) -> Result<(), String> {
        let n = self.nodes.len();
        if n == 0 {
            return Err("tree has no nodes".into());
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let i = id as usize;
            if seen[i] {
                return Err(format!("node {id} is reachable twice"));
            }
            seen[i] = true;
            match self.nodes[i] {
                Node::Split {
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if !threshold.is_finite() {
                        return Err(format!("node {id} has non-finite threshold"));
                    }
                    for c in [right, left] {
                        if c as usize >= n {
                            return Err(format!("node {id} has dangling child {c}"));
                        }
                        stack.push(c);
                    }
                }
                Node::Leaf { value } => {
                    if !value.is_finite() {
                        return Err(format!("leaf {id} has non-finite value"));
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("node {i} is unreachable"));
        }
        Ok(())
    }

    /// Renumbers reachable nodes in pre-order (node, left subtree, right subtree).
    pub fn to_preorder(&self) -> Tree {
        let order = self.preorder_ids();
        let mut new_id = vec![u32::MAX; self.nodes.len()];
        for (k, &old) in order.iter().enumerate() {
            new_id[old as usize] = k as u32;
        }
        let nodes = order
            .iter()
            .map(|&old| match self.nodes[old as usize] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => Node::Split {
                    feature,
                    threshold,
                    left: new_id[left as usize],
                    right: new_id[right as usize],
                },
                leaf => leaf,
            })
            .collect();
        Tree { nodes }
    }

    /// Reachable node ids in pre-order.
    pub(crate) fn preorder_ids(&self) -> Vec<u32> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            order.push(id);
            if let Node::Split { left, right, .. } = self.nodes[id as usize] {
                stack.push(right);
                stack.push(left);
            }
        }
        order
    }

    #[inline]
    pub fn predict(&self, y: &[f64]) -> f64 {
        self.predict_counted(y, &mut ())
    }

    /// Counts one visit per split evaluated, i.e. the depth reached.
    #[inline]
    pub fn predict_counted<T: Tally>(&self, y: &[f64], tally: &mut T) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    tally.visit(1);
                    i = if y[feature as usize] < threshold { left } else { right } as usize;
                }
                Node::Leaf { value } => return value,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Depth of every leaf, root at depth 0, in node order.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut out = Vec::new();
        let mut stack = vec![(0u32, 0usize)];
        while let Some((id, d)) = stack.pop() {
            depth[id as usize] = d;
            match self.nodes[id as usize] {
                Node::Split { left, right, .. } => {
                    stack.push((right, d + 1));
                    stack.push((left, d + 1));
                }
                Node::Leaf { .. } => out.push(d),
            }
        }
        out
    }

    pub fn max_depth(&self) -> usize {
        self.leaf_depths().into_iter().max().unwrap_or(0)
    }

    pub fn max_feature(&self) -> Option<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                _ => None,
            })
            .max()
    }
}

/// `raw(y) = base_score + learning_rate * Σ_t tree_t(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub base_score: f64,
    pub learning_rate: f64,
    /// Stacking width D the forest consumes.
    pub width: usize,
}

impl Forest {
    pub fn empty(base_score: f64, width: usize) -> Self {
        Self {
            trees: Vec::new(),
            base_score,
            learning_rate: 1.0,
            width,
        }
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if !self.base_score.is_finite() || !self.learning_rate.is_finite() {
            return Err(ForestError::Config("base_score and learning_rate must be finite".into()));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            tree.check().map_err(|msg| ForestError::Structure { tree: t, msg })?;
            if let Some(f) = tree.max_feature() {
                if f as usize >= self.width {
                    return Err(ForestError::Structure {
                        tree: t,
                        msg: format!("feature {f} outside stacking width {}", self.width),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

/// Hard-traversal raw score.
pub fn predict_hard(forest: &Forest, y: &[f64]) -> Result<f64, ForestError> {
    predict_hard_counted(forest, y, &mut ())
}

pub fn predict_hard_counted<T: Tally>(forest: &Forest, y: &[f64], tally: &mut T) -> Result<f64, ForestError> {
    if y.len() != forest.width {
        return Err(ForestError::Dim {
            got: y.len(),
            want: forest.width,
        });
    }
    let mut sum = 0.0;
    for t in &forest.trees {
        sum += t.predict_counted(y, tally);
    }
    Ok(forest.base_score + forest.learning_rate * sum)
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::tally::OpCounter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stump() -> Forest {
        Forest {
            trees: vec![Tree::new(vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: 1.0 },
                Node::Leaf { value: 2.0 },
            ])
            .unwrap()],
            base_score: 0.0,
            learning_rate: 1.0,
            width: 1,
        }
    }

    #[test]
    fn single_split_goes_left_below_threshold() {
        assert_eq!(predict_hard(&stump(), &[0.3]).unwrap(), 1.0);
        assert_eq!(predict_hard(&stump(), &[0.5]).unwrap(), 2.0);
    }

    #[test]
    fn empty_forest_is_base_score() {
        assert_eq!(predict_hard(&Forest::empty(-0.7, 3), &[1.0, 2.0, 3.0]).unwrap(), -0.7);
    }

    #[test]
    fn dimension_mismatch() {
        assert_eq!(predict_hard(&stump(), &[0.1, 0.2]).unwrap_err(), ForestError::Dim { got: 2, want: 1 });
    }

    #[test]
    fn random_forest_matches_per_tree_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let f = random_forest(&mut rng, 7, 10, 5, false);
            let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // independent recursive traversal over the node enum
            fn walk(t: &Tree, i: usize, y: &[f64]) -> f64 {
                match t.nodes[i] {
                    Node::Leaf { value } => value,
                    Node::Split { feature, threshold, left, right } => {
                        if y[feature as usize] < threshold { walk(t, left as usize, y) } else { walk(t, right as usize, y) }
                    }
                }
            }
            let leaves: f64 = f.trees.iter().map(|t| walk(t, 0, &y)).sum();
            let want = f.base_score + f.learning_rate * leaves;
            assert_eq!(predict_hard(&f, &y).unwrap(), want);
        }
    }

    #[test]
    fn visits_bounded_by_depth_and_linear_in_tree_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_forest(&mut rng, 10, 6, 5, false);
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut per_tree = 0;
        for t in &f.trees {
            let mut c = OpCounter::default();
            t.predict_counted(&y, &mut c);
            assert!(c.visits as usize <= t.max_depth());
            per_tree += c.visits;
        }
        let mut doubled = f.clone();
        doubled.trees.extend(f.trees.iter().cloned());
        let mut c1 = OpCounter::default();
        let mut c2 = OpCounter::default();
        predict_hard_counted(&f, &y, &mut c1).unwrap();
        predict_hard_counted(&doubled, &y, &mut c2).unwrap();
        assert_eq!(c1.visits, per_tree);
        assert_eq!(c2.visits, 2 * c1.visits);
    }

    #[test]
    fn structure_validation() {
        let dangling = Tree { nodes: vec![Node::Split { feature: 0, threshold: 0.0, left: 1, right: 5 }, Node::Leaf { value: 0.0 }] };
        assert!(dangling.check().unwrap_err().contains("dangling child 5"));
        let cyclic = Tree { nodes: vec![Node::Split { feature: 0, threshold: 0.0, left: 0, right: 1 }, Node::Leaf { value: 0.0 }] };
        assert!(cyclic.check().is_err());
        let orphan = Tree { nodes: vec![Node::Leaf { value: 0.0 }, Node::Leaf { value: 1.0 }] };
        assert!(orphan.check().unwrap_err().contains("unreachable"));
        let mut f = stump();
        f.width = 0;
        assert!(f.validate().is_err());
    }

    #[test]
    fn preorder_keeps_semantics_and_orders_children_after_parents() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.0, left: 3, right: 1 },
                Node::Leaf { value: 2.0 },
                Node::Leaf { value: 3.0 },
                Node::Split { feature: 1, threshold: 0.0, left: 2, right: 4 },
                Node::Leaf { value: 4.0 },
            ],
        };
        let p = Tree::new(t.nodes.clone()).unwrap();
        for (i, n) in p.nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = n {
                assert!(*left as usize > i && *right as usize > i);
            }
        }
        for y in [[-1.0, -1.0], [-1.0, 1.0], [1.0, 0.0]] {
            assert_eq!(t.predict(&y), p.predict(&y));
        }
    }
}
