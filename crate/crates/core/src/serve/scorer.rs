//! Interchangeable forest evaluators, selected by name.

use super::ServeError;
use crate::fuzzy::{forward_into, FuzzyForest, RoutingProbs};
use crate::gbdt::{predict_hard_counted, Forest, Node};
use crate::tally::OpCounter;

/// Raw-score evaluation of a forest on one stacking vector. Inputs are
/// assumed to have the forest's width; callers check it once up front.
pub trait ForestScorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn raw(&self, y: &[f64]) -> f64;
    /// Same value as [`ForestScorer::raw`], also counting split evaluations.
    fn raw_counted(&self, y: &[f64], tally: &mut OpCounter) -> f64;
}

/// What a scorer can be built from.
pub enum ScorerSource<'a> {
    Hard(&'a Forest),
    Soft(&'a FuzzyForest),
}

impl ScorerSource<'_> {
    fn hard(&self) -> Forest {
        match self {
            ScorerSource::Hard(f) => (*f).clone(),
            ScorerSource::Soft(f) => f.to_forest(),
        }
    }
}

type Builder = fn(&ScorerSource) -> Result<Box<dyn ForestScorer>, ServeError>;

const REGISTRY: &[(&str, Builder)] = &[
    ("compiled", |s| Ok(Box::new(CompiledForest::compile(&s.hard())?))),
    ("reference", |s| {
        let f = s.hard();
        f.validate()?;
        Ok(Box::new(ReferenceScorer(f)))
    }),
    ("fuzzy", |s| match s {
        ScorerSource::Soft(f) => Ok(Box::new(SoftScorer((*f).clone()))),
        ScorerSource::Hard(_) => Err(ServeError::Config("the fuzzy scorer needs a three-step bundle".into())),
    }),
];

pub fn scorer_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_scorer(name: &str, source: &ScorerSource) -> Result<Box<dyn ForestScorer>, ServeError> {
    let (_, build) = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ServeError::Config(format!("unknown scorer `{name}` (known: {})", scorer_names().join(", "))))?;
    build(source)
}

/// Walks the node arrays of [`Forest`] directly.
pub struct ReferenceScorer(pub Forest);

impl ForestScorer for ReferenceScorer {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn raw(&self, y: &[f64]) -> f64 {
        predict_hard_counted(&self.0, y, &mut ()).expect("width checked by caller")
    }

    fn raw_counted(&self, y: &[f64], tally: &mut OpCounter) -> f64 {
        predict_hard_counted(&self.0, y, tally).expect("width checked by caller")
    }
}

/// Soft traversal of every node; used for accuracy comparisons, not latency.
pub struct SoftScorer(pub FuzzyForest);

impl ForestScorer for SoftScorer {
    fn name(&self) -> &'static str {
        "fuzzy"
    }

    fn raw(&self, y: &[f64]) -> f64 {
        let mut p = RoutingProbs::new(self.0.n_nodes());
        forward_into(&self.0, y, &mut p, &mut ())
    }

    fn raw_counted(&self, y: &[f64], tally: &mut OpCounter) -> f64 {
        let mut p = RoutingProbs::new(self.0.n_nodes());
        forward_into(&self.0, y, &mut p, tally)
    }
}

const LEAF: u32 = u32::MAX;

/// All trees in flat arrays, each tree contiguous and breadth-first.
/// `left[i] == u32::MAX` marks a leaf whose value is `value[i]`; for internal
/// nodes `value[i]` is the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledForest {
    feature: Vec<u32>,
    value: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
    roots: Vec<u32>,
    base_score: f64,
    learning_rate: f64,
    width: usize,
}

impl CompiledForest {
    pub fn compile(forest: &Forest) -> Result<Self, ServeError> {
        forest.validate()?;
        let mut c = Self {
            feature: Vec::with_capacity(forest.n_nodes()),
            value: Vec::with_capacity(forest.n_nodes()),
            left: Vec::with_capacity(forest.n_nodes()),
            right: Vec::with_capacity(forest.n_nodes()),
            roots: Vec::with_capacity(forest.trees.len()),
            base_score: forest.base_score,
            learning_rate: forest.learning_rate,
            width: forest.width,
        };
        for tree in &forest.trees {
            let base = c.feature.len() as u32;
            c.roots.push(base);
            // Breadth-first order; children get consecutive slots.
            let mut queue = std::collections::VecDeque::from([0u32]);
            let mut next = 1u32;
            while let Some(id) = queue.pop_front() {
                match tree.nodes[id as usize] {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        c.feature.push(feature);
                        c.value.push(threshold);
                        c.left.push(base + next);
                        c.right.push(base + next + 1);
                        next += 2;
                        queue.push_back(left);
                        queue.push_back(right);
                    }
                    Node::Leaf { value } => {
                        c.feature.push(0);
                        c.value.push(value);
                        c.left.push(LEAF);
                        c.right.push(LEAF);
                    }
                }
            }
            if c.feature.len() as u32 - base != tree.nodes.len() as u32 {
                return Err(ServeError::Compile("tree layout lost nodes".into()));
            }
        }
        Ok(c)
    }

    pub fn n_trees(&self) -> usize {
        self.roots.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn walk(&self, y: &[f64], tally: &mut OpCounter, count: bool) -> f64 {
        let mut sum = 0.0;
        for &root in &self.roots {
            let mut i = root as usize;
            loop {
                let l = self.left[i];
                if l == LEAF {
                    sum += self.value[i];
                    break;
                }
                if count {
                    tally.visits += 1;
                }
                i = if y[self.feature[i] as usize] < self.value[i] { l } else { self.right[i] } as usize;
            }
        }
        self.base_score + self.learning_rate * sum
    }
}

impl ForestScorer for CompiledForest {
    fn name(&self) -> &'static str {
        "compiled"
    }

    fn raw(&self, y: &[f64]) -> f64 {
        self.walk(y, &mut OpCounter::default(), false)
    }

    fn raw_counted(&self, y: &[f64], tally: &mut OpCounter) -> f64 {
        self.walk(y, tally, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::testing::random_forest;
    use crate::gbdt::{predict_hard, Tree};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compiled_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = random_forest(&mut rng, 20, 10, 6, false);
        let c = CompiledForest::compile(&f).unwrap();
        for _ in 0..1000 {
            let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.2..1.2)).collect();
            assert_eq!(c.raw(&y).to_bits(), predict_hard(&f, &y).unwrap().to_bits());
        }
    }

    #[test]
    fn layout_is_breadth_first() {
        let t = Tree::new(vec![
            Node::Split { feature: 0, threshold: 0.0, left: 1, right: 2 },
            Node::Split { feature: 1, threshold: 1.0, left: 3, right: 4 },
            Node::Leaf { value: 3.0 },
            Node::Leaf { value: 1.0 },
            Node::Leaf { value: 2.0 },
        ])
        .unwrap();
        let f = Forest { trees: vec![t], base_score: 0.0, learning_rate: 1.0, width: 2 };
        let c = CompiledForest::compile(&f).unwrap();
        // Pre-order [s0, s1, 1, 2, 3] becomes [s0, s1, 3, 1, 2].
        assert_eq!(c.value, vec![0.0, 1.0, 3.0, 1.0, 2.0]);
        assert_eq!(c.left, vec![1, 3, LEAF, LEAF, LEAF]);
    }

    #[test]
    fn empty_forest_scores_base() {
        let c = CompiledForest::compile(&Forest::empty(0.25, 3)).unwrap();
        assert_eq!(c.raw(&[0.0; 3]), 0.25);
    }

    #[test]
    fn bad_child_is_a_compile_error() {
        let f = Forest {
            trees: vec![Tree {
                nodes: vec![Node::Split { feature: 0, threshold: 0.0, left: 1, right: 5 }, Node::Leaf { value: 1.0 }],
            }],
            base_score: 0.0,
            learning_rate: 1.0,
            width: 1,
        };
        assert!(CompiledForest::compile(&f).is_err());
    }

    #[test]
    fn visit_counts_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let f = random_forest(&mut rng, 8, 5, 5, false);
        let c = CompiledForest::compile(&f).unwrap();
        let r = ReferenceScorer(f);
        for _ in 0..100 {
            let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let (mut a, mut b) = (OpCounter::default(), OpCounter::default());
            c.raw_counted(&y, &mut a);
            r.raw_counted(&y, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn registry_lookup() {
        let f = Forest::empty(0.0, 2);
        assert_eq!(scorer_names(), vec!["compiled", "reference", "fuzzy"]);
        assert_eq!(build_scorer("reference", &ScorerSource::Hard(&f)).unwrap().name(), "reference");
        assert!(build_scorer("fuzzy", &ScorerSource::Hard(&f)).is_err());
        assert!(build_scorer("nope", &ScorerSource::Hard(&f)).is_err());
    }
}
