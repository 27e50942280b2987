//! Line-oriented forest document.
//!
//! ```text
//! forest v1
//! n_trees 1
//! width 4
//! base_score 0
//! learning_rate 1
//! tree 0 3
//! N 0 2 5.0000000000000000e-1 1 2
//! L 1 1.0000000000000000e0
//! L 2 2.0000000000000000e0
//! ```
//!
//! Node records are written in pre-order. The fuzzy variant uses the tag
//! `fuzzy-forest v1` and appends the inverse width `c` to every `N` record.

use super::{Forest, ForestError, Node, Tree};
use crate::numfmt::sig17;

pub(crate) const FOREST_TAG: &str = "forest v1";

/// Parsed document; `widths[t][i]` is the extra `N` field of node `i` (0 on
/// leaves and in plain documents). Trees are in pre-order.
pub(crate) struct ForestDoc {
    pub base_score: f64,
    pub learning_rate: f64,
    pub width: usize,
    pub trees: Vec<Tree>,
    pub widths: Vec<Vec<f64>>,
}

pub(crate) fn write_doc(
    tag: &str,
    base_score: f64,
    learning_rate: f64,
    width: usize,
    trees: &[Tree],
    widths: Option<&[Vec<f64>]>,
) -> String {
    let mut out = String::new();
    out.push_str(tag);
    out.push('\n');
    out.push_str(&format!("n_trees {}\n", trees.len()));
    out.push_str(&format!("width {width}\n"));
    out.push_str(&format!("base_score {}\n", sig17(base_score)));
    out.push_str(&format!("learning_rate {}\n", sig17(learning_rate)));
    for (t, tree) in trees.iter().enumerate() {
        out.push_str(&format!("tree {t} {}\n", tree.nodes.len()));
        for (i, node) in tree.nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push_str(&format!("N {i} {feature} {} {left} {right}", sig17(threshold)));
                    if let Some(w) = widths {
                        out.push(' ');
                        out.push_str(&sig17(w[t][i]));
                    }
                    out.push('\n');
                }
                Node::Leaf { value } => out.push_str(&format!("L {i} {}\n", sig17(value))),
            }
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<Vec<&'a str>, ForestError> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            return Ok(l.split_whitespace().collect());
        }
        Err(ForestError::Parse {
            line: self.line + 1,
            msg: "unexpected end of document".into(),
        })
    }

    fn err(&self, msg: impl Into<String>) -> ForestError {
        ForestError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, ForestError> {
        let f = self.next()?;
        match f.as_slice() {
            [k, v] if *k == key => Ok(v),
            _ => Err(self.err(format!("expected `{key} <value>`"))),
        }
    }

    fn num<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T, ForestError> {
        s.parse().map_err(|_| self.err(format!("bad {what} `{s}`")))
    }

    fn finite(&self, s: &str, what: &str) -> Result<f64, ForestError> {
        let v: f64 = self.num(s, what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("non-finite {what}")))
        }
    }
}

pub(crate) fn parse_doc(text: &str, tag: &str, with_widths: bool) -> Result<ForestDoc, ForestError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let head = lines.next()?;
    if head.join(" ") != tag {
        return Err(lines.err(format!("expected header `{tag}`")));
    }
    let n_trees: usize = {
        let v = lines.keyed("n_trees")?;
        lines.num(v, "n_trees")?
    };
    let width: usize = {
        let v = lines.keyed("width")?;
        lines.num(v, "width")?
    };
    let base_score = {
        let v = lines.keyed("base_score")?;
        lines.finite(v, "base_score")?
    };
    let learning_rate = {
        let v = lines.keyed("learning_rate")?;
        lines.finite(v, "learning_rate")?
    };

    let mut trees = Vec::with_capacity(n_trees);
    let mut widths = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let f = lines.next()?;
        let n_nodes: usize = match f.as_slice() {
            ["tree", id, n] => {
                if lines.num::<usize>(id, "tree id")? != t {
                    return Err(lines.err(format!("expected tree {t}")));
                }
                lines.num(n, "node count")?
            }
            _ => return Err(lines.err(format!("expected `tree {t} <n_nodes>`"))),
        };
        if n_nodes == 0 {
            return Err(lines.err(format!("tree {t} has no nodes")));
        }
        let mut nodes: Vec<Option<Node>> = vec![None; n_nodes];
        let mut w = vec![0.0; n_nodes];
        let mut record_line = vec![0usize; n_nodes];
        for _ in 0..n_nodes {
            let f = lines.next()?;
            let id: usize = match f.get(1) {
                Some(s) => lines.num(s, "node id")?,
                None => return Err(lines.err("missing node id")),
            };
            if id >= n_nodes {
                return Err(lines.err(format!("node {id} out of range (tree {t} has {n_nodes} nodes)")));
            }
            if nodes[id].is_some() {
                return Err(lines.err(format!("node {id} defined twice")));
            }
            let node = match (f[0], f.len()) {
                ("L", 3) => Node::Leaf {
                    value: lines.finite(f[2], "leaf value")?,
                },
                ("N", n) if n == if with_widths { 7 } else { 6 } => {
                    let feature: u32 = lines.num(f[2], "feature")?;
                    if feature as usize >= width {
                        return Err(lines.err(format!("node {id}: feature {feature} outside width {width}")));
                    }
                    let threshold = lines.finite(f[3], "threshold")?;
                    let left: u32 = lines.num(f[4], "left child")?;
                    let right: u32 = lines.num(f[5], "right child")?;
                    for c in [left, right] {
                        if c as usize >= n_nodes {
                            return Err(lines.err(format!("node {id}: child {c} out of range")));
                        }
                    }
                    if with_widths {
                        w[id] = lines.finite(f[6], "c")?;
                        if w[id] <= 0.0 {
                            return Err(lines.err(format!("node {id}: c must be positive")));
                        }
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                _ => return Err(lines.err("malformed node record")),
            };
            nodes[id] = Some(node);
            record_line[id] = lines.line;
        }
        let raw = Tree {
            nodes: nodes.into_iter().map(|n| n.expect("all ids filled")).collect(),
        };
        raw.check().map_err(|msg| ForestError::Structure { tree: t, msg })?;
        let order = raw.preorder_ids();
        widths.push(order.iter().map(|&i| w[i as usize]).collect());
        trees.push(raw.to_preorder());
    }
    if let Ok(extra) = lines.next() {
        return Err(lines.err(format!("trailing content `{}`", extra.join(" "))));
    }
    Ok(ForestDoc {
        base_score,
        learning_rate,
        width,
        trees,
        widths,
    })
}

pub fn export_forest(forest: &Forest) -> String {
    let trees: Vec<Tree> = forest.trees.iter().map(Tree::to_preorder).collect();
    write_doc(FOREST_TAG, forest.base_score, forest.learning_rate, forest.width, &trees, None)
}

pub fn import_forest(text: &str) -> Result<Forest, ForestError> {
    let doc = parse_doc(text, FOREST_TAG, false)?;
    Ok(Forest {
        trees: doc.trees,
        base_score: doc.base_score,
        learning_rate: doc.learning_rate,
        width: doc.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::predict_hard;
    use crate::gbdt::testing::random_forest;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HAND: &str = "forest v1
n_trees 1
width 3
base_score 0.5
learning_rate 1
tree 0 5
N 0 1 0.25 1 2
L 1 -1
N 2 2 3 3 4
L 3 2
L 4 7
";

    #[test]
    fn hand_document_traversal() {
        let f = import_forest(HAND).unwrap();
        // y1 < .25 -> -1; else y2 < 3 -> 2; else 7.
        assert_eq!(predict_hard(&f, &[9.0, 0.1, 9.0]).unwrap(), 0.5 - 1.0);
        assert_eq!(predict_hard(&f, &[9.0, 0.25, 2.9]).unwrap(), 0.5 + 2.0);
        assert_eq!(predict_hard(&f, &[9.0, 0.3, 3.0]).unwrap(), 0.5 + 7.0);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_forest(&mut rng, 6, 8, 5, false);
        let text = export_forest(&f);
        let g = import_forest(&text).unwrap();
        assert_eq!(f, g);
        assert_eq!(export_forest(&g), text);
        for _ in 0..1000 {
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.2..1.2)).collect();
            assert_eq!(predict_hard(&f, &y).unwrap().to_bits(), predict_hard(&g, &y).unwrap().to_bits());
        }
    }

    #[test]
    fn non_preorder_ids_are_renumbered() {
        let doc = "forest v1\nn_trees 1\nwidth 1\nbase_score 0\nlearning_rate 1\ntree 0 3\nL 0 1\nL 1 2\nN 2 0 0.5 0 1\n";
        let err = import_forest(doc).unwrap_err();
        // Root must be id 0.
        assert!(err.to_string().contains("tree 0"), "{err}");
        let doc = "forest v1\nn_trees 1\nwidth 1\nbase_score 0\nlearning_rate 1\ntree 0 3\nN 0 0 0.5 2 1\nL 1 2\nL 2 1\n";
        let f = import_forest(doc).unwrap();
        assert_eq!(f.trees[0].nodes[1], Node::Leaf { value: 1.0 });
    }

    #[test]
    fn child_out_of_range_names_node() {
        let doc = HAND.replace("N 2 2 3 3 4", "N 2 2 3 3 9");
        let err = import_forest(&doc).unwrap_err().to_string();
        assert!(err.contains("line 9") && err.contains("node 2") && err.contains("child 9"), "{err}");
    }

    #[test]
    fn rejects_non_finite_threshold() {
        let doc = HAND.replace("N 0 1 0.25", "N 0 1 NaN");
        assert!(import_forest(&doc).unwrap_err().to_string().contains("non-finite threshold"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(import_forest("").is_err());
        assert!(import_forest("forest v2\n").is_err());
        assert!(import_forest(&HAND.replace("tree 0 5", "tree 0 4")).is_err());
        assert!(import_forest(&format!("{HAND}L 9 1\n")).is_err());
        assert!(import_forest(&HAND.replace("L 3 2", "L 1 2")).is_err());
        assert!(import_forest(&HAND.replace("width 3", "width 2")).is_err());
    }
}
