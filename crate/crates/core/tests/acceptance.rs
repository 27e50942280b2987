//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use def_core::cli::{main_with_args, read_eval, run_command, RunConfig};
use def_core::data::{gen_synthetic, SynthConfig};
use def_core::fuzzy::{
    complexity_stats, export_fuzzy, forward_into, fuzzy_backward, fuzzy_forward, import_fuzzy, joint_gradient,
    joint_loss, FuzzyForest, RoutingProbs,
};
use def_core::gbdt::{export_forest, import_forest, predict_hard, predict_hard_counted, train_gbdt_traced, GbdtConfig};
use def_core::nn::{Embedder, StackedDataset};
use def_core::serve::{bench, load_bundle, median, save_bundle, time_per_item, BenchConfig, BundleForest, BundleMeta, CpuPin, DenseNet};
use def_core::tally::OpCounter;
use def_core::{Dataset, FeatureGroup, FeatureSchema, Field, Forest, GroupKind, ModelBundle, Node, Predictor, Sample, Tree};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ------------------------------------------------------------ generators

/// Random tree in pre-order. `full` grows every branch to `depth`;
/// otherwise each child below the root stops early with probability 0.3.
fn random_tree(rng: &mut ChaCha8Rng, width: usize, depth: usize, full: bool) -> Tree {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, width: usize, depth: usize, full: bool, root: bool) -> u32 {
        let id = nodes.len() as u32;
        let stop = depth == 0 || (!full && !root && rng.gen_bool(0.3));
        if stop {
            nodes.push(Node::Leaf {
                value: rng.gen_range(-1.0..1.0),
            });
            return id;
        }
        nodes.push(Node::Leaf { value: 0.0 });
        let feature = rng.gen_range(0..width) as u32;
        let threshold = rng.gen_range(-1.0..1.0);
        let left = grow(rng, nodes, width, depth - 1, full, false);
        let right = grow(rng, nodes, width, depth - 1, full, false);
        nodes[id as usize] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, width, depth, full, true);
    Tree::new(nodes).expect("generated tree is valid")
}

fn random_forest(rng: &mut ChaCha8Rng, n_trees: usize, width: usize, depth: usize, full: bool) -> Forest {
    Forest {
        trees: (0..n_trees).map(|_| random_tree(rng, width, depth, full)).collect(),
        base_score: rng.gen_range(-0.5..0.5),
        learning_rate: rng.gen_range(0.1..1.0),
        width,
    }
}

fn random_fuzzy(rng: &mut ChaCha8Rng, n_trees: usize, width: usize, depth: usize) -> FuzzyForest {
    let f = random_forest(rng, n_trees, width, depth, false);
    let cs: Vec<f64> = (0..f.trees.iter().map(|t| t.nodes.len()).sum::<usize>())
        .map(|_| rng.gen_range(0.5..4.0))
        .collect();
    let mut it = cs.into_iter();
    FuzzyForest::from_forest(&f, |_| it.next().unwrap()).unwrap()
}

fn random_y(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    (0..width).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Richardson-extrapolated central difference, O(h^4).
fn derivative(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let c = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let d1 = c(&mut f, h);
    let d2 = c(&mut f, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ------------------------------------------------------------ criteria

/// Analytic forest and end-to-end gradients against finite differences.
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..60 {
        let n_trees = rng.gen_range(1..=5);
        let depth = rng.gen_range(1..=4);
        let width = rng.gen_range(1..=16);
        let mut f = random_fuzzy(&mut rng, n_trees, width, depth);
        for _ in 0..3 {
            let y = random_y(&mut rng, width);
            let out = fuzzy_forward(&f, &y).unwrap();
            let g = fuzzy_backward(&f, &y, &out.probs, 1.0);
            let raw = |f: &FuzzyForest, y: &[f64]| fuzzy_forward(f, y).unwrap().raw;
            for (which, grad) in [(0usize, &g.d_a), (1, &g.d_c), (2, &g.d_pi)] {
                for i in 0..f.n_nodes() {
                    let x0 = f.params()[which][i];
                    let num = derivative(1e-4, |h| {
                        f.params_mut()[which][i] = x0 + h;
                        let v = raw(&f, &y);
                        f.params_mut()[which][i] = x0;
                        v
                    });
                    worst = worst.max(rel_err(grad[i], num, 1e-4));
                    checked += 1;
                }
            }
            for k in 0..width {
                let num = derivative(1e-4, |h| {
                    let mut yy = y.clone();
                    yy[k] += h;
                    raw(&f, &yy)
                });
                worst = worst.max(rel_err(g.d_y[k], num, 1e-4));
                checked += 1;
            }
        }
    }
    ensure!(worst <= 1e-5, "forest gradients: worst relative error {worst:.3e} over {checked} entries");

    // End to end through the embedding layers on the mean soft log loss.
    let synth = SynthConfig {
        n_samples: 40,
        n_sparse_dims: 60,
        n_dense_dims: 3,
        ..Default::default()
    };
    let ds = gen_synthetic(&synth).unwrap();
    let mut e2e_worst = 0.0f64;
    let mut e2e_checked = 0usize;
    for trial in 0..3 {
        let mut emb = Embedder::random(ds.schema.clone(), |_| 3, &mut rng).unwrap();
        let mut f = random_fuzzy(&mut rng, 3, emb.width(), 3);
        let samples = &ds.samples[trial * 10..trial * 10 + 10];
        let (_, eg, fg) = joint_gradient(&emb, &f, samples).unwrap();
        let n_layers = emb.params().len();
        for l in 0..n_layers {
            let len = emb.params()[l].len();
            for _ in 0..40 {
                let j = rng.gen_range(0..len);
                let x0 = emb.params()[l][j];
                let num = derivative(1e-4, |h| {
                    emb.params_mut()[l][j] = x0 + h;
                    let v = joint_loss(&emb, &f, samples).unwrap();
                    emb.params_mut()[l][j] = x0;
                    v
                });
                e2e_worst = e2e_worst.max(rel_err(eg.params()[l][j], num, 1e-6));
                e2e_checked += 1;
            }
        }
        for (which, grad) in [(0usize, &fg.d_a), (1, &fg.d_c), (2, &fg.d_pi)] {
            for i in 0..f.n_nodes() {
                let x0 = f.params()[which][i];
                let num = derivative(1e-4, |h| {
                    f.params_mut()[which][i] = x0 + h;
                    let v = joint_loss(&emb, &f, samples).unwrap();
                    f.params_mut()[which][i] = x0;
                    v
                });
                e2e_worst = e2e_worst.max(rel_err(grad[i], num, 1e-6));
                e2e_checked += 1;
            }
        }
    }
    ensure!(e2e_worst <= 1e-4, "end-to-end: worst relative error {e2e_worst:.3e} over {e2e_checked} entries");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs <= 30.0, "took {secs:.1} s");
    Ok(format!(
        "forest {worst:.2e} over {checked} entries, end-to-end {e2e_worst:.2e} over {e2e_checked}, {secs:.1} s"
    ))
}

/// Sharpened soft routing reproduces hard traversal away from thresholds.
fn hard_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut n = 0usize;
    for _ in 0..10 {
        let width = rng.gen_range(2..=16);
        let (n_trees, depth) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let mut f = random_fuzzy(&mut rng, n_trees, width, depth);
        let hard = f.to_forest();
        f.scale_widths(1e6);
        let thresholds: Vec<(usize, f64)> =
            (0..f.n_nodes()).filter(|&i| !f.is_leaf(i)).map(|i| (f.feature(i) as usize, f.a()[i])).collect();
        let mut kept = 0;
        while kept < 1000 {
            let y = random_y(&mut rng, width);
            if thresholds.iter().any(|&(k, a)| (y[k] - a).abs() < 1e-3) {
                continue;
            }
            kept += 1;
            let soft = fuzzy_forward(&f, &y).unwrap().raw;
            worst = worst.max((soft - predict_hard(&hard, &y).unwrap()).abs());
            n += 1;
        }
    }
    ensure!(worst <= 1e-9, "max |soft - hard| = {worst:.3e}");
    Ok(format!("max |soft - hard| = {worst:.2e} on {n} samples over 10 forests"))
}

/// Path-product enumeration written against the public node accessors.
fn enumerate_raw(f: &FuzzyForest, y: &[f64]) -> (f64, Vec<f64>) {
    fn walk(f: &FuzzyForest, y: &[f64], i: usize, mu: f64, acc: &mut f64, mass: &mut f64) {
        if f.is_leaf(i) {
            *acc += f.pi()[i] * mu;
            *mass += mu;
            return;
        }
        let up = sigmoid(f.c()[i] * (y[f.feature(i) as usize] - f.a()[i]));
        let (lo_child, up_child) = f.children(i);
        walk(f, y, lo_child, mu * (1.0 - up), acc, mass);
        walk(f, y, up_child, mu * up, acc, mass);
    }
    let mut sum = 0.0;
    let mut masses = Vec::new();
    for t in 0..f.n_trees() {
        let (mut acc, mut mass) = (0.0, 0.0);
        walk(f, y, f.tree_range(t).start, 1.0, &mut acc, &mut mass);
        sum += acc;
        masses.push(mass);
    }
    (f.base_score + f.learning_rate * sum, masses)
}

fn forward_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_raw, mut worst_mass, mut worst_oracle_mass) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    for depth in 1..=6 {
        for _ in 0..10 {
            let width = rng.gen_range(1..=8);
            let n_trees = rng.gen_range(1..=5);
            let f = random_fuzzy(&mut rng, n_trees, width, depth);
            for _ in 0..20 {
                let y = random_y(&mut rng, width);
                let out = fuzzy_forward(&f, &y).unwrap();
                let (raw, masses) = enumerate_raw(&f, &y);
                worst_raw = worst_raw.max((out.raw - raw).abs());
                for (t, m) in masses.iter().enumerate() {
                    worst_mass = worst_mass.max((out.probs.leaf_mass(&f, t) - 1.0).abs());
                    worst_oracle_mass = worst_oracle_mass.max((m - 1.0).abs());
                }
                n += 1;
            }
        }
    }
    ensure!(worst_raw <= 1e-12, "max |forward - enumeration| = {worst_raw:.3e}");
    ensure!(worst_mass <= 1e-12, "max |sum mu - 1| = {worst_mass:.3e}");
    ensure!(worst_oracle_mass <= 1e-12, "enumeration leaf mass off by {worst_oracle_mass:.3e}");
    Ok(format!(
        "max |forward - enumeration| {worst_raw:.2e}, max |sum mu - 1| {worst_mass:.2e}, {n} inputs up to depth 6"
    ))
}

fn gbdt_dataset(rng: &mut ChaCha8Rng, n: usize, width: usize) -> StackedDataset {
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * width);
    for _ in 0..n {
        // Coarse grid so equal values and tied gains occur.
        let row: Vec<f64> = (0..width).map(|_| (rng.gen_range(-10..=10) as f64) / 10.0).collect();
        let z = 2.0 * row[0] - 1.5 * row[1] * row[2] + 0.5;
        labels.push(u8::from(rng.gen_bool(sigmoid(z))));
        values.extend(row);
    }
    StackedDataset::new(width, labels, values).unwrap()
}

/// O(n^2) exhaustive search: every feature, every "value <= v goes left" cut.
fn exhaustive_best(ds: &StackedDataset, ids: &[u32], g: &[f64], h: &[f64], lambda: f64, min_leaf: usize) -> Option<f64> {
    let score = |gs: f64, hs: f64| gs * gs / (hs + lambda);
    let gt: f64 = ids.iter().map(|&i| g[i as usize]).sum();
    let ht: f64 = ids.iter().map(|&i| h[i as usize]).sum();
    let mut best: Option<f64> = None;
    for k in 0..ds.width() {
        for &pivot in ids {
            let v = ds.row(pivot as usize)[k];
            let left: Vec<u32> = ids.iter().copied().filter(|&i| ds.row(i as usize)[k] <= v).collect();
            let nl = left.len();
            if nl < min_leaf || ids.len() - nl < min_leaf {
                continue;
            }
            let gl: f64 = left.iter().map(|&i| g[i as usize]).sum();
            let hl: f64 = left.iter().map(|&i| h[i as usize]).sum();
            let gain = score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht);
            best = Some(best.map_or(gain, |b: f64| b.max(gain)));
        }
    }
    best
}

fn gbdt_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut small_splits = 0usize;
    let mut leaves = 0usize;
    let mut rounds = 0usize;
    for (n, width, min_leaf, max_leaves) in [(300, 4, 3, 16), (1500, 5, 5, 32), (120, 3, 1, 64)] {
        let ds = gbdt_dataset(&mut rng, n, width);
        let cfg = GbdtConfig {
            n_trees: 12,
            max_leaves,
            max_depth: 7,
            min_samples_leaf: min_leaf,
            learning_rate: 0.3,
            ..Default::default()
        };
        let (forest, report, traces) = train_gbdt_traced(&ds, &cfg).unwrap();
        ensure!(traces.len() == forest.trees.len(), "trace count {} != tree count", traces.len());
        for (t, tr) in traces.iter().enumerate() {
            // Gradients re-derived from the preceding trees.
            let prefix = Forest {
                trees: forest.trees[..t].to_vec(),
                ..forest.clone()
            };
            for i in 0..ds.len() {
                let p = sigmoid(predict_hard(&prefix, ds.row(i)).unwrap());
                let y = ds.labels()[i] as f64;
                ensure!((tr.grad[i] - (p - y)).abs() <= 1e-12, "round {t}: gradient of sample {i} disagrees");
                ensure!((tr.hess[i] - p * (1.0 - p)).abs() <= 1e-12, "round {t}: hessian of sample {i} disagrees");
            }
            for s in tr.splits.iter().filter(|s| s.samples.len() <= 64) {
                let best = exhaustive_best(&ds, &s.samples, &tr.grad, &tr.hess, cfg.lambda, cfg.min_samples_leaf)
                    .ok_or_else(|| format!("round {t} node {}: split where none is admissible", s.node))?;
                ensure!(
                    (s.gain - best).abs() <= 1e-9 * best.abs().max(1.0),
                    "round {t} node {}: gain {} vs exhaustive {best}",
                    s.node,
                    s.gain
                );
                // The recorded cut must realise that gain.
                let k = s.feature as usize;
                let left: Vec<u32> = s.samples.iter().copied().filter(|&i| ds.row(i as usize)[k] < s.threshold).collect();
                let right = s.samples.len() - left.len();
                ensure!(left.len() >= min_leaf && right >= min_leaf, "round {t} node {}: child too small", s.node);
                small_splits += 1;
            }
            for leaf in &tr.leaves {
                let gs: f64 = leaf.samples.iter().map(|&i| tr.grad[i as usize]).sum();
                let hs: f64 = leaf.samples.iter().map(|&i| tr.hess[i as usize]).sum();
                let want = -gs / (hs + cfg.lambda);
                ensure!(
                    (leaf.value - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "round {t} leaf {}: {} vs {want}",
                    leaf.node,
                    leaf.value
                );
                match forest.trees[t].nodes[leaf.node as usize] {
                    Node::Leaf { value } if value == leaf.value => {}
                    other => return Err(format!("round {t} leaf {}: tree holds {other:?}", leaf.node)),
                }
                leaves += 1;
            }
        }
        let mut prev = report.initial_loss;
        for (r, &l) in report.round_losses.iter().enumerate() {
            ensure!(l <= prev, "train loss rose at round {r}: {prev} -> {l}");
            prev = l;
            rounds += 1;
        }
    }
    ensure!(small_splits > 0, "no splits on nodes with at most 64 samples were exercised");
    Ok(format!(
        "{small_splits} small-node splits match exhaustive search, {leaves} leaves re-aggregate, loss non-increasing over {rounds} rounds"
    ))
}

fn manifest_metrics(path: &Path) -> RunConfig {
    toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn pipeline_quality() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        seed: Some(7),
        deterministic: true,
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    cfg.synth.n_samples = 50_000;
    cfg.split.test_samples = 10_000;
    cfg.arch.embed_dim = 16;
    cfg.arch.residual_hidden = vec![32];
    cfg.embed.epochs = 3;
    cfg.forest.n_trees = 100;
    let run = |cmd: &str, c: &RunConfig| run_command(cmd, c.clone()).map_err(|e| format!("{cmd}: {e}"));
    for cmd in ["gen-synth", "train-embed", "extract-stack", "train-forest"] {
        run(cmd, &cfg)?;
    }
    let fuzz = manifest_metrics(&run("fuzz-tune", &cfg)?);

    let mut dc = cfg.clone();
    dc.eval.deep_crossing = true;
    dc.eval.name = Some("dc".into());
    run("eval", &dc)?;
    let mut two = cfg.clone();
    two.paths.bundle = Some(dir.path().join("two_step.defb"));
    two.paths.baseline = Some(dir.path().join("dc.eval.toml"));
    two.eval.name = Some("two_step".into());
    run("eval", &two)?;
    let mut three = two.clone();
    three.paths.bundle = Some(dir.path().join("three_step.defb"));
    three.eval.name = Some("three_step".into());
    run("eval", &three)?;

    let dc_r = read_eval(&dir.path().join("dc.eval.toml")).map_err(|e| e.to_string())?;
    let two_r = read_eval(&dir.path().join("two_step.eval.toml")).map_err(|e| e.to_string())?;
    let three_r = read_eval(&dir.path().join("three_step.eval.toml")).map_err(|e| e.to_string())?;
    let rel = two_r.relative_log_loss.unwrap();
    let m = |k: &str| fuzz.metrics[k];
    let (two_train, soft_final, hard_final) =
        (m("two_step_train_loss"), m("final_soft_train_loss"), m("final_hard_train_loss"));
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "test log loss dc {:.5}, two-step {:.5} (relative {rel:.2}), three-step {:.5} (relative {:.2}); \
         fuzz-tune train loss {two_train:.5} -> {soft_final:.5} soft, {hard_final:.5} hard; {secs:.0} s",
        dc_r.log_loss,
        two_r.log_loss,
        three_r.log_loss,
        three_r.relative_log_loss.unwrap()
    );
    ensure!(rel <= 102.0, "two-step relative log loss {rel:.2} > 102; {detail}");
    ensure!(soft_final <= two_train, "fuzz-tune final train loss above two-step; {detail}");
    ensure!(secs <= 600.0, "runtime over 10 minutes; {detail}");
    Ok(detail)
}

fn raw_dataset(rng: &mut ChaCha8Rng, width: usize, n: usize) -> (Embedder, Dataset) {
    let schema = FeatureSchema::new(vec![FeatureGroup {
        name: "y".into(),
        kind: GroupKind::Dense,
        dim: width,
        embed: false,
    }])
    .unwrap();
    let samples = (0..n)
        .map(|_| Sample {
            label: 0,
            fields: vec![Field::Dense(random_y(rng, width))],
        })
        .collect();
    let emb = Embedder::new(schema.clone(), vec![None]).unwrap();
    (emb, Dataset::new(schema, samples).unwrap())
}

struct ForestBench {
    predictor: Predictor,
    ds: Dataset,
}

impl ForestBench {
    fn new(rng: &mut ChaCha8Rng, width: usize, n_trees: usize, depth: usize) -> Self {
        let forest = random_forest(rng, n_trees, width, depth, true);
        let (emb, ds) = raw_dataset(rng, width, 2_000);
        let bundle = ModelBundle::new(emb, BundleForest::TwoStep(forest), BundleMeta::default()).unwrap();
        Self {
            predictor: Predictor::compile(&bundle).unwrap(),
            ds,
        }
    }

    fn t2(&self) -> f64 {
        let cfg = BenchConfig {
            warmup: 3,
            reps: 21,
            ..Default::default()
        };
        bench(&self.predictor, &self.ds, &cfg).unwrap().t2_ns
    }
}

/// Median T2 of `a` and `b`, measured alternately so drift hits both alike.
fn paired_t2(a: &ForestBench, b: &ForestBench) -> (f64, f64) {
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        ta.push(a.t2());
        tb.push(b.t2());
    }
    (median(&mut ta), median(&mut tb))
}

fn latency_cost_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let narrow = ForestBench::new(&mut rng, 128, 100, 7);
    let wide = ForestBench::new(&mut rng, 512, 100, 7);
    let (t128, t512) = paired_t2(&narrow, &wide);
    let width_ratio = t512 / t128;
    let single = ForestBench::new(&mut rng, 128, 100, 6);
    let double = ForestBench::new(&mut rng, 128, 200, 6);
    let (t100, t200) = paired_t2(&single, &double);
    let tree_ratio = t200 / t100;

    let net = DenseNet::random(&[512, 512, 512, 64, 1], 5);
    let xs: Vec<Vec<f64>> = (0..200).map(|_| random_y(&mut rng, 512)).collect();
    let dense_ns = {
        let _pin = CpuPin::first_allowed();
        time_per_item(xs.len(), 2, 9, |i| net.forward(&xs[i]))
    };
    let speedup = dense_ns / t128;
    let detail = format!(
        "T2 D=512/D=128 {width_ratio:.3} ({t512:.0}/{t128:.0} ns); 200/100 trees {tree_ratio:.3} ({t200:.0}/{t100:.0} ns); \
         dense net {dense_ns:.0} ns vs forest {t128:.0} ns = {speedup:.1}x"
    );
    ensure!((0.8..=1.25).contains(&width_ratio), "width ratio out of [0.8, 1.25]; {detail}");
    ensure!((1.6..=2.6).contains(&tree_ratio), "tree ratio out of [1.6, 2.6]; {detail}");
    ensure!(speedup >= 3.0, "forest less than 3x faster than the dense net; {detail}");
    Ok(detail)
}

fn complexity() -> Outcome {
    // Perfect depth-3 tree in pre-order: splits at 0,1,2,5,8,9,12.
    let split = |l: u32, r: u32| Node::Split {
        feature: 0,
        threshold: 0.0,
        left: l,
        right: r,
    };
    let leaf = Node::Leaf { value: 1.0 };
    let nodes = vec![
        split(1, 8),
        split(2, 5),
        split(3, 4),
        leaf,
        leaf,
        split(6, 7),
        leaf,
        leaf,
        split(9, 12),
        split(10, 11),
        leaf,
        leaf,
        split(13, 14),
        leaf,
        leaf,
    ];
    let tree = Tree::new(nodes).unwrap();
    let perfect = Forest {
        trees: vec![tree],
        base_score: 0.0,
        learning_rate: 1.0,
        width: 1,
    };
    let s = complexity_stats(&perfect).map_err(|e| e.to_string())?;
    ensure!(
        s.n_t == 1 && s.l_t == 15.0 && s.d_t == 3.0 && s.ratio == 5.0,
        "perfect depth-3 tree: {s:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut checked = 0;
    for depth in 1..=7 {
        let width = 6;
        let f = random_fuzzy(&mut rng, 8, width, depth);
        let hard = f.to_forest();
        let mut probs = RoutingProbs::new(f.n_nodes());
        for _ in 0..50 {
            let y = random_y(&mut rng, width);
            let mut soft = OpCounter::default();
            forward_into(&f, &y, &mut probs, &mut soft);
            ensure!(soft.visits == f.n_nodes() as u64, "fuzzy forward visited {} of {} nodes", soft.visits, f.n_nodes());
            let mut total = 0;
            for t in &hard.trees {
                let mut c = OpCounter::default();
                t.predict_counted(&y, &mut c);
                // Depth reached, by direct walk.
                let mut i = 0usize;
                let mut reached = 0u64;
                while let Node::Split { feature, threshold, left, right } = t.nodes[i] {
                    i = if y[feature as usize] < threshold { left } else { right } as usize;
                    reached += 1;
                }
                ensure!(c.visits == reached, "hard visits {} vs depth reached {reached}", c.visits);
                ensure!(c.visits as usize <= t.max_depth(), "hard visits exceed tree depth");
                total += c.visits;
            }
            let mut all = OpCounter::default();
            predict_hard_counted(&hard, &y, &mut all).unwrap();
            ensure!(all.visits == total, "forest visits {} vs per-tree sum {total}", all.visits);
            checked += 1;
        }
    }
    Ok(format!(
        "perfect depth-3 tree l_t={} d_t={} ratio={}; fuzzy visits = l_t and hard visits = depth reached on {checked} inputs",
        s.l_t, s.d_t, s.ratio
    ))
}

fn def(args: &[&str]) -> i32 {
    let mut v = vec!["def"];
    v.extend_from_slice(args);
    main_with_args(v)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let common = ["--out", o, "--deterministic", "--seed", "7"];
    let ckpt = format!("{o}/checkpoint");
    let dc = format!("{o}/dc.eval.toml");
    let two = format!("{o}/two_step.defb");
    let three = format!("{o}/three_step.defb");
    let stages: Vec<Vec<&str>> = vec![
        vec!["gen-synth", "--n-samples", "3000", "--test-samples", "1000", "--n-sparse-dims", "500"],
        vec!["train-embed", "--epochs", "2", "--embed-dim", "8"],
        vec!["extract-stack"],
        vec!["train-forest", "--n-trees", "20"],
        vec!["fuzz-tune", "--epochs", "1"],
        vec!["eval", "--checkpoint", &ckpt, "--name", "dc"],
        vec!["eval", "--bundle", &two, "--name", "two", "--baseline", &dc],
        vec!["predict", "--bundle", &three],
        vec!["compare", "--baseline", &dc, "--candidate", &dc],
    ];
    for s in &stages {
        let mut args = common.to_vec();
        args.extend_from_slice(s);
        ensure!(def(&args) == 0, "stage {s:?} failed");
    }
    let mut manifests: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.toml"))
        .collect();
    manifests.sort();
    ensure!(manifests.len() == stages.len(), "{} manifests for {} stages", manifests.len(), stages.len());
    let mut artifacts = 0;
    for m in &manifests {
        artifacts += manifest_metrics(m).artifacts.len();
        ensure!(def(&["rerun", m.to_str().unwrap()]) == 0, "rerun of {} did not reproduce", m.display());
    }

    // Persistence round trips on the 1000 test samples.
    let test = {
        let schema = load_bundle(Path::new(&two)).unwrap().embedder.schema().clone();
        let text = std::fs::read_to_string(dir.path().join("test.tsv")).unwrap();
        def_core::data::parse_samples(text.lines(), &schema).unwrap()
    };
    ensure!(test.len() == 1000, "expected 1000 test samples");
    for path in [&two, &three] {
        let b = load_bundle(Path::new(path)).unwrap();
        let copy = dir.path().join("copy.defb");
        save_bundle(&b, &copy).unwrap();
        let b2 = load_bundle(&copy).unwrap();
        ensure!(b2.mode() == b.mode(), "mode changed in round trip");
        let (p1, p2) = (Predictor::compile(&b).unwrap(), Predictor::compile(&b2).unwrap());
        for s in &test.samples {
            ensure!(
                p1.predict(s).unwrap().to_bits() == p2.predict(s).unwrap().to_bits(),
                "bundle round trip changed a prediction"
            );
        }
    }
    let b3 = load_bundle(Path::new(&three)).unwrap();
    let forest = import_forest(&std::fs::read_to_string(dir.path().join("forest.txt")).unwrap()).unwrap();
    let forest2 = import_forest(&export_forest(&forest)).unwrap();
    let BundleForest::ThreeStep(fuzzy) = &b3.forest else {
        return Err("three-step bundle holds a hard forest".into());
    };
    let fuzzy2 = import_fuzzy(&export_fuzzy(fuzzy)).unwrap();
    for s in &test.samples {
        let y = b3.embedder.stack_sample(s).unwrap();
        ensure!(
            predict_hard(&forest, &y).unwrap().to_bits() == predict_hard(&forest2, &y).unwrap().to_bits(),
            "forest export/import changed a prediction"
        );
        ensure!(
            fuzzy_forward(fuzzy, &y).unwrap().raw.to_bits() == fuzzy_forward(&fuzzy2, &y).unwrap().raw.to_bits(),
            "fuzzy export/import changed a prediction"
        );
    }
    Ok(format!(
        "{} manifests rerun with {artifacts} identical artifact digests; bundle and forest round trips bit-identical on 1000 samples",
        manifests.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("hard-limit equivalence", hard_limit),
        ("forward oracle", forward_oracle),
        ("gbdt correctness", gbdt_correctness),
        ("pipeline quality trend", pipeline_quality),
        ("latency cost model", latency_cost_model),
        ("complexity stats", complexity),
        ("determinism and persistence", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(d) => println!("PASS {id} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
