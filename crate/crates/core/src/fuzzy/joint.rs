//! Joint refinement of embeddings and the soft forest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_accumulate, forward_into, FuzzyError, FuzzyForest, FuzzyGradients, RoutingProbs, MIN_INV_WIDTH};
use crate::data::{Dataset, Sample};
use crate::gbdt::predict_hard;
use crate::nn::{log_loss, Embedder, PROB_EPS};
use crate::numfmt::sigmoid;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzConfig {
    /// Initial inverse width is kappa over the feature's interquartile range.
    pub kappa: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub embed_learning_rate: f64,
    pub forest_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            kappa: 16.0,
            epochs: 3,
            batch_size: 64,
            embed_learning_rate: 1e-4,
            forest_learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<(), FuzzyError> {
        let bad = |m: &str| Err(FuzzyError::Config(m.into()));
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return bad("kappa must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        for lr in [self.embed_learning_rate, self.forest_learning_rate] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return bad("learning rates must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointReport {
    /// Hard-traversal train loss of the starting model.
    pub hard_initial_loss: f64,
    /// Soft train loss of the starting model.
    pub initial_loss: f64,
    /// Soft train loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Hard-traversal train loss of the refined model.
    pub hard_final_loss: f64,
}

impl JointReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

struct Workspace {
    y: Vec<f64>,
    pre: Vec<f64>,
    probs: RoutingProbs,
    scratch: Vec<f64>,
}

impl Workspace {
    fn new(embedder: &Embedder, forest: &FuzzyForest) -> Self {
        Self {
            y: vec![0.0; embedder.width()],
            pre: vec![0.0; embedder.width()],
            probs: RoutingProbs::new(forest.n_nodes()),
            scratch: Vec::new(),
        }
    }
}

fn check_pair(embedder: &Embedder, forest: &FuzzyForest) -> Result<(), FuzzyError> {
    if embedder.width() != forest.width() {
        return Err(FuzzyError::Dim {
            got: embedder.width(),
            want: forest.width(),
        });
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean soft log loss over `samples`.
pub fn joint_loss(embedder: &Embedder, forest: &FuzzyForest, samples: &[Sample]) -> Result<f64, FuzzyError> {
    check_pair(embedder, forest)?;
    if samples.is_empty() {
        return Err(FuzzyError::Empty);
    }
    let mut ws = Workspace::new(embedder, forest);
    let mut total = 0.0;
    for s in samples {
        embedder.check_sample(s)?;
        embedder.embed_into(s, &mut ws.y, &mut ());
        let raw = forward_into(forest, &ws.y, &mut ws.probs, &mut ());
        total += log_loss(clamp_prob(sigmoid(raw)), s.label);
    }
    Ok(total / samples.len() as f64)
}

/// Mean hard-traversal log loss of the refined thresholds and leaf values.
fn hard_loss(embedder: &Embedder, forest: &FuzzyForest, samples: &[Sample]) -> f64 {
    let hard = forest.to_forest();
    let mut y = vec![0.0; embedder.width()];
    let total: f64 = samples
        .iter()
        .map(|s| {
            embedder.embed_into(s, &mut y, &mut ());
            let raw = predict_hard(&hard, &y).expect("widths checked");
            log_loss(clamp_prob(sigmoid(raw)), s.label)
        })
        .sum();
    total / samples.len() as f64
}

/// Mean soft log loss and its gradient with respect to the embedding layers
/// and the forest's a, c and π. The returned `d_y` is left zeroed.
pub fn joint_gradient(
    embedder: &Embedder,
    forest: &FuzzyForest,
    samples: &[Sample],
) -> Result<(f64, Embedder, FuzzyGradients), FuzzyError> {
    check_pair(embedder, forest)?;
    for s in samples {
        embedder.check_sample(s)?;
    }
    let mut eg = embedder.zeros_like();
    let mut fg = FuzzyGradients::zeros(forest);
    let mut ws = Workspace::new(embedder, forest);
    let loss = accumulate(embedder, forest, samples.iter(), &mut ws, &mut eg, &mut fg);
    Ok((loss, eg, fg))
}

fn accumulate<'a>(
    embedder: &Embedder,
    forest: &FuzzyForest,
    samples: impl ExactSizeIterator<Item = &'a Sample>,
    ws: &mut Workspace,
    eg: &mut Embedder,
    fg: &mut FuzzyGradients,
) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        embedder.forward_cached(s, &mut ws.y, Some(&mut ws.pre), &mut ());
        let raw = forward_into(forest, &ws.y, &mut ws.probs, &mut ());
        let p = sigmoid(raw);
        total += log_loss(clamp_prob(p), s.label);
        let delta = (p - s.label as f64) / n;
        fg.d_y.fill(0.0);
        backward_accumulate(forest, &ws.y, &ws.probs, delta, fg, &mut ws.scratch);
        embedder.backward_into(s, &ws.pre, &fg.d_y, eg);
    }
    fg.d_y.fill(0.0);
    total / n
}

/// Mini-batch Adam over embeddings and forest parameters with the tree
/// structure and split features held fixed. Inverse widths are projected back
/// to at least [`MIN_INV_WIDTH`] after every step.
///
/// On divergence the error carries the parameters from the start of the
/// failing epoch.
pub fn joint_train(
    ds: &Dataset,
    mut embedder: Embedder,
    mut forest: FuzzyForest,
    cfg: &FuzzConfig,
) -> Result<(Embedder, FuzzyForest, JointReport), FuzzyError> {
    cfg.validate()?;
    check_pair(&embedder, &forest)?;
    if ds.is_empty() {
        return Err(FuzzyError::Empty);
    }
    if ds.schema != *embedder.schema() {
        return Err(crate::nn::NnError::Schema("dataset schema differs from embedding schema".into()).into());
    }
    let hard_initial_loss = hard_loss(&embedder, &forest, &ds.samples);
    let initial_loss = joint_loss(&embedder, &forest, &ds.samples)?;

    let e_shapes: Vec<usize> = embedder.params().iter().map(|p| p.len()).collect();
    let f_shapes: Vec<usize> = forest.params().iter().map(|p| p.len()).collect();
    let mut e_opt = Adam::new(cfg.adam(cfg.embed_learning_rate), &e_shapes);
    let mut f_opt = Adam::new(cfg.adam(cfg.forest_learning_rate), &f_shapes);
    let mut eg = embedder.zeros_like();
    let mut fg = FuzzyGradients::zeros(&forest);
    let mut ws = Workspace::new(&embedder, &forest);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0f22_7a11_d3e5);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let snapshot = (embedder.clone(), forest.clone());
        let diverged = |batch| FuzzyError::Diverged {
            epoch,
            batch,
            last_good: Box::new(snapshot.clone()),
        };
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for g in eg.params_mut() {
                g.fill(0.0);
            }
            fg.clear();
            let loss = accumulate(&embedder, &forest, chunk.iter().map(|&i| &ds.samples[i]), &mut ws, &mut eg, &mut fg);
            if !loss.is_finite() {
                return Err(diverged(b));
            }
            e_opt.step(&mut embedder.params_mut(), &eg.params());
            f_opt.step(&mut forest.params_mut(), &[&fg.d_a, &fg.d_c, &fg.d_pi]);
            for i in 0..forest.n_nodes() {
                if !forest.is_leaf(i) {
                    let c = &mut forest.c_mut()[i];
                    *c = c.max(MIN_INV_WIDTH);
                }
            }
        }
        let loss = joint_loss(&embedder, &forest, &ds.samples)?;
        if !loss.is_finite() {
            return Err(diverged(order.len().div_ceil(cfg.batch_size)));
        }
        epoch_losses.push(loss);
    }
    let hard_final_loss = hard_loss(&embedder, &forest, &ds.samples);
    Ok((
        embedder,
        forest,
        JointReport {
            hard_initial_loss,
            initial_loss,
            epoch_losses,
            hard_final_loss,
        },
    ))
}
