use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::Embedder;
use super::residual::{ResidualCache, ResidualUnit};
use super::{log_loss, NnError, PROB_EPS};
use crate::data::{Dataset, Sample};
use crate::numfmt::sigmoid;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// m_j for every embedded group unless overridden in `embed_dims`.
    pub embed_dim: usize,
    pub embed_dims: BTreeMap<String, usize>,
    /// Inner width of each residual unit, in order.
    pub residual_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            embed_dims: BTreeMap::new(),
            residual_hidden: vec![128, 64],
        }
    }
}

impl ArchConfig {
    pub fn width_of(&self, group: &str) -> usize {
        self.embed_dims.get(group).copied().unwrap_or(self.embed_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.l2 >= 0.0) {
            return Err(NnError::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Embeddings, stacking, residual units and a logistic scoring layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepCrossingModel {
    pub embedder: Embedder,
    pub residuals: Vec<ResidualUnit>,
    pub score_w: Vec<f64>,
    pub score_b: f64,
}

struct ForwardCache {
    stack_pre: Vec<f64>,
    /// Input to each residual unit, then the final representation.
    acts: Vec<Vec<f64>>,
    units: Vec<ResidualCache>,
}

impl DeepCrossingModel {
    pub fn new(
        embedder: Embedder,
        residuals: Vec<ResidualUnit>,
        score_w: Vec<f64>,
        score_b: f64,
    ) -> Result<Self, NnError> {
        let d = embedder.width();
        if let Some(u) = residuals.iter().find(|u| u.width() != d) {
            return Err(NnError::Dim(format!("residual width {} != stacking width {d}", u.width())));
        }
        if score_w.len() != d {
            return Err(NnError::Dim(format!("scoring width {} != stacking width {d}", score_w.len())));
        }
        Ok(Self {
            embedder,
            residuals,
            score_w,
            score_b,
        })
    }

    pub fn random(
        schema: crate::data::FeatureSchema,
        arch: &ArchConfig,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if arch.embed_dim == 0 || arch.embed_dims.values().any(|&m| m == 0) {
            return Err(NnError::Config("embedding widths must be positive".into()));
        }
        if arch.residual_hidden.iter().any(|&h| h == 0) {
            return Err(NnError::Config("residual hidden widths must be positive".into()));
        }
        let embedder = Embedder::random(schema, |g| arch.width_of(g), &mut rng)?;
        let d = embedder.width();
        let residuals = arch
            .residual_hidden
            .iter()
            .map(|&h| ResidualUnit::glorot(d, h, &mut rng))
            .collect();
        let limit = (6.0 / (d + 1) as f64).sqrt();
        let score_w = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -limit..=limit)).collect();
        Self::new(embedder, residuals, score_w, 0.0)
    }

    fn zeros_like(&self) -> Self {
        Self {
            embedder: self.embedder.zeros_like(),
            residuals: self.residuals.iter().map(|u| ResidualUnit::zeros(u.d, u.h)).collect(),
            score_w: vec![0.0; self.score_w.len()],
            score_b: 0.0,
        }
    }

    fn forward(&self, s: &Sample, cache: &mut ForwardCache) -> f64 {
        let d = self.embedder.width();
        cache.stack_pre.resize(d, 0.0);
        cache.acts.resize(self.residuals.len() + 1, Vec::new());
        cache.units.resize(self.residuals.len(), ResidualCache::default());
        cache.acts[0].resize(d, 0.0);
        self.embedder
            .forward_cached(s, &mut cache.acts[0], Some(&mut cache.stack_pre), &mut ());
        for (k, unit) in self.residuals.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(k + 1);
            tail[0].resize(d, 0.0);
            unit.forward_cached(&head[k], &mut tail[0], &mut cache.units[k]);
        }
        let last = &cache.acts[self.residuals.len()];
        self.score_b + last.iter().zip(&self.score_w).map(|(a, w)| a * w).sum::<f64>()
    }

    /// Pre-sigmoid score.
    pub fn raw_score(&self, s: &Sample) -> f64 {
        let mut cache = ForwardCache::empty();
        self.forward(s, &mut cache)
    }

    pub fn predict(&self, s: &Sample) -> f64 {
        sigmoid(self.raw_score(s)).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    fn l2_penalty(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut total = sq(&self.score_w);
        for l in self.embedder.layers().iter().flatten() {
            total += sq(&l.weights);
        }
        for u in &self.residuals {
            total += sq(&u.w1) + sq(&u.w2);
        }
        0.5 * total
    }

    /// Mean log loss over `samples` plus `l2/2 * ||W||^2` over all weight matrices.
    pub fn batch_loss(&self, samples: &[Sample], l2: f64) -> f64 {
        let mut cache = ForwardCache::empty();
        let mean = samples
            .iter()
            .map(|s| {
                let p = sigmoid(self.forward(s, &mut cache)).clamp(PROB_EPS, 1.0 - PROB_EPS);
                log_loss(p, s.label)
            })
            .sum::<f64>()
            / samples.len() as f64;
        if l2 > 0.0 {
            mean + l2 * self.l2_penalty()
        } else {
            mean
        }
    }

    /// Loss and its gradient, laid out as a model of the same shape.
    pub fn batch_gradient(&self, samples: &[Sample], l2: f64) -> (f64, DeepCrossingModel) {
        let mut grad = self.zeros_like();
        let loss = self.accumulate_gradient(samples.iter(), l2, &mut grad);
        (loss, grad)
    }

    fn accumulate_gradient<'a>(
        &self,
        samples: impl ExactSizeIterator<Item = &'a Sample>,
        l2: f64,
        grad: &mut DeepCrossingModel,
    ) -> f64 {
        let n = samples.len() as f64;
        let d = self.embedder.width();
        let mut cache = ForwardCache::empty();
        let mut loss = 0.0;
        let mut d_act = vec![0.0; d];
        let mut d_prev = vec![0.0; d];
        for s in samples {
            let raw = self.forward(s, &mut cache);
            let p = sigmoid(raw);
            loss += log_loss(p.clamp(PROB_EPS, 1.0 - PROB_EPS), s.label);
            let ds = (p - s.label as f64) / n;
            let last = &cache.acts[self.residuals.len()];
            for k in 0..d {
                grad.score_w[k] += ds * last[k];
                d_act[k] = ds * self.score_w[k];
            }
            grad.score_b += ds;
            for (k, unit) in self.residuals.iter().enumerate().rev() {
                unit.backward_into(&cache.acts[k], &cache.units[k], &d_act, &mut grad.residuals[k], &mut d_prev);
                std::mem::swap(&mut d_act, &mut d_prev);
            }
            self.embedder
                .backward_into(s, &cache.stack_pre, &d_act, &mut grad.embedder);
        }
        let mut loss = loss / n;
        if l2 > 0.0 {
            loss += l2 * self.l2_penalty();
            let add = |g: &mut [f64], w: &[f64]| g.iter_mut().zip(w).for_each(|(g, w)| *g += l2 * w);
            add(&mut grad.score_w, &self.score_w);
            for (gl, l) in grad.embedder.layers_mut().zip(self.embedder.layers().iter().flatten()) {
                add(&mut gl.weights, &l.weights);
            }
            for (gu, u) in grad.residuals.iter_mut().zip(&self.residuals) {
                add(&mut gu.w1, &u.w1);
                add(&mut gu.w2, &u.w2);
            }
        }
        loss
    }

    /// All parameters in a fixed order: embeddings, residual units, scoring.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.embedder.params();
        for u in &self.residuals {
            out.extend(u.params());
        }
        out.push(&self.score_w);
        out.push(std::slice::from_ref(&self.score_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.embedder.params_mut();
        for u in &mut self.residuals {
            out.extend(u.params_mut());
        }
        out.push(&mut self.score_w);
        out.push(std::slice::from_mut(&mut self.score_b));
        out
    }

    pub fn mean_log_loss(&self, ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        self.batch_loss(&ds.samples, 0.0)
    }
}

impl ForwardCache {
    fn empty() -> Self {
        Self {
            stack_pre: Vec::new(),
            acts: Vec::new(),
            units: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Full-dataset train loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Mini-batch Adam on mean log loss over every parameter. Single-threaded and
/// deterministic for a given seed.
pub fn train_deep_crossing(
    ds: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(DeepCrossingModel, TrainReport), NnError> {
    let model = DeepCrossingModel::random(ds.schema.clone(), arch, cfg.seed)?;
    train_from(model, ds, cfg)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: DeepCrossingModel,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DeepCrossingModel, TrainReport), NnError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(NnError::Config("training set is empty".into()));
    }
    if ds.schema != *model.embedder.schema() {
        return Err(NnError::Schema("dataset schema differs from model schema".into()));
    }
    let initial_loss = model.mean_log_loss(ds);
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(cfg.adam(), &shapes);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5a3b1e);
    let mut grad = model.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for g in grad.params_mut() {
                g.fill(0.0);
            }
            let loss = model.accumulate_gradient(chunk.iter().map(|&i| &ds.samples[i]), cfg.l2, &mut grad);
            if !loss.is_finite() {
                return Err(NnError::Diverged {
                    epoch,
                    batch: b,
                    learning_rate: cfg.learning_rate,
                });
            }
            let grads = grad.params();
            opt.step(&mut model.params_mut(), &grads);
        }
        let loss = model.mean_log_loss(ds);
        if !loss.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                learning_rate: cfg.learning_rate,
            });
        }
        epoch_losses.push(loss);
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}
