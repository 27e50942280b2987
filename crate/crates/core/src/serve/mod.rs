//! Deployable bundles, the compiled predictor and the latency harness.
//!
//! Serving computes the stacking vector with the embedding layers (T1) and
//! then walks the forest hard (T2). Three-step bundles are served hard on
//! their refined thresholds and leaf values; the soft scorer exists for
//! accuracy comparisons only.

mod bench;
mod bundle;
mod scorer;

use thiserror::Error;

pub use bench::{bench, clock_resolution, median, percentile, time_per_item, BenchConfig, BenchReport, CpuPin, DenseNet, CSV_HEADER};
pub use bundle::{decode_bundle, encode_bundle, load_bundle, save_bundle, BUNDLE_VERSION};
pub use scorer::{build_scorer, scorer_names, CompiledForest, ForestScorer, ReferenceScorer, ScorerSource, SoftScorer};

use crate::data::{DataError, Dataset, Sample};
use crate::fuzzy::{FuzzyError, FuzzyForest};
use crate::gbdt::{Forest, ForestError};
use crate::nn::{log_loss, Embedder, NnError, PROB_EPS};
use crate::numfmt::sigmoid;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("compile: {0}")]
    Compile(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TwoStep,
    ThreeStep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoStep => "two-step",
            Mode::ThreeStep => "three-step",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ServeError> {
        match s {
            "two-step" => Ok(Mode::TwoStep),
            "three-step" => Ok(Mode::ThreeStep),
            _ => Err(ServeError::Bundle(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BundleForest {
    TwoStep(Forest),
    ThreeStep(FuzzyForest),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BundleMeta {
    /// Seconds since the Unix epoch; 0 for deterministic runs.
    pub created_unix: u64,
    /// Hex SHA-256 of the configuration that produced the bundle.
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub embedder: Embedder,
    pub forest: BundleForest,
    pub meta: BundleMeta,
}

impl ModelBundle {
    /// Checks that the forest reads only dimensions the embedder produces.
    pub fn new(embedder: Embedder, forest: BundleForest, meta: BundleMeta) -> Result<Self, ServeError> {
        let b = Self { embedder, forest, meta };
        let hard = b.hard_forest();
        hard.validate()?;
        if hard.width != b.embedder.width() {
            return Err(ServeError::Compile(format!(
                "forest expects stacking width {}, embeddings produce {}",
                hard.width,
                b.embedder.width()
            )));
        }
        Ok(b)
    }

    pub fn mode(&self) -> Mode {
        match self.forest {
            BundleForest::TwoStep(_) => Mode::TwoStep,
            BundleForest::ThreeStep(_) => Mode::ThreeStep,
        }
    }

    /// The forest served by hard traversal.
    pub fn hard_forest(&self) -> Forest {
        match &self.forest {
            BundleForest::TwoStep(f) => f.clone(),
            BundleForest::ThreeStep(f) => f.to_forest(),
        }
    }

    pub fn scorer_source(&self) -> ScorerSource<'_> {
        match &self.forest {
            BundleForest::TwoStep(f) => ScorerSource::Hard(f),
            BundleForest::ThreeStep(f) => ScorerSource::Soft(f),
        }
    }
}

/// Immutable embed-then-traverse predictor; shareable across threads.
pub struct Predictor {
    embedder: Embedder,
    forest: Forest,
    scorer: Box<dyn ForestScorer>,
}

impl Predictor {
    pub fn compile(bundle: &ModelBundle) -> Result<Self, ServeError> {
        Self::with_scorer(bundle, "compiled")
    }

    pub fn with_scorer(bundle: &ModelBundle, name: &str) -> Result<Self, ServeError> {
        let forest = bundle.hard_forest();
        if forest.width != bundle.embedder.width() {
            return Err(ServeError::Compile(format!(
                "forest expects stacking width {}, embeddings produce {}",
                forest.width,
                bundle.embedder.width()
            )));
        }
        let scorer = build_scorer(name, &bundle.scorer_source())?;
        Ok(Self {
            embedder: bundle.embedder.clone(),
            forest,
            scorer,
        })
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn scorer(&self) -> &dyn ForestScorer {
        self.scorer.as_ref()
    }

    pub fn hard_forest(&self) -> Forest {
        self.forest.clone()
    }

    pub fn width(&self) -> usize {
        self.embedder.width()
    }

    pub fn raw_score(&self, s: &Sample) -> Result<f64, ServeError> {
        self.embedder.check_sample(s)?;
        let mut y = vec![0.0; self.width()];
        self.embedder.embed_into(s, &mut y, &mut ());
        Ok(self.scorer.raw(&y))
    }

    /// Click probability `sigmoid(raw)`.
    pub fn predict(&self, s: &Sample) -> Result<f64, ServeError> {
        Ok(sigmoid(self.raw_score(s)?))
    }

    /// Mean log loss over `ds`, probabilities clamped to `[1e-12, 1 − 1e-12]`.
    pub fn log_loss(&self, ds: &Dataset) -> Result<f64, ServeError> {
        if ds.is_empty() {
            return Err(ServeError::Config("evaluation set is empty".into()));
        }
        let mut total = 0.0;
        for s in &ds.samples {
            let p = self.predict(s)?.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += log_loss(p, s.label);
        }
        Ok(total / ds.len() as f64)
    }
}

/// `gamma / baseline × 100`.
pub fn relative_log_loss(gamma: f64, baseline: f64) -> Result<f64, ServeError> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(ServeError::Config(format!("baseline log loss {baseline} must be positive")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(ServeError::Config(format!("log loss {gamma} must be non-negative")));
    }
    Ok(gamma / baseline * 100.0)
}
