use rand::Rng;

use super::{relu, NnError};
use crate::data::{FeatureSchema, Field, Sample};
use crate::tally::Tally;

/// One rectified linear layer `relu(W x + b)` mapping `in_dim` to `out_dim`.
///
/// `W` is stored input-major: the `out_dim` weights fed by input `i` are
/// contiguous, so a sparse input touches one row per non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    in_dim: usize,
    out_dim: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl EmbeddingLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform(±sqrt(6 / (fan_in + fan_out))) weights, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    /// Builds from a row-major `out_dim x in_dim` matrix (the usual `W` layout).
    pub fn from_matrix(w: &[f64], bias: Vec<f64>) -> Result<Self, NnError> {
        let out_dim = bias.len();
        if out_dim == 0 || w.len() % out_dim != 0 {
            return Err(NnError::Dim(format!(
                "matrix of {} entries does not have {out_dim} rows",
                w.len()
            )));
        }
        let in_dim = w.len() / out_dim;
        let mut weights = vec![0.0; w.len()];
        for r in 0..out_dim {
            for c in 0..in_dim {
                weights[c * out_dim + r] = w[r * in_dim + c];
            }
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub(crate) fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), in_dim * out_dim);
        assert_eq!(bias.len(), out_dim);
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `W[r, c]` in the conventional orientation.
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[c * self.out_dim + r]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn input_row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.out_dim..(i + 1) * self.out_dim]
    }

    fn check(&self, x: &Field) -> Result<(), NnError> {
        match x {
            Field::Dense(v) if v.len() != self.in_dim => Err(NnError::Dim(format!(
                "dense input of length {} for layer with n = {}",
                v.len(),
                self.in_dim
            ))),
            Field::Sparse(sv) => match sv.indices().last() {
                Some(&i) if i as usize >= self.in_dim => Err(NnError::Dim(format!(
                    "sparse index {i} for layer with n = {}",
                    self.in_dim
                ))),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Writes the pre-activation `W x + b` into `out`. Sparse inputs cost
    /// `nnz * out_dim` multiplies.
    pub(crate) fn pre_activation_into<T: Tally>(&self, x: &Field, out: &mut [f64], tally: &mut T) {
        debug_assert_eq!(out.len(), self.out_dim);
        out.copy_from_slice(&self.bias);
        match x {
            Field::Sparse(sv) => {
                for (i, v) in sv.iter() {
                    axpy(v, self.input_row(i as usize), out);
                }
                tally.mul((sv.nnz() * self.out_dim) as u64);
            }
            Field::Dense(vals) => {
                for (i, &v) in vals.iter().enumerate() {
                    if v != 0.0 {
                        axpy(v, self.input_row(i), out);
                    }
                }
                tally.mul((vals.len() * self.out_dim) as u64);
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `relu(W x + b)` for one feature group.
pub fn embed_forward(x: &Field, layer: &EmbeddingLayer) -> Result<Vec<f64>, NnError> {
    layer.check(x)?;
    let mut out = vec![0.0; layer.out_dim];
    layer.pre_activation_into(x, &mut out, &mut ());
    out.iter_mut().for_each(|v| *v = relu(*v));
    Ok(out)
}

/// Concatenation of per-group vectors with the start offset of each part.
#[derive(Debug, Clone, PartialEq)]
pub struct StackingVector {
    pub values: Vec<f64>,
    pub offsets: Vec<usize>,
}

pub fn stack(parts: &[&[f64]]) -> StackingVector {
    assert!(!parts.is_empty(), "stacking needs at least one part");
    let mut values = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut offsets = Vec::with_capacity(parts.len());
    for p in parts {
        offsets.push(values.len());
        values.extend_from_slice(p);
    }
    StackingVector { values, offsets }
}

/// The embedding stage of a model: one optional layer per schema group.
/// Groups without a layer are copied into the stacking vector as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    schema: FeatureSchema,
    layers: Vec<Option<EmbeddingLayer>>,
    offsets: Vec<usize>,
    width: usize,
}

impl Embedder {
    pub fn new(schema: FeatureSchema, layers: Vec<Option<EmbeddingLayer>>) -> Result<Self, NnError> {
        if layers.len() != schema.len() {
            return Err(NnError::Schema(format!(
                "{} layers for {} groups",
                layers.len(),
                schema.len()
            )));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut width = 0;
        for (g, l) in schema.groups().iter().zip(&layers) {
            offsets.push(width);
            match l {
                Some(l) => {
                    if !g.embed {
                        return Err(NnError::Schema(format!("group {} is raw but has a layer", g.name)));
                    }
                    if l.in_dim != g.dim || l.out_dim == 0 {
                        return Err(NnError::Schema(format!(
                            "layer {}x{} does not fit group {} of dim {}",
                            l.out_dim, l.in_dim, g.name, g.dim
                        )));
                    }
                    width += l.out_dim;
                }
                None => {
                    if g.embed {
                        return Err(NnError::Schema(format!("group {} needs a layer", g.name)));
                    }
                    width += g.dim;
                }
            }
        }
        Ok(Self {
            schema,
            layers,
            offsets,
            width,
        })
    }

    /// Glorot-initialized layers; `width_of` gives m_j for each embedded group.
    pub fn random<R: Rng>(
        schema: FeatureSchema,
        width_of: impl Fn(&str) -> usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let layers = schema
            .groups()
            .iter()
            .map(|g| g.embed.then(|| EmbeddingLayer::glorot(g.dim, width_of(&g.name), rng)))
            .collect();
        Self::new(schema, layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            schema: self.schema.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(|l| EmbeddingLayer::zeros(l.in_dim, l.out_dim)))
                .collect(),
            offsets: self.offsets.clone(),
            width: self.width,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn layers(&self) -> &[Option<EmbeddingLayer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut EmbeddingLayer> {
        self.layers.iter_mut().flatten()
    }

    /// Stacking width D = Σ m_j (embedded) + Σ n_j (raw).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn check_sample(&self, s: &Sample) -> Result<(), NnError> {
        s.validate(&self.schema).map_err(|e| NnError::Schema(e.to_string()))
    }

    /// Writes the stacking vector of `s` into `out` (length [`Self::width`]).
    /// Assumes `s` already validated against the schema.
    pub fn embed_into<T: Tally>(&self, s: &Sample, out: &mut [f64], tally: &mut T) {
        self.forward_cached(s, out, None, tally);
    }

    /// Like [`Self::embed_into`], also keeping pre-activations of embedded
    /// segments in `pre` (same layout as `out`) for backprop.
    pub(crate) fn forward_cached<T: Tally>(
        &self,
        s: &Sample,
        out: &mut [f64],
        mut pre: Option<&mut [f64]>,
        tally: &mut T,
    ) {
        debug_assert_eq!(out.len(), self.width);
        for (j, (field, layer)) in s.fields.iter().zip(&self.layers).enumerate() {
            let start = self.offsets[j];
            match layer {
                Some(l) => {
                    let seg = &mut out[start..start + l.out_dim];
                    l.pre_activation_into(field, seg, tally);
                    if let Some(p) = pre.as_deref_mut() {
                        p[start..start + l.out_dim].copy_from_slice(seg);
                    }
                    seg.iter_mut().for_each(|v| *v = relu(*v));
                }
                None => {
                    let dim = self.schema.groups()[j].dim;
                    let seg = &mut out[start..start + dim];
                    match field {
                        Field::Dense(v) => seg.copy_from_slice(v),
                        Field::Sparse(sv) => {
                            seg.fill(0.0);
                            for (i, v) in sv.iter() {
                                seg[i as usize] = v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn stack_sample(&self, s: &Sample) -> Result<Vec<f64>, NnError> {
        self.check_sample(s)?;
        let mut out = vec![0.0; self.width];
        self.embed_into(s, &mut out, &mut ());
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` given dO/dỹ for one sample.
    pub(crate) fn backward_into(&self, s: &Sample, pre: &[f64], d_stack: &[f64], grad: &mut Embedder) {
        for (j, (field, layer)) in s.fields.iter().zip(&self.layers).enumerate() {
            let Some(l) = layer else { continue };
            let g = grad.layers[j].as_mut().expect("gradient shape matches");
            let start = self.offsets[j];
            let m = l.out_dim;
            let mut dz = vec![0.0; m];
            let mut any = false;
            for k in 0..m {
                if pre[start + k] > 0.0 {
                    dz[k] = d_stack[start + k];
                    any |= dz[k] != 0.0;
                }
            }
            if !any {
                continue;
            }
            axpy(1.0, &dz, &mut g.bias);
            match field {
                Field::Sparse(sv) => {
                    for (i, v) in sv.iter() {
                        let i = i as usize;
                        axpy(v, &dz, &mut g.weights[i * m..(i + 1) * m]);
                    }
                }
                Field::Dense(vals) => {
                    for (i, &v) in vals.iter().enumerate() {
                        if v != 0.0 {
                            axpy(v, &dz, &mut g.weights[i * m..(i + 1) * m]);
                        }
                    }
                }
            }
        }
    }

    /// Parameter slices in a fixed order: per embedded group, weights then bias.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}
