//! Feature schema, samples and dataset I/O.
//!
//! Raw inputs are heterogeneous: sparse multi-hot groups (tri-letter grams,
//! one-hot ids) and small dense groups (counting features). Sparse groups are
//! never expanded to dense form.

mod samples;
mod synth;
mod triletter;

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

pub use samples::{format_samples, parse_samples, write_samples};
pub use synth::{gen_synthetic, schema_for as synth_schema, SynthConfig};
pub use triletter::{triletter_featurize, triletter_grams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("no groups")]
    EmptySchema,
    #[error("line {line}: {msg}")]
    Sample { line: usize, msg: String },
    #[error("sample does not match schema: {0}")]
    Mismatch(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Sparse,
    Dense,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Sparse => "sparse",
            GroupKind::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureGroup {
    pub name: String,
    pub kind: GroupKind,
    pub dim: usize,
    /// Raw groups are copied into the stacking vector unchanged.
    pub embed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureSchema {
    groups: Vec<FeatureGroup>,
}

impl FeatureSchema {
    pub fn new(groups: Vec<FeatureGroup>) -> Result<Self, DataError> {
        if groups.is_empty() {
            return Err(DataError::EmptySchema);
        }
        let mut seen = HashSet::new();
        for (i, g) in groups.iter().enumerate() {
            if g.dim == 0 {
                return Err(DataError::Schema {
                    line: i + 1,
                    msg: format!("group {} has non-positive dim", g.name),
                });
            }
            if !seen.insert(g.name.as_str()) {
                return Err(DataError::Schema {
                    line: i + 1,
                    msg: format!("duplicate group {}", g.name),
                });
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Σ n_j over all groups.
    pub fn raw_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let mode = if g.embed { "embed" } else { "raw" };
            out.push_str(&format!("{} {} {} {}\n", g.name, g.kind, g.dim, mode));
        }
        out
    }
}

/// Parses `name kind dim embed|raw` lines; `#` starts a comment.
pub fn parse_schema(text: &str) -> Result<FeatureSchema, DataError> {
    let mut groups = Vec::new();
    let mut names = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Schema { line: line_no, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(err(format!("expected `name kind dim embed|raw`, got {line:?}")));
        }
        let kind = match toks[1] {
            "sparse" => GroupKind::Sparse,
            "dense" => GroupKind::Dense,
            other => return Err(err(format!("unknown kind {other}"))),
        };
        let dim: i64 = toks[2]
            .parse()
            .map_err(|_| err(format!("bad dim {}", toks[2])))?;
        if dim <= 0 {
            return Err(err(format!("non-positive dim {dim}")));
        }
        let embed = match toks[3] {
            "embed" => true,
            "raw" => false,
            other => return Err(err(format!("expected embed or raw, got {other}"))),
        };
        if !names.insert(toks[0].to_string()) {
            return Err(err(format!("duplicate group {}", toks[0])));
        }
        groups.push(FeatureGroup {
            name: toks[0].to_string(),
            kind,
            dim: dim as usize,
            embed,
        });
    }
    if groups.is_empty() {
        return Err(DataError::EmptySchema);
    }
    Ok(FeatureSchema { groups })
}

/// Sorted, duplicate-free sparse vector without explicit zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    /// Builds from unordered pairs; zeros are dropped, duplicates rejected.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Result<Self, String> {
        pairs.sort_by_key(|p| p.0);
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        for (idx, v) in pairs {
            if !v.is_finite() {
                return Err(format!("non-finite value at index {idx}"));
            }
            if indices.last() == Some(&idx) {
                return Err(format!("duplicate index {idx}"));
            }
            if v != 0.0 {
                indices.push(idx);
                values.push(v);
            }
        }
        Ok(Self { indices, values })
    }

    /// Builds from pairs, summing duplicates (multi-hot accumulation).
    pub fn accumulate(pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut pairs: Vec<(u32, f64)> = pairs.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        let mut indices: Vec<u32> = Vec::with_capacity(pairs.len());
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        for (idx, v) in pairs {
            if indices.last() == Some(&idx) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(idx);
                values.push(v);
            }
        }
        let (indices, values) = indices
            .into_iter()
            .zip(values)
            .filter(|(_, v)| *v != 0.0)
            .unzip();
        Self { indices, values }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// n_ō, the non-zero count.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i as usize] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Sparse(SparseVector),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: u8,
    pub fields: Vec<Field>,
}

impl Sample {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), DataError> {
        if self.label > 1 {
            return Err(DataError::Mismatch(format!("label {} not in {{0,1}}", self.label)));
        }
        if self.fields.len() != schema.len() {
            return Err(DataError::Mismatch(format!(
                "expected {} fields, got {}",
                schema.len(),
                self.fields.len()
            )));
        }
        for (field, group) in self.fields.iter().zip(schema.groups()) {
            match (field, group.kind) {
                (Field::Sparse(sv), GroupKind::Sparse) => {
                    if let Some(&last) = sv.indices().last() {
                        if last as usize >= group.dim {
                            return Err(DataError::Mismatch(format!(
                                "index out of range: {last} >= {} in group {}",
                                group.dim, group.name
                            )));
                        }
                    }
                }
                (Field::Dense(v), GroupKind::Dense) => {
                    if v.len() != group.dim {
                        return Err(DataError::Mismatch(format!(
                            "group {} expects {} values, got {}",
                            group.name,
                            group.dim,
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(DataError::Mismatch(format!(
                            "non-finite value in group {}",
                            group.name
                        )));
                    }
                }
                _ => {
                    return Err(DataError::Mismatch(format!(
                        "field kind does not match group {}",
                        group.name
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>) -> Result<Self, DataError> {
        for s in &samples {
            s.validate(&schema)?;
        }
        Ok(Self { schema, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.samples.iter().map(|s| s.label)
    }
}
