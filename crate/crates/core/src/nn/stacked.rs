use std::io::{self, Write};

use super::embed::Embedder;
use super::NnError;
use crate::data::Dataset;
use crate::numfmt::sig17;

/// Label and stacking-vector pairs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDataset {
    width: usize,
    labels: Vec<u8>,
    values: Vec<f64>,
}

impl StackedDataset {
    pub fn new(width: usize, labels: Vec<u8>, values: Vec<f64>) -> Result<Self, NnError> {
        if width == 0 || values.len() != labels.len() * width {
            return Err(NnError::Dim(format!(
                "{} values do not form {} rows of width {width}",
                values.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(NnError::Config("labels must be 0 or 1".into()));
        }
        Ok(Self { width, labels, values })
    }

    pub fn from_rows(rows: &[(u8, Vec<f64>)]) -> Result<Self, NnError> {
        let width = rows.first().map(|r| r.1.len()).unwrap_or(1);
        if rows.iter().any(|r| r.1.len() != width) {
            return Err(NnError::Dim("rows of unequal width".into()));
        }
        Self::new(
            width,
            rows.iter().map(|r| r.0).collect(),
            rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width)
    }

    /// Column `k` across all rows.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }
}

/// Maps every sample through the embedding layers and stacking only.
pub fn extract_stacking(ds: &Dataset, embedder: &Embedder) -> Result<StackedDataset, NnError> {
    if ds.schema != *embedder.schema() {
        return Err(NnError::Schema("dataset schema differs from embedding schema".into()));
    }
    let width = embedder.width();
    let mut values = vec![0.0; ds.len() * width];
    for (s, out) in ds.samples.iter().zip(values.chunks_exact_mut(width)) {
        embedder.check_sample(s)?;
        embedder.embed_into(s, out, &mut ());
    }
    StackedDataset::new(width, ds.labels().collect(), values)
}

/// `<label>\t<v0>,<v1>,...` with 17 significant digits per value.
pub fn write_stacked<W: Write>(ds: &StackedDataset, mut out: W) -> io::Result<()> {
    let mut line = String::new();
    for (label, row) in ds.labels.iter().zip(ds.rows()) {
        line.clear();
        line.push_str(if *label == 1 { "1\t" } else { "0\t" });
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&sig17(*v));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn parse_stacked(text: &str) -> Result<StackedDataset, NnError> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| NnError::Config(format!("stacked line {}: {msg}", i + 1));
        let (label, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        labels.push(match label {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("label must be 0 or 1")),
        });
        let before = values.len();
        for tok in rest.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| bad("bad number"))?;
            if !v.is_finite() {
                return Err(bad("non-finite value"));
            }
            values.push(v);
        }
        let w = values.len() - before;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => return Err(bad("row width differs from first row")),
            _ => {}
        }
    }
    let width = width.ok_or_else(|| NnError::Config("stacked file is empty".into()))?;
    StackedDataset::new(width, labels, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::nn::{embed_forward, stack, ArchConfig, DeepCrossingModel};

    fn setup() -> (Dataset, DeepCrossingModel) {
        let ds = gen_synthetic(&SynthConfig { n_samples: 50, n_sparse_dims: 40, n_dense_dims: 3, ..Default::default() }).unwrap();
        let arch = ArchConfig { embed_dim: 5, residual_hidden: vec![4], ..Default::default() };
        let m = DeepCrossingModel::random(ds.schema.clone(), &arch, 1).unwrap();
        (ds, m)
    }

    #[test]
    fn zero_embeddings_give_zero_embedded_segment() {
        let (ds, mut m) = setup();
        for l in m.embedder.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let st = extract_stacking(&ds, &m.embedder).unwrap();
        assert_eq!(st.width(), 5 + 3);
        for (i, row) in st.rows().enumerate() {
            assert!(row[..5].iter().all(|&v| v == 0.0));
            assert_eq!(st.labels()[i], ds.samples[i].label);
        }
    }

    #[test]
    fn matches_embed_then_stack_composition() {
        let (ds, m) = setup();
        let st = extract_stacking(&ds, &m.embedder).unwrap();
        for (s, row) in ds.samples.iter().zip(st.rows()) {
            let e = embed_forward(&s.fields[0], m.embedder.layers()[0].as_ref().unwrap()).unwrap();
            let raw = match &s.fields[1] {
                crate::data::Field::Dense(v) => v.clone(),
                _ => unreachable!(),
            };
            let want = stack(&[&e, &raw]);
            assert_eq!(want.values.as_slice(), row);
        }
    }

    #[test]
    fn independent_of_residual_and_scoring() {
        let (ds, mut m) = setup();
        let before = extract_stacking(&ds, &m.embedder).unwrap();
        m.score_w.iter_mut().for_each(|w| *w += 3.0);
        m.residuals.clear();
        assert_eq!(extract_stacking(&ds, &m.embedder).unwrap(), before);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let (ds, m) = setup();
        let st = extract_stacking(&ds, &m.embedder).unwrap();
        let mut buf = Vec::new();
        write_stacked(&st, &mut buf).unwrap();
        let back = parse_stacked(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let (ds, m) = setup();
        let other = gen_synthetic(&SynthConfig { n_samples: 5, n_sparse_dims: 41, n_dense_dims: 3, ..Default::default() }).unwrap();
        assert!(extract_stacking(&other, &m.embedder).is_err());
        assert!(extract_stacking(&ds, &m.embedder).is_ok());
    }
}
