//! Binary tensor sections: `u32` count, then per tensor a `u32` name length,
//! the UTF-8 name, `u64` rows, `u64` cols and `rows * cols` little-endian f64.

use super::embed::{EmbeddingLayer, Embedder};
use super::NnError;
use crate::data::FeatureSchema;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self {
            name: name.into(),
            rows,
            cols,
            data,
        }
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NnError::Checkpoint(format!("truncated tensor data at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| NnError::Checkpoint(format!("tensor {name} shape overflows")))?;
        let payload = r.take(count.checked_mul(8).ok_or_else(|| NnError::Checkpoint("shape overflow".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor { name, rows, cols, data });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn embedder_tensors(e: &Embedder) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (g, l) in e.schema().groups().iter().zip(e.layers()) {
        if let Some(l) = l {
            out.push(Tensor::new(format!("embed.{}.weight", g.name), l.in_dim(), l.out_dim(), l.weights.clone()));
            out.push(Tensor::new(format!("embed.{}.bias", g.name), 1, l.out_dim(), l.bias.clone()));
        }
    }
    out
}

/// Rebuilds an embedder from the `embed.*` tensors in `tensors`.
pub fn embedder_from_tensors(schema: FeatureSchema, tensors: &[Tensor]) -> Result<Embedder, NnError> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(schema.len());
    for g in schema.groups() {
        if !g.embed {
            layers.push(None);
            continue;
        }
        let w = find(&format!("embed.{}.weight", g.name))?;
        let b = find(&format!("embed.{}.bias", g.name))?;
        if w.rows != g.dim || b.cols != w.cols || b.rows != 1 {
            return Err(NnError::Checkpoint(format!("tensor shapes for group {} do not match", g.name)));
        }
        layers.push(Some(EmbeddingLayer::from_parts(w.rows, w.cols, w.data.clone(), b.data.clone())));
    }
    Embedder::new(schema, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(shapes in proptest::collection::vec((0usize..5, 0usize..5), 0..4), seed in any::<u64>()) {
            let mut x = seed;
            let tensors: Vec<Tensor> = shapes.iter().enumerate().map(|(i, &(r, c))| {
                let data = (0..r * c).map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(x >> 2)
                }).collect();
                Tensor::new(format!("t{i}"), r, c, data)
            }).collect();
            let back = decode(&encode(&tensors)).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (a, b) in back.iter().zip(&tensors) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
                let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = encode(&[Tensor::new("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0])]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&[]).is_err());
    }
}
