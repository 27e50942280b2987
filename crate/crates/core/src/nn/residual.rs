use rand::Rng;

use super::{relu, NnError};

/// `y = relu(x + W2 relu(W1 x + b1) + b2)` with `W1: h x d`, `W2: d x h`,
/// both stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnit {
    pub(crate) d: usize,
    pub(crate) h: usize,
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

/// Intermediates of one residual forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ResidualCache {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out_pre: Vec<f64>,
}

impl ResidualUnit {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            d,
            h,
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; d * h],
            b2: vec![0.0; d],
        }
    }

    pub fn glorot<R: Rng>(d: usize, h: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d + h) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-limit..=limit)).collect() };
        let w1 = draw(h * d);
        let w2 = draw(d * h);
        Self {
            d,
            h,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: vec![0.0; d],
        }
    }

    pub fn from_parts(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self, NnError> {
        let (h, d) = (b1.len(), b2.len());
        if w1.len() != h * d || w2.len() != d * h || h == 0 || d == 0 {
            return Err(NnError::Dim(format!(
                "residual shapes w1 {} w2 {} do not fit d={d}, h={h}",
                w1.len(),
                w2.len()
            )));
        }
        Ok(Self { d, h, w1, b1, w2, b2 })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub(crate) fn forward_cached(&self, x: &[f64], out: &mut [f64], cache: &mut ResidualCache) {
        let (d, h) = (self.d, self.h);
        cache.hidden_pre.resize(h, 0.0);
        cache.hidden.resize(h, 0.0);
        cache.out_pre.resize(d, 0.0);
        for r in 0..h {
            let row = &self.w1[r * d..(r + 1) * d];
            let u = self.b1[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            cache.hidden_pre[r] = u;
            cache.hidden[r] = relu(u);
        }
        for r in 0..d {
            let row = &self.w2[r * h..(r + 1) * h];
            let v = x[r] + self.b2[r] + row.iter().zip(&cache.hidden).map(|(w, a)| w * a).sum::<f64>();
            cache.out_pre[r] = v;
            out[r] = relu(v);
        }
    }

    /// Given dO/dy, accumulates parameter gradients into `grad` and writes dO/dx.
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        cache: &ResidualCache,
        d_out: &[f64],
        grad: &mut ResidualUnit,
        d_in: &mut [f64],
    ) {
        let (d, h) = (self.d, self.h);
        let dv: Vec<f64> = (0..d)
            .map(|r| if cache.out_pre[r] > 0.0 { d_out[r] } else { 0.0 })
            .collect();
        let mut da = vec![0.0; h];
        for r in 0..d {
            if dv[r] == 0.0 {
                continue;
            }
            grad.b2[r] += dv[r];
            let row = &self.w2[r * h..(r + 1) * h];
            let grow = &mut grad.w2[r * h..(r + 1) * h];
            for k in 0..h {
                grow[k] += dv[r] * cache.hidden[k];
                da[k] += row[k] * dv[r];
            }
        }
        d_in.copy_from_slice(&dv);
        for k in 0..h {
            if cache.hidden_pre[k] <= 0.0 || da[k] == 0.0 {
                continue;
            }
            let du = da[k];
            grad.b1[k] += du;
            let row = &self.w1[k * d..(k + 1) * d];
            let grow = &mut grad.w1[k * d..(k + 1) * d];
            for c in 0..d {
                grow[c] += du * x[c];
                d_in[c] += row[c] * du;
            }
        }
    }

    pub(crate) fn params(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

pub fn residual_forward(x: &[f64], unit: &ResidualUnit) -> Result<Vec<f64>, NnError> {
    if x.len() != unit.d {
        return Err(NnError::Dim(format!("input of length {} for unit of width {}", x.len(), unit.d)));
    }
    let mut out = vec![0.0; unit.d];
    unit.forward_cached(x, &mut out, &mut ResidualCache::default());
    Ok(out)
}
