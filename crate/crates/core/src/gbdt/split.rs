//! Exact greedy split search on second-order statistics.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPoint {
    pub threshold: f64,
    pub gain: f64,
    /// Samples strictly below the threshold.
    pub n_left: usize,
}

#[inline]
fn leaf_score(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 {
        g * g / d
    } else {
        0.0
    }
}

/// `G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    leaf_score(gl, hl, lambda) + leaf_score(gr, hr, lambda) - leaf_score(gl + gr, hl + hr, lambda)
}

/// Threshold strictly above `lo` and at most `hi`, so `lo` goes left and `hi` right.
#[inline]
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

/// Scans `(value, g, h)` triples sorted by value. Returns the best split point
/// with at least `min_leaf` samples per side; on equal gain the smaller
/// threshold wins.
pub(crate) fn scan_sorted<I>(items: I, n: usize, g_total: f64, h_total: f64, lambda: f64, min_leaf: usize) -> Option<SplitPoint>
where
    I: Iterator<Item = (f64, f64, f64)>,
{
    let min_leaf = min_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let parent = leaf_score(g_total, h_total, lambda);
    let mut best: Option<SplitPoint> = None;
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut it = items.peekable();
    let mut k = 0usize;
    while let Some((v, g, h)) = it.next() {
        gl += g;
        hl += h;
        k += 1;
        let Some(&(next, _, _)) = it.peek() else { break };
        if k < min_leaf || next <= v {
            continue;
        }
        if n - k < min_leaf {
            break;
        }
        let gain = leaf_score(gl, hl, lambda) + leaf_score(g_total - gl, h_total - hl, lambda) - parent;
        if best.map_or(true, |b| gain > b.gain) {
            best = Some(SplitPoint {
                threshold: midpoint(v, next),
                gain,
                n_left: k,
            });
        }
    }
    best
}

/// Best split over one feature. `values` must be sorted ascending with `g`
/// and `h` aligned. Returns `None` when fewer than two distinct values exist.
pub fn best_split(values: &[f64], g: &[f64], h: &[f64], lambda: f64) -> Option<SplitPoint> {
    assert!(values.len() == g.len() && g.len() == h.len());
    debug_assert!(values.windows(2).all(|w| w[0] <= w[1]), "values must be sorted");
    let gt: f64 = g.iter().sum();
    let ht: f64 = h.iter().sum();
    let items = values.iter().zip(g).zip(h).map(|((&v, &g), &h)| (v, g, h));
    scan_sorted(items, values.len(), gt, ht, lambda, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_example() {
        let s = best_split(&[1.0, 2.0], &[-1.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(s.threshold, 1.5);
        assert_eq!(s.gain, 2.0);
    }

    #[test]
    fn identical_values_have_no_split() {
        assert!(best_split(&[3.0; 4], &[1.0, -1.0, 1.0, -1.0], &[1.0; 4], 1.0).is_none());
        assert!(best_split(&[1.0], &[1.0], &[1.0], 1.0).is_none());
    }

    #[test]
    fn midpoint_separates_adjacent_doubles() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a < m && m <= b);
    }

    /// Enumerates every distinct-value cut and sums each side directly.
    fn exhaustive(values: &[f64], g: &[f64], h: &[f64], lambda: f64) -> Option<(f64, f64)> {
        let mut distinct: Vec<f64> = values.to_vec();
        distinct.dedup();
        let mut best: Option<(f64, f64)> = None;
        for w in distinct.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..values.len() {
                if values[i] < t {
                    gl += g[i];
                    hl += h[i];
                } else {
                    gr += g[i];
                    hr += h[i];
                }
            }
            let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr).powi(2) / (hl + hr + lambda);
            if best.map_or(true, |b| gain > b.1) {
                best = Some((t, gain));
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let n = 5;
            let mut values: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..4) as f64) * 0.5).collect();
            values.sort_by(f64::total_cmp);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.25)).collect();
            let lambda = rng.gen_range(0.0..2.0);
            let got = best_split(&values, &g, &h, lambda);
            match (got, exhaustive(&values, &g, &h, lambda)) {
                (None, None) => {}
                (Some(s), Some((t, gain))) => {
                    assert!((s.gain - gain).abs() <= 1e-12 * gain.abs().max(1.0));
                    assert_eq!(s.threshold, t);
                }
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn min_leaf_is_respected() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let g = [-1.0, 1.0, 1.0, 1.0];
        let h = [1.0; 4];
        let gt: f64 = g.iter().sum();
        let items = v.iter().zip(&g).zip(&h).map(|((&v, &g), &h)| (v, g, h));
        let s = scan_sorted(items, 4, gt, 4.0, 0.0, 2).unwrap();
        assert_eq!(s.n_left, 2);
        assert_eq!(s.threshold, 2.5);
    }
}
