//! Latency harness: embedding time T1 and forest time T2 per sample.
//!
//! Parsing is done before timing starts. Each repetition shuffles the sample
//! order, times a full embedding pass and a full forest pass separately, and
//! divides by the sample count; reported T1 and T2 are medians over
//! repetitions. Percentiles come from a third pass that times samples end to
//! end, in small groups when the clock is too coarse for single samples.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Predictor, ServeError};
use crate::data::Dataset;
use crate::fuzzy::complexity_stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Untimed passes over the data before measuring.
    pub warmup: usize,
    pub reps: usize,
    pub shuffle_seed: u64,
    /// Pin the measuring thread to one logical CPU.
    pub pin_cpu: bool,
    /// Free-form name echoed into the report.
    pub label: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            reps: 15,
            shuffle_seed: 7,
            pin_cpu: true,
            label: "default".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), ServeError> {
        if self.warmup == 0 {
            return Err(ServeError::Config("warmup must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(ServeError::Config("reps must be at least 1".into()));
        }
        if self.label.contains(',') || self.label.contains('\n') {
            return Err(ServeError::Config("label must not contain commas or newlines".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: String,
    pub n_t: usize,
    pub d_t: f64,
    pub width: usize,
    pub t1_ns: f64,
    pub t2_ns: f64,
    pub total_ns: f64,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub reps: usize,
    pub samples: usize,
    /// Samples per timed group in the percentile pass; 1 means per-sample.
    pub sample_batch: usize,
    pub clock_resolution_ns: f64,
    pub pinned_cpu: Option<usize>,
}

pub const CSV_HEADER: &str = "config,n_t,d_t,D,T1_ns,T2_ns,total_ns,p50_ns,p99_ns,reps";

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{},{:.1},{:.1},{:.1},{:.1},{:.1},{}",
            self.config,
            self.n_t,
            self.d_t,
            self.width,
            self.t1_ns,
            self.t2_ns,
            self.total_ns,
            self.p50_ns,
            self.p99_ns,
            self.reps
        )
    }

    pub fn summary(&self) -> String {
        let timing = if self.sample_batch == 1 {
            "per-sample timing".to_string()
        } else {
            format!("percentiles over groups of {} samples (clock resolution {:.0} ns)", self.sample_batch, self.clock_resolution_ns)
        };
        let cpu = match self.pinned_cpu {
            Some(c) => format!("pinned to cpu {c}"),
            None => "unpinned".into(),
        };
        format!(
            "{}: {} trees, mean depth {:.2}, D = {}\n  T1 {:.1} ns  T2 {:.1} ns  total {:.1} ns per sample\n  p50 {:.1} ns  p99 {:.1} ns\n  {} reps over {} samples, {timing}, {cpu}\n",
            self.config,
            self.n_t,
            self.d_t,
            self.width,
            self.t1_ns,
            self.t2_ns,
            self.total_ns,
            self.p50_ns,
            self.p99_ns,
            self.reps,
            self.samples
        )
    }
}

/// Smallest positive step observed between consecutive clock reads.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Median over `reps` timed passes of the mean ns per item, after `warmup`
/// untimed passes. `f(i)` processes item `i`.
pub fn time_per_item(n_items: usize, warmup: usize, reps: usize, mut f: impl FnMut(usize) -> f64) -> f64 {
    assert!(n_items > 0 && reps > 0);
    let mut sink = 0.0;
    for _ in 0..warmup {
        for i in 0..n_items {
            sink += f(i);
        }
    }
    let mut passes = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for i in 0..n_items {
            sink += f(black_box(i));
        }
        passes.push(t.elapsed().as_nanos() as f64 / n_items as f64);
    }
    black_box(sink);
    median(&mut passes)
}

/// Restricts the calling thread to one CPU for the guard's lifetime.
pub struct CpuPin {
    cpu: Option<usize>,
    #[cfg(target_os = "linux")]
    saved: Option<libc::cpu_set_t>,
}

impl CpuPin {
    /// Pins to the first CPU in the current affinity mask. Failure leaves the
    /// thread unpinned and reports `cpu() == None`.
    #[cfg(target_os = "linux")]
    pub fn first_allowed() -> Self {
        // SAFETY: cpu_set_t is plain data; the libc calls only read and write
        // the masks passed by pointer with their correct size.
        unsafe {
            let mut saved: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut saved) != 0 {
                return Self { cpu: None, saved: None };
            }
            let Some(cpu) = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &saved)) else {
                return Self { cpu: None, saved: None };
            };
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return Self { cpu: None, saved: None };
            }
            Self { cpu: Some(cpu), saved: Some(saved) }
        }
    }

    #[cfg(not(target_os = "linux"))]
    pub fn first_allowed() -> Self {
        Self { cpu: None }
    }

    pub fn none() -> Self {
        Self {
            cpu: None,
            #[cfg(target_os = "linux")]
            saved: None,
        }
    }

    pub fn cpu(&self) -> Option<usize> {
        self.cpu
    }
}

impl Drop for CpuPin {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        if let Some(saved) = self.saved.take() {
            // SAFETY: restores the mask read in `first_allowed`.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &saved);
            }
        }
    }
}

pub fn bench(predictor: &Predictor, ds: &Dataset, cfg: &BenchConfig) -> Result<BenchReport, ServeError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ServeError::Config("benchmark dataset is empty".into()));
    }
    for s in &ds.samples {
        predictor.embedder().check_sample(s)?;
    }
    let pin = if cfg.pin_cpu { CpuPin::first_allowed() } else { CpuPin::none() };
    let n = ds.len();
    let width = predictor.width();
    let scorer = predictor.scorer();
    let embedder = predictor.embedder();
    let mut ys = vec![0.0; n * width];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut sink = 0.0;

    let embed_pass = |order: &[usize], ys: &mut [f64]| {
        let t = Instant::now();
        for &i in order {
            embedder.embed_into(&ds.samples[i], &mut ys[i * width..(i + 1) * width], &mut ());
        }
        t.elapsed()
    };
    let forest_pass = |order: &[usize], ys: &[f64], sink: &mut f64| {
        let t = Instant::now();
        for &i in order {
            *sink += scorer.raw(black_box(&ys[i * width..(i + 1) * width]));
        }
        t.elapsed()
    };

    let mut warm = Duration::ZERO;
    for _ in 0..cfg.warmup {
        warm = embed_pass(&order, &mut ys) + forest_pass(&order, &ys, &mut sink);
    }
    let resolution = clock_resolution();
    let est_ns = (warm.as_nanos() as f64 / n as f64).max(1.0);
    // Groups long enough that one clock step is at most 1% of the reading.
    let group = ((100.0 * resolution.as_nanos() as f64 / est_ns).ceil() as usize).clamp(1, n);

    let mut t1 = Vec::with_capacity(cfg.reps);
    let mut t2 = Vec::with_capacity(cfg.reps);
    let mut tot = Vec::with_capacity(cfg.reps);
    let mut lat = Vec::with_capacity(cfg.reps * n.div_ceil(group));
    let mut buf = vec![0.0; width];
    for _ in 0..cfg.reps {
        order.shuffle(&mut rng);
        let a = embed_pass(&order, &mut ys).as_nanos() as f64 / n as f64;
        let b = forest_pass(&order, &ys, &mut sink).as_nanos() as f64 / n as f64;
        t1.push(a);
        t2.push(b);
        tot.push(a + b);
        for chunk in order.chunks(group) {
            let t = Instant::now();
            for &i in chunk {
                embedder.embed_into(&ds.samples[i], &mut buf, &mut ());
                sink += scorer.raw(black_box(&buf));
            }
            lat.push((t.elapsed().as_nanos() as f64 / chunk.len() as f64).max(1.0));
        }
    }
    black_box(sink);
    lat.sort_by(f64::total_cmp);
    let (n_t, d_t) = match complexity_stats(&predictor.hard_forest()) {
        Ok(s) => (s.n_t, s.d_t),
        Err(_) => (0, 0.0),
    };
    Ok(BenchReport {
        config: cfg.label.clone(),
        n_t,
        d_t,
        width,
        t1_ns: median(&mut t1),
        t2_ns: median(&mut t2),
        total_ns: median(&mut tot),
        p50_ns: percentile(&lat, 0.50),
        p99_ns: percentile(&lat, 0.99),
        reps: cfg.reps,
        samples: n,
        sample_batch: group,
        clock_resolution_ns: resolution.as_nanos() as f64,
        pinned_cpu: pin.cpu(),
    })
}

/// Fully connected rectifier network with a sigmoid output, used as a
/// latency baseline for the forest.
#[derive(Debug, Clone)]
pub struct DenseNet {
    /// Per layer: row-major `out x in` weights and the bias.
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl DenseNet {
    /// Uniform Glorot weights for the layer widths `sizes`, input first.
    pub fn random(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let r = (6.0 / (i + o) as f64).sqrt();
                let wts = (0..i * o).map(|_| rng.gen_range(-r..r)).collect();
                (i, o, wts, vec![0.0; o])
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.in_dim());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, (i, o, w, b)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (r, out) in next.iter_mut().enumerate() {
                let row = &w[r * i..(r + 1) * i];
                *out += row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
                if k < last {
                    *out = out.max(0.0);
                }
            }
            debug_assert_eq!(next.len(), *o);
            cur = next;
        }
        crate::numfmt::sigmoid(cur[0])
    }
}
