//! Micro-benchmarks for the PAI-Conv operator and classifier.
//!
//! - [`bench_permutation`] times the dot-product soft permutation against a
//!   KPConv-style linear-correlation weighting on the same neighborhoods.
//! - [`bench_forward`] times one classifier forward pass.
//! - [`working_set_bytes`] and [`max_points_probe`] estimate how many points
//!   fit in a memory budget for one forward/backward pass.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use paiconv_core::lattice::fibonacci_lattice;
use paiconv_core::neighbors::mean_neighbor_distance;
use paiconv_core::netcls::knn_auto;
use paiconv_core::paiconv::{build_permutation, local_positions, Normalizer};
use paiconv_core::{ClassifierConfig, ClassifierState, KernelLattice, Matrix, PointCloud, Rng};

pub use paiconv_core::netcls::count_params;

/// Fewest timed repeats a report may be based on.
pub const MIN_REPEATS: usize = 5;

pub const CSV_HEADER: &str = "method,n,k,l,repeats,median_ns,param_count,working_set_bytes";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least {MIN_REPEATS} repeats, got {0}")]
    TooFewRepeats(usize),

    #[error("thread pool: {0}")]
    ThreadPool(String),

    #[error(transparent)]
    Core(#[from] paiconv_core::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub repeats: usize,
    /// Median wall time of one call.
    pub median_ns: u64,
    pub param_count: usize,
    pub working_set_bytes: usize,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.n,
            self.k,
            self.l,
            self.repeats,
            self.median_ns,
            self.param_count,
            self.working_set_bytes
        )
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Runs `f` once to warm up, then `repeats` timed times; returns the median
/// in nanoseconds (at least 1).
pub fn median_time(repeats: usize, mut f: impl FnMut()) -> Result<u64> {
    if repeats < MIN_REPEATS {
        return Err(BenchError::TooFewRepeats(repeats));
    }
    f();
    let mut times: Vec<u64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    Ok(times[repeats / 2].max(1))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| BenchError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Uniform points in the unit cube.
pub fn random_cloud(n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.uniform(), rng.uniform(), rng.uniform()])
        .collect();
    Ok(PointCloud::from_points(&pts)?)
}

/// KPConv-style influence weights `w_jl = max(0, 1 − ‖p̃_j − σ·k_l‖/σ)`,
/// laid out like a permutation tensor (`n × K × L`).
pub fn kpconv_weights(local: &Matrix, k: usize, kernel: &KernelLattice, sigma: f64) -> Vec<f64> {
    let n = local.rows() / k;
    let l = kernel.len();
    let kp = kernel.points();
    let mut w = vec![0.0; n * k * l];
    w.par_chunks_mut(k * l).enumerate().for_each(|(i, m)| {
        for j in 0..k {
            let p = local.row(i * k + j);
            for col in 0..l {
                let q = kp.row(col);
                let dx = p[0] - sigma * q[0];
                let dy = p[1] - sigma * q[1];
                let dz = p[2] - sigma * q[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                m[j * l + col] = (1.0 - d / sigma).max(0.0);
            }
        }
    });
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationBench {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub repeats: usize,
    /// KPConv kernel extent; `None` uses the mean neighbor distance.
    pub sigma: Option<f64>,
    pub seed: u64,
    pub threads: usize,
}

impl PermutationBench {
    pub fn new(n: usize, k: usize, l: usize) -> Self {
        Self {
            n,
            k,
            l,
            repeats: MIN_REPEATS,
            sigma: None,
            seed: 0,
            threads: 1,
        }
    }
}

/// Two rows: `dot_product` (attention + sparsemax) and `kpconv_linear`.
pub fn bench_permutation(cfg: &PermutationBench) -> Result<Vec<BenchReport>> {
    if cfg.repeats < MIN_REPEATS {
        return Err(BenchError::TooFewRepeats(cfg.repeats));
    }
    let cloud = random_cloud(cfg.n, &mut Rng::new(cfg.seed))?;
    let nbr = knn_auto(&cloud, cfg.k)?;
    let local = local_positions(&cloud, &nbr)?;
    let kernel = fibonacci_lattice(cfg.l)?;
    let sigma = cfg
        .sigma
        .unwrap_or_else(|| mean_neighbor_distance(&cloud, &nbr))
        .max(f64::MIN_POSITIVE);
    let bytes = 8 * cfg.n * cfg.k * cfg.l;
    let (dot, kp) = in_pool(cfg.threads, || -> Result<(u64, u64)> {
        let dot = median_time(cfg.repeats, || {
            let m = build_permutation(&local, cfg.k, &kernel, Normalizer::Sparsemax)
                .expect("finite local positions");
            std::hint::black_box(m);
        })?;
        let kp = median_time(cfg.repeats, || {
            std::hint::black_box(kpconv_weights(&local, cfg.k, &kernel, sigma));
        })?;
        Ok((dot, kp))
    })??;
    let row = |method: &str, median_ns| BenchReport {
        method: method.to_string(),
        n: cfg.n,
        k: cfg.k,
        l: cfg.l,
        repeats: cfg.repeats,
        median_ns,
        param_count: 0,
        working_set_bytes: bytes,
    };
    Ok(vec![row("dot_product", dot), row("kpconv_linear", kp)])
}

/// Times one inference forward pass of a freshly built classifier.
pub fn bench_forward(
    config: &ClassifierConfig,
    n: usize,
    repeats: usize,
    seed: u64,
    threads: usize,
) -> Result<BenchReport> {
    let state = ClassifierState::build(config.clone(), seed)?;
    let cloud = random_cloud(n, &mut Rng::new(seed))?;
    let median_ns = in_pool(threads, || {
        median_time(repeats, || {
            let out = state
                .forward_logits(&cloud, &mut Rng::new(seed), false)
                .expect("finite forward pass");
            std::hint::black_box(out);
        })
    })??;
    Ok(BenchReport {
        method: "classifier_forward".into(),
        n,
        k: config.k,
        l: config.kernel_len,
        repeats,
        median_ns,
        param_count: count_params(&state),
        working_set_bytes: working_set_bytes(config, n),
    })
}

fn param_floats(config: &ClassifierConfig) -> usize {
    let l = config.kernel_len;
    let mut total = 0;
    let mut d_feat = config.input_features;
    for &c in &config.conv_channels {
        let d_in = d_feat + config.position_width;
        let rows = if config.variant.is_isotropic() { d_in } else { d_in * l };
        total += rows * c + c + 7 * config.position_width + config.position_width;
        d_feat = c;
    }
    let concat: usize = config.conv_channels.iter().sum();
    total += concat * config.aggregate_width + config.aggregate_width;
    let mut width = config.pooling.width(config.aggregate_width);
    for &w in &config.fc_widths {
        total += width * w + w;
        width = w;
    }
    total + 3 * l
}

/// Analytic estimate of the peak bytes held during one forward and backward
/// pass over `n` points: parameters and gradients, neighbor tables and
/// permutation tensors, every stage's tape, the aggregate features and the
/// largest per-stage backward temporaries.
pub fn working_set_bytes(config: &ClassifierConfig, n: usize) -> usize {
    let k = config.k;
    let l = config.kernel_len;
    let d_pos = config.position_width;
    let mut floats = 2 * param_floats(config) + 3 * n;
    let mut sizes = Vec::with_capacity(config.conv_channels.len());
    let mut m = n;
    for s in 0..config.conv_channels.len() {
        if let Some(&r) = config.downsample_ratios.get(s) {
            m = m.div_ceil(r);
        }
        sizes.push(m);
    }
    let shared = config.downsample_ratios.is_empty();
    let mut d_feat = config.input_features;
    let mut backward_peak = 0;
    for (s, (&c, &m)) in config.conv_channels.iter().zip(&sizes).enumerate() {
        if s == 0 || !shared {
            // coordinates, neighbor table, local positions, permutation
            floats += 3 * m + m * k + 3 * m * k + m * k * l;
        }
        let d_in = d_pos + d_feat;
        // position inputs and pre-activations, assembled X, resampled X̃,
        // filter pre-activation, output, incoming features
        floats += 7 * m * k + d_pos * m * k + d_in * m * k + l * d_in * m + 2 * c * m + d_feat * m;
        backward_peak = backward_peak.max(l * d_in * m + 2 * d_in * m * k + m * k * l + 2 * c * m);
        d_feat = c;
    }
    let last = *sizes.last().unwrap_or(&n);
    let concat: usize = config.conv_channels.iter().sum();
    floats += last * concat + 2 * last * config.aggregate_width;
    8 * (floats + backward_peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    /// Largest power of two whose estimate fits, or 0.
    pub n: usize,
    /// The probe stopped at `cap` rather than at the budget.
    pub saturated: bool,
}

/// Doubles `n` from 1 while the estimated working set fits in
/// `budget_bytes`, stopping at `cap`.
pub fn max_points_probe(config: &ClassifierConfig, budget_bytes: usize, cap: usize) -> ProbeResult {
    if working_set_bytes(config, 1) > budget_bytes {
        log::warn!("budget of {budget_bytes} bytes does not fit a single point");
        return ProbeResult {
            n: 0,
            saturated: false,
        };
    }
    let mut n = 1usize;
    loop {
        let next = n.saturating_mul(2);
        if next > cap {
            return ProbeResult { n, saturated: true };
        }
        if working_set_bytes(config, next) > budget_bytes {
            return ProbeResult {
                n,
                saturated: false,
            };
        }
        n = next;
    }
}
