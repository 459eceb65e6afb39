//! Self-verification suite run by `paiconv check`.
//!
//! Every property is recomputed from scratch against an independent oracle
//! (bisection for sparsemax, central differences for gradients, brute force
//! for KNN, recomputation for invariances).

use std::fmt;

use crate::checkpoint::Checkpoint;
use crate::dataio::{synth_shapes, ShapeClass};
use crate::error::Result;
use crate::lattice::{fibonacci_lattice, random_lattice, uniformity_stats};
use crate::neighbors::{knn_bruteforce, knn_grid, PointCloud};
use crate::netcls::{cross_entropy, ClassifierConfig, ClassifierState, Pooling};
use crate::numkit::{softmax, softmax_jacobian_vp, sparsemax, sparsemax_jacobian_vp, Rng, Stream};
use crate::paiconv::Variant;
use crate::train::{cosine_lr, TrainConfig};

/// Deliberate defects for testing that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of every analytic gradient before comparison.
    BackwardSign,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Names of every property, in report order.
pub const PROPERTIES: [&str; 11] = [
    "sparsemax_projection",
    "sparsemax_jacobian",
    "softmax_jacobian",
    "network_gradient",
    "point_order_invariance",
    "neighbor_order_invariance",
    "no_permutation_witness",
    "knn_grid_equivalence",
    "lattice_uniformity",
    "cosine_schedule",
    "checkpoint_round_trip",
];

pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    let checks: [fn(&CheckOptions) -> Result<(bool, String)>; 11] = [
        sparsemax_projection,
        sparsemax_jacobian,
        softmax_jacobian,
        network_gradient,
        point_order_invariance,
        neighbor_order_invariance,
        no_permutation_witness,
        knn_grid_equivalence,
        lattice_uniformity,
        cosine_schedule,
        checkpoint_round_trip,
    ];
    let results = PROPERTIES
        .iter()
        .zip(checks)
        .map(|(&name, check)| {
            let (passed, detail) = match check(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            PropertyResult {
                name,
                passed,
                detail,
            }
        })
        .collect();
    CheckReport { results }
}

/// Euclidean projection onto the simplex by bisection on the threshold.
fn bisection_projection(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mass: f64 = z.iter().map(|&v| (v - mid).max(0.0)).sum();
        if mass > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

fn random_vec(rng: &mut Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.normal()).collect()
}

fn sparsemax_projection(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for t in 0..500 {
        let z = random_vec(&mut rng, 1 + t % 8, 2.0);
        let p = sparsemax(&z)?;
        let q = bisection_projection(&z);
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|&v| v < 0.0) {
            return Ok((false, format!("negative entry for {z:?}")));
        }
    }
    Ok((
        worst <= 1e-9 && worst_sum <= 1e-12,
        format!("max deviation {worst:.2e}, max |sum-1| {worst_sum:.2e} over 500 vectors"),
    ))
}

fn jacobian_check(
    opts: &CheckOptions,
    f: fn(&[f64]) -> Vec<f64>,
    jvp: fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed + 1);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for t in 0..200 {
        let z = random_vec(&mut rng, 2 + t % 6, 1.0);
        let u = random_vec(&mut rng, z.len(), 1.0);
        let p = f(&z);
        let plus: Vec<f64> = z.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = z.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = (f(&plus), f(&minus));
        let support = |v: &[f64]| v.iter().map(|&x| x > 0.0).collect::<Vec<_>>();
        if support(&fp) != support(&p) || support(&fm) != support(&p) {
            skipped += 1;
            continue;
        }
        let mut analytic = jvp(&p, &u);
        if opts.fault == Some(Fault::BackwardSign) {
            analytic.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..z.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs());
        }
    }
    Ok((
        worst < 1e-6,
        format!("max abs error {worst:.2e} ({skipped} probes crossed a support change)"),
    ))
}

fn sparsemax_jacobian(opts: &CheckOptions) -> Result<(bool, String)> {
    jacobian_check(
        opts,
        |z| sparsemax(z).expect("finite input"),
        sparsemax_jacobian_vp,
    )
}

fn softmax_jacobian(opts: &CheckOptions) -> Result<(bool, String)> {
    jacobian_check(opts, softmax, softmax_jacobian_vp)
}

fn micro_config(variant: Variant) -> ClassifierConfig {
    ClassifierConfig {
        conv_channels: vec![4, 4],
        position_width: 4,
        aggregate_width: 4,
        fc_widths: vec![4, 3],
        k: 3,
        kernel_len: 4,
        dropout: 0.5,
        downsample_ratios: Vec::new(),
        pooling: Pooling::MaxAndSum,
        variant,
        input_features: 0,
    }
}

fn gaussian_cloud(rng: &mut Rng, n: usize) -> Result<PointCloud> {
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.normal(), rng.normal(), rng.normal()])
        .collect();
    PointCloud::from_points(&pts)
}

fn network_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (v, variant) in Variant::ALL.into_iter().enumerate() {
        let seed = opts.seed + 10 + v as u64;
        let mut state = ClassifierState::build(micro_config(variant), seed)?;
        let cloud = gaussian_cloud(&mut Rng::new(seed), 8)?;
        let label = v % 3;
        let eval = |s: &ClassifierState| -> Result<(f64, Vec<u64>)> {
            let (logits, tape) = s.forward_logits(&cloud, &mut Rng::new(seed), true)?;
            Ok((cross_entropy(&logits, label)?.0, tape.branch_signature()))
        };
        let (logits, tape) = state.forward_logits(&cloud, &mut Rng::new(seed), true)?;
        let signature = tape.branch_signature();
        let (_, dlogits) = cross_entropy(&logits, label)?;
        let mut grads = state.backward(&tape, &dlogits)?;
        if opts.fault == Some(Fault::BackwardSign) {
            grads.scale(-1.0);
        }
        for t in 0..grads.0.len() {
            for idx in 0..grads.0[t].as_slice().len() {
                let orig = state.params()[t].as_slice()[idx];
                state.params_mut()[t].as_mut_slice()[idx] = orig + h;
                let (lp, sp) = eval(&state)?;
                state.params_mut()[t].as_mut_slice()[idx] = orig - h;
                let (lm, sm) = eval(&state)?;
                state.params_mut()[t].as_mut_slice()[idx] = orig;
                if sp != signature || sm != signature {
                    skipped += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.0[t].as_slice()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    Ok((
        worst < 1e-4,
        format!("max rel error {worst:.2e} over {checked} parameters of 7 variants ({skipped} kink crossings skipped)"),
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn invariance_config(variant: Variant) -> ClassifierConfig {
    ClassifierConfig {
        conv_channels: vec![8, 8],
        position_width: 8,
        aggregate_width: 16,
        fc_widths: vec![8, 3],
        k: 8,
        kernel_len: 8,
        dropout: 0.5,
        downsample_ratios: Vec::new(),
        pooling: Pooling::MaxAndSum,
        variant,
        input_features: 0,
    }
}

fn point_order_invariance(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed + 2);
    let mut worst = 0.0f64;
    for t in 0..20 {
        let state = ClassifierState::build(invariance_config(Variant::Full), opts.seed + t)?;
        let cloud = gaussian_cloud(&mut rng, 64)?;
        let shuffled = cloud.select(&rng.permutation(64));
        let (a, _) = state.forward_logits(&cloud, &mut Rng::new(t), true)?;
        let (b, _) = state.forward_logits(&shuffled, &mut Rng::new(t), true)?;
        worst = worst.max(max_diff(&a, &b));
    }
    Ok((
        worst <= 1e-7,
        format!("max logit change {worst:.2e} over 20 clouds"),
    ))
}

/// Largest logit change when every neighbor row (past the center) is
/// shuffled, and the fraction of trials that changed by more than `tol`.
fn neighbor_shuffle_effect(
    variant: Variant,
    seed: u64,
    trials: u64,
    tol: f64,
) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut violated = 0;
    for t in 0..trials {
        let state = ClassifierState::build(invariance_config(variant), seed + t)?;
        let cloud = gaussian_cloud(&mut rng, 64)?;
        let nbr = knn_bruteforce(&cloud, state.config().k)?;
        let mut shuffled = nbr.clone();
        shuffled.shuffle_rows(&mut rng);
        let (a, _) = state.forward_with_index(&cloud, nbr, &mut Rng::new(t), false)?;
        let (b, _) = state.forward_with_index(&cloud, shuffled, &mut Rng::new(t), false)?;
        let d = max_diff(&a, &b);
        worst = worst.max(d);
        if d > tol {
            violated += 1;
        }
    }
    Ok((worst, violated as f64 / trials as f64))
}

fn neighbor_order_invariance(opts: &CheckOptions) -> Result<(bool, String)> {
    let (worst, _) = neighbor_shuffle_effect(Variant::Full, opts.seed + 3, 20, 1e-7)?;
    Ok((
        worst <= 1e-7,
        format!("max logit change {worst:.2e} over 20 clouds"),
    ))
}

fn no_permutation_witness(opts: &CheckOptions) -> Result<(bool, String)> {
    let (_, frac) = neighbor_shuffle_effect(Variant::NoPermutation, opts.seed + 4, 20, 1e-7)?;
    Ok((
        frac >= 0.9,
        format!(
            "no_permutation changed under neighbor shuffles in {:.0}% of trials",
            100.0 * frac
        ),
    ))
}

fn knn_grid_equivalence(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed + 5);
    for t in 0..20 {
        let n = 10 + 50 * t;
        let cloud = gaussian_cloud(&mut rng, n)?;
        let k = 1 + rng.below(16);
        let cell = 0.1 + rng.uniform();
        if knn_grid(&cloud, k, cell)? != knn_bruteforce(&cloud, k)? {
            return Ok((false, format!("mismatch at n={n}, k={k}, cell={cell}")));
        }
    }
    Ok((true, "20 clouds, exact index match".into()))
}

fn lattice_uniformity(opts: &CheckOptions) -> Result<(bool, String)> {
    let fib = fibonacci_lattice(33)?;
    let norms_ok = (1..33).all(|l| {
        let [x, y, z] = fib.point(l);
        ((x * x + y * y + z * z).sqrt() - 1.0).abs() < 1e-12
    });
    let fib_std = uniformity_stats(&fib)?.angle_std;
    let mut rng = Rng::stream(opts.seed, Stream::Kernel);
    let mut total = 0.0;
    for _ in 0..100 {
        total += uniformity_stats(&random_lattice(33, &mut rng)?)?.angle_std;
    }
    let mean = total / 100.0;
    Ok((
        norms_ok && fib_std < mean,
        format!("fibonacci angle std {fib_std:.4} vs random mean {mean:.4}"),
    ))
}

fn cosine_schedule(_: &CheckOptions) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        lr_init: 0.1,
        lr_final: 0.01,
        epochs: 251,
        ..TrainConfig::default()
    };
    let (first, mid, last) = (
        cosine_lr(0, &cfg),
        cosine_lr(125, &cfg),
        cosine_lr(250, &cfg),
    );
    Ok((
        first == 0.1 && last == 0.01 && (mid - 0.055).abs() <= 1e-12,
        format!("lr(0)={first} lr(mid)={mid} lr(last)={last}"),
    ))
}

fn checkpoint_round_trip(opts: &CheckOptions) -> Result<(bool, String)> {
    let ds = synth_shapes(&ShapeClass::DEFAULT, 16, 1, &mut Rng::new(opts.seed))?;
    let state = ClassifierState::build(invariance_config(Variant::LearnableKernel), opts.seed)?;
    let ck = Checkpoint {
        state,
        class_names: ds.class_names.clone(),
    };
    let back = Checkpoint::from_text(&ck.to_text())?;
    let cloud = &ds.samples[0].0;
    let (a, _) = ck.state.forward_logits(cloud, &mut Rng::new(0), false)?;
    let (b, _) = back.state.forward_logits(cloud, &mut Rng::new(0), false)?;
    Ok((
        back == ck && a == b,
        "bit-exact parameters and logits".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_everything() {
        let report = run_checks(&CheckOptions::default());
        for r in &report.results {
            assert!(r.passed, "{r}");
        }
        let names: Vec<&str> = report.results.iter().map(|r| r.name).collect();
        assert_eq!(names, PROPERTIES);
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let report = run_checks(&CheckOptions {
            seed: 0,
            fault: Some(Fault::BackwardSign),
        });
        assert!(!report.all_passed());
        let failed: Vec<&str> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert!(failed.contains(&"network_gradient"));
        assert!(failed.contains(&"sparsemax_jacobian"));
    }

    #[test]
    fn bisection_oracle_agrees_on_known_values() {
        assert_eq!(bisection_projection(&[1.0, 0.0]), vec![1.0, 0.0]);
        let p = bisection_projection(&[0.5, 0.5]);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }
}
