//! Activations and normalizers: ELU, sparsemax, softmax and their
//! Jacobian-vector products.

use super::Matrix;
use crate::error::{ensure, Result};

const ELU_ALPHA: f64 = 1.0;

#[inline]
pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ELU_ALPHA * x.exp_m1()
    }
}

/// Derivative of ELU. At the kink (x = 0) this takes the left branch, value 1.
#[inline]
pub fn elu_grad_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        elu_scalar(x) + ELU_ALPHA
    }
}

pub fn elu(x: &Matrix) -> Matrix {
    x.map(elu_scalar)
}

pub fn elu_grad(x: &Matrix) -> Matrix {
    x.map(elu_grad_scalar)
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    ensure!(!z.is_empty(), "sparsemax of an empty vector");
    ensure!(
        z.iter().all(|x| x.is_finite()),
        "sparsemax input not finite"
    );
    let mut out = z.to_vec();
    sparsemax_in_place(&mut out);
    Ok(out)
}

#[inline]
fn positive_part(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// In-place sparsemax, thresholded with [`pivot_threshold`].
pub fn sparsemax_in_place(z: &mut [f64]) {
    debug_assert!(!z.is_empty());
    let tau = pivot_threshold(z);
    for v in z.iter_mut() {
        *v = positive_part(*v - tau);
    }
}

/// The threshold τ such that `sparsemax(z)ᵢ = max(zᵢ − τ, 0)`, by the
/// sort-and-scan rule: sort descending, keep the largest `k` with
/// `1 + k·z₍ₖ₎ > Σⱼ≤ₖ z₍ⱼ₎` (strict), and set `τ = (Σⱼ≤ₖ z₍ⱼ₎ − 1)/k`.
///
/// `scratch` is reused across calls; its contents on entry are ignored.
pub fn sparsemax_threshold(z: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(z);
    // Equal values are interchangeable here, so the unstable sort gives the
    // same threshold as a stable one.
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = scratch[0];
    let mut support = 1usize;
    for (k0, &v) in scratch.iter().enumerate() {
        let k = (k0 + 1) as f64;
        cumsum += v;
        if 1.0 + k * v > cumsum {
            support = k0 + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// The same threshold as [`sparsemax_threshold`] without sorting: starting
/// from the full support, keep the entries above the current threshold and
/// recompute it from them until the kept set stops shrinking. The threshold
/// never decreases and never overshoots, so at most `len + 1` passes are
/// needed; short vectors usually settle in two or three.
pub fn pivot_threshold(z: &[f64]) -> f64 {
    let mut count = usize::MAX;
    let mut tau = f64::NEG_INFINITY;
    loop {
        let (sum, kept) = masked_sum(z, tau);
        if kept == count || kept == 0 {
            return tau;
        }
        count = kept;
        tau = (sum - 1.0) / kept as f64;
    }
}

/// Sum and count of the entries above `tau`.
fn masked_sum(z: &[f64], tau: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut kept = 0usize;
    for &v in z {
        let inside = v > tau;
        sum += if inside { v } else { 0.0 };
        kept += inside as usize;
    }
    (sum, kept)
}

/// Reusable buffers for [`sparsemax_columns_in_place`].
#[derive(Debug, Clone, Default)]
pub struct ColumnScratch {
    tau: Vec<f64>,
    sum: Vec<f64>,
    low: Vec<f64>,
}

/// Sparsemax of every column of a row-major block with `cols` columns.
///
/// One vectorized pass over the rows gives every column's full-support
/// threshold and minimum. Columns whose minimum clears that threshold are
/// done; the rest continue the [`pivot_threshold`] iteration on their own.
/// For finite input each column gets bit for bit the result of
/// [`sparsemax_in_place`] on that column. Returns whether every threshold
/// is finite.
pub fn sparsemax_columns_in_place(
    block: &mut [f64],
    cols: usize,
    scratch: &mut ColumnScratch,
) -> bool {
    debug_assert!(cols > 0 && !block.is_empty() && block.len() % cols == 0);
    let ColumnScratch { tau, sum, low } = scratch;
    for buf in [&mut *tau, &mut *sum, &mut *low] {
        buf.clear();
        buf.resize(cols, 0.0);
    }
    low.fill(f64::INFINITY);
    for row in block.chunks_exact(cols) {
        for ((s, m), &v) in sum.iter_mut().zip(low.iter_mut()).zip(row) {
            *s += v;
            *m = if v < *m { v } else { *m };
        }
    }
    let rows = block.len() / cols;
    for c in 0..cols {
        tau[c] = (sum[c] - 1.0) / rows as f64;
        if low[c] > tau[c] {
            continue;
        }
        let mut count = rows;
        loop {
            let mut s = 0.0;
            let mut kept = 0usize;
            for j in 0..rows {
                let v = block[j * cols + c];
                if v > tau[c] {
                    s += v;
                    kept += 1;
                }
            }
            if kept == count || kept == 0 {
                break;
            }
            count = kept;
            tau[c] = (s - 1.0) / kept as f64;
        }
    }
    for row in block.chunks_exact_mut(cols) {
        for (v, &t) in row.iter_mut().zip(tau.iter()) {
            *v = positive_part(*v - t);
        }
    }
    tau.iter().all(|t| t.is_finite())
}

/// `J · upstream` where `J` is the Jacobian of sparsemax at the point whose
/// output is `p`: `J = diag(s) − s·sᵀ/|S|` with `s` the support indicator.
/// The Jacobian is symmetric, so this is also the vector-Jacobian product.
pub fn sparsemax_jacobian_vp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    sparsemax_jvp_into(p, upstream, &mut out);
    out
}

pub(crate) fn sparsemax_jvp_into(p: &[f64], upstream: &[f64], out: &mut [f64]) {
    debug_assert_eq!(p.len(), upstream.len());
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&pi, &ui) in p.iter().zip(upstream) {
        if pi > 0.0 {
            count += 1;
            sum += ui;
        }
    }
    assert!(count > 0, "sparsemax output with empty support");
    let mean = sum / count as f64;
    for ((o, &pi), &ui) in out.iter_mut().zip(p).zip(upstream) {
        *o = if pi > 0.0 { ui - mean } else { 0.0 };
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `J · upstream` for softmax with output `p`: `p ⊙ (u − pᵀu)`.
pub fn softmax_jacobian_vp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    softmax_jvp_into(p, upstream, &mut out);
    out
}

pub(crate) fn softmax_jvp_into(p: &[f64], upstream: &[f64], out: &mut [f64]) {
    let pu = super::dot(p, upstream);
    for ((o, &pi), &ui) in out.iter_mut().zip(p).zip(upstream) {
        *o = pi * (ui - pu);
    }
}
