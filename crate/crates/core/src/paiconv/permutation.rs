//! Soft-permutation matrices `Mᵢ ∈ R^{K×L}` and their backward pass.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::lattice::KernelLattice;
use crate::neighbors::{NeighborIndex, PointCloud};
use crate::numkit::{
    softmax_in_place, softmax_jvp_into, sparsemax_columns_in_place, sparsemax_jvp_into,
    ColumnScratch, Matrix,
};

/// Column normalizer applied to the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    Sparsemax,
    Softmax,
    /// Logits used as-is.
    Raw,
}

/// How slot weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRule {
    /// Dot product with kernel points, normalized per kernel column.
    Attention(Normalizer),
    /// Column `l` selects neighbor slot `min(l, K−1)`.
    RawOrder,
    /// Every column is `1/K` on every neighbor.
    Uniform,
}

/// Stacked per-point `K × L` matrices, row-major per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTensor {
    n: usize,
    k: usize,
    l: usize,
    rule: SlotRule,
    weights: Vec<f64>,
}

impl PermutationTensor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn rule(&self) -> SlotRule {
        self.rule
    }

    /// All weights, index `(i·K + j)·L + l`.
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// `Mᵢ` as a `K × L` row-major slice.
    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let s = self.k * self.l;
        &self.weights[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.weights[(i * self.k + j) * self.l + l]
    }

    /// Whether the weights depend on positions (and so have a backward).
    pub fn is_differentiable(&self) -> bool {
        matches!(self.rule, SlotRule::Attention(_))
    }

    /// Mean fraction of nonzero entries per kernel column `l ≥ 1`.
    pub fn column_density(&self) -> f64 {
        if self.l < 2 || self.n == 0 {
            return 0.0;
        }
        let mut nonzero = 0usize;
        for i in 0..self.n {
            let m = self.point(i);
            for j in 0..self.k {
                nonzero += m[j * self.l + 1..(j + 1) * self.l]
                    .iter()
                    .filter(|&&w| w != 0.0)
                    .count();
            }
        }
        nonzero as f64 / (self.n * self.k * (self.l - 1)) as f64
    }
}

/// `p̃ᵢⱼ = pᵢ − p_nbr(i,j)` as an `(n·K) × 3` matrix; row `i·K` is zero.
pub fn local_positions(cloud: &PointCloud, nbr: &NeighborIndex) -> Result<Matrix> {
    ensure!(
        nbr.len() == cloud.len(),
        "neighbor table has {} rows for {} points",
        nbr.len(),
        cloud.len()
    );
    let k = nbr.k();
    let coords = cloud.coords();
    let mut out = Matrix::zeros(cloud.len() * k, 3);
    for i in 0..cloud.len() {
        let pi = coords.row(i);
        for (j, &src) in nbr.row(i).iter().enumerate() {
            let pj = coords.row(src);
            let row = out.row_mut(i * k + j);
            for c in 0..3 {
                row[c] = pi[c] - pj[c];
            }
        }
    }
    Ok(out)
}

/// `Mᵢ = f(P̃ᵢ Kᵀ)` per point, normalized over the K neighbors of each
/// kernel column `l ≥ 1`. Column 0 is overwritten with the center
/// indicator.
pub fn build_permutation(
    local: &Matrix,
    k: usize,
    kernel: &KernelLattice,
    mode: Normalizer,
) -> Result<PermutationTensor> {
    ensure!(k >= 1, "k must be at least 1");
    ensure!(
        local.cols() == 3 && local.rows() % k == 0,
        "local positions must be (n*k) x 3"
    );
    let n = local.rows() / k;
    let l = kernel.len();
    let kp = kernel.points();
    let axis = |a: usize| -> Vec<f64> { (0..l).map(|col| kp.row(col)[a]).collect() };
    let (kx, ky, kz) = (axis(0), axis(1), axis(2));
    let mut weights = vec![0.0; n * k * l];
    let finite = weights
        .par_chunks_mut(k * l)
        .enumerate()
        .map_init(
            || (vec![0.0; k], ColumnScratch::default()),
            |(column, scratch), (i, m)| {
                let rows = &local.as_slice()[i * k * 3..(i + 1) * k * 3];
                let finite = if mode == Normalizer::Sparsemax {
                    let mut finite = true;
                    for (mrow, p) in m.chunks_exact_mut(l).zip(rows.chunks_exact(3)) {
                        for c in 0..l {
                            let w = p[0] * kx[c] + p[1] * ky[c] + p[2] * kz[c];
                            finite &= w.is_finite();
                            mrow[c] = w;
                        }
                    }
                    finite & sparsemax_columns_in_place(m, l, scratch)
                } else {
                    for col in 1..l {
                        let q = kp.row(col);
                        for (c, p) in column.iter_mut().zip(rows.chunks_exact(3)) {
                            *c = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
                        }
                        if mode == Normalizer::Softmax {
                            softmax_in_place(column);
                        }
                        for (j, &c) in column.iter().enumerate() {
                            m[j * l + col] = c;
                        }
                    }
                    all_finite(&m[1..])
                };
                m[0] = 1.0;
                for j in 1..k {
                    m[j * l] = 0.0;
                }
                finite
            },
        )
        .reduce(|| true, |a, b| a & b);
    ensure!(finite, "non-finite permutation weights");
    Ok(PermutationTensor {
        n,
        k,
        l,
        rule: SlotRule::Attention(mode),
        weights,
    })
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().fold(true, |ok, v| ok & v.is_finite())
}

/// Position-independent slot weights for the `RawOrder` and `Uniform` rules.
pub fn fixed_permutation(
    n: usize,
    k: usize,
    l: usize,
    rule: SlotRule,
) -> Result<PermutationTensor> {
    ensure!(k >= 1 && l >= 1, "k and l must be positive");
    let mut weights = vec![0.0; n * k * l];
    match rule {
        SlotRule::RawOrder => {
            for m in weights.chunks_exact_mut(k * l) {
                for col in 0..l {
                    m[col.min(k - 1) * l + col] = 1.0;
                }
            }
        }
        SlotRule::Uniform => weights.fill(1.0 / k as f64),
        SlotRule::Attention(_) => {
            return Err(crate::Error::contract(
                "attention permutations are built from positions",
            ))
        }
    }
    Ok(PermutationTensor {
        n,
        k,
        l,
        rule,
        weights,
    })
}

/// Gradients of a scalar loss through `build_permutation`.
#[derive(Debug, Clone)]
pub struct PermutationGrads {
    /// `L × 3`; row 0 (the origin) is always zero.
    pub kernel: Matrix,
    /// `(n·K) × 3`.
    pub local: Matrix,
}

/// Backpropagates `∂loss/∂M` to the kernel points and local positions.
/// Column 0 of every `Mᵢ` is a constant and passes no gradient.
pub fn permutation_backward(
    perm: &PermutationTensor,
    local: &Matrix,
    kernel: &KernelLattice,
    d_weights: &[f64],
) -> Result<PermutationGrads> {
    let (n, k, l) = (perm.n, perm.k, perm.l);
    ensure!(d_weights.len() == perm.weights.len(), "dM shape mismatch");
    ensure!(
        local.rows() == n * k && local.cols() == 3,
        "local shape mismatch"
    );
    ensure!(kernel.len() == l, "kernel size mismatch");
    let mut d_kernel = Matrix::zeros(l, 3);
    let mut d_local = Matrix::zeros(n * k, 3);
    let mode = match perm.rule {
        SlotRule::Attention(mode) => mode,
        _ => {
            return Ok(PermutationGrads {
                kernel: d_kernel,
                local: d_local,
            })
        }
    };
    // dZ per point: the normalizer's JVP applied to each column l >= 1.
    let mut d_logits = vec![0.0; n * k * l];
    d_logits.par_chunks_mut(k * l).enumerate().for_each_init(
        || (vec![0.0; k], vec![0.0; k], vec![0.0; k]),
        |(p, u, out), (i, dz)| {
            let m = perm.point(i);
            let dm = &d_weights[i * k * l..(i + 1) * k * l];
            for col in 1..l {
                for j in 0..k {
                    p[j] = m[j * l + col];
                    u[j] = dm[j * l + col];
                }
                match mode {
                    Normalizer::Sparsemax => sparsemax_jvp_into(p, u, out),
                    Normalizer::Softmax => softmax_jvp_into(p, u, out),
                    Normalizer::Raw => out.copy_from_slice(u),
                }
                for j in 0..k {
                    dz[j * l + col] = out[j];
                }
            }
        },
    );
    let kp = kernel.points();
    for i in 0..n {
        let dz = &d_logits[i * k * l..(i + 1) * k * l];
        for j in 0..k {
            let p = local.row(i * k + j);
            let dzr = &dz[j * l..(j + 1) * l];
            let dp = d_local.row_mut(i * k + j);
            for col in 1..l {
                let g = dzr[col];
                if g == 0.0 {
                    continue;
                }
                let q = kp.row(col);
                for c in 0..3 {
                    dp[c] += g * q[c];
                }
            }
            for col in 1..l {
                let g = dzr[col];
                if g == 0.0 {
                    continue;
                }
                let dk = d_kernel.row_mut(col);
                for c in 0..3 {
                    dk[c] += g * p[c];
                }
            }
        }
    }
    Ok(PermutationGrads {
        kernel: d_kernel,
        local: d_local,
    })
}
