use rayon::prelude::*;

use super::permutation::PermutationTensor;
use super::Variant;
use crate::error::{ensure, Error, Result};
use crate::neighbors::{NeighborIndex, PointCloud};
use crate::numkit::{elu_grad_scalar, elu_scalar, matmul, matmul_nt, matmul_tn, Matrix, Rng};

/// `[pᵢ, pᵢ − pᵢⱼ, ‖pᵢ − pᵢⱼ‖]`
pub const POSITION_INPUT_WIDTH: usize = 7;

/// One PAI-Conv layer: position MLP plus the (an)isotropic filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PaiConvLayer {
    variant: Variant,
    d_pos: usize,
    d_feat: usize,
    d_out: usize,
    kernel_len: usize,
    /// `(d_in·L) × d_out`, or `d_in × d_out` for the isotropic variant.
    pub filter: Matrix,
    /// `1 × d_out`
    pub bias: Matrix,
    /// `7 × d_pos`
    pub pos_weight: Matrix,
    /// `1 × d_pos`
    pub pos_bias: Matrix,
}

/// Forward state of the filter stage.
#[derive(Debug, Clone)]
pub struct ConvTape {
    n: usize,
    k: usize,
    /// `(n·K) × d_in` neighbor features.
    x: Matrix,
    /// `n × (L·d_in)` resampled neighborhoods, or `n × d_in` slot means.
    resampled: Matrix,
    pre: Matrix,
}

/// Forward state of the whole layer.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pos_inputs: Matrix,
    pos_pre: Matrix,
    conv: ConvTape,
}

impl LayerTape {
    pub fn conv(&self) -> &ConvTape {
        &self.conv
    }

    /// Pre-activation outputs, `n × d_out`.
    pub fn pre_activation(&self) -> &Matrix {
        &self.conv.pre
    }

    /// Pre-activation position codes, `(n·K) × d_pos`.
    pub fn position_pre_activation(&self) -> &Matrix {
        &self.pos_pre
    }
}

impl ConvTape {
    /// Assembled neighbor features `X`, `(n·K) × d_in`.
    pub fn features(&self) -> &Matrix {
        &self.x
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub filter: Matrix,
    pub bias: Matrix,
    pub pos_weight: Matrix,
    pub pos_bias: Matrix,
    /// `∂/∂X`, `(n·K) × d_in`.
    pub x: Matrix,
    /// `∂/∂f` scattered back to the `n × d_feat` input features.
    pub features: Option<Matrix>,
    /// `∂/∂M`, same layout as [`PermutationTensor::as_slice`]. Empty when the
    /// permutation is position-independent.
    pub perm: Vec<f64>,
}

fn fan_in_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// `(n·K) × 7` inputs to the position MLP.
pub fn position_inputs(cloud: &PointCloud, nbr: &NeighborIndex) -> Result<Matrix> {
    ensure!(
        nbr.len() == cloud.len(),
        "neighbor table does not match cloud"
    );
    let k = nbr.k();
    let coords = cloud.coords();
    let mut e = Matrix::zeros(cloud.len() * k, POSITION_INPUT_WIDTH);
    for i in 0..cloud.len() {
        let pi = coords.row(i);
        for (j, &src) in nbr.row(i).iter().enumerate() {
            let pj = coords.row(src);
            let row = e.row_mut(i * k + j);
            let d = [pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]];
            row[..3].copy_from_slice(pi);
            row[3..6].copy_from_slice(&d);
            row[6] = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
    }
    Ok(e)
}

/// Relative position codes `rᵢⱼ`, `(n·K) × d_pos`.
pub fn encode_position(
    cloud: &PointCloud,
    nbr: &NeighborIndex,
    layer: &PaiConvLayer,
) -> Result<Matrix> {
    let e = position_inputs(cloud, nbr)?;
    Ok(layer.position_pre(&e)?.map(elu_scalar))
}

/// Rows `[rᵢⱼ, f_nbr(i,j)]`, `(n·K) × (d_pos + d_feat)`.
pub fn assemble_features(
    codes: &Matrix,
    features: Option<&Matrix>,
    nbr: &NeighborIndex,
) -> Result<Matrix> {
    let k = nbr.k();
    let n = nbr.len();
    ensure!(
        codes.rows() == n * k,
        "position codes have {} rows, expected {}",
        codes.rows(),
        n * k
    );
    let Some(f) = features else {
        return Ok(codes.clone());
    };
    ensure!(
        f.rows() == n,
        "features have {} rows for {} points",
        f.rows(),
        n
    );
    let gathered = f.gather_rows(nbr.as_slice());
    Matrix::hconcat(&[codes, &gathered])
}

impl PaiConvLayer {
    /// Fan-in uniform weights, zero biases.
    pub fn new(
        d_feat: usize,
        d_pos: usize,
        d_out: usize,
        kernel_len: usize,
        variant: Variant,
        rng: &mut Rng,
    ) -> Result<Self> {
        ensure!(d_out >= 1, "output width must be positive");
        ensure!(d_feat + d_pos >= 1, "input width must be positive");
        ensure!(kernel_len >= 2, "need at least two kernel points");
        let d_in = d_feat + d_pos;
        let rows = if variant.is_isotropic() {
            d_in
        } else {
            d_in * kernel_len
        };
        let filter = fan_in_uniform(rows, d_out, rng);
        let pos_weight = fan_in_uniform(POSITION_INPUT_WIDTH, d_pos, rng);
        Ok(Self {
            variant,
            d_pos,
            d_feat,
            d_out,
            kernel_len,
            filter,
            bias: Matrix::zeros(1, d_out),
            pos_weight,
            pos_bias: Matrix::zeros(1, d_pos),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn d_in(&self) -> usize {
        self.d_pos + self.d_feat
    }

    pub fn d_pos(&self) -> usize {
        self.d_pos
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Parameter tensors in a fixed order: filter, bias, position weight,
    /// position bias.
    pub fn params(&self) -> [&Matrix; 4] {
        [&self.filter, &self.bias, &self.pos_weight, &self.pos_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.filter,
            &mut self.bias,
            &mut self.pos_weight,
            &mut self.pos_bias,
        ]
    }

    fn position_pre(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut pre = matmul(inputs, &self.pos_weight)?;
        pre.add_row_vector(self.pos_bias.as_slice())?;
        Ok(pre)
    }

    fn check_perm(&self, perm: &PermutationTensor, n: usize, k: usize) -> Result<()> {
        ensure!(
            perm.n() == n && perm.k() == k && perm.l() == self.kernel_len,
            "permutation is {}x{}x{}, layer expects {}x{}x{}",
            perm.n(),
            perm.k(),
            perm.l(),
            n,
            k,
            self.kernel_len
        );
        Ok(())
    }

    /// Resample and filter: `yᵢ = ELU(vec(Xᵢ Mᵢ)ᵀ W + b)`.
    ///
    /// `x` holds the K neighbor rows of every point, `(n·K) × d_in`.
    pub fn convolve(&self, x: &Matrix, perm: &PermutationTensor) -> Result<(Matrix, ConvTape)> {
        let d_in = self.d_in();
        ensure!(
            x.cols() == d_in,
            "neighbor features have width {}, layer expects {}",
            x.cols(),
            d_in
        );
        let (n, k, l) = (perm.n(), perm.k(), perm.l());
        ensure!(
            x.rows() == n * k,
            "neighbor features do not match permutation"
        );
        self.check_perm(perm, n, k)?;

        let mut resampled = Matrix::zeros(n, l * d_in);
        resampled
            .as_mut_slice()
            .par_chunks_mut((l * d_in).max(1))
            .enumerate()
            .for_each(|(i, v)| {
                let m = perm.point(i);
                for j in 0..k {
                    let xr = x.row(i * k + j);
                    for col in 0..l {
                        let w = m[j * l + col];
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut v[col * d_in..(col + 1) * d_in];
                        for (o, &xv) in dst.iter_mut().zip(xr) {
                            *o += w * xv;
                        }
                    }
                }
            });
        if self.variant.is_isotropic() {
            resampled = slot_mean(&resampled, l, d_in);
        }
        let mut pre = matmul(&resampled, &self.filter)?;
        pre.add_row_vector(self.bias.as_slice())?;
        let y = pre.map(elu_scalar);
        if !y.is_finite() {
            return Err(Error::NonFinite(format!(
                "PAI-Conv output ({} -> {}, variant {})",
                d_in, self.d_out, self.variant
            )));
        }
        Ok((
            y,
            ConvTape {
                n,
                k,
                x: x.clone(),
                resampled,
                pre,
            },
        ))
    }

    /// Reverse of [`convolve`](Self::convolve). Returns gradients for the
    /// filter, bias, `X` and (for attention permutations) `M`; the position
    /// fields are left empty.
    pub fn convolve_backward(
        &self,
        tape: &ConvTape,
        perm: &PermutationTensor,
        dy: &Matrix,
    ) -> Result<LayerGrads> {
        let d_in = self.d_in();
        let (n, k, l) = (tape.n, tape.k, self.kernel_len);
        self.check_perm(perm, n, k)?;
        ensure!(
            dy.shape() == (n, self.d_out),
            "upstream gradient is {:?}, expected {:?}",
            dy.shape(),
            (n, self.d_out)
        );
        let mut dpre = dy.clone();
        for (g, &p) in dpre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
            *g *= elu_grad_scalar(p);
        }
        let d_filter = matmul_tn(&tape.resampled, &dpre)?;
        let d_bias = Matrix::from_vec(1, self.d_out, dpre.col_sums())?;
        let mut d_resampled = matmul_nt(&dpre, &self.filter)?;
        if self.variant.is_isotropic() {
            d_resampled = slot_mean_backward(&d_resampled, l);
        }

        let want_perm = perm.is_differentiable();
        let mut dx = Matrix::zeros(n * k, d_in);
        let mut dperm = if want_perm {
            vec![0.0; n * k * l]
        } else {
            Vec::new()
        };
        let per_point = |i: usize, dxi: &mut [f64], dmi: Option<&mut [f64]>| {
            let m = perm.point(i);
            let dv = d_resampled.row(i);
            for j in 0..k {
                let dxr = &mut dxi[j * d_in..(j + 1) * d_in];
                for col in 0..l {
                    let w = m[j * l + col];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &g) in dxr.iter_mut().zip(&dv[col * d_in..(col + 1) * d_in]) {
                        *o += w * g;
                    }
                }
            }
            if let Some(dm) = dmi {
                for j in 0..k {
                    let xr = tape.x.row(i * k + j);
                    for col in 0..l {
                        dm[j * l + col] = crate::numkit::dot(xr, &dv[col * d_in..(col + 1) * d_in]);
                    }
                }
            }
        };
        let row_block = (k * d_in).max(1);
        if want_perm {
            dx.as_mut_slice()
                .par_chunks_mut(row_block)
                .zip(dperm.par_chunks_mut(k * l))
                .enumerate()
                .for_each(|(i, (dxi, dmi))| per_point(i, dxi, Some(dmi)));
        } else {
            dx.as_mut_slice()
                .par_chunks_mut(row_block)
                .enumerate()
                .for_each(|(i, dxi)| per_point(i, dxi, None));
        }
        Ok(LayerGrads {
            filter: d_filter,
            bias: d_bias,
            pos_weight: Matrix::zeros(POSITION_INPUT_WIDTH, self.d_pos),
            pos_bias: Matrix::zeros(1, self.d_pos),
            x: dx,
            features: None,
            perm: dperm,
        })
    }

    /// Full layer: position code, feature assembly, resampling and filter.
    pub fn forward(
        &self,
        cloud: &PointCloud,
        nbr: &NeighborIndex,
        features: Option<&Matrix>,
        perm: &PermutationTensor,
    ) -> Result<(Matrix, LayerTape)> {
        ensure!(
            features.map_or(0, Matrix::cols) == self.d_feat,
            "layer expects {} feature channels, got {}",
            self.d_feat,
            features.map_or(0, Matrix::cols)
        );
        let pos_inputs = position_inputs(cloud, nbr)?;
        let pos_pre = self.position_pre(&pos_inputs)?;
        let codes = pos_pre.map(elu_scalar);
        let x = assemble_features(&codes, features, nbr)?;
        let (y, conv) = self.convolve(&x, perm)?;
        Ok((
            y,
            LayerTape {
                pos_inputs,
                pos_pre,
                conv,
            },
        ))
    }

    /// Reverse of [`forward`](Self::forward).
    pub fn backward(
        &self,
        tape: &LayerTape,
        perm: &PermutationTensor,
        nbr: &NeighborIndex,
        dy: &Matrix,
    ) -> Result<LayerGrads> {
        let mut grads = self.convolve_backward(&tape.conv, perm, dy)?;
        let k = nbr.k();
        let n = tape.conv.n;
        ensure!(
            nbr.len() == n && k == tape.conv.k,
            "neighbor table does not match tape"
        );
        let parts = grads.x.hsplit(&[self.d_pos, self.d_feat])?;
        let (d_codes, d_gathered) = (&parts[0], &parts[1]);
        if self.d_feat > 0 {
            let mut df = Matrix::zeros(n, self.d_feat);
            for (row, &src) in nbr.as_slice().iter().enumerate() {
                let g = d_gathered.row(row);
                for (o, &v) in df.row_mut(src).iter_mut().zip(g) {
                    *o += v;
                }
            }
            grads.features = Some(df);
        }
        let mut d_pos_pre = d_codes.clone();
        for (g, &p) in d_pos_pre
            .as_mut_slice()
            .iter_mut()
            .zip(tape.pos_pre.as_slice())
        {
            *g *= elu_grad_scalar(p);
        }
        grads.pos_weight = matmul_tn(&tape.pos_inputs, &d_pos_pre)?;
        grads.pos_bias = Matrix::from_vec(1, self.d_pos, d_pos_pre.col_sums())?;
        Ok(grads)
    }
}

fn slot_mean(resampled: &Matrix, l: usize, d_in: usize) -> Matrix {
    let n = resampled.rows();
    let mut out = Matrix::zeros(n, d_in);
    let scale = 1.0 / l as f64;
    for i in 0..n {
        let v = resampled.row(i);
        let o = out.row_mut(i);
        for col in 0..l {
            for (a, &b) in o.iter_mut().zip(&v[col * d_in..(col + 1) * d_in]) {
                *a += b;
            }
        }
        for a in o.iter_mut() {
            *a *= scale;
        }
    }
    out
}

fn slot_mean_backward(d_mean: &Matrix, l: usize) -> Matrix {
    let (n, d_in) = d_mean.shape();
    let mut out = Matrix::zeros(n, l * d_in);
    let scale = 1.0 / l as f64;
    for i in 0..n {
        let g = d_mean.row(i);
        let o = out.row_mut(i);
        for col in 0..l {
            for (a, &b) in o[col * d_in..(col + 1) * d_in].iter_mut().zip(g) {
                *a = b * scale;
            }
        }
    }
    out
}
