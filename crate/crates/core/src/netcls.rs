//! Point cloud classifier built from stacked PAI-Conv layers.
//!
//! ```text
//! cloud ─ KNN ─ M ─┬─ conv₀ ─┬─ conv₁ ─ … ─ conv_S
//!                  │         │               │
//!                  └─ concat(y₀, y₁, …, y_S) ┘ ─ shared MLP ─ pool ─ [dropout ─ FC]×2 ─ logits
//! ```
//!
//! Without downsampling every stage shares one neighbor table and one
//! permutation tensor. With downsampling ratios, each stage first keeps a
//! random subset of the previous stage's points and rebuilds both; earlier
//! stage outputs reach the shortcut concatenation through the sample maps.

use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::lattice::KernelLattice;
use crate::neighbors::{knn_bruteforce, knn_grid, random_downsample, NeighborIndex, PointCloud};
use crate::numkit::{
    elu_grad_scalar, elu_scalar, matmul, matmul_nt, matmul_tn, Matrix, Rng, Stream,
};
use crate::paiconv::{
    build_permutation, fixed_permutation, local_positions, make_variant, permutation_backward,
    LayerTape, PaiConvLayer, PermutationTensor, SlotRule, Variant,
};

/// Global pooling over points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Sum,
    /// `[max, sum]` concatenated.
    MaxAndSum,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Sum => "sum",
            Pooling::MaxAndSum => "max_and_sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "sum" => Ok(Pooling::Sum),
            "max_and_sum" => Ok(Pooling::MaxAndSum),
            other => Err(Error::contract(format!("unknown pooling `{other}`"))),
        }
    }

    /// Width of the pooled descriptor for `channels` input channels.
    pub fn width(self, channels: usize) -> usize {
        match self {
            Pooling::MaxAndSum => 2 * channels,
            _ => channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub conv_channels: Vec<usize>,
    /// Width of the position code `r` inside every PAI-Conv layer.
    pub position_width: usize,
    pub aggregate_width: usize,
    /// Hidden FC widths followed by the number of classes.
    pub fc_widths: Vec<usize>,
    /// Neighbors per point, self included.
    pub k: usize,
    /// Kernel points, origin included.
    pub kernel_len: usize,
    pub dropout: f64,
    /// One ratio per conv stage, or empty for no downsampling.
    pub downsample_ratios: Vec<usize>,
    pub pooling: Pooling,
    pub variant: Variant,
    /// Per-point input feature channels (0 = coordinates only).
    pub input_features: usize,
}

impl ClassifierConfig {
    /// The published ModelNet40 configuration.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            conv_channels: vec![64, 64, 128, 256],
            position_width: 8,
            aggregate_width: 2048,
            fc_widths: vec![512, num_classes],
            k: 40,
            kernel_len: 32,
            dropout: 0.5,
            downsample_ratios: Vec::new(),
            pooling: Pooling::MaxAndSum,
            variant: Variant::Full,
            input_features: 0,
        }
    }

    /// Laptop-sized configuration for the synthetic shape task.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            conv_channels: vec![16, 16, 32],
            position_width: 8,
            aggregate_width: 64,
            fc_widths: vec![32, num_classes],
            k: 16,
            kernel_len: 16,
            dropout: 0.5,
            downsample_ratios: Vec::new(),
            pooling: Pooling::Max,
            variant: Variant::Full,
            input_features: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.conv_channels.is_empty(),
            "need at least one conv stage"
        );
        ensure!(
            self.conv_channels.iter().all(|&c| c >= 1),
            "conv widths must be positive"
        );
        ensure!(
            self.aggregate_width >= 1,
            "aggregate width must be positive"
        );
        ensure!(!self.fc_widths.is_empty(), "need at least one FC layer");
        ensure!(
            self.fc_widths.iter().all(|&c| c >= 1),
            "FC widths must be positive"
        );
        ensure!(self.k >= 1, "k must be at least 1");
        ensure!(self.kernel_len >= 2, "kernel needs at least two points");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0, 1)"
        );
        ensure!(
            self.downsample_ratios.is_empty()
                || self.downsample_ratios.len() == self.conv_channels.len(),
            "need one downsampling ratio per conv stage"
        );
        ensure!(
            self.downsample_ratios.iter().all(|&r| r >= 1),
            "downsampling ratios must be at least 1"
        );
        ensure!(
            self.position_width + self.input_features >= 1,
            "first layer has no input channels"
        );
        Ok(())
    }
}

/// Fully connected layer, `out = in · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("shape"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn apply(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = matmul(input, &self.weight)?;
        out.add_row_vector(self.bias.as_slice())?;
        Ok(out)
    }
}

/// All parameters of a classifier plus its optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    config: ClassifierConfig,
    pub kernel: KernelLattice,
    pub convs: Vec<PaiConvLayer>,
    pub aggregate: Dense,
    pub head: Vec<Dense>,
    /// Momentum buffers, one per tensor of [`params`](Self::params).
    pub velocity: Vec<Matrix>,
}

/// Gradients aligned with [`ClassifierState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn zeros_like(state: &ClassifierState) -> Self {
        Gradients(
            state
                .params()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        )
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        ensure!(self.0.len() == other.0.len(), "gradient sets differ");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.0 {
            for v in m.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }
}

/// Neighbor table, local positions and permutation for one resolution.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub cloud: PointCloud,
    pub nbr: NeighborIndex,
    pub local: Matrix,
    pub perm: PermutationTensor,
}

#[derive(Debug)]
struct StageTape {
    geometry: Arc<Geometry>,
    /// Indices kept from the previous stage's points (downsampling only).
    kept: Option<Vec<usize>>,
    layer: LayerTape,
    output: Matrix,
}

#[derive(Debug)]
struct HeadTape {
    mask: Option<Vec<f64>>,
    input: Matrix,
    pre: Matrix,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug)]
pub struct ForwardTape {
    stages: Vec<StageTape>,
    /// For each stage, the rows of its output that survive to the final
    /// resolution.
    to_final: Vec<Vec<usize>>,
    concat: Matrix,
    agg_pre: Matrix,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    head: Vec<HeadTape>,
}

impl ForwardTape {
    /// Whether stages `a` and `b` used the very same neighbor table and
    /// permutation tensor.
    pub fn stages_share_geometry(&self, a: usize, b: usize) -> bool {
        Arc::ptr_eq(&self.stages[a].geometry, &self.stages[b].geometry)
    }

    pub fn geometry(&self, stage: usize) -> &Geometry {
        &self.stages[stage].geometry
    }

    /// Pooled global feature before dropout.
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Which side of every non-smooth point the pass took: ELU input signs,
    /// permutation supports and pooling winners. Two passes with equal
    /// signatures lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> Vec<u64> {
        let signs = |m: &Matrix| {
            m.as_slice()
                .iter()
                .map(|&v| u64::from(v > 0.0))
                .collect::<Vec<_>>()
        };
        let mut sig = Vec::new();
        for st in &self.stages {
            sig.extend(signs(st.layer.pre_activation()));
            sig.extend(signs(st.layer.position_pre_activation()));
            sig.extend(
                st.geometry
                    .perm
                    .as_slice()
                    .iter()
                    .map(|&w| u64::from(w > 0.0)),
            );
        }
        sig.extend(signs(&self.agg_pre));
        sig.extend(self.argmax.iter().map(|&i| i as u64));
        for h in &self.head {
            sig.extend(signs(&h.pre));
        }
        sig
    }
}

impl ClassifierState {
    pub fn build(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Rng::stream(seed, Stream::Init);
        let mut kernel_rng = Rng::stream(seed, Stream::Kernel);
        let setup = make_variant(config.variant, config.kernel_len, &mut kernel_rng)?;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut d_feat = config.input_features;
        for &c in &config.conv_channels {
            convs.push(PaiConvLayer::new(
                d_feat,
                config.position_width,
                c,
                config.kernel_len,
                config.variant,
                &mut init,
            )?);
            d_feat = c;
        }
        let concat: usize = config.conv_channels.iter().sum();
        let aggregate = Dense::new(concat, config.aggregate_width, &mut init);
        let mut head = Vec::new();
        let mut width = config.pooling.width(config.aggregate_width);
        for &w in &config.fc_widths {
            head.push(Dense::new(width, w, &mut init));
            width = w;
        }
        let mut state = Self {
            config,
            kernel: setup.kernel,
            convs,
            aggregate,
            head,
            velocity: Vec::new(),
        };
        state.velocity = state
            .params()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Ok(state)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub(crate) fn kernel_points_mut(&mut self) -> &mut Matrix {
        self.kernel.points_mut()
    }

    /// Parameter tensors in a fixed order: conv layers, aggregate MLP, FC
    /// head, then the kernel points when they are learnable.
    pub fn params(&self) -> Vec<&Matrix> {
        self.named_params().into_iter().map(|(_, m)| m).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (s, conv) in self.convs.iter().enumerate() {
            let names = ["filter", "bias", "pos_weight", "pos_bias"];
            for (name, m) in names.iter().zip(conv.params()) {
                out.push((format!("conv{s}.{name}"), m));
            }
        }
        out.push(("aggregate.weight".into(), &self.aggregate.weight));
        out.push(("aggregate.bias".into(), &self.aggregate.bias));
        for (t, fc) in self.head.iter().enumerate() {
            out.push((format!("fc{t}.weight"), &fc.weight));
            out.push((format!("fc{t}.bias"), &fc.bias));
        }
        if self.config.variant.learns_kernel() {
            out.push(("kernel".into(), self.kernel.points()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for conv in &mut self.convs {
            out.extend(conv.params_mut());
        }
        out.push(&mut self.aggregate.weight);
        out.push(&mut self.aggregate.bias);
        for fc in &mut self.head {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        if self.config.variant.learns_kernel() {
            out.push(self.kernel.points_mut());
        }
        out
    }

    /// Builds the neighbor table and permutation for one resolution.
    pub fn geometry(&self, cloud: PointCloud) -> Result<Geometry> {
        let nbr = knn_auto(&cloud, self.config.k)?;
        self.geometry_with_index(cloud, nbr)
    }

    pub fn geometry_with_index(&self, cloud: PointCloud, nbr: NeighborIndex) -> Result<Geometry> {
        ensure!(
            nbr.len() == cloud.len(),
            "neighbor table does not match cloud"
        );
        let local = local_positions(&cloud, &nbr)?;
        let perm = match self.config.variant.slot_rule() {
            SlotRule::Attention(mode) => build_permutation(&local, nbr.k(), &self.kernel, mode)?,
            rule => fixed_permutation(cloud.len(), nbr.k(), self.config.kernel_len, rule)?,
        };
        Ok(Geometry {
            cloud,
            nbr,
            local,
            perm,
        })
    }

    /// Class logits. `rng` drives downsampling and (when `training`) dropout.
    pub fn forward_logits(
        &self,
        cloud: &PointCloud,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Vec<f64>, ForwardTape)> {
        self.forward_impl(cloud, None, rng, training)
    }

    /// Like [`forward_logits`](Self::forward_logits) with a caller-supplied
    /// neighbor table for the input resolution.
    pub fn forward_with_index(
        &self,
        cloud: &PointCloud,
        nbr: NeighborIndex,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Vec<f64>, ForwardTape)> {
        self.forward_impl(cloud, Some(nbr), rng, training)
    }

    fn forward_impl(
        &self,
        cloud: &PointCloud,
        first_index: Option<NeighborIndex>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Vec<f64>, ForwardTape)> {
        ensure!(!cloud.is_empty(), "cannot classify an empty cloud");
        ensure!(
            cloud.feature_width() == self.config.input_features,
            "cloud has {} feature channels, model expects {}",
            cloud.feature_width(),
            self.config.input_features
        );
        let downsampling = !self.config.downsample_ratios.is_empty();
        let mut stages: Vec<StageTape> = Vec::with_capacity(self.convs.len());
        let mut first_index = first_index;

        for (s, conv) in self.convs.iter().enumerate() {
            let (geometry, kept, features) = if s == 0 || downsampling {
                let (prev_cloud, prev_features) = match stages.last() {
                    Some(prev) => (prev.geometry.cloud.clone(), Some(prev.output.clone())),
                    None => (cloud.clone(), cloud.features().cloned()),
                };
                let (stage_cloud, kept) = if downsampling {
                    let (c, map) =
                        random_downsample(&prev_cloud, self.config.downsample_ratios[s], rng)?;
                    (c, Some(map.kept))
                } else {
                    (prev_cloud, None)
                };
                let features = match (&prev_features, &kept) {
                    (Some(f), Some(kept)) => Some(f.gather_rows(kept)),
                    (f, None) => f.clone(),
                    (None, Some(_)) => None,
                };
                let geometry = match first_index.take() {
                    Some(nbr) if s == 0 && !downsampling => {
                        self.geometry_with_index(stage_cloud, nbr)?
                    }
                    _ => self.geometry(stage_cloud)?,
                };
                (Arc::new(geometry), kept, features)
            } else {
                let prev = stages.last().expect("stage 0 exists");
                (Arc::clone(&prev.geometry), None, Some(prev.output.clone()))
            };
            let (output, layer) = conv.forward(
                &geometry.cloud,
                &geometry.nbr,
                features.as_ref(),
                &geometry.perm,
            )?;
            stages.push(StageTape {
                geometry,
                kept,
                layer,
                output,
            });
        }

        // Map each stage's rows onto the final resolution.
        let last = stages.len() - 1;
        let n_final = stages[last].geometry.cloud.len();
        let mut to_final = vec![Vec::new(); stages.len()];
        to_final[last] = (0..n_final).collect();
        for s in (0..last).rev() {
            to_final[s] = match &stages[s + 1].kept {
                Some(kept) => to_final[s + 1].iter().map(|&t| kept[t]).collect(),
                None => to_final[s + 1].clone(),
            };
        }
        let gathered: Vec<Matrix> = stages
            .iter()
            .zip(&to_final)
            .map(|(st, rows)| st.output.gather_rows(rows))
            .collect();
        let concat = Matrix::hconcat(&gathered.iter().collect::<Vec<_>>())?;
        let agg_pre = self.aggregate.apply(&concat)?;
        let agg = agg_pre.map(elu_scalar);

        let (pooled, argmax) = pool(&agg, self.config.pooling);
        let mut h = Matrix::from_vec(1, pooled.len(), pooled.clone())?;
        let mut head = Vec::with_capacity(self.head.len());
        for (t, fc) in self.head.iter().enumerate() {
            let mask = if training && self.config.dropout > 0.0 {
                let keep = 1.0 - self.config.dropout;
                let m: Vec<f64> = (0..h.cols())
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (v, &s) in h.as_mut_slice().iter_mut().zip(&m) {
                    *v *= s;
                }
                Some(m)
            } else {
                None
            };
            let pre = fc.apply(&h)?;
            let out = if t + 1 < self.head.len() {
                pre.map(elu_scalar)
            } else {
                pre.clone()
            };
            head.push(HeadTape {
                mask,
                input: h,
                pre,
            });
            h = out;
        }
        h.check_finite("classifier logits")?;
        Ok((
            h.into_vec(),
            ForwardTape {
                stages,
                to_final,
                concat,
                agg_pre,
                argmax,
                pooled,
                head,
            },
        ))
    }

    /// Gradients of a scalar loss given `∂loss/∂logits`.
    pub fn backward(&self, tape: &ForwardTape, dlogits: &[f64]) -> Result<Gradients> {
        ensure!(
            dlogits.len() == self.num_classes(),
            "dlogits has the wrong length"
        );
        let mut grads = Gradients::zeros_like(self);
        let n_conv_tensors = 4 * self.convs.len();
        let agg_slot = n_conv_tensors;
        let head_slot = agg_slot + 2;

        let mut dh = Matrix::from_vec(1, dlogits.len(), dlogits.to_vec())?;
        for t in (0..self.head.len()).rev() {
            let ht = &tape.head[t];
            let fc = &self.head[t];
            let mut dpre = dh;
            if t + 1 < self.head.len() {
                for (g, &p) in dpre.as_mut_slice().iter_mut().zip(ht.pre.as_slice()) {
                    *g *= elu_grad_scalar(p);
                }
            }
            grads.0[head_slot + 2 * t] = matmul_tn(&ht.input, &dpre)?;
            grads.0[head_slot + 2 * t + 1] = dpre.clone();
            let mut din = matmul_nt(&dpre, &fc.weight)?;
            if let Some(mask) = &ht.mask {
                for (g, &m) in din.as_mut_slice().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            dh = din;
        }

        let d_agg = unpool(
            dh.as_slice(),
            &tape.argmax,
            tape.agg_pre.rows(),
            self.config.aggregate_width,
            self.config.pooling,
        );
        let mut d_agg_pre = d_agg;
        for (g, &p) in d_agg_pre
            .as_mut_slice()
            .iter_mut()
            .zip(tape.agg_pre.as_slice())
        {
            *g *= elu_grad_scalar(p);
        }
        grads.0[agg_slot] = matmul_tn(&tape.concat, &d_agg_pre)?;
        grads.0[agg_slot + 1] = Matrix::from_vec(1, d_agg_pre.cols(), d_agg_pre.col_sums())?;
        let d_concat = matmul_nt(&d_agg_pre, &self.aggregate.weight)?;
        let d_parts = d_concat.hsplit(&self.config.conv_channels)?;

        // Per-stage output gradients: shortcut part plus what the next
        // stage sends back through its input features.
        let mut d_outputs: Vec<Matrix> = tape
            .stages
            .iter()
            .map(|st| Matrix::zeros(st.output.rows(), st.output.cols()))
            .collect();
        for (s, part) in d_parts.iter().enumerate() {
            for (row, &dst) in tape.to_final[s].iter().enumerate() {
                for (o, &g) in d_outputs[s].row_mut(dst).iter_mut().zip(part.row(row)) {
                    *o += g;
                }
            }
        }

        let learn_kernel = self.config.variant.learns_kernel();
        let mut d_kernel = Matrix::zeros(self.kernel.len(), 3);
        // dM accumulated per shared geometry, flushed when the geometry changes.
        let mut pending: Option<(Arc<Geometry>, Vec<f64>)> = None;
        for s in (0..self.convs.len()).rev() {
            let st = &tape.stages[s];
            let conv = &self.convs[s];
            let lg = conv.backward(
                &st.layer,
                &st.geometry.perm,
                &st.geometry.nbr,
                &d_outputs[s],
            )?;
            for (slot, g) in [lg.filter, lg.bias, lg.pos_weight, lg.pos_bias]
                .into_iter()
                .enumerate()
            {
                grads.0[4 * s + slot] = g;
            }
            if learn_kernel && !lg.perm.is_empty() {
                match &mut pending {
                    Some((geo, acc)) if Arc::ptr_eq(geo, &st.geometry) => {
                        for (a, b) in acc.iter_mut().zip(&lg.perm) {
                            *a += b;
                        }
                    }
                    _ => {
                        if let Some((geo, acc)) = pending.take() {
                            flush_kernel_grad(&geo, &self.kernel, &acc, &mut d_kernel)?;
                        }
                        pending = Some((Arc::clone(&st.geometry), lg.perm));
                    }
                }
            }
            if s > 0 {
                let df = lg
                    .features
                    .ok_or_else(|| Error::contract("stage input features missing"))?;
                match &st.kept {
                    Some(kept) => {
                        for (row, &src) in kept.iter().enumerate() {
                            for (o, &g) in d_outputs[s - 1].row_mut(src).iter_mut().zip(df.row(row))
                            {
                                *o += g;
                            }
                        }
                    }
                    None => d_outputs[s - 1].add_assign(&df)?,
                }
            }
        }
        if let Some((geo, acc)) = pending.take() {
            flush_kernel_grad(&geo, &self.kernel, &acc, &mut d_kernel)?;
        }
        if learn_kernel {
            let last = grads.0.len() - 1;
            grads.0[last] = d_kernel;
        }
        Ok(grads)
    }

    /// Cross-entropy loss, logits and parameter gradients for one sample.
    pub fn loss_and_grad(
        &self,
        cloud: &PointCloud,
        label: usize,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(f64, Vec<f64>, Gradients)> {
        let (logits, tape) = self.forward_logits(cloud, rng, training)?;
        let (loss, dlogits) = cross_entropy(&logits, label)?;
        let grads = self.backward(&tape, &dlogits)?;
        Ok((loss, logits, grads))
    }
}

fn flush_kernel_grad(
    geo: &Geometry,
    kernel: &KernelLattice,
    d_perm: &[f64],
    d_kernel: &mut Matrix,
) -> Result<()> {
    let g = permutation_backward(&geo.perm, &geo.local, kernel, d_perm)?;
    d_kernel.add_assign(&g.kernel)
}

/// Brute force for small clouds, grid above that. Both give identical tables.
pub fn knn_auto(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let n = cloud.len();
    if n <= 2048 {
        return knn_bruteforce(cloud, k);
    }
    let coords = cloud.coords();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for c in 0..3 {
            lo[c] = lo[c].min(coords[(i, c)]);
            hi[c] = hi[c].max(coords[(i, c)]);
        }
    }
    let volume: f64 = (0..3).map(|c| (hi[c] - lo[c]).max(1e-9)).product();
    let cell = (volume * k as f64 / n as f64).cbrt().max(1e-9);
    knn_grid(cloud, k, cell)
}

/// Column-wise pooling; `argmax` records the first maximizing row per column.
fn pool(features: &Matrix, pooling: Pooling) -> (Vec<f64>, Vec<usize>) {
    let (n, c) = features.shape();
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    let mut sum = vec![0.0; c];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            if v > max[j] {
                max[j] = v;
                argmax[j] = i;
            }
            sum[j] += v;
        }
    }
    match pooling {
        Pooling::Max => (max, argmax),
        Pooling::Sum => (sum, argmax),
        Pooling::MaxAndSum => {
            max.extend(sum);
            (max, argmax)
        }
    }
}

fn unpool(d_pooled: &[f64], argmax: &[usize], n: usize, c: usize, pooling: Pooling) -> Matrix {
    let mut out = Matrix::zeros(n, c);
    let (d_max, d_sum) = match pooling {
        Pooling::Max => (Some(d_pooled), None),
        Pooling::Sum => (None, Some(d_pooled)),
        Pooling::MaxAndSum => (Some(&d_pooled[..c]), Some(&d_pooled[c..])),
    };
    if let Some(d_sum) = d_sum {
        for i in 0..n {
            out.row_mut(i).copy_from_slice(d_sum);
        }
    }
    if let Some(d_max) = d_max {
        for (j, (&g, &i)) in d_max.iter().zip(argmax).enumerate() {
            out[(i, j)] += g;
        }
    }
    out
}

/// Softmax cross-entropy with log-sum-exp stabilization. Returns the loss
/// and `softmax(logits) − onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    ensure!(
        label < logits.len(),
        "label {label} out of range for {} classes",
        logits.len()
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Exact number of trainable scalars. Learnable kernels contribute their
/// `L − 1` non-origin points.
pub fn count_params(state: &ClassifierState) -> usize {
    state
        .named_params()
        .iter()
        .map(|(name, m)| {
            if name == "kernel" {
                (m.rows() - 1) * m.cols()
            } else {
                m.as_slice().len()
            }
        })
        .sum()
}
