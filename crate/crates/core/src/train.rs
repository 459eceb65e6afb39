//! SGD with momentum, the cosine schedule, accuracy metrics and the
//! ablation harness.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataio::{augment, AugmentConfig, Dataset};
use crate::error::{ensure, Error, Result};
use crate::netcls::{cross_entropy, ClassifierConfig, ClassifierState, Gradients};
use crate::numkit::{Rng, Stream};
use crate::paiconv::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` trains on the clouds as given.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.1,
            lr_final: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    /// The published ModelNet40 recipe.
    pub fn paper() -> Self {
        Self {
            epochs: 250,
            batch_size: 16,
            ..Self::default()
        }
    }

    /// Short schedule for the synthetic desk-scale task. The network has no
    /// normalization layers and diverges at the published learning rate.
    pub fn desk() -> Self {
        Self {
            lr_init: 0.02,
            lr_final: 0.002,
            epochs: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr_final > 0.0 && self.lr_final <= self.lr_init,
            "need 0 < lr_final <= lr_init"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must be in [0, 1)"
        );
        ensure!(self.epochs >= 1, "need at least one epoch");
        ensure!(self.batch_size >= 1, "batch size must be positive");
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, annealed from `lr_init` at epoch 0 to
/// `lr_final` at the last epoch. Epochs past the end stay at `lr_final`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.lr_init;
    }
    let last = (config.epochs - 1) as f64;
    let t = (epoch as f64).min(last) / last;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    config.lr_init * w + config.lr_final * (1.0 - w)
}

/// Classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`. Nothing is written
/// when any updated value would be non-finite.
pub fn sgd_step(
    state: &mut ClassifierState,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let names: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).collect();
    ensure!(
        grads.0.len() == names.len() && state.velocity.len() == names.len(),
        "gradient set does not match the model"
    );
    let mut new_velocity = Vec::with_capacity(names.len());
    let mut new_params = Vec::with_capacity(names.len());
    for (t, (param, g)) in state.params().into_iter().zip(&grads.0).enumerate() {
        ensure!(
            g.shape() == param.shape(),
            "gradient shape mismatch for {}",
            names[t]
        );
        let v = &state.velocity[t];
        let mut nv = v.clone();
        let mut np = param.clone();
        for ((vv, &gg), pp) in nv
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(np.as_mut_slice())
        {
            *vv = momentum * *vv + gg;
            *pp -= lr * *vv;
        }
        if !(nv.is_finite() && np.is_finite()) {
            return Err(Error::NonFinite(format!("SGD update of {}", names[t])));
        }
        new_velocity.push(nv);
        new_params.push(np);
    }
    for (dst, src) in state.params_mut().into_iter().zip(new_params) {
        *dst = src;
    }
    state.velocity = new_velocity;
    Ok(())
}

/// Accuracy summary over a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Overall accuracy: correct / total.
    pub oa: f64,
    /// Mean per-class recall over the classes present.
    pub ma: f64,
    pub loss: f64,
}

/// OA and MA from `(predicted, label)` pairs. Classes without samples are
/// left out of MA.
pub fn accuracy(pairs: &[(usize, usize)], num_classes: usize) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let mut total = vec![0usize; num_classes];
    let mut right = vec![0usize; num_classes];
    for &(pred, label) in pairs {
        total[label] += 1;
        if pred == label {
            right[label] += 1;
        }
    }
    let correct: usize = right.iter().sum();
    let present: Vec<usize> = (0..num_classes).filter(|&c| total[c] > 0).collect();
    if present.len() < num_classes {
        log::warn!(
            "{} of {num_classes} classes have no samples; left out of MA",
            num_classes - present.len()
        );
    }
    let ma = present
        .iter()
        .map(|&c| right[c] as f64 / total[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    (correct as f64 / pairs.len() as f64, ma)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Single clean forward pass per cloud. Clouds are independent, so the
/// result does not depend on dataset order.
pub fn evaluate(state: &ClassifierState, dataset: &Dataset) -> Result<Accuracy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs: Vec<(f64, usize)> = dataset
        .samples
        .par_iter()
        .map(|(cloud, label)| {
            // Only consulted when the model downsamples.
            let mut rng = Rng::stream(0, Stream::Sampling);
            let (logits, _) = state.forward_logits(cloud, &mut rng, false)?;
            let (loss, _) = cross_entropy(&logits, *label)?;
            Ok((loss, argmax(&logits)))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = outputs
        .iter()
        .zip(&dataset.samples)
        .map(|(&(_, pred), (_, label))| (pred, *label))
        .collect();
    let loss = outputs.iter().map(|o| o.0).sum::<f64>() / outputs.len() as f64;
    let (oa, ma) = accuracy(&pairs, state.num_classes());
    Ok(Accuracy { oa, ma, loss })
}

/// Running statistics of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Training-mode accuracy (augmented, with dropout).
    pub oa: f64,
}

/// One pass over the shuffled dataset. Per-sample randomness (augmentation,
/// dropout, downsampling) comes from seeds drawn in sample order, and batch
/// gradients are summed in batch order, so results do not depend on the
/// thread count.
pub fn train_epoch(
    state: &mut ClassifierState,
    dataset: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure!(
        dataset.num_classes() <= state.num_classes(),
        "dataset has {} classes, model predicts {}",
        dataset.num_classes(),
        state.num_classes()
    );
    let lr = cosine_lr(epoch, config);
    let order = rng.permutation(dataset.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(config.batch_size) {
        let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
        let shared: &ClassifierState = state;
        let results: Vec<(f64, bool, Gradients)> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(&i, &seed)| {
                let (cloud, label) = &dataset.samples[i];
                let mut sample_rng = Rng::new(seed);
                let cloud = match &config.augment {
                    Some(a) => augment(cloud, a, &mut sample_rng),
                    None => cloud.clone(),
                };
                let (loss, logits, grads) =
                    shared.loss_and_grad(&cloud, *label, &mut sample_rng, true)?;
                Ok((loss, argmax(&logits) == *label, grads))
            })
            .collect::<Result<_>>()?;
        let mut total = Gradients::zeros_like(state);
        for (loss, right, grads) in &results {
            loss_sum += loss;
            correct += usize::from(*right);
            total.accumulate(grads)?;
        }
        total.scale(1.0 / batch.len() as f64);
        sgd_step(state, &total, lr, config.momentum)?;
    }
    Ok(EpochStats {
        epoch,
        lr,
        loss: loss_sum / dataset.len() as f64,
        oa: correct as f64 / dataset.len() as f64,
    })
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
pub fn fit(
    state: &mut ClassifierState,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ClassifierState) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    let mut rng = Rng::stream(config.seed, Stream::Shuffle);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let stats = train_epoch(state, dataset, config, epoch, &mut rng)?;
        log::info!(
            "epoch {epoch}: lr {:.5} loss {:.4} train OA {:.3}",
            stats.lr,
            stats.loss,
            stats.oa
        );
        on_epoch(&stats, state)?;
        history.push(stats);
    }
    Ok(history)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub oa: f64,
    pub ma: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss,OA,MA";

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.lr, m.loss, m.oa, m.ma);
    }
    out
}

/// Final test accuracy of one (variant, seed) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub oa: f64,
    pub ma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub ma_mean: f64,
    pub ma_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationTable {
    /// One entry per variant, in first-seen order. Standard deviations are
    /// population values.
    pub fn summary(&self) -> Vec<AblationSummary> {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        variants
            .into_iter()
            .map(|v| {
                let runs: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let oa: Vec<f64> = runs.iter().map(|r| r.oa).collect();
                let ma: Vec<f64> = runs.iter().map(|r| r.ma).collect();
                let (oa_mean, oa_std) = mean_std(&oa);
                let (ma_mean, ma_std) = mean_std(&ma);
                AblationSummary {
                    variant: v,
                    runs: runs.len(),
                    oa_mean,
                    oa_std,
                    ma_mean,
                    ma_std,
                }
            })
            .collect()
    }

    pub fn mean_oa(&self, variant: Variant) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.variant == variant)
            .map(|s| s.oa_mean)
    }

    /// `variant,seed,OA,MA` per run, then `mean` and `std` rows per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,OA,MA\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.variant, r.seed, r.oa, r.ma);
        }
        for s in self.summary() {
            let _ = writeln!(out, "{},mean,{},{}", s.variant, s.oa_mean, s.ma_mean);
            let _ = writeln!(out, "{},std,{},{}", s.variant, s.oa_std, s.ma_std);
        }
        out
    }
}

/// Trains every variant with every seed on `train` and scores it on `test`.
/// The model seed and the training seed are both the run's seed.
pub fn run_ablation(
    base: &ClassifierConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &variant in variants {
        for &seed in seeds {
            let (oa, ma) = train_and_score(base, train_cfg, variant, seed, train, test)?;
            log::info!("{variant} seed {seed}: OA {oa:.4} MA {ma:.4}");
            table.rows.push(AblationRow {
                variant,
                seed,
                oa,
                ma,
            });
        }
    }
    Ok(table)
}

/// Test OA and MA of one freshly trained model.
pub fn train_and_score(
    base: &ClassifierConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(f64, f64)> {
    let config = ClassifierConfig {
        variant,
        ..base.clone()
    };
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut state = ClassifierState::build(config, seed)?;
    fit(&mut state, train, &cfg, |_, _| Ok(()))?;
    let acc = evaluate(&state, test)?;
    Ok((acc.oa, acc.ma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_shapes, ShapeClass};
    use crate::netcls::Pooling;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let c = cfg(31);
        assert_eq!(cosine_lr(0, &c), 0.1);
        assert_eq!(cosine_lr(30, &c), 0.01);
        assert!((cosine_lr(15, &c) - 0.055).abs() <= 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..31 {
            let lr = cosine_lr(e, &c);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cosine_lr(0, &cfg(1)), 0.1);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(3);
        assert!(c.validate().is_ok());
        c.lr_final = 0.2;
        assert!(c.validate().is_err());
        let mut c = cfg(3);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(3);
        c.lr_final = 0.0;
        assert!(c.validate().is_err());
    }

    fn tiny_model(seed: u64) -> ClassifierState {
        let config = ClassifierConfig {
            conv_channels: vec![4, 4],
            position_width: 4,
            aggregate_width: 8,
            fc_widths: vec![8, 3],
            k: 4,
            kernel_len: 4,
            dropout: 0.0,
            downsample_ratios: Vec::new(),
            pooling: Pooling::Max,
            variant: Variant::Full,
            input_features: 0,
        };
        ClassifierState::build(config, seed).unwrap()
    }

    fn unit_grads(state: &ClassifierState, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(state);
        for m in &mut g.0 {
            for v in m.as_mut_slice() {
                *v = value;
            }
        }
        g
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut state = tiny_model(0);
        let before: Vec<f64> = state.params()[0].as_slice().to_vec();
        let g = unit_grads(&state, 0.5);
        sgd_step(&mut state, &g, 0.1, 0.0).unwrap();
        for (a, b) in before.iter().zip(state.params()[0].as_slice()) {
            assert_eq!(*b, a - 0.05);
        }
    }

    #[test]
    fn momentum_decays_geometrically_without_gradient() {
        let mut state = tiny_model(0);
        let g = unit_grads(&state, 1.0);
        sgd_step(&mut state, &g, 0.1, 0.9).unwrap();
        let zero = Gradients::zeros_like(&state);
        let mut last_step = f64::INFINITY;
        for _ in 0..50 {
            let before = state.params()[0].as_slice()[0];
            sgd_step(&mut state, &zero, 0.1, 0.9).unwrap();
            let step = (before - state.params()[0].as_slice()[0]).abs();
            assert!(step < last_step);
            last_step = step;
        }
        assert!(state.velocity[0].max_abs() < 0.9f64.powi(50) * 1.0001);
    }

    #[test]
    fn non_finite_update_is_rejected_untouched() {
        let mut state = tiny_model(0);
        let before = state.clone();
        let mut g = Gradients::zeros_like(&state);
        g.0[2].as_mut_slice()[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut state, &g, 0.1, 0.9),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(state, before);
    }

    #[test]
    fn accuracy_hand_counts() {
        assert_eq!(accuracy(&[(0, 0), (1, 1), (2, 2)], 3), (1.0, 1.0));
        let constant: Vec<(usize, usize)> = (0..9).map(|i| (0, i % 3)).collect();
        let (oa, ma) = accuracy(&constant, 3);
        assert!((oa - 1.0 / 3.0).abs() < 1e-15 && (ma - 1.0 / 3.0).abs() < 1e-15);
        let (oa, ma) = accuracy(&[(0, 0), (0, 0), (1, 1), (0, 1)], 2);
        assert_eq!((oa, ma), (0.75, 0.75));
        // Class 2 absent: MA averages over classes 0 and 1 only.
        let (_, ma) = accuracy(&[(0, 0), (0, 1)], 3);
        assert_eq!(ma, 0.5);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut state = tiny_model(0);
        let ds = Dataset::new(vec!["a".into()]);
        assert!(matches!(
            train_epoch(&mut state, &ds, &cfg(1), 0, &mut Rng::new(0)),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(evaluate(&state, &ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_sample_overfits() {
        let ds = synth_shapes(&[ShapeClass::Torus], 24, 1, &mut Rng::new(3)).unwrap();
        let mut ds = ds;
        ds.class_names = vec!["a".into(), "b".into(), "torus".into()];
        ds.samples[0].1 = 2;
        let mut state = tiny_model(1);
        let c = TrainConfig {
            epochs: 20,
            batch_size: 1,
            augment: None,
            ..TrainConfig::default()
        };
        let history = fit(&mut state, &ds, &c, |_, _| Ok(())).unwrap();
        for w in history.windows(2).take(5) {
            assert!(w[1].loss < w[0].loss, "{history:?}");
        }
        assert_eq!(evaluate(&state, &ds).unwrap().oa, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_shapes(&ShapeClass::DEFAULT, 24, 2, &mut Rng::new(0)).unwrap();
        let run = || {
            let mut state = tiny_model(7);
            let h = fit(&mut state, &ds, &cfg(2), |_, _| Ok(())).unwrap();
            (state, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_ignores_dataset_order() {
        let ds = synth_shapes(&ShapeClass::DEFAULT, 24, 3, &mut Rng::new(0)).unwrap();
        let state = tiny_model(2);
        let mut rev = ds.clone();
        rev.samples.reverse();
        let a = evaluate(&state, &ds).unwrap();
        let b = evaluate(&state, &rev).unwrap();
        assert_eq!((a.oa, a.ma), (b.oa, b.ma));
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn ablation_table_shape_and_csv() {
        let ds = synth_shapes(&ShapeClass::DEFAULT, 16, 2, &mut Rng::new(0)).unwrap();
        let base = tiny_model(0).config().clone();
        let c = cfg(1);
        let t = run_ablation(&base, &c, &[Variant::Full], &[1, 2], &ds, &ds).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.summary().len(), 1);
        let again = run_ablation(&base, &c, &[Variant::Full], &[1, 2], &ds, &ds).unwrap();
        assert_eq!(t, again);
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,seed,OA,MA\nfull,1,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 2);
    }

    #[test]
    fn metrics_csv_format() {
        let rows = [Metrics {
            epoch: 0,
            lr: 0.1,
            loss: 1.5,
            oa: 0.25,
            ma: 0.5,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "epoch,lr,loss,OA,MA\n0,0.1,1.5,0.25,0.5\n"
        );
    }
}
