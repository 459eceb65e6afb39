//! The `paiconv` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use paiconv_bench::{
    bench_forward, bench_permutation, count_params, max_points_probe, to_csv, BenchReport, PermutationBench,
};
use paiconv_core::check::{run_checks, CheckOptions, CheckReport, Fault};
use paiconv_core::checkpoint::Checkpoint;
use paiconv_core::dataio::{load_manifest, synth_shapes, Dataset};
use paiconv_core::lattice::{fibonacci_lattice, random_lattice};
use paiconv_core::train::{evaluate, fit, metrics_csv, run_ablation, Accuracy, AblationTable};
use paiconv_core::{ClassifierConfig, ClassifierState, Metrics, Rng, Stream, Variant};

use crate::config::{parse_variant, DataSource, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "paiconv", version, about = "Permutable anisotropic convolution on point clouds")]
pub struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, env = "PAICONV_THREADS")]
    pub threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a kernel point set as "x y z" lines, origin first.
    GenKernel(GenKernelArgs),
    /// Train a classifier and write metrics.csv and model.ckpt.
    Train(TrainArgs),
    /// Score a checkpoint and print one CSV row: samples,loss,OA,MA.
    Eval(EvalArgs),
    /// Train every requested variant over several seeds and tabulate test accuracy.
    Ablate(AblateArgs),
    /// Time the permutation operator against a linear-correlation stub.
    Bench(BenchArgs),
    /// Run the invariant suite and print one verdict per property.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LatticeMode {
    Fibonacci,
    Random,
}

#[derive(Debug, Args)]
pub struct GenKernelArgs {
    /// Kernel points L, origin included (at least 2).
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = LatticeMode::Fibonacci)]
    pub mode: LatticeMode,
    /// Seed for the random mode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options shared by commands that build datasets and models.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// INI config file with [model], [train] and [data] sections; flags
    /// override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synthetic` (default) or the path of a tab-separated
    /// `path<TAB>class` manifest of .off or .xyz files.
    #[arg(long)]
    pub data: Option<String>,
    /// Points per cloud (default 256).
    #[arg(long)]
    pub points: Option<usize>,
    /// Synthetic training clouds per class (default 100).
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Synthetic test clouds per class (default 50).
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Seed for synthetic generation and mesh sampling (default 0).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

/// Training overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ScheduleArgs {
    /// Training epochs (default 12).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate at the first epoch (default 0.02).
    #[arg(long)]
    pub lr_init: Option<f64>,
    /// Learning rate at the last epoch (default 0.002).
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Clouds per gradient step (default 8).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on the clouds as given.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Model variant: full, no_permutation, random_kernel, no_sparsemax,
    /// softmax, isotropic or learnable_kernel (default full).
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Seeds model initialization, shuffling, augmentation and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for metrics.csv and model.ckpt.
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Synthetic split to score; manifests are scored whole.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Alias for --data-seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the column names before the row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Number of seeds; runs use seeds base..base+N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated variants (default: all seven).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    /// Output table: one row per (variant, seed), then mean and std rows.
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Cloud sizes, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 10_000])]
    pub n: Vec<usize>,
    /// Neighbors per point, self included.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Kernel points, origin included.
    #[arg(long, default_value_t = 16)]
    pub l: usize,
    /// Timed repeats per measurement (at least 5).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Linear-correlation extent (default: mean neighbor distance).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Use the global thread pool instead of a single thread.
    #[arg(long)]
    pub parallel: bool,
    /// Also time a classifier forward pass on the first size.
    #[arg(long)]
    pub forward: bool,
    /// Report the largest power-of-two cloud whose estimated working set
    /// fits this many MiB.
    #[arg(long)]
    pub budget_mib: Option<usize>,
    /// Seed for the random clouds and model.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    BackwardSign,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenKernel(a) => cmd_gen_kernel(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let (acc, n) = cmd_eval(&a)?;
            if a.header {
                println!("samples,loss,OA,MA");
            }
            println!("{}", eval_row(n, &acc));
            Ok(())
        }
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::Check(a) => {
            let report = cmd_check(&a);
            for r in &report.results {
                println!("{r}");
            }
            if report.all_passed() {
                println!("all {} properties passed", report.results.len());
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .results
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| r.name)
                    .collect();
                Err(CliError::ChecksFailed(failed.join(", ")))
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_gen_kernel(a: &GenKernelArgs) -> Result<(), CliError> {
    if a.count < 2 {
        return Err(CliError::Usage(format!("--count must be at least 2, got {}", a.count)));
    }
    let kernel = match a.mode {
        LatticeMode::Fibonacci => fibonacci_lattice(a.count)?,
        LatticeMode::Random => random_lattice(a.count, &mut Rng::stream(a.seed, Stream::Kernel))?,
    };
    match &a.out {
        Some(path) => write(path, &kernel.to_ascii()),
        None => {
            print!("{}", kernel.to_ascii());
            Ok(())
        }
    }
}

fn resolve(data: &DataArgs, schedule: Option<&ScheduleArgs>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(data.config.as_deref())?;
    if let Some(d) = &data.data {
        cfg.data.source = d.parse()?;
    }
    let d = &mut cfg.data;
    d.points = data.points.unwrap_or(d.points);
    d.train_per_class = data.train_per_class.unwrap_or(d.train_per_class);
    d.test_per_class = data.test_per_class.unwrap_or(d.test_per_class);
    d.seed = data.data_seed.unwrap_or(d.seed);
    if let Some(s) = schedule {
        let t = &mut cfg.train;
        t.epochs = s.epochs.unwrap_or(t.epochs);
        t.lr_init = s.lr_init.unwrap_or(t.lr_init);
        t.lr_final = s.lr_final.unwrap_or(t.lr_final);
        t.batch_size = s.batch_size.unwrap_or(t.batch_size);
        if s.no_augment {
            t.augment = None;
        }
    }
    Ok(cfg)
}

/// Train and test splits. A manifest is used whole for both.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    let mut rng = Rng::stream(d.seed, Stream::Data);
    match &d.source {
        DataSource::Synthetic => {
            let train = synth_shapes(&d.classes, d.points, d.train_per_class, &mut rng)?;
            let test = synth_shapes(&d.classes, d.points, d.test_per_class, &mut rng)?;
            Ok((train, test))
        }
        DataSource::Manifest(path) => {
            let ds = load_manifest(path, d.points, &mut rng)?;
            Ok((ds.clone(), ds))
        }
    }
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<Metrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let mut cfg = resolve(&a.data, Some(&a.schedule))?;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    cfg.train.seed = a.seed;
    let (train, _) = load_data(&cfg)?;
    let model = cfg.model_for(train.num_classes());
    let mut state = ClassifierState::build(model, a.seed)?;
    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    fit(&mut state, &train, &cfg.train, |stats, st| {
        let acc = evaluate(st, &train)?;
        log::info!("epoch {}: clean train OA {:.4} MA {:.4}", stats.epoch, acc.oa, acc.ma);
        metrics.push(Metrics {
            epoch: stats.epoch,
            lr: stats.lr,
            loss: stats.loss,
            oa: acc.oa,
            ma: acc.ma,
        });
        Ok(())
    })?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let metrics_path = a.out_dir.join("metrics.csv");
    write(&metrics_path, &metrics_csv(&metrics))?;
    let checkpoint = Checkpoint {
        state,
        class_names: train.class_names.clone(),
    };
    let checkpoint_path = a.out_dir.join("model.ckpt");
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        metrics_path,
        checkpoint_path,
    })
}

pub fn eval_row(samples: usize, acc: &Accuracy) -> String {
    format!("{samples},{},{},{}", acc.loss, acc.oa, acc.ma)
}

/// Accuracy and sample count.
pub fn cmd_eval(a: &EvalArgs) -> Result<(Accuracy, usize), CliError> {
    let mut data = a.data.clone();
    if a.seed.is_some() {
        data.data_seed = a.seed;
    }
    let cfg = resolve(&data, None)?;
    if !a.checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            a.checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (train, test) = load_data(&cfg)?;
    let ds = match a.split {
        Split::Train => train,
        Split::Test => test,
    };
    if ds.class_names != ck.class_names {
        return Err(CliError::Usage(format!(
            "data classes [{}] do not match checkpoint classes [{}]",
            ds.class_names.join(", "),
            ck.class_names.join(", ")
        )));
    }
    let acc = evaluate(&ck.state, &ds)?;
    Ok((acc, ds.len()))
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<AblationTable, CliError> {
    let cfg = resolve(&a.data, Some(&a.schedule))?;
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let (train, test) = load_data(&cfg)?;
    let base = cfg.model_for(train.num_classes());
    let table = run_ablation(&base, &cfg.train, &variants, &seeds, &train, &test)?;
    write(&a.out, &table.to_csv())?;
    for s in table.summary() {
        log::info!("{}: OA {:.4} ± {:.4}", s.variant, s.oa_mean, s.oa_std);
    }
    Ok(table)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<BenchReport>, CliError> {
    let threads = if a.parallel {
        rayon::current_num_threads()
    } else {
        1
    };
    let mut reports = Vec::new();
    for &n in &a.n {
        let cfg = PermutationBench {
            repeats: a.repeats,
            sigma: a.sigma,
            seed: a.seed,
            threads,
            ..PermutationBench::new(n, a.k, a.l)
        };
        reports.extend(bench_permutation(&cfg)?);
    }
    let model = ClassifierConfig {
        k: a.k,
        kernel_len: a.l,
        ..ClassifierConfig::desk(3)
    };
    if a.forward {
        let n = a.n.first().copied().unwrap_or(1024);
        reports.push(bench_forward(&model, n, a.repeats, a.seed, threads)?);
    }
    write(&a.out, &to_csv(&reports))?;
    let published = ClassifierConfig {
        k: 16,
        kernel_len: 16,
        ..ClassifierConfig::paper(40)
    };
    println!(
        "parameters of the 40-class published classifier at K=16, L=16: {}",
        count_params(&ClassifierState::build(published, a.seed)?)
    );
    if let Some(mib) = a.budget_mib {
        let probe = max_points_probe(&model, mib.saturating_mul(1 << 20), 1 << 30);
        println!(
            "max points within {mib} MiB: {}{}",
            probe.n,
            if probe.saturated { " (probe cap)" } else { "" }
        );
    }
    Ok(reports)
}

pub fn cmd_check(a: &CheckArgs) -> CheckReport {
    run_checks(&CheckOptions {
        seed: a.seed,
        fault: a.inject_fault.map(|f| match f {
            FaultArg::BackwardSign => Fault::BackwardSign,
        }),
    })
}
