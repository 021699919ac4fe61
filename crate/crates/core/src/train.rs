//! Mask-only optimisation.
//!
//! Every mini-batch draws a fresh topology, runs the masked forward pass,
//! and takes an SGD-with-momentum step on the keep logits `m̂` (and on the
//! smart-rescale factors, at their own rate). The frozen weights are never
//! touched. After each epoch the validation accuracy decides early stopping,
//! and the best network seen is restored at the end.

use std::path::PathBuf;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Tape};
use crate::data::{self, LabeledDataset, Prefetcher, Splits, DEFAULT_PAD};
use crate::error::{Error, Result};
use crate::mask::{SampledTopology, TopologySampler};
use crate::nn::{self, ConvShape, ConvVariant, MaskSource, Network, NetworkOptions, WeightScheme};
use crate::rescale::{DwrReading, RescaleStrategy};
use crate::rng;

/// Gumbel streams used during training, one per prunable layer.
pub const GUMBEL_LABEL: &str = "gumbel-layer";
/// Family of seeds for the topologies drawn by averaging evaluation.
pub const AVERAGING_LABEL: &str = "averaging";
/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 500;

macro_rules! kebab_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: ", $($text, " "),+, ")"),
                        s
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

kebab_enum!(DatasetKind { Cifar10 => "cifar10", Cifar100 => "cifar100", Synthetic => "synthetic" });
kebab_enum!(Arch { Conv2 => "conv2", Conv4 => "conv4", Conv6 => "conv6", Mlp => "mlp" });
kebab_enum!(EvalMode { Threshold => "threshold", Averaging => "averaging" });
kebab_enum!(
    /// How often a topology is drawn during training.
    MaskPer { Batch => "batch", Epoch => "epoch" }
);

impl Arch {
    pub fn conv_variant(self) -> Option<ConvVariant> {
        match self {
            Arch::Conv2 => Some(ConvVariant::Conv2),
            Arch::Conv4 => Some(ConvVariant::Conv4),
            Arch::Conv6 => Some(ConvVariant::Conv6),
            Arch::Mlp => None,
        }
    }
}

/// Everything that determines a run. Serialised verbatim into every summary,
/// so a summary alone is enough to repeat the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub arch: Arch,
    pub mask_lr: f64,
    pub momentum: f64,
    pub scale_lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub rescale: RescaleStrategy,
    pub weights: WeightScheme,
    pub augment: bool,
    pub eval: EvalMode,
    pub avg_samples: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset root; falls back to the `SUPERMASK_DATA_DIR` variable.
    pub data_dir: Option<PathBuf>,
    pub dwr_reading: DwrReading,
    pub mask_per: MaskPer,
    pub mask_last_layer: bool,
    /// Initial value of every keep logit.
    pub mask_init: f64,
    /// Frozen biases on every layer.
    pub biases: bool,
    /// Hidden widths of the `mlp` architecture.
    pub hidden: Vec<usize>,
    /// Divides every channel and unit count of the convolutional family.
    pub width_divisor: usize,
    /// Samples in a synthetic task (before the train/val/test split).
    pub synthetic_samples: usize,
    /// Classes of a synthetic task; 2 with `mlp` gives the planar blob pair.
    pub synthetic_classes: usize,
    /// Side length of synthetic images used with convolutional networks.
    pub synthetic_image_size: usize,
    /// Zero padding used by augmentation.
    pub pad: usize,
    /// When off, `epoch_seconds` is written as 0 so outputs are reproducible
    /// byte for byte.
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            arch: Arch::Mlp,
            mask_lr: 50.0,
            momentum: 0.9,
            scale_lr: 0.1,
            max_epochs: 1000,
            patience: 100,
            batch_size: 128,
            temperature: 1.0,
            rescale: RescaleStrategy::Smart,
            weights: WeightScheme::Kaiming,
            augment: false,
            eval: EvalMode::Threshold,
            avg_samples: 10,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            dwr_reading: DwrReading::Keep,
            mask_per: MaskPer::Batch,
            mask_last_layer: true,
            mask_init: 0.0,
            biases: false,
            hidden: vec![16, 16],
            width_divisor: 1,
            synthetic_samples: 1000,
            synthetic_classes: 2,
            synthetic_image_size: 16,
            pad: DEFAULT_PAD,
            record_time: true,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a positive finite number, got {v}")))
    }
}

impl RunConfig {
    /// Checks the invariants: every rate positive and `patience ≤ max_epochs`.
    pub fn validate(&self) -> Result<()> {
        positive("mask-lr", self.mask_lr)?;
        positive("scale-lr", self.scale_lr)?;
        self.validate_structure()
    }

    /// Every check except the strict positivity of the two learning rates.
    fn validate_structure(&self) -> Result<()> {
        positive("temperature", self.temperature)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max-epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) exceeds max-epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.avg_samples == 0 || self.width_divisor == 0 {
            return Err(Error::Config("batch-size, avg-samples and width-divisor must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !self.mask_init.is_finite() {
            return Err(Error::Config("mask-init must be finite".into()));
        }
        Ok(())
    }

    pub fn network_options(&self) -> NetworkOptions {
        NetworkOptions {
            weights: self.weights,
            biases: self.biases,
            mask_init: self.mask_init as f32,
            rescale: self.rescale,
            smart_init: None,
            dwr_reading: self.dwr_reading,
            mask_last_layer: self.mask_last_layer,
        }
    }

    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(data::DATA_DIR_ENV).map(PathBuf::from))
    }
}

/// Loads (or generates) the dataset a config asks for, shaped for its
/// architecture: images stay `[N, C, H, W]` for convolutional networks and
/// are flattened to `[N, D]` for the MLP.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let splits = match cfg.dataset {
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = cfg.resolved_data_dir().ok_or_else(|| {
                Error::Format(format!(
                    "no dataset directory: pass --data-dir or set {}",
                    data::DATA_DIR_ENV
                ))
            })?;
            if cfg.dataset == DatasetKind::Cifar10 {
                data::load_cifar10(&dir)?
            } else {
                data::load_cifar100(&dir)?
            }
        }
        DatasetKind::Synthetic => match cfg.arch {
            Arch::Mlp if cfg.synthetic_classes == 2 => data::make_synthetic_task(cfg.synthetic_samples, cfg.seed)?,
            Arch::Mlp => data::make_blobs(cfg.synthetic_samples, cfg.synthetic_classes, 10, cfg.seed)?,
            _ => data::make_synthetic_images(
                cfg.synthetic_samples,
                cfg.synthetic_classes,
                3,
                cfg.synthetic_image_size,
                cfg.seed,
            )?,
        },
    };
    if cfg.arch == Arch::Mlp && splits.train.sample_shape().len() > 1 {
        let flat = |ds: LabeledDataset| -> Result<LabeledDataset> {
            let d = ds.sample_shape().iter().product();
            let images = ds.images.clone().reshape(vec![ds.len(), d])?;
            Ok(LabeledDataset { images, ..ds })
        };
        return Ok(Splits {
            train: flat(splits.train)?,
            val: flat(splits.val)?,
            test: flat(splits.test)?,
        });
    }
    Ok(splits)
}

/// Builds the configured architecture for a dataset.
pub fn build_network(cfg: &RunConfig, data: &Splits) -> Result<Network> {
    let opts = cfg.network_options();
    let sample = data.train.sample_shape();
    let n_classes = data.train.n_classes;
    let init_seed = rng::derive_seed(cfg.seed, "init");
    match cfg.arch.conv_variant() {
        None => {
            let mut sizes = vec![sample.iter().product()];
            sizes.extend(&cfg.hidden);
            sizes.push(n_classes);
            nn::build_mlp_with(&sizes, init_seed, &opts)
        }
        Some(variant) => {
            if sample.len() != 3 {
                return Err(Error::Config(format!("{} needs image inputs, got samples of shape {sample:?}", cfg.arch)));
            }
            let shape = ConvShape {
                channels: sample[0],
                height: sample[1],
                width: sample[2],
                width_divisor: cfg.width_divisor,
            };
            nn::build_conv_family_with(variant, n_classes, init_seed, &shape, &opts)
        }
    }
}

/// One SGD-with-momentum update, `v ← μ·v + g`, `p ← p − lr·v`, followed by
/// zeroing the gradient. `velocity` is sized on first use.
pub fn sgd_momentum_step(param: &mut DenseArray, velocity: &mut Vec<f32>, lr: f32, momentum: f32) -> Result<()> {
    let g = param
        .grad()
        .ok_or_else(|| Error::Contract("sgd step on an array without a gradient buffer".into()))?
        .to_vec();
    if velocity.len() != g.len() {
        *velocity = vec![0.0; g.len()];
    }
    for (v, gi) in velocity.iter_mut().zip(&g) {
        *v = momentum * *v + gi;
    }
    for (p, v) in param.values_mut().iter_mut().zip(velocity.iter()) {
        *p -= lr * v;
    }
    param.zero_grad();
    Ok(())
}

/// Momentum buffers for every trained array of a network: keep logits at
/// `mask_lr`, smart-rescale factors at `scale_lr`.
#[derive(Clone, Debug, Default)]
pub struct NetworkOptimizer {
    pub mask_lr: f32,
    pub scale_lr: f32,
    pub momentum: f32,
    mask_velocity: Vec<Vec<f32>>,
    scale_velocity: Vec<Vec<f32>>,
}

impl NetworkOptimizer {
    pub fn new(mask_lr: f64, scale_lr: f64, momentum: f64, depth: usize) -> Self {
        Self {
            mask_lr: mask_lr as f32,
            scale_lr: scale_lr as f32,
            momentum: momentum as f32,
            mask_velocity: vec![Vec::new(); depth],
            scale_velocity: vec![Vec::new(); depth],
        }
    }

    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        for (i, l) in net.layers_mut().enumerate() {
            if l.mask.trainable {
                sgd_momentum_step(&mut l.mask.m_hat, &mut self.mask_velocity[i], self.mask_lr, self.momentum)?;
            }
            if l.rescale.strategy == RescaleStrategy::Smart {
                sgd_momentum_step(&mut l.rescale.scale, &mut self.scale_velocity[i], self.scale_lr, self.momentum)?;
            }
        }
        Ok(())
    }
}

/// Fraction of correct predictions.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

fn count_hits(net: &Network, ds: &LabeledDataset, source: MaskSource<'_>) -> Result<usize> {
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let pred = net.predict(&x, source)?;
        hits += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(hits)
}

fn evaluate_source(net: &Network, ds: &LabeledDataset, source: MaskSource<'_>) -> Result<f64> {
    let hits = count_hits(net, ds, source)?;
    Ok(if ds.is_empty() { 0.0 } else { hits as f64 / ds.len() as f64 })
}

/// Accuracy of the deterministic `p > 0.5` subnetwork.
pub fn evaluate_threshold(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    evaluate_source(net, ds, MaskSource::Threshold)
}

/// Accuracy of one given topology (binary masks, one per prunable layer).
pub fn evaluate_fixed(net: &Network, ds: &LabeledDataset, masks: &[DenseArray]) -> Result<f64> {
    evaluate_source(net, ds, MaskSource::Fixed(masks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingReport {
    pub mean: f64,
    /// Population standard deviation of the per-topology accuracies.
    pub std: f64,
    pub per_sample: Vec<f64>,
}

/// Sampler for the `index`-th topology of averaging evaluation under `seed`.
pub fn averaging_sampler(seed: u64, index: usize, depth: usize, temperature: f32) -> Result<TopologySampler> {
    TopologySampler::new(rng::derive_indexed_seed(seed, AVERAGING_LABEL, index as u64), GUMBEL_LABEL, depth, temperature)
}

/// Mean accuracy over `n` independently sampled topologies.
///
/// Topology `i` is drawn from its own stream derived from `seed`, so the
/// result does not depend on how the samples are spread over threads.
pub fn evaluate_averaging(net: &Network, ds: &LabeledDataset, n: usize, seed: u64, temperature: f32) -> Result<AveragingReport> {
    if n == 0 {
        return Err(Error::Config("averaging needs at least one sample".into()));
    }
    let workers = thread::available_parallelism().map_or(1, |p| p.get()).min(n);
    let indices: Vec<usize> = (0..n).collect();
    let per_worker = n.div_ceil(workers);
    let results: Vec<Result<Vec<usize>>> = thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(per_worker)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|&i| {
                            let mut sampler = averaging_sampler(seed, i, net.depth(), temperature)?;
                            let topo = net.sample_topology(&mut sampler)?;
                            let masks: Vec<DenseArray> = topo.hard_masks().cloned().collect();
                            count_hits(net, ds, MaskSource::Fixed(&masks))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut hits = Vec::with_capacity(n);
    for r in results {
        hits.extend(r?);
    }
    // integer sums keep the mean exact when every topology scores the same
    let size = ds.len().max(1) as u128;
    let sum: u128 = hits.iter().map(|&h| h as u128).sum();
    let sum_sq: u128 = hits.iter().map(|&h| (h as u128) * (h as u128)).sum();
    let n128 = n as u128;
    let mean = sum as f64 / (n128 * size) as f64;
    let var = (n128 * sum_sq - sum * sum) as f64 / ((n128 * n128) as f64 * (size * size) as f64);
    let per_sample = hits.iter().map(|&h| if ds.is_empty() { 0.0 } else { h as f64 / ds.len() as f64 }).collect();
    Ok(AveragingReport {
        mean,
        std: var.sqrt(),
        per_sample,
    })
}

/// Accuracy in the configured evaluation mode. `eval_index` separates the
/// averaging draws of different calls.
pub fn evaluate(net: &Network, ds: &LabeledDataset, cfg: &RunConfig, eval_index: u64) -> Result<(f64, Option<AveragingReport>)> {
    match cfg.eval {
        EvalMode::Threshold => Ok((evaluate_threshold(net, ds)?, None)),
        EvalMode::Averaging => {
            let seed = rng::derive_indexed_seed(cfg.seed, "eval", eval_index);
            let r = evaluate_averaging(net, ds, cfg.avg_samples, seed, cfg.temperature as f32)?;
            Ok((r.mean, Some(r)))
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Pruning rate of the threshold topology.
    pub pruning_rate: f64,
    pub epoch_seconds: f64,
    /// Per-layer rescale factor under the threshold topology.
    pub scales: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn csv_header(depth: usize) -> String {
        let mut h = String::from("epoch,train_loss,val_acc,pruning_rate,epoch_seconds");
        for l in 1..=depth {
            h.push_str(&format!(",s_{l}"));
        }
        h
    }

    pub fn to_csv(&self, depth: usize) -> String {
        let mut out = Self::csv_header(depth);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_acc, r.pruning_rate, r.epoch_seconds
            ));
            for s in &r.scales {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Result of [`train`]. The network passed in holds the best state when
/// this is returned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub record: TrainRecord,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the best network, in the configured mode.
    pub test_acc: f64,
    /// Spread of the averaged topologies at the best network, when
    /// evaluating by averaging.
    pub test_averaging: Option<AveragingReport>,
    pub final_pruning_rate: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// JSON summary: best epoch and accuracies, pruning rate, config echo.
    pub fn summary_json(&self, cfg: &RunConfig) -> serde_json::Value {
        serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "test_acc": self.test_acc,
            "test_acc_std": self.test_averaging.as_ref().map(|r| r.std),
            "final_pruning_rate": self.final_pruning_rate,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "config": cfg,
        })
    }
}

/// Mean loss and timing of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub seconds: f64,
    /// Time spent in rescale operators, measured only on a profiled trainer.
    pub rescale_seconds: f64,
    pub batches: usize,
}

/// Per-layer statistics of the trained arrays, printed when training aborts.
pub fn layer_stats(net: &Network) -> String {
    let mut out = String::new();
    for (i, l) in net.layers().enumerate() {
        let v = l.mask.m_hat.values();
        let finite = v.iter().filter(|x| x.is_finite()).count();
        let (lo, hi) = v.iter().filter(|x| x.is_finite()).fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        out.push_str(&format!(
            "layer {}: shape {:?} m_hat finite {}/{} min {} max {} mean {} scale {}\n",
            i + 1,
            l.weights.shape(),
            finite,
            v.len(),
            lo,
            hi,
            mean,
            l.rescale.scale.values()[0]
        ));
    }
    out
}

/// Stateful epoch runner: optimiser buffers and Gumbel streams persist
/// across epochs.
pub struct Trainer {
    cfg: RunConfig,
    opt: NetworkOptimizer,
    sampler: TopologySampler,
    epoch: usize,
    profile: bool,
}

impl Trainer {
    pub fn new(net: &Network, cfg: &RunConfig) -> Result<Self> {
        cfg.validate_structure()?;
        if cfg.mask_lr < 0.0 || cfg.scale_lr < 0.0 {
            return Err(Error::Config("learning rates must not be negative".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            opt: NetworkOptimizer::new(cfg.mask_lr, cfg.scale_lr, cfg.momentum, net.depth()),
            sampler: TopologySampler::new(cfg.seed, GUMBEL_LABEL, net.depth(), cfg.temperature as f32)?,
            epoch: 0,
            profile: false,
        })
    }

    /// Times the rescale operators of every step.
    pub fn profiled(mut self) -> Self {
        self.profile = true;
        self
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` in a seeded shuffled order.
    pub fn run_epoch(&mut self, net: &mut Network, train: &LabeledDataset) -> Result<EpochStats> {
        let started = Instant::now();
        let e = self.epoch as u64;
        self.epoch += 1;
        let order = data::shuffled_order(train.len(), &mut rng::indexed_stream(self.cfg.seed, "data", e));
        let aug = if self.cfg.augment {
            if train.sample_shape().len() != 3 {
                return Err(Error::Config("augmentation needs image inputs and a convolutional architecture".into()));
            }
            Some((self.cfg.pad, rng::indexed_stream(self.cfg.seed, "augment", e)))
        } else {
            None
        };
        let mut epoch_topology: Option<SampledTopology> = None;
        if self.cfg.mask_per == MaskPer::Epoch {
            epoch_topology = Some(net.sample_topology(&mut self.sampler)?);
        }
        let (mut loss_sum, mut seen, mut batches) = (0.0f64, 0usize, 0usize);
        let mut rescale_seconds = 0.0;
        for batch in Prefetcher::spawn(train.clone(), order, self.cfg.batch_size, aug, 2) {
            let (x, y) = batch?;
            let fresh;
            let topo = match &epoch_topology {
                Some(t) => t,
                None => {
                    fresh = net.sample_topology(&mut self.sampler)?;
                    &fresh
                }
            };
            let mut tape = if self.profile { Tape::profiled() } else { Tape::new() };
            let step = (|| -> Result<f32> {
                let xv = tape.constant(&x);
                let out = net.forward(&mut tape, xv, MaskSource::Sampled(topo))?;
                let loss = tape.softmax_cross_entropy(out.logits, &y)?;
                let value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                net.accumulate_grads(&out, &grads)?;
                Ok(value)
            })();
            let value = match step {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    let stats = layer_stats(net);
                    log::error!("non-finite loss in epoch {}; layer statistics:\n{stats}", self.epoch);
                    return Err(Error::Numerical(format!("non-finite loss in epoch {}\n{stats}", self.epoch)));
                }
                Err(e) => return Err(e),
            };
            self.opt.step(net)?;
            rescale_seconds += tape.rescale_time().as_secs_f64();
            loss_sum += f64::from(value) * y.len() as f64;
            seen += y.len();
            batches += 1;
        }
        Ok(EpochStats {
            loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            seconds: started.elapsed().as_secs_f64(),
            rescale_seconds,
            batches,
        })
    }
}

fn train_loop(net: &mut Network, data: &Splits, cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, cfg)?;
    let mut record = TrainRecord::default();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let stats = trainer.run_epoch(net, &data.train)?;
        let (val_acc, avg) = evaluate(net, &data.val, cfg, epoch as u64)?;
        if let Some(r) = &avg {
            log::debug!("epoch {epoch}: averaging std {:.4}", r.std);
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            val_acc,
            pruning_rate: net.threshold_pruning_rate(),
            epoch_seconds: if cfg.record_time { stats.seconds } else { 0.0 },
            scales: net.scale_factors(),
        });
        log::info!("epoch {epoch}: loss {:.4} val {:.4} pruned {:.3}", stats.loss, val_acc, net.threshold_pruning_rate());
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, net.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_epoch, best_val_acc, best_net) = best.expect("at least one epoch runs");
    *net = best_net;
    let (test_acc, test_averaging) = evaluate(net, &data.test, cfg, 0)?;
    Ok(TrainOutcome {
        epochs_run: record.epochs.len(),
        record,
        best_epoch,
        best_val_acc,
        test_acc,
        test_averaging,
        final_pruning_rate: net.threshold_pruning_rate(),
        stopped_early,
    })
}

/// Mask-only training with early stopping on validation accuracy. On return
/// `net` holds the best network seen.
pub fn train(net: &mut Network, data: &Splits, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_loop(net, data, cfg)
}

/// The training loop with both learning rates set to zero, as a control run
/// where nothing is learned. Any other configuration is rejected.
pub fn train_frozen_control(net: &mut Network, data: &Splits, cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mask_lr != 0.0 || cfg.scale_lr != 0.0 {
        return Err(Error::Config("the control run needs mask-lr = scale-lr = 0".into()));
    }
    train_loop(net, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> RunConfig {
        RunConfig {
            max_epochs: 5,
            patience: 5,
            batch_size: 32,
            synthetic_samples: 200,
            record_time: false,
            ..RunConfig::default()
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = DenseArray::from_vec(vec![1.0, 2.0]).with_grad();
        p.accumulate_grad(&[0.5, -1.0]).unwrap();
        let mut v = Vec::new();
        sgd_momentum_step(&mut p, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.values(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_two_steps_closed_form() {
        let (lr, mu, g) = (0.5f32, 0.9f32, 2.0f32);
        let mut p = DenseArray::from_vec(vec![0.0]).with_grad();
        let mut v = Vec::new();
        for _ in 0..2 {
            p.accumulate_grad(&[g]).unwrap();
            sgd_momentum_step(&mut p, &mut v, lr, mu).unwrap();
        }
        assert!((p.values()[0] - (-lr * g * (2.0 + mu))).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = DenseArray::from_vec(vec![3.0, -2.0]).with_grad();
        let mut v = Vec::new();
        let mut steps = 0;
        while p.values().iter().any(|x| x.abs() > 1e-6) {
            let g: Vec<f32> = p.values().iter().map(|x| 2.0 * x).collect();
            p.accumulate_grad(&g).unwrap();
            sgd_momentum_step(&mut p, &mut v, 0.1, 0.9).unwrap();
            steps += 1;
            assert!(steps <= 500, "no convergence after 500 steps: {:?}", p.values());
        }
    }

    #[test]
    fn config_invariants() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig { mask_lr: 0.0, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RunConfig { patience: 11, max_epochs: 10, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("averaging".parse::<EvalMode>().unwrap(), EvalMode::Averaging);
        assert!("bogus".parse::<Arch>().is_err());
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let cfg = RunConfig { patience: 0, ..quick_cfg() };
        let data = prepare_data(&cfg).unwrap();
        let mut net = build_network(&cfg, &data).unwrap();
        let out = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(out.epochs_run, 1);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn early_stopping_bounds() {
        let cfg = RunConfig { max_epochs: 30, patience: 3, ..quick_cfg() };
        let data = prepare_data(&cfg).unwrap();
        let mut net = build_network(&cfg, &data).unwrap();
        let out = train(&mut net, &data, &cfg).unwrap();
        let max = out.record.epochs.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_acc, max);
        assert!(out.record.epochs.iter().all(|r| r.epoch <= out.best_epoch + cfg.patience));
        assert_eq!(evaluate_threshold(&net, &data.val).unwrap(), out.best_val_acc);
        let epochs: Vec<_> = out.record.epochs.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn zero_rates_leave_masks_alone() {
        let cfg = RunConfig { mask_lr: 0.0, scale_lr: 0.0, ..quick_cfg() };
        let data = prepare_data(&cfg).unwrap();
        let mut net = build_network(&cfg, &data).unwrap();
        let before = net.clone();
        let out = train_frozen_control(&mut net, &data, &cfg).unwrap();
        assert_eq!(net, before);
        let first = out.record.epochs[0].val_acc;
        assert!(out.record.epochs.iter().all(|r| r.val_acc == first));
        assert!(train(&mut net, &data, &cfg).is_err());
    }

    #[test]
    fn averaging_single_sample_matches_its_topology() {
        let cfg = quick_cfg();
        let data = prepare_data(&cfg).unwrap();
        let net = build_network(&cfg, &data).unwrap();
        let r = evaluate_averaging(&net, &data.val, 1, 42, 1.0).unwrap();
        let topo = net.sample_topology(&mut averaging_sampler(42, 0, net.depth(), 1.0).unwrap()).unwrap();
        let masks: Vec<_> = topo.hard_masks().cloned().collect();
        assert_eq!(r.per_sample, vec![evaluate_fixed(&net, &data.val, &masks).unwrap()]);
        assert_eq!(r.mean, r.per_sample[0]);
        assert_eq!(r.std, 0.0);
    }

    #[test]
    fn csv_layout() {
        let rec = TrainRecord {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_acc: 0.75,
                pruning_rate: 0.25,
                epoch_seconds: 0.0,
                scales: vec![2.0, 1.5],
            }],
        };
        assert_eq!(rec.to_csv(2), "epoch,train_loss,val_acc,pruning_rate,epoch_seconds,s_1,s_2\n1,0.5,0.75,0.25,0,2,1.5\n");
    }
}
