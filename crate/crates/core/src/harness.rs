//! Experiment front-end: configuration files, the command implementations
//! behind the `supermask` binary, and their report formats.
//!
//! A configuration file is flat `key = value` text. Blank lines and lines
//! starting with `#` are ignored. Keys are the long flag names without the
//! leading dashes (`mask-lr`, `max-epochs`, ...; underscores are accepted
//! too). Command-line flags are applied after the file, so flags win.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{Network, WeightScheme};
use crate::rescale::RescaleStrategy;
use crate::train::{self, Arch, AveragingReport, EvalMode, RunConfig, TrainOutcome, Trainer};

/// Keys understood by [`apply_setting`], in the order of [`config_to_text`].
pub const CONFIG_KEYS: [&str; 29] = [
    "dataset",
    "arch",
    "mask-lr",
    "momentum",
    "scale-lr",
    "max-epochs",
    "patience",
    "batch-size",
    "temperature",
    "rescale",
    "weights",
    "augment",
    "eval",
    "avg-samples",
    "seed",
    "out-dir",
    "data-dir",
    "dwr-reading",
    "mask-per",
    "mask-last-layer",
    "mask-init",
    "biases",
    "hidden",
    "width-divisor",
    "synthetic-samples",
    "synthetic-classes",
    "synthetic-image-size",
    "pad",
    "record-time",
];

fn canonical_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('_', "-")
}

/// Parses `key = value` lines. Later occurrences of a key win.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((canonical_key(k), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}` as a number")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Applies one setting to a configuration.
pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let key = canonical_key(key);
    let v = value.trim();
    match key.as_str() {
        "dataset" => cfg.dataset = v.parse()?,
        "arch" => cfg.arch = v.parse()?,
        "mask-lr" => cfg.mask_lr = parse_num(&key, v)?,
        "momentum" => cfg.momentum = parse_num(&key, v)?,
        "scale-lr" => cfg.scale_lr = parse_num(&key, v)?,
        "max-epochs" => cfg.max_epochs = parse_num(&key, v)?,
        "patience" => cfg.patience = parse_num(&key, v)?,
        "batch-size" => cfg.batch_size = parse_num(&key, v)?,
        "temperature" => cfg.temperature = parse_num(&key, v)?,
        "rescale" => cfg.rescale = v.parse()?,
        "weights" => cfg.weights = v.parse()?,
        "augment" => cfg.augment = parse_on_off(&key, v)?,
        "eval" => cfg.eval = v.parse()?,
        "avg-samples" => cfg.avg_samples = parse_num(&key, v)?,
        "seed" => cfg.seed = parse_num(&key, v)?,
        "out-dir" => cfg.out_dir = PathBuf::from(v),
        "data-dir" => cfg.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
        "dwr-reading" => cfg.dwr_reading = v.parse()?,
        "mask-per" => cfg.mask_per = v.parse()?,
        "mask-last-layer" => cfg.mask_last_layer = parse_on_off(&key, v)?,
        "mask-init" => cfg.mask_init = parse_num(&key, v)?,
        "biases" => cfg.biases = parse_on_off(&key, v)?,
        "hidden" => {
            cfg.hidden = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|s| parse_num(&key, s.trim())).collect::<Result<_>>()?
            }
        }
        "width-divisor" => cfg.width_divisor = parse_num(&key, v)?,
        "synthetic-samples" => cfg.synthetic_samples = parse_num(&key, v)?,
        "synthetic-classes" => cfg.synthetic_classes = parse_num(&key, v)?,
        "synthetic-image-size" => cfg.synthetic_image_size = parse_num(&key, v)?,
        "pad" => cfg.pad = parse_num(&key, v)?,
        "record-time" => cfg.record_time = parse_on_off(&key, v)?,
        _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
    }
    Ok(())
}

fn weights_name(w: WeightScheme) -> &'static str {
    match w {
        WeightScheme::Kaiming => "kaiming",
        WeightScheme::KaimingScaled => "kaiming-scaled",
        WeightScheme::SignedConstant => "signed-constant",
    }
}

fn rescale_name(r: RescaleStrategy) -> &'static str {
    match r {
        RescaleStrategy::None => "none",
        RescaleStrategy::Smart => "smart",
        RescaleStrategy::Dynamic => "dynamic",
    }
}

/// Renders a configuration in the file format; parsing the text back gives
/// the same configuration.
pub fn config_to_text(cfg: &RunConfig) -> String {
    let hidden: Vec<String> = cfg.hidden.iter().map(ToString::to_string).collect();
    let values: [String; 29] = [
        cfg.dataset.to_string(),
        cfg.arch.to_string(),
        cfg.mask_lr.to_string(),
        cfg.momentum.to_string(),
        cfg.scale_lr.to_string(),
        cfg.max_epochs.to_string(),
        cfg.patience.to_string(),
        cfg.batch_size.to_string(),
        cfg.temperature.to_string(),
        rescale_name(cfg.rescale).into(),
        weights_name(cfg.weights).into(),
        on_off(cfg.augment).into(),
        cfg.eval.to_string(),
        cfg.avg_samples.to_string(),
        cfg.seed.to_string(),
        cfg.out_dir.display().to_string(),
        cfg.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        match cfg.dwr_reading {
            crate::rescale::DwrReading::Keep => "keep".into(),
            crate::rescale::DwrReading::Prune => "prune".into(),
        },
        cfg.mask_per.to_string(),
        on_off(cfg.mask_last_layer).into(),
        cfg.mask_init.to_string(),
        on_off(cfg.biases).into(),
        hidden.join(","),
        cfg.width_divisor.to_string(),
        cfg.synthetic_samples.to_string(),
        cfg.synthetic_classes.to_string(),
        cfg.synthetic_image_size.to_string(),
        cfg.pad.to_string(),
        on_off(cfg.record_time).into(),
    ];
    CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Settings from a file (if any) and then from flags. Keys listed in
/// `extra` are returned separately instead of being applied.
pub fn resolve_settings(
    base: RunConfig,
    file: Option<&Path>,
    overrides: &[(String, String)],
    extra: &[&str],
) -> Result<(RunConfig, BTreeMap<String, String>)> {
    let mut settings = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        settings.extend(parse_config_text(&text)?);
    }
    settings.extend(overrides.iter().map(|(k, v)| (canonical_key(k), v.clone())));
    let mut cfg = base;
    let mut rest = BTreeMap::new();
    for (k, v) in settings {
        if extra.contains(&k.as_str()) {
            rest.insert(k, v);
        } else {
            apply_setting(&mut cfg, &k, &v)?;
        }
    }
    Ok((cfg, rest))
}

pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    Ok(resolve_settings(RunConfig::default(), file, overrides, &[])?.0)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Names of the files written by [`cmd_train`] inside the output directory.
pub const TRAIN_CSV: &str = "train.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.smck";
pub const CONFIG_ECHO: &str = "config.txt";

/// Trains with `cfg` and writes the per-epoch CSV, the JSON summary, the
/// best checkpoint and the resolved configuration to `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = train::prepare_data(cfg)?;
    let mut net = train::build_network(cfg, &data)?;
    let outcome = train::train(&mut net, &data, cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(TRAIN_CSV), &outcome.record.to_csv(net.depth()))?;
    let summary = serde_json::to_string_pretty(&outcome.summary_json(cfg)).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&cfg.out_dir.join(SUMMARY_JSON), &(summary + "\n"))?;
    write_file(&cfg.out_dir.join(CONFIG_ECHO), &config_to_text(cfg))?;
    checkpoint::save_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &net, Some(cfg))?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitEval {
    pub accuracy: f64,
    pub averaging: Option<AveragingReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub pruning_rate: f64,
    pub val: SplitEval,
    pub test: SplitEval,
}

/// Evaluates a checkpoint on the validation and test splits. The dataset
/// settings come from the configuration stored in the checkpoint, with
/// `overrides` applied on top.
pub fn cmd_eval(checkpoint_path: &Path, file: Option<&Path>, overrides: &[(String, String)]) -> Result<EvalReport> {
    let (net, stored) = checkpoint::load_checkpoint(checkpoint_path)?;
    let (cfg, _) = resolve_settings(stored.unwrap_or_default(), file, overrides, &[])?;
    let data = train::prepare_data(&cfg)?;
    if data.train.sample_shape() != net.input_shape.as_slice() {
        return Err(Error::Format(format!(
            "checkpoint expects inputs of shape {:?}, dataset provides {:?}",
            net.input_shape,
            data.train.sample_shape()
        )));
    }
    let split = |ds, index| -> Result<SplitEval> {
        let (accuracy, averaging) = train::evaluate(&net, ds, &cfg, index)?;
        Ok(SplitEval { accuracy, averaging })
    };
    Ok(EvalReport {
        mode: cfg.eval,
        pruning_rate: net.threshold_pruning_rate(),
        val: split(&data.val, 1)?,
        test: split(&data.test, 0)?,
    })
}

/// Column header of the ablation table. One row per architecture and
/// evaluation mode; one column per cell of the {∅, WR, SC, WR+SC} ×
/// {without, with augmentation} grid, holding test accuracy in percent.
pub const ABLATION_HEADER: &str = "arch,eval,none,wr,sc,wr_sc,none_aug,wr_aug,sc_aug,wr_sc_aug";
/// Column header of the per-cell detail file.
pub const ABLATION_CELLS_HEADER: &str =
    "arch,rescale,weights,augment,best_epoch,epochs_run,best_val_acc,test_threshold,test_averaging,test_averaging_std,pruning_rate";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_CELLS_CSV: &str = "ablation_cells.csv";

/// Grid definition for [`cmd_ablate`].
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub base: RunConfig,
    pub archs: Vec<Arch>,
    /// Rescale strategy used in the WR columns.
    pub wr: RescaleStrategy,
    /// Worker threads; 1 runs the cells one after the other.
    pub parallel: usize,
}

impl AblationSpec {
    /// Reads the grid keys `archs`, `wr` and `parallel` next to the usual
    /// run settings.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (base, extra) = resolve_settings(RunConfig::default(), file, overrides, &["archs", "wr", "parallel"])?;
        let archs = match extra.get("archs") {
            Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Arch>>>()?,
            None => vec![base.arch],
        };
        let wr = match extra.get("wr") {
            Some(v) => v.parse()?,
            None => RescaleStrategy::Smart,
        };
        if wr == RescaleStrategy::None {
            return Err(Error::Config("wr must be smart or dynamic".into()));
        }
        let parallel = match extra.get("parallel") {
            Some(v) => parse_num("parallel", v)?,
            None => 1,
        };
        if archs.is_empty() || parallel == 0 {
            return Err(Error::Config("ablation needs at least one architecture and one worker".into()));
        }
        Ok(Self { base, archs, wr, parallel })
    }

    /// Every cell configuration, in table order.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &arch in &self.archs {
            for augment in [false, true] {
                for (rescale, weights) in [
                    (RescaleStrategy::None, WeightScheme::Kaiming),
                    (self.wr, WeightScheme::Kaiming),
                    (RescaleStrategy::None, WeightScheme::SignedConstant),
                    (self.wr, WeightScheme::SignedConstant),
                ] {
                    let mut c = self.base.clone();
                    c.arch = arch;
                    c.augment = augment;
                    c.rescale = rescale;
                    c.weights = weights;
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub arch: Arch,
    pub rescale: RescaleStrategy,
    pub weights: WeightScheme,
    pub augment: bool,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    pub test_threshold: f64,
    pub test_averaging: AveragingReport,
    pub pruning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub table_csv: String,
    pub cells_csv: String,
}

fn run_cell(cfg: &RunConfig, data: &Splits) -> Result<AblationCell> {
    let mut net = train::build_network(cfg, data)?;
    let outcome = train::train(&mut net, data, cfg)?;
    let test_threshold = train::evaluate_threshold(&net, &data.test)?;
    let seed = crate::rng::derive_seed(cfg.seed, "ablation-test");
    let test_averaging = train::evaluate_averaging(&net, &data.test, cfg.avg_samples, seed, cfg.temperature as f32)?;
    Ok(AblationCell {
        arch: cfg.arch,
        rescale: cfg.rescale,
        weights: cfg.weights,
        augment: cfg.augment,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        best_val_acc: outcome.best_val_acc,
        test_threshold,
        test_averaging,
        pruning_rate: outcome.final_pruning_rate,
    })
}

fn ablation_tables(spec: &AblationSpec, cells: &[AblationCell]) -> (String, String) {
    let mut table = format!("{ABLATION_HEADER}\n");
    for (ai, arch) in spec.archs.iter().enumerate() {
        let row = &cells[ai * 8..(ai + 1) * 8];
        for (mode, pick) in [
            ("averaging", (|c: &AblationCell| c.test_averaging.mean) as fn(&AblationCell) -> f64),
            ("thresholding", |c: &AblationCell| c.test_threshold),
        ] {
            table.push_str(&format!("{arch},{mode}"));
            for c in row {
                table.push_str(&format!(",{:.2}", 100.0 * pick(c)));
            }
            table.push('\n');
        }
    }
    let mut detail = format!("{ABLATION_CELLS_HEADER}\n");
    for c in cells {
        detail.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.arch,
            rescale_name(c.rescale),
            weights_name(c.weights),
            on_off(c.augment),
            c.best_epoch,
            c.epochs_run,
            c.best_val_acc,
            c.test_threshold,
            c.test_averaging.mean,
            c.test_averaging.std,
            c.pruning_rate
        ));
    }
    (table, detail)
}

/// Runs the 8-cell grid for every listed architecture and writes
/// `ablation.csv` and `ablation_cells.csv` to the output directory.
///
/// Cells share only the read-only dataset. With `parallel > 1` they are
/// handed out to worker threads, and each result is stored at its cell's
/// index, so the output does not depend on the worker count.
pub fn cmd_ablate(spec: &AblationSpec) -> Result<AblationReport> {
    let cells = spec.cells();
    for c in &cells {
        c.validate()?;
    }
    let data = train::prepare_data(&spec.base)?;
    let flat_data = |arch: Arch| -> Result<Splits> {
        let mut cfg = spec.base.clone();
        cfg.arch = arch;
        train::prepare_data(&cfg)
    };
    let mut per_arch: Vec<(Arch, Splits)> = Vec::new();
    for &arch in &spec.archs {
        if !per_arch.iter().any(|(a, _)| *a == arch) {
            let d = if arch == spec.base.arch { data.clone() } else { flat_data(arch)? };
            per_arch.push((arch, d));
        }
    }
    let data_for = |arch: Arch| &per_arch.iter().find(|(a, _)| *a == arch).expect("prepared").1;

    let results: Vec<Mutex<Option<Result<AblationCell>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cells.len() {
            break;
        }
        log::info!("ablation cell {}/{}", i + 1, cells.len());
        let r = run_cell(&cells[i], data_for(cells[i].arch));
        *results[i].lock().expect("result slot") = Some(r);
    };
    if spec.parallel <= 1 {
        worker();
    } else {
        thread::scope(|s| {
            for _ in 0..spec.parallel.min(cells.len()) {
                s.spawn(worker);
            }
        });
    }
    let cells: Vec<AblationCell> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect::<Result<_>>()?;
    let (table_csv, cells_csv) = ablation_tables(spec, &cells);
    write_file(&spec.base.out_dir.join(ABLATION_CSV), &table_csv)?;
    write_file(&spec.base.out_dir.join(ABLATION_CELLS_CSV), &cells_csv)?;
    Ok(AblationReport {
        cells,
        table_csv,
        cells_csv,
    })
}

/// Settings applied by `bench` before the user's: a Conv4-shaped network,
/// thinned, on small synthetic images.
/// The seven layer scales of Conv4 share one gradient direction, so the bench
/// uses a smaller scale step than the training default to stay finite.
pub const BENCH_DEFAULTS: [(&str, &str); 7] = [
    ("arch", "conv4"),
    ("width-divisor", "4"),
    ("synthetic-samples", "600"),
    ("synthetic-image-size", "16"),
    ("synthetic-classes", "4"),
    ("batch-size", "64"),
    ("scale-lr", "0.001"),
];

#[derive(Clone, Debug, Serialize)]
pub struct BenchStrategy {
    pub rescale: RescaleStrategy,
    /// Seconds per epoch spent in rescale operators (forward and backward).
    pub overhead: Vec<f64>,
    pub overhead_mean: f64,
    pub overhead_std: f64,
    pub epoch_seconds_mean: f64,
    /// Epoch with the best validation accuracy within the timed run.
    pub epochs_to_best: usize,
    pub best_val_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub arch: Arch,
    pub epochs: usize,
    pub strategies: Vec<BenchStrategy>,
    /// Mean SR overhead over mean DWR overhead.
    pub sr_dwr_ratio: f64,
}

impl BenchReport {
    pub fn strategy(&self, r: RescaleStrategy) -> &BenchStrategy {
        self.strategies.iter().find(|s| s.rescale == r).expect("all strategies benchmarked")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("rescale overhead per epoch, {} over {} epochs\n", self.arch, self.epochs);
        s.push_str("strategy  overhead_ms_mean  overhead_ms_std  epoch_s_mean  epochs_to_best  best_val_acc\n");
        for b in &self.strategies {
            s.push_str(&format!(
                "{:<8}  {:>16.4}  {:>15.4}  {:>12.4}  {:>14}  {:>12.4}\n",
                rescale_name(b.rescale),
                1e3 * b.overhead_mean,
                1e3 * b.overhead_std,
                b.epoch_seconds_mean,
                b.epochs_to_best,
                b.best_val_acc
            ));
        }
        s.push_str(&format!("SR/DWR overhead ratio: {:.4}\n", self.sr_dwr_ratio));
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times the per-epoch cost of each rescale strategy on identical data,
/// weights and seeds. The unrescaled run records no rescale operators, so
/// its overhead is 0 by construction.
pub fn cmd_bench(cfg: &RunConfig, epochs: usize) -> Result<BenchReport> {
    if epochs < 10 {
        return Err(Error::Config(format!("bench needs at least 10 timed epochs, got {epochs}")));
    }
    let data = train::prepare_data(cfg)?;
    struct Run {
        cfg: RunConfig,
        net: Network,
        trainer: Trainer,
        overhead: Vec<f64>,
        seconds: Vec<f64>,
        best_epoch: usize,
        best_acc: f64,
    }
    let mut runs = Vec::new();
    for rescale in [RescaleStrategy::None, RescaleStrategy::Smart, RescaleStrategy::Dynamic] {
        let c = RunConfig {
            rescale,
            max_epochs: epochs,
            patience: epochs,
            ..cfg.clone()
        };
        c.validate()?;
        let net = train::build_network(&c, &data)?;
        let trainer = Trainer::new(&net, &c)?.profiled();
        runs.push(Run {
            cfg: c,
            net,
            trainer,
            overhead: Vec::new(),
            seconds: Vec::new(),
            best_epoch: 0,
            best_acc: f64::NEG_INFINITY,
        });
    }
    // strategies alternate epoch by epoch so slow drifts of the machine hit all of them alike
    for e in 1..=epochs {
        for r in &mut runs {
            let stats = r.trainer.run_epoch(&mut r.net, &data.train)?;
            r.overhead.push(stats.rescale_seconds);
            r.seconds.push(stats.seconds);
            let (acc, _) = train::evaluate(&r.net, &data.val, &r.cfg, e as u64)?;
            if acc > r.best_acc {
                (r.best_epoch, r.best_acc) = (e, acc);
            }
        }
    }
    let strategies: Vec<BenchStrategy> = runs
        .into_iter()
        .map(|r| {
            let (overhead_mean, overhead_std) = mean_std(&r.overhead);
            BenchStrategy {
                rescale: r.cfg.rescale,
                overhead_mean,
                overhead_std,
                epoch_seconds_mean: mean_std(&r.seconds).0,
                epochs_to_best: r.best_epoch,
                best_val_acc: r.best_acc,
                overhead: r.overhead,
            }
        })
        .collect();
    let ratio = strategies[1].overhead_mean / strategies[2].overhead_mean;
    Ok(BenchReport {
        arch: cfg.arch,
        epochs,
        strategies,
        sr_dwr_ratio: ratio,
    })
}

/// Runs every oracle and returns whether all passed plus the printed table.
#[cfg(feature = "verification")]
pub fn cmd_verify(seed: u64) -> (bool, String) {
    let results = crate::verification::run_all(seed);
    let ok = results.iter().all(|r| r.passed);
    (ok, crate::verification::format_table(&results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let cfg = RunConfig {
            mask_lr: 12.5,
            hidden: vec![8, 4],
            data_dir: Some(PathBuf::from("/tmp/x")),
            augment: true,
            ..RunConfig::default()
        };
        let text = config_to_text(&cfg);
        assert_eq!(resolve_config_from_text(&text), cfg);
        assert_eq!(resolve_config_from_text(&config_to_text(&RunConfig::default())), RunConfig::default());
    }

    fn resolve_config_from_text(text: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_config_text(text).unwrap() {
            apply_setting(&mut cfg, &k, &v).unwrap();
        }
        cfg
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nmask_lr = 10\npatience=5\n\nrescale = dynamic\n").unwrap();
        let cfg = resolve_config(Some(&path), &[("--mask-lr".into(), "20".into())]).unwrap();
        assert_eq!(cfg.mask_lr, 20.0);
        assert_eq!(cfg.patience, 5);
        assert_eq!(cfg.rescale, RescaleStrategy::Dynamic);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("nope", "1"), ("augment", "maybe"), ("mask-lr", "abc"), ("arch", "resnet")] {
            let e = apply_setting(&mut cfg, k, v).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{k}");
        }
        assert!(parse_config_text("novalue").is_err());
    }

    #[test]
    fn ablation_grid_order() {
        let spec = AblationSpec::resolve(None, &[("archs".into(), "conv2,conv4".into())]).unwrap();
        let cells = spec.cells();
        assert_eq!(cells.len(), 16);
        assert_eq!((cells[0].rescale, cells[0].weights, cells[0].augment), (RescaleStrategy::None, WeightScheme::Kaiming, false));
        assert_eq!((cells[3].rescale, cells[3].weights), (RescaleStrategy::Smart, WeightScheme::SignedConstant));
        assert!(cells[4].augment);
        assert_eq!(cells[8].arch, Arch::Conv4);
    }
}
