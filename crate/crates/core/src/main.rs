use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use supermask::harness::{self, AblationSpec, BENCH_DEFAULTS};
use supermask::{Error, Result};

#[derive(Parser)]
#[command(name = "supermask", version, about = "Mask-only training of frozen random networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run settings. Every flag is also a key of the configuration file.
#[derive(Args, Default)]
struct RunFlags {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cifar10 | cifar100 | synthetic
    #[arg(long)]
    dataset: Option<String>,
    /// conv2 | conv4 | conv6 | mlp
    #[arg(long)]
    arch: Option<String>,
    #[arg(long = "mask-lr")]
    mask_lr: Option<String>,
    #[arg(long = "scale-lr")]
    scale_lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    /// none | smart | dynamic
    #[arg(long)]
    rescale: Option<String>,
    /// kaiming | kaiming-scaled | signed-constant
    #[arg(long)]
    weights: Option<String>,
    /// on | off
    #[arg(long)]
    augment: Option<String>,
    /// threshold | averaging
    #[arg(long)]
    eval: Option<String>,
    #[arg(long = "avg-samples")]
    avg_samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
    /// Dataset root (default: $SUPERMASK_DATA_DIR)
    #[arg(long = "data-dir")]
    data_dir: Option<String>,
    /// keep | prune
    #[arg(long = "dwr-reading")]
    dwr_reading: Option<String>,
    /// batch | epoch
    #[arg(long = "mask-per")]
    mask_per: Option<String>,
    /// on | off
    #[arg(long = "mask-last-layer")]
    mask_last_layer: Option<String>,
    /// Any other configuration key, as KEY=VALUE (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunFlags {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let named = [
            ("dataset", &self.dataset),
            ("arch", &self.arch),
            ("mask-lr", &self.mask_lr),
            ("scale-lr", &self.scale_lr),
            ("momentum", &self.momentum),
            ("max-epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("batch-size", &self.batch_size),
            ("temperature", &self.temperature),
            ("rescale", &self.rescale),
            ("weights", &self.weights),
            ("augment", &self.augment),
            ("eval", &self.eval),
            ("avg-samples", &self.avg_samples),
            ("seed", &self.seed),
            ("out-dir", &self.out_dir),
            ("data-dir", &self.data_dir),
            ("dwr-reading", &self.dwr_reading),
            ("mask-per", &self.mask_per),
            ("mask-last-layer", &self.mask_last_layer),
        ];
        let mut out: Vec<(String, String)> = named
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train masks and write CSV, JSON summary and checkpoint to --out-dir
    Train(RunFlags),
    /// Evaluate a checkpoint on the validation and test splits
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the {none, WR, SC, WR+SC} x {augmentation off, on} grid
    Ablate {
        /// Comma-separated architectures (default: --arch)
        #[arg(long)]
        archs: Option<String>,
        /// Rescale used in the WR cells: smart | dynamic
        #[arg(long)]
        wr: Option<String>,
        /// Cells run concurrently
        #[arg(long)]
        parallel: Option<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Time the per-epoch overhead of no rescale, smart rescale and dynamic rescale
    Bench {
        /// Timed epochs per strategy (at least 10)
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run every numerical oracle and print a pass/fail table
    #[cfg(feature = "verification")]
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = harness::resolve_config(flags.config.as_deref(), &flags.overrides()?)?;
            let out = harness::cmd_train(&cfg)?;
            println!(
                "best epoch {} val {:.4} test {:.4} pruning {:.4} -> {}",
                out.best_epoch,
                out.best_val_acc,
                out.test_acc,
                out.final_pruning_rate,
                cfg.out_dir.display()
            );
        }
        Command::Eval { checkpoint, flags } => {
            let report = harness::cmd_eval(&checkpoint, flags.config.as_deref(), &flags.overrides()?)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Ablate { archs, wr, parallel, flags } => {
            let mut overrides = flags.overrides()?;
            for (k, v) in [("archs", archs), ("wr", wr), ("parallel", parallel)] {
                if let Some(v) = v {
                    overrides.push((k.into(), v));
                }
            }
            let spec = AblationSpec::resolve(flags.config.as_deref(), &overrides)?;
            print!("{}", harness::cmd_ablate(&spec)?.table_csv);
        }
        Command::Bench { epochs, flags } => {
            let mut overrides: Vec<(String, String)> =
                BENCH_DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            overrides.extend(flags.overrides()?);
            let cfg = if let Some(path) = flags.config.as_deref() {
                // file settings sit between the bench defaults and the flags
                let (base, _) = harness::resolve_settings(Default::default(), None, &overrides[..BENCH_DEFAULTS.len()], &[])?;
                harness::resolve_settings(base, Some(path), &overrides[BENCH_DEFAULTS.len()..], &[])?.0
            } else {
                harness::resolve_config(None, &overrides)?
            };
            print!("{}", harness::cmd_bench(&cfg, epochs)?.to_text());
        }
        #[cfg(feature = "verification")]
        Command::Verify { seed } => {
            let (ok, table) = harness::cmd_verify(seed);
            print!("{table}");
            return Ok(if ok { 0 } else { 3 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
