//! Conv2 on CIFAR-10 with augmentation, thinned for a short run. Needs the
//! binary CIFAR-10 files in `$SUPERMASK_DATA_DIR` or the first argument.
//!
//! `cargo run --release --example cifar_conv -- data/cifar-10-batches-bin`

use std::path::PathBuf;

use supermask::train::{self, Arch, DatasetKind, RunConfig};

fn main() -> supermask::Result<()> {
    let mut cfg = RunConfig {
        dataset: DatasetKind::Cifar10,
        arch: Arch::Conv2,
        width_divisor: 4,
        augment: true,
        max_epochs: 3,
        patience: 3,
        data_dir: std::env::args().nth(1).map(PathBuf::from),
        ..RunConfig::default()
    };
    cfg.data_dir = cfg.resolved_data_dir();
    let Some(dir) = cfg.data_dir.clone() else {
        eprintln!("no CIFAR-10 directory given; pass one or set SUPERMASK_DATA_DIR");
        return Ok(());
    };
    let data = train::prepare_data(&cfg)?;
    println!(
        "{}: train {} val {} test {}, class histogram {:?}",
        dir.display(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.train.class_histogram()
    );
    let mut net = train::build_network(&cfg, &data)?;
    let out = train::train(&mut net, &data, &cfg)?;
    for r in &out.record.epochs {
        println!("epoch {}  loss {:.4}  val {:.4}  {:.1}s", r.epoch, r.train_loss, r.val_acc, r.epoch_seconds);
    }
    println!("test {:.4} at pruning rate {:.3}", out.test_acc, out.final_pruning_rate);
    Ok(())
}
