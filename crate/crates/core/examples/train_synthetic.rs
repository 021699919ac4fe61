//! Mask-only training of a frozen 2-16-16-2 MLP on the two-blob task.
//!
//! `cargo run --release --example train_synthetic`

use supermask::rescale::RescaleStrategy;
use supermask::train::{self, RunConfig};

fn main() -> supermask::Result<()> {
    let cfg = RunConfig {
        rescale: RescaleStrategy::None,
        max_epochs: 60,
        patience: 20,
        seed: 3,
        ..RunConfig::default()
    };
    let data = train::prepare_data(&cfg)?;
    let mut net = train::build_network(&cfg, &data)?;
    let hash = net.frozen_hash();
    let out = train::train(&mut net, &data, &cfg)?;
    for r in out.record.epochs.iter().step_by(10) {
        println!("epoch {:>3}  loss {:.4}  val {:.3}  pruned {:.3}", r.epoch, r.train_loss, r.val_acc, r.pruning_rate);
    }
    println!(
        "best epoch {} val {:.3} test {:.3}, {} of {} weights pruned, weights untouched: {}",
        out.best_epoch,
        out.best_val_acc,
        out.test_acc,
        (out.final_pruning_rate * net.weight_count() as f64).round(),
        net.weight_count(),
        hash == net.frozen_hash()
    );
    Ok(())
}
