//! The rescale x signed-constant x augmentation grid on a small conv task.
//!
//! `cargo run --release --example ablation_grid`

use supermask::harness::{self, AblationSpec};
use supermask::rescale::RescaleStrategy;
use supermask::train::{Arch, RunConfig};

fn main() -> supermask::Result<()> {
    let spec = AblationSpec {
        base: RunConfig {
            arch: Arch::Conv2,
            width_divisor: 8,
            synthetic_samples: 300,
            synthetic_image_size: 8,
            synthetic_classes: 3,
            batch_size: 32,
            pad: 1,
            max_epochs: 4,
            patience: 4,
            avg_samples: 3,
            out_dir: std::env::temp_dir().join("supermask-ablation-example"),
            ..RunConfig::default()
        },
        archs: vec![Arch::Conv2],
        wr: RescaleStrategy::Smart,
        parallel: 4,
    };
    let report = harness::cmd_ablate(&spec)?;
    print!("{}", report.table_csv);
    println!("per-cell details in {}", spec.base.out_dir.display());
    Ok(())
}
