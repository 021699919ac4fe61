//! Trains briefly, writes a checkpoint, reloads it and checks that the
//! thresholded subnetwork predicts identically.
//!
//! `cargo run --release --example checkpoint_roundtrip`

use supermask::nn::checkpoint;
use supermask::train::{self, RunConfig};
use supermask::MaskSource;

fn main() -> supermask::Result<()> {
    let cfg = RunConfig {
        max_epochs: 10,
        patience: 10,
        ..RunConfig::default()
    };
    let data = train::prepare_data(&cfg)?;
    let mut net = train::build_network(&cfg, &data)?;
    train::train(&mut net, &data, &cfg)?;
    let dir = std::env::temp_dir().join("supermask-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("net.smck");
    checkpoint::save_checkpoint(&path, &net, Some(&cfg))?;
    let (loaded, stored_cfg) = checkpoint::load_checkpoint(&path)?;
    let before = net.predict(&data.test.images, MaskSource::Threshold)?;
    let after = loaded.predict(&data.test.images, MaskSource::Threshold)?;
    println!("checkpoint {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    println!("network identical: {}", loaded == net);
    println!("config identical: {}", stored_cfg.as_ref() == Some(&cfg));
    println!("predictions identical: {}", before == after);
    Ok(())
}
