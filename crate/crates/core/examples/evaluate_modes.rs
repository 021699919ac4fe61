//! Thresholding against averaging over sampled topologies on a trained MLP.
//!
//! `cargo run --release --example evaluate_modes`

use supermask::train::{self, RunConfig};

fn main() -> supermask::Result<()> {
    let cfg = RunConfig {
        max_epochs: 40,
        patience: 40,
        synthetic_classes: 4,
        hidden: vec![32, 32],
        seed: 5,
        ..RunConfig::default()
    };
    let data = train::prepare_data(&cfg)?;
    let mut net = train::build_network(&cfg, &data)?;
    train::train(&mut net, &data, &cfg)?;
    println!("threshold (m_hat > 0): test {:.4}", train::evaluate_threshold(&net, &data.test)?);
    for n in [1, 5, 20] {
        let avg = train::evaluate_averaging(&net, &data.test, n, cfg.seed, cfg.temperature as f32)?;
        println!("averaging over {n:>2} topologies: mean {:.4} std {:.4}", avg.mean, avg.std);
    }
    Ok(())
}
