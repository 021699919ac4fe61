//! The three rescale options on one sampled mask, and the signed constant
//! weight transform.
//!
//! `cargo run --release --example rescale_strategies`

use supermask::mask::{keep_rate, stgs_sample, MaskParameters};
use supermask::nn::{init_weights, WeightScheme};
use supermask::rescale::{signed_constant_transform, DwrReading, RescaleState};
use supermask::rng;

fn main() -> supermask::Result<()> {
    let mut r = rng::stream(1, "rescale-example");
    let params = MaskParameters::new(&[16, 16], 0.8);
    let sample = stgs_sample(&params, 1.0, &mut r)?;
    println!("keep rate of the sampled mask: {:.4}", keep_rate(&sample.hard)?);
    for (name, state) in [
        ("none", RescaleState::none()),
        ("smart (initial)", RescaleState::smart(2.0)),
        ("dynamic, keep reading", RescaleState::dynamic(DwrReading::Keep)),
        ("dynamic, prune reading", RescaleState::dynamic(DwrReading::Prune)),
    ] {
        println!("{name:<24} factor {:.4}", state.factor(&sample.hard));
    }
    let w = init_weights(&[4, 8], WeightScheme::Kaiming, &mut r);
    let sc = signed_constant_transform(&w);
    println!("kaiming row 0:         {:?}", &w.values()[..8]);
    println!("signed constant row 0: {:?}", &sc.values()[..8]);
    Ok(())
}
