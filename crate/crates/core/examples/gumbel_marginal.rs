//! Empirical keep rate of the Gumbel-max sampler against `σ(m̂)`.
//!
//! `cargo run --release --example gumbel_marginal`

use supermask::mask::sigmoid;
use supermask::rng;
use supermask::verification::monte_carlo_keep_rate;

fn main() -> supermask::Result<()> {
    let draws = 100_000;
    println!("{:>6}  {:>8}  {:>8}  {:>8}", "m_hat", "sigma", "observed", "|diff|");
    for (i, m_hat) in [-4.0f32, -2.0, -0.5, 0.0, 0.5, 2.0, 4.0].into_iter().enumerate() {
        let mut r = rng::indexed_stream(7, "gumbel-marginal", i as u64);
        let observed = monte_carlo_keep_rate(m_hat, draws, &mut r)?;
        let expected = sigmoid(f64::from(m_hat));
        println!("{m_hat:>6.2}  {expected:>8.4}  {observed:>8.4}  {:>8.4}", (observed - expected).abs());
    }
    Ok(())
}
