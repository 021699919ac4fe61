//! Per-epoch overhead of smart rescale against dynamic weight rescale on a
//! thinned Conv4.
//!
//! `cargo run --release --example bench_rescale [epochs]`

use supermask::harness::{self, BENCH_DEFAULTS};

fn main() -> supermask::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let overrides: Vec<(String, String)> = BENCH_DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let cfg = harness::resolve_config(None, &overrides)?;
    let report = harness::cmd_bench(&cfg, epochs)?;
    print!("{}", report.to_text());
    Ok(())
}
