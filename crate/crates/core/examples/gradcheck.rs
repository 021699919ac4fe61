//! Runs every numerical oracle: per-op gradient checks, the relaxed masked MLP
//! against finite differences, sampler marginals and compacted subnetworks.
//!
//! `cargo run --release --example gradcheck [seed]`

use supermask::verification::{self, OpUnderTest};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for op in OpUnderTest::ALL {
        match verification::gradcheck_op(op, seed) {
            Ok(err) => println!("{:<28} relative error {err:.2e}", op.name()),
            Err(e) => println!("{:<28} error: {e}", op.name()),
        }
    }
    let results = verification::run_all(seed);
    print!("{}", verification::format_table(&results));
    if results.iter().any(|r| !r.passed) {
        std::process::exit(3);
    }
}
