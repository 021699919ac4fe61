use supermask::verification::{self, OpUnderTest};

#[test]
fn every_operator_matches_central_differences() {
    for seed in 0..5 {
        for op in OpUnderTest::ALL {
            let err = verification::gradcheck_op(op, seed).unwrap();
            assert!(err < 1e-3, "{} seed {seed}: relative error {err}", op.name());
        }
    }
}

#[test]
fn relaxed_masked_mlp_matches_central_differences() {
    for seed in 0..20 {
        let check = verification::gradcheck_relaxed_mlp(seed).unwrap();
        assert!(check.rel_err < 1e-3, "seed {seed}: relative error {}", check.rel_err);
    }
}

#[test]
fn finite_differences_of_a_cubic() {
    let x = [0.5, -1.5, 2.0];
    let g = verification::finite_diff_grad(|p| p.iter().map(|v| v * v * v).sum(), &x, 1e-5);
    let exact: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
    assert!(verification::relative_error(&g, &exact) < 1e-8);
}

#[test]
fn every_oracle_in_the_verify_table_passes() {
    let results = verification::run_all(1);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.name, r.detail)).collect();
    assert!(failed.is_empty(), "{failed:?}");
}
