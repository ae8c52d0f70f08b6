//! Training-loss gradients of the encoder and LMM against central finite differences.

mod common;

use common::fd_check;

fn assert_close(prefix: &str) {
    let results = fd_check(prefix, 10, 1e-4, 7);
    for r in &results {
        assert!(
            r.relative_error() <= 1e-3,
            "{}[{}]: autodiff {:e} vs finite difference {:e}",
            r.name,
            r.index,
            r.analytic,
            r.numeric
        );
    }
    assert!(results.iter().any(|r| r.analytic != 0.0), "every probed gradient was zero");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    assert_close("encoder.");
}

#[test]
fn lmm_gradients_match_finite_differences() {
    assert_close("lmm.");
}

