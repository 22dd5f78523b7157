mod common;

use common::oracle::{gradcheck_all, loss_oracle_gap};

#[test]
fn gradients_match_finite_differences() {
    for (name, err) in gradcheck_all(100) {
        println!("{name}: {err:.2e}");
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn loss_matches_double_loop() {
    let (abs, rel) = loss_oracle_gap(100);
    println!("abs {abs:e} rel {rel:e}");
    assert!(rel <= 1e-6, "{rel}");
}
