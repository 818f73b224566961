mod support;

fn assert_holds(result: Result<(), String>) {
    if let Err(e) = result {
        panic!("{e}");
    }
}

#[test]
fn pmf_normalization() {
    assert_holds(support::pmf_normalization());
}

#[test]
fn ccdf_monotonicity() {
    assert_holds(support::ccdf_monotonicity());
}

#[test]
fn convolution_algebra() {
    assert_holds(support::convolution_algebra());
}

#[test]
fn count_conservation() {
    assert_holds(support::count_conservation());
}

#[test]
fn rejection_disjointness() {
    assert_holds(support::rejection_disjointness());
}

#[test]
fn alpha_monotonicity() {
    assert_holds(support::alpha_monotonicity());
}

#[test]
fn determinism() {
    assert_holds(support::determinism());
}

#[test]
fn memoization_transparency() {
    assert_holds(support::memoization_transparency());
}

#[test]
fn layer_one_bh_oracle() {
    assert_holds(support::layer_one_bh_oracle());
}
