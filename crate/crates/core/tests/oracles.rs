mod common;

use common::Check;

fn assert_check(c: Check) {
    assert!(c.pass, "{}", c.detail);
    eprintln!("{}", c.detail);
}

#[test]
fn tokenizer_round_trip() {
    assert_check(common::tokenizer_round_trip());
}

#[test]
fn attribute_classifier_matches_linear_scan() {
    assert_check(common::attribute_oracle());
}

#[test]
fn gradients_match_finite_differences() {
    assert_check(common::gradient_checks());
}

#[test]
fn vae_math() {
    assert_check(common::vae_math());
}

#[test]
fn conditioning_identities() {
    assert_check(common::conditioning_identities());
}

#[test]
fn nucleus_sampling() {
    assert_check(common::nucleus_sampling());
}

#[test]
fn metric_identities() {
    assert_check(common::metric_identities());
}
