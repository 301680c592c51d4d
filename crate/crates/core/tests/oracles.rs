mod common;

use common::oracles::*;
use persona_policy::eval::{spearman, wilson_interval, Z_95};

#[test]
fn gae_matches_brute_force_sums() {
    let err = gae_max_error();
    assert!(err < 1e-10, "max deviation {err:e}");
}

#[test]
fn gae_hand_case() {
    let adv = gae_brute(&[1.0, 0.0], &[0.5, 0.5, 0.0], &[false, true], 0.99, 0.95);
    assert!((adv[0] - 0.52475).abs() < 1e-12);
    assert!((adv[1] + 0.5).abs() < 1e-12);
}

#[test]
fn spearman_matches_rank_oracle_on_twenty_tables() {
    let err = spearman_max_error();
    assert!(err < 1e-12, "max deviation {err:e}");
}

#[test]
fn spearman_without_ties_matches_squared_rank_formula() {
    for (x, y) in spearman_tables().iter().step_by(2) {
        let (rx, ry) = (ranks_by_counting(x), ranks_by_counting(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let want = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman(x, y).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn wilson_reproduces_reported_brackets() {
    assert_eq!(wilson_rounded(51, 300), (0.13, 0.22));
    assert_eq!(wilson_rounded(5, 300), (0.01, 0.04));
    let (lo, hi) = wilson_interval(51, 300, Z_95).unwrap();
    assert!((lo - 0.131730098).abs() < 1e-9 && (hi - 0.216614263).abs() < 1e-9);
    let (lo, hi) = wilson_interval(5, 300, Z_95).unwrap();
    assert!((lo - 0.007139477).abs() < 1e-9 && (hi - 0.038415395).abs() < 1e-9);
}

#[test]
fn loss_closed_forms_hold() {
    loss_closed_forms().unwrap();
}
