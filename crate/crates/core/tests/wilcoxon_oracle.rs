//! Rank-sum test against brute-force enumeration.

mod common;

use strokeseg::metrics::{wilcoxon_exact, wilcoxon_normal, wilcoxon_ranksum, WilcoxonMethod};

#[test]
fn exact_matches_enumeration_up_to_ten() {
    let err = common::wilcoxon_oracle_max_error(10);
    assert!(err < 1e-12, "max |p_exact - p_brute| = {err:e}");
}

#[test]
fn normal_tracks_exact_at_ten_vs_ten() {
    let gap = common::wilcoxon_normal_max_gap(200);
    assert!(gap < 0.02, "max gap {gap}");
}

#[test]
fn two_vs_two_is_one_third() {
    let r = wilcoxon_ranksum(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(r.method, WilcoxonMethod::Exact);
    assert_eq!(r.w, 3.0);
    assert!((r.p_two_sided - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn ties_fall_back_to_normal() {
    let r = wilcoxon_ranksum(&[0.0, 0.0, 0.5], &[0.0, 0.7, 0.9]).unwrap();
    assert_eq!(r.method, WilcoxonMethod::Normal);
    assert!(wilcoxon_exact(&[0.0, 0.0], &[1.0]).is_err());
    // average ranks: zeros share rank 2
    assert_eq!(r.w, 2.0 + 2.0 + 4.0);
}

#[test]
fn large_samples_use_normal() {
    let a: Vec<f64> = (0..7).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..7).map(|i| i as f64 + 0.5).collect();
    let r = wilcoxon_ranksum(&a, &b).unwrap();
    assert_eq!(r.method, WilcoxonMethod::Normal);
    assert_eq!(r.p_two_sided, wilcoxon_normal(&a, &b).unwrap().p_two_sided);
}
