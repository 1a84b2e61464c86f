//! Regression values for the committed two-machine three-bus scenario,
//! frozen from an independent scipy computation of the same network.

mod common;

use approx::assert_abs_diff_eq;
use common::{committed_fault, committed_model, committed_study};
use lvrt_csr::csr::{self, CsrConfig, PolytopeConfig, Setup, Verdict};
use lvrt_csr::dynamics::{FaultStudy, COAState};
use lvrt_csr::oracle::{self, CellClass, OracleOptions};

const B_POST_12: f64 = 0.769_230_769_230_769_3;
const B_FAULT_12: f64 = 5.999_959_333_605_555e-6;
const SEP_PRE: f64 = 0.261_145_042_673_043_1;
const SEP_POST: f64 = 0.352_823_250_758_558_36;
const RECOVERY_C: [f64; 2] = [0.646_153_846_153_846_2, 0.403_846_153_846_153_9];
const CLEARED_X1: f64 = 0.136_068_735_785_741_97;
const CLEARED_X2: f64 = 1.667_002_955_720_099_6;
const TRUE_CCT: f64 = 0.253_125;

#[test]
fn reduced_networks_match_reference() {
    let s = committed_study();
    assert_abs_diff_eq!(s.pre.reduced.b_red[(0, 1)], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.post.reduced.b_red[(0, 1)], B_POST_12, epsilon = 1e-12);
    assert_abs_diff_eq!(s.post.reduced.b_red[(0, 0)], -B_POST_12, epsilon = 1e-12);
    assert_abs_diff_eq!(s.fault_on.reduced.b_red[(0, 1)], B_FAULT_12, epsilon = 1e-12);
    assert_eq!(s.post.reduced.edges, vec![(0, 1)]);
}

#[test]
fn equilibria_match_reference() {
    let s = committed_study();
    assert_abs_diff_eq!(s.pre_sep[0], SEP_PRE, epsilon = 1e-10);
    assert_abs_diff_eq!(s.pre_sep[1], -SEP_PRE, epsilon = 1e-10);
    assert_abs_diff_eq!(s.post_sep[0], SEP_POST, epsilon = 1e-10);
    assert_abs_diff_eq!(s.post_sep[1], -SEP_POST, epsilon = 1e-10);
    assert_abs_diff_eq!(s.mats.lambda, 12.0, epsilon = 1e-12);
}

#[test]
fn recovery_constants_match_reference() {
    let s = committed_study();
    assert_eq!(s.lvrt.len(), 1);
    let rg = &s.post.recovery.rg[0];
    assert_eq!(rg.bus_id, 3);
    for (c, r) in rg.c.iter().zip(RECOVERY_C) {
        assert_abs_diff_eq!(*c, r, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(s.lvrt[0].terms[0].phase, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.lvrt[0].lvrt_max, 0.85);
}

#[test]
fn cleared_state_matches_reference() {
    let s = committed_study();
    let x = s.fault_state(0.2).unwrap();
    assert_abs_diff_eq!(x.x1[0], CLEARED_X1, epsilon = 1e-7);
    assert_abs_diff_eq!(x.x1[1], -CLEARED_X1, epsilon = 1e-7);
    assert_abs_diff_eq!(x.x2[0], CLEARED_X2, epsilon = 1e-7);
    assert_abs_diff_eq!(x.x2[1], -CLEARED_X2, epsilon = 1e-7);
}

#[test]
fn true_cct_matches_reference() {
    let s = committed_study();
    let opts = OracleOptions::default();
    let cct = oracle::true_cct(&s, &opts).unwrap();
    assert!((cct - TRUE_CCT).abs() <= 2e-3, "true CCT {cct}");
    assert!(oracle::stable_clearing(&s, TRUE_CCT - 2e-3, &opts).unwrap());
    assert!(!oracle::stable_clearing(&s, TRUE_CCT + 2e-3, &opts).unwrap());
}

#[test]
fn committed_fault_is_certified_below_true_cct() {
    let s = committed_study();
    let setup = Setup::new(&s, &PolytopeConfig::default()).unwrap();
    let (result, est) = csr::assess_fault(&s, &setup, &CsrConfig::default()).unwrap();
    assert_eq!(result.verdict, Verdict::Stable);
    let cct = result.estimated_cct.unwrap();
    assert!(cct > 0.0 && cct <= TRUE_CCT, "estimated CCT {cct}");
    assert!(est.history.len() >= 2);
    assert!(!est.history[0].contains_x0);
}

#[test]
fn late_clearing_is_not_certified() {
    let mut fault = committed_fault();
    fault.clearing_time = 10.0;
    let s = FaultStudy::new(&committed_model(), &fault).unwrap();
    let setup = Setup::new(&s, &PolytopeConfig::default()).unwrap();
    let (result, _) = csr::assess_fault(&s, &setup, &CsrConfig::default()).unwrap();
    assert_eq!(result.verdict, Verdict::NotCertified);
}

#[test]
fn unstable_cleared_state_is_never_contained() {
    let s = committed_study();
    let setup = Setup::new(&s, &PolytopeConfig::default()).unwrap();
    let x0 = s.fault_state(0.2).unwrap();
    let est = csr::estimate_csr(&x0, &setup, &CsrConfig::default()).unwrap();
    let late = s.fault_state(0.3).unwrap();
    let opts = OracleOptions::default();
    assert_ne!(oracle::classify_state(&late, &s.mats, &s.lvrt, &opts), CellClass::InCsr);
    assert!(!csr::contains(&est, &late));
    assert!(csr::contains(&est, &COAState::zeros(2)));
}
