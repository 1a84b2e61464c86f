mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use common::{committed_study, random_system};
use lvrt_csr::csr::{self, CSREstimate, CsrConfig, PolytopeConfig, Setup};
use lvrt_csr::dynamics::{vector_field, vector_field_direct, COAState};
use lvrt_csr::feasreg::{fit_pwl_lower, voltage_sq, VERIFY_MARGIN};
use lvrt_csr::lff::{self, LyapunovCandidate};
use lvrt_csr::linalg::tangent_basis;
use lvrt_csr::oracle::GridSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn committed_estimate() -> &'static (lvrt_csr::dynamics::FaultStudy, CSREstimate) {
    static EST: OnceLock<(lvrt_csr::dynamics::FaultStudy, CSREstimate)> = OnceLock::new();
    EST.get_or_init(|| {
        let study = committed_study();
        let setup = Setup::new(&study, &PolytopeConfig::default()).unwrap();
        let x0 = study.fault_state(0.2).unwrap();
        let est = csr::estimate_csr(&x0, &setup, &CsrConfig::default()).unwrap();
        (study, est)
    })
}

fn tangent_state(m: &[f64], xi: &[f64]) -> COAState {
    let t = tangent_basis(m);
    let r = m.len() - 1;
    let mul = |z: &[f64]| -> Vec<f64> { (0..m.len()).map(|i| (0..r).map(|c| t[(i, c)] * z[c]).sum()).collect() };
    COAState {
        x1: mul(&xi[..r]),
        x2: mul(&xi[r..]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sector_holds_inside_domain(star in -FRAC_PI_2..FRAC_PI_2, sum in -PI..PI) {
        prop_assert!(lff::sector_inequality_holds(sum - star, star));
    }

    #[test]
    fn tangent_basis_is_orthonormal_and_balanced(m in prop::collection::vec(0.01f64..5.0, 2..6)) {
        let t = tangent_basis(&m);
        let gram = t.transpose() * &t;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - e).abs() < 1e-12);
            }
            let w: f64 = (0..m.len()).map(|k| m[k] * t[(k, i)]).sum();
            prop_assert!(w.abs() < 1e-12);
        }
    }

    #[test]
    fn lur_e_field_matches_swing_equation(seed in any::<u64>(), n in 2usize..5, scale in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (red, mats) = random_system(&mut rng, n);
        let xi: Vec<f64> = (0..2 * (n - 1)).map(|k| scale * ((k as f64 * 1.7 + seed as f64 * 1e-3).sin())).collect();
        let x = tangent_state(&mats.m, &xi);
        let a = vector_field(&x, &mats);
        let b = vector_field_direct(&x, &red, &mats.delta_star);
        for (u, v) in a.to_flat().iter().zip(b.to_flat()) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn vdot_forms_agree(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, mats) = random_system(&mut rng, n);
        let c = lff::energy_function_candidate(&mats);
        let xi: Vec<f64> = (0..2 * (n - 1)).map(|k| ((k as f64 + 0.3) * (seed % 97) as f64).cos()).collect();
        let x = tangent_state(&mats.m, &xi);
        let a = lff::evaluate_vdot(&c, &x, &mats);
        let b = lff::vdot_chain_rule(&c, &x, &mats);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn candidate_is_zero_only_at_equilibrium(xi1 in -1.0f64..1.0, xi2 in -5.0f64..5.0) {
        let (study, est) = committed_estimate();
        let x = tangent_state(&study.mats.m, &[xi1, xi2]);
        let v = est.candidate.value(&x);
        prop_assert!(v >= -1e-12);
        if xi1.abs() + xi2.abs() > 1e-3 {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn voltage_cosine_sum_matches_phasors(a in -1.5f64..1.5, b in -1.5f64..1.5) {
        let study = committed_study();
        let rec = &study.post.recovery;
        let c = &study.lvrt[0];
        let delta = [a, b];
        let v = rec.bus_voltages(&delta);
        let row = rec.rg[0].row;
        prop_assert!((v[row].norm_sqr() - voltage_sq(&delta, c)).abs() < 1e-12);
    }

    #[test]
    fn membership_implies_constraints(xi1 in -3.0f64..3.0, xi2 in -30.0f64..30.0) {
        let (study, est) = committed_estimate();
        let x = tangent_state(&study.mats.m, &[xi1, xi2]);
        if csr::contains(est, &x) {
            prop_assert!(est.candidate.value(&x) <= est.v);
            prop_assert!(csr::within_pi(est, &x.x1));
            prop_assert!(lvrt_csr::dynamics::lvrt_satisfied(&x.x1, &study.mats, &study.lvrt));
        }
    }

    #[test]
    fn grid_points_stay_in_bounds(points in 2usize..40, speed in 0.1f64..50.0, cell in any::<usize>()) {
        let (study, _) = committed_estimate();
        let spec = GridSpec::covering(&study.mats, points, speed);
        let c = spec.coords(cell % spec.n_cells());
        for (k, v) in c.iter().enumerate() {
            prop_assert!(*v >= spec.lower[k] && *v <= spec.upper[k]);
        }
    }

    #[test]
    fn candidate_json_round_trips(xi1 in -1.0f64..1.0, xi2 in -5.0f64..5.0) {
        let (study, est) = committed_estimate();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        est.candidate.write_json(&p).unwrap();
        let back = LyapunovCandidate::read_json(&p).unwrap();
        prop_assert_eq!(&back, &est.candidate);
        let x = tangent_state(&study.mats.m, &[xi1, xi2]);
        prop_assert_eq!(back.value(&x), est.candidate.value(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fits_bound_cosine_from_below(phase in -PI..PI, n_line in 2usize..6) {
        let fit = fit_pwl_lower(phase, n_line, 361).unwrap();
        prop_assert_eq!(fit.n_line(), n_line);
        prop_assert!(fit.max_excess(4001) <= VERIFY_MARGIN);
        prop_assert!(fit.vertices.windows(2).all(|w| w[1] > w[0]));
    }
}
