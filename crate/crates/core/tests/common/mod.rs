#![allow(dead_code)]

use std::path::PathBuf;

use lvrt_csr::dynamics::{build_state_matrices, FaultScenario, FaultStudy, StateMatrices};
use lvrt_csr::nalgebra::DMatrix;
use lvrt_csr::netmodel::{self, compute_sep, NetworkModel, ReducedModel};
use rand::Rng;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn committed_model() -> NetworkModel {
    netmodel::load_model(scenario_dir().join("two_machine_three_bus.json")).expect("committed model loads")
}

pub fn committed_fault() -> FaultScenario {
    FaultScenario::load(scenario_dir().join("fault_0p2s.json")).expect("committed fault loads")
}

pub fn committed_study() -> FaultStudy {
    FaultStudy::new(&committed_model(), &committed_fault()).expect("committed study builds")
}

/// Random lossless reduced network with a stable equilibrium placed first
/// and mechanical powers chosen to balance it.
pub fn random_system<R: Rng>(rng: &mut R, n: usize) -> (ReducedModel, StateMatrices) {
    let lambda = rng.gen_range(2.0..15.0);
    let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.2)).collect();
    let d: Vec<f64> = m.iter().map(|m| lambda * m).collect();
    let e_mag: Vec<f64> = (0..n).map(|_| rng.gen_range(0.95..1.1)).collect();
    let mut b = DMatrix::zeros(n, n);
    // a spanning path keeps the network connected; other pairs are optional
    for k in 0..n {
        for j in (k + 1)..n {
            if j == k + 1 || rng.gen_bool(0.7) {
                let v = rng.gen_range(0.3..2.0);
                b[(k, j)] = v;
                b[(j, k)] = v;
            }
        }
    }
    for k in 0..n {
        let s: f64 = (0..n).filter(|&j| j != k).map(|j| b[(k, j)]).sum();
        b[(k, k)] = -s;
    }
    let edges = (0..n)
        .flat_map(|k| ((k + 1)..n).map(move |j| (k, j)))
        .filter(|&(k, j)| b[(k, j)] != 0.0)
        .collect();
    let mut delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    netmodel::coa_normalize(&mut delta, &m);
    let mut red = ReducedModel {
        b_red: b,
        e_mag,
        edges,
        m,
        d,
        p_m: vec![0.0; n],
    };
    red.p_m = red.electrical_power(&delta);
    let sep = compute_sep(&red, Some(&delta)).expect("placed equilibrium is found");
    let mats = build_state_matrices(&red, &sep).expect("uniform damping");
    (red, mats)
}
