//! Brute-force ground truth: grid classification of the constrained
//! stability region, true critical clearing time, and estimate audits.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::path::Path;

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::csr::{self, CSREstimate, CctSearch};
use crate::dynamics::{simulate_inner, COAState, FaultStudy, Guard, Monitors, StateMatrices};
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::feasreg::LvrtConstraint;
use crate::linalg::tangent_basis;
use crate::ode::OdeOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellClass {
    InCsr,
    ExitsFr,
    Diverges,
    Inconclusive,
}

impl CellClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CellClass::InCsr => "in-csr",
            CellClass::ExitsFr => "exits-fr",
            CellClass::Diverges => "diverges",
            CellClass::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub horizon: f64,
    /// Terminal `‖x‖∞` bound for convergence.
    pub conv_tol: f64,
    pub ode: OdeOptions,
    pub max_cells: usize,
    /// Largest admissible `n − 1`.
    pub max_reduced_dim: usize,
    pub mode: Mode,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            horizon: 20.0,
            conv_tol: 1e-3,
            ode: OdeOptions::default(),
            max_cells: 2_000_000,
            max_reduced_dim: 2,
            mode: Mode::default(),
        }
    }
}

/// Classify one post-fault state. LVRT violations end the run; a Π exit is
/// followed until divergence or the horizon so both outcomes are visible.
pub fn classify_state(x0: &COAState, mats: &StateMatrices, lvrt: &[LvrtConstraint], opts: &OracleOptions) -> CellClass {
    let monitors = Monitors {
        lvrt,
        pi_box: true,
        divergence: true,
        stop_on_lvrt: true,
        stop_on_pi: false,
    };
    let traj = match simulate_inner(x0, mats, opts.horizon, &monitors, &opts.ode, false) {
        Ok(t) => t,
        Err(_) => return CellClass::Inconclusive,
    };
    if traj.crossings.iter().any(|(_, g)| matches!(g, Guard::Lvrt(_))) {
        return CellClass::ExitsFr;
    }
    if traj.diverged() {
        return CellClass::Diverges;
    }
    if traj.crossings.iter().any(|(_, g)| matches!(g, Guard::Pi(..))) {
        return CellClass::ExitsFr;
    }
    if traj.final_state().max_abs() < opts.conv_tol {
        CellClass::InCsr
    } else {
        CellClass::Inconclusive
    }
}

/// Regular grid over tangent coordinates `(ξ1, ξ2)` of the COA manifold,
/// with `x1 = T ξ1` and `x2 = T ξ2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    /// Angle axes span the Π slice (exactly for two machines, by the
    /// `π√n` ball otherwise); speed axes span `±speed_half`.
    pub fn covering(mats: &StateMatrices, points: usize, speed_half: f64) -> Self {
        let n = mats.n;
        let r = n - 1;
        let (lo, hi) = if n == 2 {
            let t = tangent_basis(&mats.m);
            let s = t[(0, 0)] - t[(1, 0)];
            let d = mats.delta_star[0] - mats.delta_star[1];
            let a = (-FRAC_PI_2 - d) / s;
            let b = (FRAC_PI_2 - d) / s;
            (a.min(b), a.max(b))
        } else {
            let b = PI * (n as f64).sqrt();
            (-b, b)
        };
        let mut lower = vec![lo; r];
        let mut upper = vec![hi; r];
        lower.extend(std::iter::repeat_n(-speed_half, r));
        upper.extend(std::iter::repeat_n(speed_half, r));
        GridSpec {
            lower,
            upper,
            counts: vec![points; 2 * r],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn coords(&self, cell: usize) -> Vec<f64> {
        let mut rem = cell;
        let mut out = vec![0.0; self.counts.len()];
        for axis in (0..self.counts.len()).rev() {
            let c = self.counts[axis];
            let i = rem % c;
            rem /= c;
            out[axis] = if c == 1 {
                0.5 * (self.lower[axis] + self.upper[axis])
            } else if i + 1 == c {
                self.upper[axis]
            } else {
                self.lower[axis] + (self.upper[axis] - self.lower[axis]) * i as f64 / (c - 1) as f64
            };
        }
        out
    }

    fn validate(&self, n: usize) -> Result<()> {
        let d = 2 * (n - 1);
        if self.lower.len() != d || self.upper.len() != d || self.counts.len() != d {
            return Err(Error::Dimension(format!("grid needs {d} axes")));
        }
        if self.counts.contains(&0) || self.lower.iter().zip(&self.upper).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument("empty grid axis".into()));
        }
        Ok(())
    }
}

/// State of a grid point.
pub fn grid_state(m: &[f64], coords: &[f64]) -> COAState {
    let r = m.len() - 1;
    let t = tangent_basis(m);
    let x1 = &t * DVector::from_row_slice(&coords[..r]);
    let x2 = &t * DVector::from_row_slice(&coords[r..]);
    COAState {
        x1: x1.iter().cloned().collect(),
        x2: x2.iter().cloned().collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleGrid {
    pub spec: GridSpec,
    pub classes: Vec<CellClass>,
    pub horizon: f64,
    pub conv_tol: f64,
    pub rtol: f64,
    pub atol: f64,
    pub m: Vec<f64>,
    pub delta_star: Vec<f64>,
}

impl OracleGrid {
    pub fn count(&self, class: CellClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    pub fn state(&self, cell: usize) -> COAState {
        grid_state(&self.m, &self.spec.coords(cell))
    }

    pub fn to_csv(&self) -> String {
        let d = self.spec.counts.len();
        let mut s = String::new();
        let header: Vec<String> = (1..=d).map(|i| format!("coord{i}")).collect();
        let _ = writeln!(s, "{},class", header.join(","));
        for (cell, class) in self.classes.iter().enumerate() {
            for c in self.spec.coords(cell) {
                let _ = write!(s, "{c:.16e},");
            }
            let _ = writeln!(s, "{}", class.as_str());
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Simulate every grid cell against the true constraints.
pub fn brute_force_csr(
    mats: &StateMatrices,
    lvrt: &[LvrtConstraint],
    spec: &GridSpec,
    opts: &OracleOptions,
) -> Result<OracleGrid> {
    let n = mats.n;
    if n - 1 > opts.max_reduced_dim {
        return Err(Error::GridTooLarge {
            cells: spec.n_cells(),
            limit: opts.max_cells,
        });
    }
    spec.validate(n)?;
    let cells = spec.n_cells();
    if cells > opts.max_cells {
        return Err(Error::GridTooLarge {
            cells,
            limit: opts.max_cells,
        });
    }
    let classes = exec::map_range(opts.mode, cells, |cell| {
        classify_state(&grid_state(&mats.m, &spec.coords(cell)), mats, lvrt, opts)
    });
    info!("oracle grid: {cells} cells classified");
    Ok(OracleGrid {
        spec: spec.clone(),
        classes,
        horizon: opts.horizon,
        conv_tol: opts.conv_tol,
        rtol: opts.ode.rtol,
        atol: opts.ode.atol,
        m: mats.m.clone(),
        delta_star: mats.delta_star.clone(),
    })
}

/// Clearing-time stability under the oracle's criteria.
pub fn stable_clearing(study: &FaultStudy, t_c: f64, opts: &OracleOptions) -> Result<bool> {
    let x = study.fault_state(t_c)?;
    Ok(classify_state(&x, &study.mats, &study.lvrt, opts) == CellClass::InCsr)
}

/// Largest stable clearing time to 1 ms; saturates at the 2 s search bound.
pub fn true_cct(study: &FaultStudy, opts: &OracleOptions) -> Result<f64> {
    csr::bisect_clearing_time(&CctSearch::default(), |t| stable_clearing(study, t, opts))?.ok_or(Error::UnstableAtZero)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub cells: usize,
    pub in_csr: usize,
    pub contained: usize,
    pub contained_and_in_csr: usize,
    pub soundness_violations: usize,
    pub coverage: f64,
    /// Coordinates of violating cells.
    pub violations: Vec<Vec<f64>>,
}

impl AuditReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_json(path, self)
    }
}

/// Cells inside the estimate must be in the actual CSR.
pub fn audit_estimate(est: &CSREstimate, grid: &OracleGrid) -> Result<AuditReport> {
    let same = est.m.len() == grid.m.len()
        && est.m.iter().zip(&grid.m).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
        && est.candidate.delta_star.len() == grid.delta_star.len()
        && est
            .candidate
            .delta_star
            .iter()
            .zip(&grid.delta_star)
            .all(|(a, b)| (a - b).abs() <= 1e-9);
    if !same {
        return Err(Error::Mismatch("estimate and grid describe different systems".into()));
    }
    let mut report = AuditReport {
        cells: grid.classes.len(),
        in_csr: 0,
        contained: 0,
        contained_and_in_csr: 0,
        soundness_violations: 0,
        coverage: 0.0,
        violations: Vec::new(),
    };
    for (cell, &class) in grid.classes.iter().enumerate() {
        let inside = csr::contains(est, &grid.state(cell));
        let ok = class == CellClass::InCsr;
        report.in_csr += ok as usize;
        report.contained += inside as usize;
        report.contained_and_in_csr += (inside && ok) as usize;
        if inside && !ok {
            report.soundness_violations += 1;
            report.violations.push(grid.spec.coords(cell));
        }
    }
    report.coverage = if report.in_csr > 0 {
        report.contained_and_in_csr as f64 / report.in_csr as f64
    } else {
        0.0
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::build_state_matrices;
    use crate::feasreg::CosineTerm;
    use crate::netmodel::{compute_sep, ReducedModel};
    use nalgebra::DMatrix;

    fn two_machine() -> (StateMatrices, Vec<LvrtConstraint>) {
        let red = ReducedModel {
            b_red: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            e_mag: vec![1.0, 1.0],
            edges: vec![(0, 1)],
            m: vec![1.0, 1.0],
            d: vec![1.5, 1.5],
            p_m: vec![0.3, -0.3],
        };
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        let lvrt = vec![LvrtConstraint {
            rg_bus: 3,
            lvrt_max: 0.85,
            diag: 0.5,
            threshold: 0.85 * 0.85 - 0.5,
            terms: vec![CosineTerm {
                i: 0,
                j: 1,
                amplitude: 0.5,
                phase: 0.0,
            }],
        }];
        (mats, lvrt)
    }

    #[test]
    fn equilibrium_is_in_csr() {
        let (mats, lvrt) = two_machine();
        let c = classify_state(&COAState::zeros(2), &mats, &lvrt, &OracleOptions::default());
        assert_eq!(c, CellClass::InCsr);
    }

    #[test]
    fn infeasible_start_exits_immediately() {
        let (mats, lvrt) = two_machine();
        // relative angle of 2 rad drops the voltage below 0.85
        let x = COAState {
            x1: vec![1.0 - mats.delta_star[0], -1.0 - mats.delta_star[1]],
            x2: vec![0.0, 0.0],
        };
        assert_eq!(classify_state(&x, &mats, &lvrt, &OracleOptions::default()), CellClass::ExitsFr);
    }

    #[test]
    fn fast_start_diverges_without_lvrt() {
        let (mats, _) = two_machine();
        let x = COAState {
            x1: vec![0.0, 0.0],
            x2: vec![3.0, -3.0],
        };
        assert_eq!(classify_state(&x, &mats, &[], &OracleOptions::default()), CellClass::Diverges);
    }

    #[test]
    fn grid_coordinates_and_guard() {
        let (mats, lvrt) = two_machine();
        let spec = GridSpec::covering(&mats, 3, 1.0);
        assert_eq!(spec.n_cells(), 9);
        assert_eq!(spec.coords(0), vec![spec.lower[0], -1.0]);
        assert_eq!(spec.coords(8), vec![spec.upper[0], 1.0]);
        let x = grid_state(&mats.m, &spec.coords(0));
        assert!((mats.abs_diff(&x.x1, 0, 1).abs() - FRAC_PI_2).abs() < 1e-12);
        let opts = OracleOptions {
            max_cells: 4,
            ..OracleOptions::default()
        };
        assert!(matches!(brute_force_csr(&mats, &lvrt, &spec, &opts), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn small_grid_is_deterministic_across_modes() {
        let (mats, lvrt) = two_machine();
        let spec = GridSpec::covering(&mats, 7, 1.5);
        let seq = brute_force_csr(
            &mats,
            &lvrt,
            &spec,
            &OracleOptions {
                mode: Mode::Sequential,
                ..OracleOptions::default()
            },
        )
        .unwrap();
        let par = brute_force_csr(&mats, &lvrt, &spec, &OracleOptions::default()).unwrap();
        assert_eq!(seq.classes, par.classes);
        assert_eq!(seq.classes[spec.n_cells() / 2], CellClass::InCsr);
        assert!(seq.to_csv().starts_with("coord1,coord2,class\n"));
    }
}
