//! COA-frame deviation dynamics `ẋ = A x − B F(C x)`, the fault-on/post-fault
//! study setup, and guarded trajectory simulation.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasreg::{voltage_sq, LvrtConstraint};
use crate::netmodel::{
    compute_sep, solve_operating_point, NetworkModel, NetworkState, OperatingPoint, ReducedModel,
    Topology,
};
use crate::ode::{integrate, Event, OdeOptions, System};

/// Tolerance on `d_k / m_k` spread for the uniform-damping model class.
pub const DAMPING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct COAState {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl COAState {
    pub fn zeros(n: usize) -> Self {
        COAState {
            x1: vec![0.0; n],
            x2: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.x1.len()
    }

    pub fn from_flat(y: &[f64]) -> Self {
        let n = y.len() / 2;
        COAState {
            x1: y[..n].to_vec(),
            x2: y[n..].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.x1.iter().chain(&self.x2).cloned().collect()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_flat())
    }

    /// Largest of `|Σ m_i x1_i|` and `|Σ m_i x2_i|`.
    pub fn manifold_residual(&self, m: &[f64]) -> f64 {
        let a: f64 = self.x1.iter().zip(m).map(|(x, m)| x * m).sum();
        let b: f64 = self.x2.iter().zip(m).map(|(x, m)| x * m).sum();
        a.abs().max(b.abs())
    }

    pub fn project(&mut self, m: &[f64]) {
        project_flat(&mut self.x1, m);
        project_flat(&mut self.x2, m);
    }

    pub fn max_abs(&self) -> f64 {
        self.x1.iter().chain(&self.x2).fold(0.0, |a, b| a.max(b.abs()))
    }
}

/// Shift `x` along the all-ones direction so that `mᵀx = 0`.
fn project_flat(x: &mut [f64], m: &[f64]) -> f64 {
    let mt: f64 = m.iter().sum();
    let c = x.iter().zip(m).map(|(x, m)| x * m).sum::<f64>() / mt;
    for v in x.iter_mut() {
        *v -= c;
    }
    c
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateMatrices {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub m: Vec<f64>,
    /// Uniform damping ratio `d_k / m_k`.
    pub lambda: f64,
    pub delta_star: Vec<f64>,
    /// `K_e = B_kj E_k E_j` per edge.
    pub k_edge: Vec<f64>,
    /// `sin δ*_kj` per edge.
    pub sin_star: Vec<f64>,
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c_mat: DMatrix<f64>,
    /// `G = C A`, the edge rates `δ̇_kj` of the linear part.
    pub g_mat: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub gamma2: DMatrix<f64>,
}

impl StateMatrices {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Absolute angle difference `δ_kj = δ*_kj + x1_k − x1_j`.
    pub fn abs_diff(&self, x1: &[f64], k: usize, j: usize) -> f64 {
        self.delta_star[k] - self.delta_star[j] + x1[k] - x1[j]
    }

    pub fn edge_star(&self, e: usize) -> f64 {
        let (k, j) = self.edges[e];
        self.delta_star[k] - self.delta_star[j]
    }
}

pub fn uniform_damping(reduced: &ReducedModel) -> Result<f64> {
    let ratios: Vec<f64> = reduced.d.iter().zip(&reduced.m).map(|(d, m)| d / m).collect();
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min > DAMPING_TOL * max.abs().max(1.0) {
        return Err(Error::NonUniformDamping { min, max });
    }
    Ok(ratios[0])
}

/// Build `A`, `B`, `C`, `G` and the `γ` blocks.
///
/// `γ(1)` collects the COA power term. Summed over ordered pairs it cancels
/// exactly for a lossless network, so it is identically zero here and
/// `B = [0; γ(2)]`.
pub fn build_state_matrices(reduced: &ReducedModel, delta_star: &[f64]) -> Result<StateMatrices> {
    let n = reduced.n();
    if delta_star.len() != n || reduced.m.len() != n || reduced.d.len() != n {
        return Err(Error::Dimension(format!(
            "{n} machines but {} equilibrium angles",
            delta_star.len()
        )));
    }
    let lambda = uniform_damping(reduced)?;
    let edges = reduced.edges.clone();
    let ne = edges.len();
    let k_edge: Vec<f64> = edges.iter().map(|&(k, j)| reduced.coupling(k, j)).collect();
    let sin_star: Vec<f64> = edges
        .iter()
        .map(|&(k, j)| (delta_star[k] - delta_star[j]).sin())
        .collect();

    let mut a_mat = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        a_mat[(k, n + k)] = 1.0;
        a_mat[(n + k, n + k)] = -reduced.d[k] / reduced.m[k];
    }
    let gamma1 = DMatrix::zeros(n, ne);
    let mut gamma2 = DMatrix::zeros(n, ne);
    let mut c_mat = DMatrix::zeros(ne, 2 * n);
    for (e, &(k, j)) in edges.iter().enumerate() {
        gamma2[(k, e)] = k_edge[e] / reduced.m[k];
        gamma2[(j, e)] = -k_edge[e] / reduced.m[j];
        c_mat[(e, k)] = 1.0;
        c_mat[(e, j)] = -1.0;
    }
    let mut b_mat = DMatrix::zeros(2 * n, ne);
    b_mat
        .view_mut((n, 0), (n, ne))
        .copy_from(&(&gamma2 - &gamma1));
    let g_mat = &c_mat * &a_mat;
    Ok(StateMatrices {
        n,
        edges,
        m: reduced.m.clone(),
        lambda,
        delta_star: delta_star.to_vec(),
        k_edge,
        sin_star,
        a_mat,
        b_mat,
        c_mat,
        g_mat,
        gamma1,
        gamma2,
    })
}

/// `F(Cx)_e = sin δ_kj − sin δ*_kj`.
pub fn nonlinearity_f(x: &COAState, mats: &StateMatrices) -> DVector<f64> {
    nonlinearity_from_x1(&x.x1, mats)
}

pub(crate) fn nonlinearity_from_x1(x1: &[f64], mats: &StateMatrices) -> DVector<f64> {
    DVector::from_iterator(
        mats.n_edges(),
        mats.edges
            .iter()
            .enumerate()
            .map(|(e, &(k, j))| mats.abs_diff(x1, k, j).sin() - mats.sin_star[e]),
    )
}

pub fn vector_field(x: &COAState, mats: &StateMatrices) -> COAState {
    let xv = x.to_vector();
    let f = nonlinearity_f(x, mats);
    let dx = &mats.a_mat * xv - &mats.b_mat * f;
    COAState::from_flat(dx.as_slice())
}

/// Direct per-machine coding of the deviation dynamics, written over all
/// ordered generator pairs and independent of the matrix factory.
pub fn vector_field_direct(x: &COAState, reduced: &ReducedModel, delta_star: &[f64]) -> COAState {
    let n = reduced.n();
    let mt = reduced.total_inertia();
    let delta: Vec<f64> = (0..n).map(|i| delta_star[i] + x.x1[i]).collect();
    let dev = |i: usize, j: usize| {
        reduced.coupling(i, j) * ((delta[i] - delta[j]).sin() - (delta_star[i] - delta_star[j]).sin())
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += dev(i, j);
            }
        }
    }
    let mut out = COAState::zeros(n);
    for k in 0..n {
        let own: f64 = (0..n).filter(|&j| j != k).map(|j| dev(k, j)).sum();
        out.x1[k] = x.x2[k];
        out.x2[k] = total / mt - own / reduced.m[k] - reduced.d[k] / reduced.m[k] * x.x2[k];
    }
    out
}

/// Deviation dynamics as an ODE system, projected onto the COA manifold.
pub struct DeviationSystem<'a> {
    pub mats: &'a StateMatrices,
}

impl System for DeviationSystem<'_> {
    fn dim(&self) -> usize {
        self.mats.dim()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let mats = self.mats;
        let n = mats.n;
        let (x1, x2) = y.split_at(n);
        for k in 0..n {
            dy[k] = x2[k];
            dy[n + k] = -mats.lambda * x2[k];
        }
        for (e, &(k, j)) in mats.edges.iter().enumerate() {
            let f = mats.abs_diff(x1, k, j).sin() - mats.sin_star[e];
            dy[n + k] -= mats.gamma2[(k, e)] * f;
            dy[n + j] -= mats.gamma2[(j, e)] * f;
        }
    }

    fn project(&self, y: &mut [f64]) -> bool {
        let n = self.mats.n;
        let (x1, x2) = y.split_at_mut(n);
        let a = project_flat(x1, &self.mats.m);
        let b = project_flat(x2, &self.mats.m);
        a != 0.0 || b != 0.0
    }
}

/// Swing dynamics of an arbitrary network in absolute COA angles, used for
/// the fault-on interval. State is `[δ; ω]`.
pub struct AbsoluteSystem<'a> {
    pub reduced: &'a ReducedModel,
    p_coa: Vec<f64>,
}

impl<'a> AbsoluteSystem<'a> {
    pub fn new(reduced: &'a ReducedModel) -> Self {
        AbsoluteSystem {
            reduced,
            p_coa: reduced.coa_power(),
        }
    }
}

impl System for AbsoluteSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.reduced.n()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let r = self.reduced;
        let n = r.n();
        let pe = r.electrical_power(&y[..n]);
        for k in 0..n {
            dy[k] = y[n + k];
            dy[n + k] = (self.p_coa[k] - pe[k] - r.d[k] * y[n + k]) / r.m[k];
        }
    }

    fn project(&self, y: &mut [f64]) -> bool {
        let n = self.reduced.n();
        let (d, w) = y.split_at_mut(n);
        let a = project_flat(d, &self.reduced.m);
        let b = project_flat(w, &self.reduced.m);
        a != 0.0 || b != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClearingAction {
    TripBranch,
    Restore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    /// Zero-based index into the model's branch list.
    pub faulted_branch: usize,
    pub fault_location: f64,
    pub clearing_time: f64,
    pub clearing_action: ClearingAction,
}

impl FaultScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: FaultScenario = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clearing_time >= 0.0) || !self.clearing_time.is_finite() {
            return Err(Error::InvalidArgument("clearing_time must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fault_location) {
            return Err(Error::InvalidArgument("fault_location must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Pre-fault, fault-on and post-fault networks of one scenario, with the
/// post-fault deviation model.
#[derive(Debug, Clone)]
pub struct FaultStudy {
    pub scenario: FaultScenario,
    pub operating_point: OperatingPoint,
    pub pre: NetworkState,
    pub fault_on: NetworkState,
    pub post: NetworkState,
    pub pre_sep: Vec<f64>,
    pub post_sep: Vec<f64>,
    pub mats: StateMatrices,
    /// True LVRT constraints of the post-fault network.
    pub lvrt: Vec<LvrtConstraint>,
}

impl FaultStudy {
    pub fn new(model: &NetworkModel, scenario: &FaultScenario) -> Result<Self> {
        scenario.validate()?;
        if scenario.faulted_branch >= model.branches.len() {
            return Err(Error::InvalidArgument(format!(
                "faulted branch {} does not exist",
                scenario.faulted_branch
            )));
        }
        let op = solve_operating_point(model)?;
        let intact = Topology::intact(model);
        let pre = NetworkState::build(model, &intact, &op)?;
        let fault_topo = intact
            .clone()
            .with_fault(scenario.faulted_branch, scenario.fault_location);
        let fault_on = NetworkState::build(model, &fault_topo, &op)?;
        let post_topo = match scenario.clearing_action {
            ClearingAction::TripBranch => intact.without_branch(scenario.faulted_branch),
            ClearingAction::Restore => intact,
        };
        let post = NetworkState::build(model, &post_topo, &op)?;
        let pre_sep = compute_sep(&pre.reduced, Some(&op.gen_angles))?;
        let post_sep = compute_sep(&post.reduced, Some(&pre_sep))?;
        let mats = build_state_matrices(&post.reduced, &post_sep)?;
        let lvrt = post.recovery.rg.iter().map(LvrtConstraint::from_rg).collect();
        Ok(FaultStudy {
            scenario: scenario.clone(),
            operating_point: op,
            pre,
            fault_on,
            post,
            pre_sep,
            post_sep,
            mats,
            lvrt,
        })
    }

    /// State at clearing, as a deviation from the post-fault equilibrium.
    pub fn fault_state(&self, clearing_time: f64) -> Result<COAState> {
        let n = self.pre_sep.len();
        let mut y0 = self.pre_sep.clone();
        y0.extend(std::iter::repeat_n(0.0, n));
        let y = if clearing_time > 0.0 {
            let sys = AbsoluteSystem::new(&self.fault_on.reduced);
            integrate(&sys, 0.0, &y0, clearing_time, &OdeOptions::default(), &[], |_, _| {})?.y_end
        } else {
            y0
        };
        let mut x = COAState {
            x1: (0..n).map(|i| y[i] - self.post_sep[i]).collect(),
            x2: y[n..].to_vec(),
        };
        x.project(&self.mats.m);
        Ok(x)
    }
}

/// Convenience wrapper returning the cleared state for the scenario's own
/// clearing time.
pub fn fault_state(scenario: &FaultScenario, model: &NetworkModel) -> Result<COAState> {
    FaultStudy::new(model, scenario)?.fault_state(scenario.clearing_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Guard {
    /// LVRT constraint index.
    Lvrt(usize),
    /// Generator pair `(k, j)` left the box `|δ_kj| ≤ π/2`.
    Pi(usize, usize),
    /// Generator pair `(k, j)` passed `|δ_kj| = π`.
    Divergence(usize, usize),
}

/// Feasibility monitors evaluated along a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Monitors<'a> {
    pub lvrt: &'a [LvrtConstraint],
    pub pi_box: bool,
    pub divergence: bool,
    /// Stop at the first LVRT violation.
    pub stop_on_lvrt: bool,
    /// Stop at the first Π-box exit.
    pub stop_on_pi: bool,
}

impl<'a> Monitors<'a> {
    pub fn none() -> Self {
        Monitors {
            lvrt: &[],
            pi_box: false,
            divergence: false,
            stop_on_lvrt: false,
            stop_on_pi: false,
        }
    }

    pub fn full(lvrt: &'a [LvrtConstraint]) -> Self {
        Monitors {
            lvrt,
            pi_box: true,
            divergence: true,
            stop_on_lvrt: false,
            stop_on_pi: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<COAState>,
    pub lvrt_ok: Vec<bool>,
    pub inside_pi: Vec<bool>,
    /// Monitors that fired, in time order.
    pub crossings: Vec<(f64, Guard)>,
    pub terminated_early: bool,
}

impl Trajectory {
    pub fn first_violation(&self) -> Option<(f64, Guard)> {
        self.crossings
            .iter()
            .find(|(_, g)| matches!(g, Guard::Lvrt(_) | Guard::Pi(..)))
            .cloned()
    }

    pub fn diverged(&self) -> bool {
        self.crossings.iter().any(|(_, g)| matches!(g, Guard::Divergence(..)))
    }

    pub fn final_state(&self) -> &COAState {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let n = self.states.first().map_or(0, |s| s.n());
        let mut header = vec!["time".to_string()];
        header.extend((1..=n).map(|i| format!("x1_{i}")));
        header.extend((1..=n).map(|i| format!("x2_{i}")));
        header.push("feasible_lvrt".into());
        header.push("inside_pi".into());
        let mut out = header.join(",");
        out.push('\n');
        for (i, s) in self.states.iter().enumerate() {
            let mut row = vec![format!("{:.16e}", self.times[i])];
            row.extend(s.x1.iter().chain(&s.x2).map(|v| format!("{v:.16e}")));
            row.push(u8::from(self.lvrt_ok[i]).to_string());
            row.push(u8::from(self.inside_pi[i]).to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Whether every pair satisfies `|δ_kj| ≤ limit`.
pub fn within_angle_box(x1: &[f64], mats: &StateMatrices, limit: f64) -> bool {
    let n = mats.n;
    (0..n).all(|k| ((k + 1)..n).all(|j| mats.abs_diff(x1, k, j).abs() <= limit))
}

pub fn lvrt_satisfied(x1: &[f64], mats: &StateMatrices, lvrt: &[LvrtConstraint]) -> bool {
    let delta: Vec<f64> = x1.iter().zip(&mats.delta_star).map(|(x, d)| x + d).collect();
    lvrt.iter().all(|c| voltage_sq(&delta, c) >= c.lvrt_max * c.lvrt_max)
}

type GuardFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>;

/// Event functions and their guard identities. Box and divergence guards are
/// split into one smooth function per side.
fn guard_functions<'a>(mats: &'a StateMatrices, monitors: &Monitors<'a>) -> Vec<(Guard, GuardFn<'a>, bool)> {
    let n = mats.n;
    let mut out: Vec<(Guard, GuardFn<'a>, bool)> = Vec::new();
    for (idx, c) in monitors.lvrt.iter().enumerate() {
        let floor = c.lvrt_max * c.lvrt_max;
        out.push((
            Guard::Lvrt(idx),
            Box::new(move |y: &[f64]| {
                let delta: Vec<f64> = (0..n).map(|i| mats.delta_star[i] + y[i]).collect();
                voltage_sq(&delta, c) - floor
            }),
            monitors.stop_on_lvrt,
        ));
    }
    for k in 0..n {
        for j in (k + 1)..n {
            for sign in [1.0, -1.0] {
                if monitors.pi_box {
                    out.push((
                        Guard::Pi(k, j),
                        Box::new(move |y: &[f64]| FRAC_PI_2 - sign * mats.abs_diff(y, k, j)),
                        monitors.stop_on_pi,
                    ));
                }
                if monitors.divergence {
                    out.push((
                        Guard::Divergence(k, j),
                        Box::new(move |y: &[f64]| PI - sign * mats.abs_diff(y, k, j)),
                        true,
                    ));
                }
            }
        }
    }
    out
}

/// Integrate the post-fault deviation dynamics with feasibility monitoring.
///
/// Every accepted step is recorded. Monitors already violated at `t = 0`
/// are reported at time zero.
pub fn simulate(
    x0: &COAState,
    mats: &StateMatrices,
    t_end: f64,
    monitors: &Monitors,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    simulate_inner(x0, mats, t_end, monitors, opts, true)
}

pub(crate) fn simulate_inner(
    x0: &COAState,
    mats: &StateMatrices,
    t_end: f64,
    monitors: &Monitors,
    opts: &OdeOptions,
    record: bool,
) -> Result<Trajectory> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument("t_end must be positive".into()));
    }
    if x0.n() != mats.n || x0.x2.len() != mats.n {
        return Err(Error::Dimension("state length does not match model".into()));
    }
    let sys = DeviationSystem { mats };
    let mut y0 = x0.to_flat();
    sys.project(&mut y0);
    let guards = guard_functions(mats, monitors);
    let flags = |y: &[f64]| -> (bool, bool) {
        let x1 = &y[..mats.n];
        (
            lvrt_satisfied(x1, mats, monitors.lvrt),
            within_angle_box(x1, mats, FRAC_PI_2),
        )
    };

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        lvrt_ok: Vec::new(),
        inside_pi: Vec::new(),
        crossings: Vec::new(),
        terminated_early: false,
    };
    // violations present at the initial state
    let mut initially_bad = false;
    for (guard, g, terminal) in &guards {
        if g(&y0) < 0.0 {
            traj.crossings.push((0.0, *guard));
            initially_bad |= *terminal;
        }
    }
    let (l0, p0) = flags(&y0);
    traj.times.push(0.0);
    traj.states.push(COAState::from_flat(&y0));
    traj.lvrt_ok.push(l0);
    traj.inside_pi.push(p0);
    if initially_bad {
        traj.terminated_early = true;
        return Ok(traj);
    }

    // only guards that are not already negative can fire as events
    let active: Vec<usize> = (0..guards.len()).filter(|&i| guards[i].1(&y0) >= 0.0).collect();
    let events: Vec<Event> = active
        .iter()
        .map(|&i| Event {
            g: guards[i].1.as_ref(),
            terminal: guards[i].2,
        })
        .collect();

    let mut times = Vec::new();
    let mut states = Vec::new();
    let result = integrate(&sys, 0.0, &y0, t_end, opts, &events, |t, y| {
        if record {
            times.push(t);
            states.push(y.to_vec());
        }
    })?;
    for hit in &result.hits {
        traj.crossings.push((hit.time, guards[active[hit.index]].0));
    }
    traj.terminated_early = result.terminated;
    if !record || times.last().is_none_or(|&t| t < result.t_end) {
        times.push(result.t_end);
        states.push(result.y_end.clone());
    }
    for (t, y) in times.into_iter().zip(states) {
        if t <= *traj.times.last().expect("initial sample") {
            continue;
        }
        let (l, p) = flags(&y);
        traj.times.push(t);
        traj.states.push(COAState::from_flat(&y));
        traj.lvrt_ok.push(l);
        traj.inside_pi.push(p);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_machine() -> ReducedModel {
        ReducedModel {
            b_red: DMatrix::from_row_slice(3, 3, &[-3.0, 1.2, 0.8, 1.2, -2.5, 1.5, 0.8, 1.5, -2.6]),
            e_mag: vec![1.05, 1.0, 1.02],
            edges: vec![(0, 1), (0, 2), (1, 2)],
            m: vec![0.2, 0.1, 0.15],
            d: vec![0.1, 0.05, 0.075],
            p_m: vec![0.4, -0.1, -0.3],
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, m: &[f64], scale: f64) -> COAState {
        let n = m.len();
        let mut x = COAState {
            x1: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            x2: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        };
        x.project(m);
        x
    }

    #[test]
    fn block_shapes_for_two_machines() {
        let red = ReducedModel {
            b_red: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            e_mag: vec![1.0, 1.0],
            edges: vec![(0, 1)],
            m: vec![1.0, 2.0],
            d: vec![0.2, 0.4],
            p_m: vec![0.0, 0.0],
        };
        let mats = build_state_matrices(&red, &[0.0, 0.0]).unwrap();
        assert_eq!(mats.a_mat.shape(), (4, 4));
        assert_eq!(mats.b_mat.shape(), (4, 1));
        assert_eq!(mats.a_mat.view((0, 2), (2, 2)).into_owned(), DMatrix::identity(2, 2));
        assert_eq!(mats.a_mat.view((2, 2), (2, 2)).into_owned(), DMatrix::identity(2, 2) * -0.2);
        assert_eq!(mats.g_mat, &mats.c_mat * &mats.a_mat);
    }

    #[test]
    fn non_uniform_damping_rejected() {
        let mut red = three_machine();
        red.d[1] = 0.06;
        assert!(matches!(
            build_state_matrices(&red, &[0.0; 3]),
            Err(Error::NonUniformDamping { .. })
        ));
    }

    #[test]
    fn matrix_form_matches_direct_coding() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let x = random_state(&mut rng, &red.m, 1.5);
            let a = vector_field(&x, &mats);
            let b = vector_field_direct(&x, &red, &sep);
            let c = COAState::from_flat(&{
                let mut dy = vec![0.0; 6];
                DeviationSystem { mats: &mats }.rhs(0.0, &x.to_flat(), &mut dy);
                dy
            });
            for (p, q) in a.to_flat().iter().zip(b.to_flat()) {
                worst = worst.max((p - q).abs());
            }
            for (p, q) in a.to_flat().iter().zip(c.to_flat()) {
                worst = worst.max((p - q).abs());
            }
            assert!(a.manifold_residual(&red.m) < 1e-10);
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn gamma_one_term_vanishes() {
        let red = three_machine();
        let mats = build_state_matrices(&red, &[0.1, -0.2, 0.05]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_state(&mut rng, &red.m, 2.0);
            let f = nonlinearity_f(&x, &mats);
            assert!((&mats.gamma1 * f).amax() <= 1e-12);
        }
    }

    #[test]
    fn nonlinearity_basics() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        assert_eq!(nonlinearity_f(&COAState::zeros(3), &mats).amax(), 0.0);
        // δ_01 = π − δ*_01 zeroes the first edge entry
        let s01 = sep[0] - sep[1];
        let mut x = COAState::zeros(3);
        x.x1[0] = PI - 2.0 * s01;
        let f = nonlinearity_f(&x, &mats);
        assert!(f[0].abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = random_state(&mut rng, &red.m, 10.0);
            assert!(nonlinearity_f(&x, &mats).amax() <= 2.0);
        }
    }

    #[test]
    fn sep_is_equilibrium_and_kinematic_block() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        assert!(vector_field(&COAState::zeros(3), &mats).max_abs() < 1e-12);
        let mut x = COAState::zeros(3);
        x.x1 = vec![0.1, -0.3, 0.0];
        x.project(&red.m);
        let dx = vector_field(&x, &mats);
        assert!(dx.x1.iter().all(|v| *v == 0.0));
        assert!(dx.x2.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn zero_start_stays_at_rest() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        let tr = simulate(&COAState::zeros(3), &mats, 1.0, &Monitors::none(), &OdeOptions::default()).unwrap();
        assert!(tr.states.iter().all(|s| s.max_abs() < 1e-12));
    }

    #[test]
    fn manifold_and_time_reversal() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random_state(&mut rng, &red.m, 0.4);
        let tr = simulate(&x0, &mats, 3.0, &Monitors::none(), &OdeOptions::default()).unwrap();
        for s in &tr.states {
            assert!(s.manifold_residual(&red.m) <= 1e-8);
        }
        let sys = DeviationSystem { mats: &mats };
        let fwd = integrate(&sys, 0.0, &x0.to_flat(), 0.1, &OdeOptions::default(), &[], |_, _| {}).unwrap();
        let back = integrate(&sys, 0.1, &fwd.y_end, 0.0, &OdeOptions::default(), &[], |_, _| {}).unwrap();
        for (a, b) in back.y_end.iter().zip(x0.to_flat()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn large_kick_loses_synchronism() {
        let red = three_machine();
        let sep = compute_sep(&red, None).unwrap();
        let mats = build_state_matrices(&red, &sep).unwrap();
        let mut x0 = COAState::zeros(3);
        x0.x2 = vec![30.0, -30.0, 0.0];
        x0.project(&red.m);
        let tr = simulate(&x0, &mats, 5.0, &Monitors::full(&[]), &OdeOptions::default()).unwrap();
        assert!(tr.diverged());
        assert!(tr.terminated_early);
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = FaultScenario {
            faulted_branch: 0,
            fault_location: 0.5,
            clearing_time: 0.2,
            clearing_action: ClearingAction::TripBranch,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("trip-branch"));
        assert_eq!(serde_json::from_str::<FaultScenario>(&text).unwrap(), s);
        let bad = FaultScenario {
            clearing_time: -1.0,
            ..s
        };
        assert!(bad.validate().is_err());
    }
}
