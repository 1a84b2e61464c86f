//! Physical network model, extended admittance assembly, Kron reduction to
//! generator internal nodes, bus-voltage reconstruction and equilibrium
//! solves.
//!
//! Node ordering of the extended admittance matrix is
//! `[generator internal nodes | network buses | fault node (optional)]`.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::tangent_basis;

/// Grounding reactance of a bolted fault node (pu).
pub const FAULT_REACTANCE: f64 = 1e-6;
/// Largest tolerated real part of the reduced admittance matrix (pu).
pub const CONDUCTANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
    #[serde(default)]
    pub is_rg: bool,
    #[serde(default)]
    pub rg_p: f64,
    #[serde(default)]
    pub rg_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lvrt_curve: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lvrt_max: Option<f64>,
}

impl Bus {
    /// Net consumed complex power with RG injection treated as negative load.
    pub fn net_load(&self) -> Complex64 {
        Complex64::new(self.load_p - self.rg_p, self.load_q - self.rg_q)
    }

    /// Time-independent LVRT floor: explicit `lvrt_max`, else the curve max.
    pub fn effective_lvrt(&self) -> Option<f64> {
        if !self.is_rg {
            return None;
        }
        match (&self.lvrt_max, &self.lvrt_curve) {
            (Some(v), _) => Some(*v),
            (None, Some(curve)) => crate::feasreg::lvrt_max_from_curve(curve).ok(),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub reactance_x: f64,
    #[serde(default)]
    pub shunt_b: f64,
    #[serde(default)]
    pub resistance_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub m: f64,
    pub d: f64,
    pub xd_prime: f64,
    pub e_mag: f64,
    pub p_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkModel::from_json(&text)
}

impl NetworkModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut model: NetworkModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Checks invariants and enforces the lossless model class.
    pub fn validate(&mut self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidModel("base_mva must be positive".into()));
        }
        if self.generators.is_empty() {
            return Err(Error::InvalidModel("no generators".into()));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if seen.insert(b.id, i).is_some() {
                return Err(Error::DuplicateBus(b.id));
            }
            let has_lvrt = b.lvrt_curve.is_some() || b.lvrt_max.is_some();
            if has_lvrt && !b.is_rg {
                return Err(Error::InvalidModel(format!(
                    "bus {} carries LVRT data but is not an RG bus",
                    b.id
                )));
            }
            if let Some(v) = b.lvrt_max {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::InvalidModel(format!(
                        "bus {}: lvrt_max {v} outside (0, 1]",
                        b.id
                    )));
                }
            }
            if let Some(curve) = &b.lvrt_curve {
                crate::feasreg::lvrt_max_from_curve(curve)?;
            }
        }
        for g in &self.generators {
            if !seen.contains_key(&g.bus) {
                return Err(Error::UnknownBus {
                    what: "generator".into(),
                    bus: g.bus,
                });
            }
            if !(g.m > 0.0) {
                return Err(Error::NonPositiveInertia { bus: g.bus, m: g.m });
            }
            if !(g.d > 0.0) || !(g.e_mag > 0.0) || !(g.xd_prime > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "generator at bus {}: d, e_mag and xd_prime must be positive",
                    g.bus
                )));
            }
        }
        for (k, br) in self.branches.iter_mut().enumerate() {
            for end in [br.from, br.to] {
                if !seen.contains_key(&end) {
                    return Err(Error::UnknownBus {
                        what: format!("branch {k}"),
                        bus: end,
                    });
                }
            }
            if br.from == br.to {
                return Err(Error::InvalidModel(format!("branch {k} is a self loop")));
            }
            if !(br.reactance_x > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "branch {k}: reactance must be positive"
                )));
            }
            if br.resistance_r != 0.0 {
                let msg = format!(
                    "branch {k} ({}-{}): resistance {} zeroed for lossless model",
                    br.from, br.to, br.resistance_r
                );
                warn!("{msg}");
                self.warnings.push(msg);
                br.resistance_r = 0.0;
            }
        }
        Ok(())
    }
}

/// Branch in-service overlay plus an optional grounded fault point.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub in_service: Vec<bool>,
    pub fault: Option<FaultPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultPoint {
    pub branch: usize,
    /// Fraction along the branch measured from its `from` end.
    pub location: f64,
}

impl Topology {
    pub fn intact(model: &NetworkModel) -> Self {
        Topology {
            in_service: vec![true; model.branches.len()],
            fault: None,
        }
    }

    pub fn with_fault(mut self, branch: usize, location: f64) -> Self {
        self.fault = Some(FaultPoint { branch, location });
        self
    }

    pub fn without_branch(mut self, branch: usize) -> Self {
        if let Some(s) = self.in_service.get_mut(branch) {
            *s = false;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineData {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    pub p_m: Vec<f64>,
    pub e_mag: Vec<f64>,
}

impl MachineData {
    pub fn from_model(model: &NetworkModel) -> Self {
        MachineData {
            m: model.generators.iter().map(|g| g.m).collect(),
            d: model.generators.iter().map(|g| g.d).collect(),
            p_m: model.generators.iter().map(|g| g.p_m).collect(),
            e_mag: model.generators.iter().map(|g| g.e_mag).collect(),
        }
    }
}

/// Metadata of a row in the bus block.
#[derive(Debug, Clone, PartialEq)]
pub struct BusRow {
    pub id: u32,
    pub lvrt: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExtendedAdmittance {
    pub y_ext: DMatrix<Complex64>,
    pub n_gen: usize,
    /// Size of the bus block, including a fault node when present.
    pub n_bus: usize,
    pub bus_rows: Vec<BusRow>,
    pub machines: MachineData,
}

impl ExtendedAdmittance {
    /// Wrap a raw matrix (used for hand-built networks in tests).
    pub fn from_parts(y_ext: DMatrix<Complex64>, n_gen: usize, machines: MachineData) -> Self {
        let n_bus = y_ext.nrows() - n_gen;
        ExtendedAdmittance {
            y_ext,
            n_gen,
            n_bus,
            bus_rows: (0..n_bus)
                .map(|i| BusRow {
                    id: i as u32,
                    lvrt: None,
                })
                .collect(),
            machines,
        }
    }

    fn blocks(&self) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>) {
        let g = self.n_gen;
        let b = self.n_bus;
        let y = &self.y_ext;
        (
            y.view((0, 0), (g, g)).into_owned(),
            y.view((0, g), (g, b)).into_owned(),
            y.view((g, 0), (b, g)).into_owned(),
            y.view((g, g), (b, b)).into_owned(),
        )
    }
}

fn j(x: f64) -> Complex64 {
    Complex64::new(0.0, x)
}

fn add_series(y: &mut DMatrix<Complex64>, a: usize, b: usize, adm: Complex64) {
    y[(a, a)] += adm;
    y[(b, b)] += adm;
    y[(a, b)] -= adm;
    y[(b, a)] -= adm;
}

/// Assemble the extended admittance matrix. Loads (net of RG injection) are
/// folded in as constant admittances `conj(S) / |v|²` using the supplied
/// bus voltage magnitudes.
pub fn build_extended_admittance(
    model: &NetworkModel,
    topology: &Topology,
    bus_voltage: &[f64],
) -> Result<ExtendedAdmittance> {
    let ng = model.n_gen();
    let nb = model.buses.len();
    if bus_voltage.len() != nb || topology.in_service.len() != model.branches.len() {
        return Err(Error::Dimension("topology or voltage vector does not match model".into()));
    }
    let fault_extra = usize::from(topology.fault.is_some());
    let size = ng + nb + fault_extra;
    let mut y = DMatrix::from_element(size, size, Complex64::new(0.0, 0.0));
    let bidx = |id: u32| ng + model.bus_index(id).expect("validated bus id");

    for (k, g) in model.generators.iter().enumerate() {
        add_series(&mut y, k, bidx(g.bus), Complex64::new(1.0, 0.0) / j(g.xd_prime));
    }
    for (i, bus) in model.buses.iter().enumerate() {
        let s = bus.net_load();
        if s.norm() > 0.0 {
            let v2 = bus_voltage[i] * bus_voltage[i];
            y[(ng + i, ng + i)] += s.conj() / v2;
        }
    }
    for (k, br) in model.branches.iter().enumerate() {
        if !topology.in_service[k] {
            continue;
        }
        let a = bidx(br.from);
        let b = bidx(br.to);
        match topology.fault {
            Some(fp) if fp.branch == k => {
                let f = fp.location;
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidArgument(format!("fault location {f} outside [0, 1]")));
                }
                let node = ng + nb;
                let segments = [(a, f), (b, 1.0 - f)];
                for (end, frac) in segments {
                    if frac > 0.0 {
                        add_series(&mut y, end, node, Complex64::new(1.0, 0.0) / j(br.reactance_x * frac));
                        let sh = j(br.shunt_b * frac / 2.0);
                        y[(end, end)] += sh;
                        y[(node, node)] += sh;
                    } else {
                        // fault sits on this bus: tie it to the fault node
                        add_series(&mut y, end, node, Complex64::new(1.0, 0.0) / j(FAULT_REACTANCE));
                    }
                }
                y[(node, node)] += Complex64::new(1.0, 0.0) / j(FAULT_REACTANCE);
            }
            _ => {
                add_series(&mut y, a, b, Complex64::new(1.0, 0.0) / j(br.reactance_x));
                let sh = j(br.shunt_b / 2.0);
                y[(a, a)] += sh;
                y[(b, b)] += sh;
            }
        }
    }
    if let Some(fp) = topology.fault {
        if fp.branch >= model.branches.len() {
            return Err(Error::InvalidArgument(format!("faulted branch {} does not exist", fp.branch)));
        }
        if !topology.in_service[fp.branch] {
            return Err(Error::InvalidArgument(format!("faulted branch {} is out of service", fp.branch)));
        }
    }

    let mut bus_rows: Vec<BusRow> = model
        .buses
        .iter()
        .map(|b| BusRow {
            id: b.id,
            lvrt: b.effective_lvrt(),
        })
        .collect();
    if fault_extra == 1 {
        bus_rows.push(BusRow { id: u32::MAX, lvrt: None });
    }
    Ok(ExtendedAdmittance {
        y_ext: y,
        n_gen: ng,
        n_bus: nb + fault_extra,
        bus_rows,
        machines: MachineData::from_model(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    pub b_red: DMatrix<f64>,
    pub e_mag: Vec<f64>,
    /// Pairs `(k, j)` with `k < j` and `B_kj ≠ 0`.
    pub edges: Vec<(usize, usize)>,
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    pub p_m: Vec<f64>,
}

impl ReducedModel {
    pub fn n(&self) -> usize {
        self.e_mag.len()
    }

    /// Edge coupling `B_kj E_k E_j`.
    pub fn coupling(&self, k: usize, j: usize) -> f64 {
        self.b_red[(k, j)] * self.e_mag[k] * self.e_mag[j]
    }

    pub fn total_inertia(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Mechanical power net of each machine's share of the COA acceleration.
    pub fn coa_power(&self) -> Vec<f64> {
        let pt: f64 = self.p_m.iter().sum();
        let mt = self.total_inertia();
        self.p_m.iter().zip(&self.m).map(|(p, m)| p - m * pt / mt).collect()
    }

    /// Electrical power `P_ek = Σ_j B_kj E_k E_j sin(δ_k − δ_j)`.
    pub fn electrical_power(&self, delta: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|k| {
                (0..n)
                    .filter(|&j| j != k)
                    .map(|j| self.coupling(k, j) * (delta[k] - delta[j]).sin())
                    .sum()
            })
            .collect()
    }

    /// Equilibrium residual in COA form.
    pub fn mismatch(&self, delta: &[f64]) -> Vec<f64> {
        let pe = self.electrical_power(delta);
        self.coa_power().iter().zip(pe).map(|(p, e)| p - e).collect()
    }
}

/// Schur complement onto generator internal nodes.
pub fn kron_reduce(ext: &ExtendedAdmittance) -> Result<ReducedModel> {
    let (ygg, ygv, yvg, yvv) = ext.blocks();
    let yred = if ext.n_bus == 0 {
        ygg
    } else {
        let lu = yvv.lu();
        let sol = lu
            .solve(&yvg)
            .ok_or_else(|| Error::SingularNetwork("bus block of extended admittance".into()))?;
        if sol.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::SingularNetwork("bus block of extended admittance".into()));
        }
        ygg - ygv * sol
    };
    let g_max = yred.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    if g_max > CONDUCTANCE_TOL {
        return Err(Error::ResidualConductance(g_max));
    }
    let n = ext.n_gen;
    let mut b_red = DMatrix::from_fn(n, n, |i, j| yred[(i, j)].im);
    crate::linalg::symmetrize(&mut b_red);
    let scale = b_red.amax().max(1e-300);
    let mut edges = Vec::new();
    for k in 0..n {
        for jj in (k + 1)..n {
            if b_red[(k, jj)].abs() > 1e-12 * scale {
                edges.push((k, jj));
            }
        }
    }
    Ok(ReducedModel {
        b_red,
        e_mag: ext.machines.e_mag.clone(),
        edges,
        m: ext.machines.m.clone(),
        d: ext.machines.d.clone(),
        p_m: ext.machines.p_m.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RgConstants {
    pub bus_id: u32,
    /// Row of the bus block.
    pub row: usize,
    pub lvrt_max: f64,
    /// `C_i = E_i |p_{k,i}|`.
    pub c: Vec<f64>,
    /// `δ_ic = arg p_{k,i}`.
    pub phase: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VoltageRecovery {
    /// `v = P · (E ∘ e^{jδ})`, shape `n_bus × n_gen`.
    pub p_mat: DMatrix<Complex64>,
    pub rg: Vec<RgConstants>,
    pub e_mag: Vec<f64>,
}

impl VoltageRecovery {
    pub fn bus_voltages(&self, delta: &[f64]) -> DVector<Complex64> {
        let e = DVector::from_iterator(
            delta.len(),
            delta
                .iter()
                .zip(&self.e_mag)
                .map(|(d, e)| Complex64::from_polar(*e, *d)),
        );
        &self.p_mat * e
    }
}

pub fn voltage_recovery_matrix(ext: &ExtendedAdmittance) -> Result<VoltageRecovery> {
    let (_, _, yvg, yvv) = ext.blocks();
    let sol = yvv
        .lu()
        .solve(&yvg)
        .ok_or_else(|| Error::SingularNetwork("bus block of extended admittance".into()))?;
    let p_mat = -sol;
    let e = &ext.machines.e_mag;
    let rg = ext
        .bus_rows
        .iter()
        .enumerate()
        .filter_map(|(row, br)| {
            br.lvrt.map(|lv| RgConstants {
                bus_id: br.id,
                row,
                lvrt_max: lv,
                c: (0..ext.n_gen).map(|i| e[i] * p_mat[(row, i)].norm()).collect(),
                phase: (0..ext.n_gen).map(|i| p_mat[(row, i)].arg()).collect(),
            })
        })
        .collect();
    Ok(VoltageRecovery {
        p_mat,
        rg,
        e_mag: e.clone(),
    })
}

/// COA-normalise an angle vector in place.
pub fn coa_normalize(delta: &mut [f64], m: &[f64]) {
    let mt: f64 = m.iter().sum();
    let c: f64 = delta.iter().zip(m).map(|(d, m)| d * m).sum::<f64>() / mt;
    for d in delta.iter_mut() {
        *d -= c;
    }
}

/// Linearised (DC) angle estimate used as a Newton starting point.
fn dc_angles(red: &ReducedModel) -> Vec<f64> {
    let n = red.n();
    if n == 1 {
        return vec![0.0];
    }
    let p = red.coa_power();
    let mut lap = DMatrix::zeros(n - 1, n - 1);
    for k in 0..n - 1 {
        for jj in 0..n {
            if jj != k {
                let c = red.coupling(k, jj);
                lap[(k, k)] += c;
                if jj < n - 1 {
                    lap[(k, jj)] -= c;
                }
            }
        }
    }
    let rhs = DVector::from_row_slice(&p[..n - 1]);
    let mut delta = match lap.lu().solve(&rhs) {
        Some(t) => t.iter().cloned().chain(std::iter::once(0.0)).collect(),
        None => vec![0.0; n],
    };
    coa_normalize(&mut delta, &red.m);
    delta
}

/// Jacobian of the swing dynamics at `delta` restricted to the COA tangent
/// space, in orthonormal tangent coordinates.
pub fn manifold_jacobian(red: &ReducedModel, delta: &[f64]) -> DMatrix<f64> {
    let n = red.n();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        for jj in 0..n {
            if jj != k {
                let w = red.coupling(k, jj) * (delta[k] - delta[jj]).cos();
                lap[(k, jj)] -= w;
                lap[(k, k)] += w;
            }
        }
    }
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        jac[(k, n + k)] = 1.0;
        jac[(n + k, n + k)] = -red.d[k] / red.m[k];
        for jj in 0..n {
            jac[(n + k, jj)] = -lap[(k, jj)] / red.m[k];
        }
    }
    let t1 = tangent_basis(&red.m);
    let r = n - 1;
    let mut t = DMatrix::zeros(2 * n, 2 * r);
    t.view_mut((0, 0), (n, r)).copy_from(&t1);
    t.view_mut((n, r), (n, r)).copy_from(&t1);
    t.transpose() * jac * t
}

/// Solve for the COA-normalised stable equilibrium by damped Newton on the
/// angle differences relative to the last machine.
pub fn compute_sep(red: &ReducedModel, initial: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = red.n();
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let p = red.coa_power();
    let mut delta: Vec<f64> = match initial {
        Some(d) if d.len() == n => d.to_vec(),
        _ => dc_angles(red),
    };
    let r = n - 1;
    let resid = |d: &[f64]| -> DVector<f64> {
        let pe = red.electrical_power(d);
        DVector::from_iterator(r, (0..r).map(|k| p[k] - pe[k]))
    };
    let max_iter = 100;
    let mut f = resid(&delta);
    let mut iter = 0;
    while f.amax() > 1e-13 {
        if iter >= max_iter {
            return Err(Error::NewtonDivergence {
                iterations: iter,
                residual: f.amax(),
            });
        }
        let mut jac = DMatrix::zeros(r, r);
        for k in 0..r {
            for l in 0..n {
                if l == k {
                    continue;
                }
                let c = red.coupling(k, l) * (delta[k] - delta[l]).cos();
                jac[(k, k)] -= c;
                if l < r {
                    jac[(k, l)] += c;
                }
            }
        }
        let step = jac.lu().solve(&(-&f)).ok_or(Error::NewtonDivergence {
            iterations: iter,
            residual: f.amax(),
        })?;
        let f0 = f.norm();
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = (0..n)
                .map(|k| if k < r { delta[k] + alpha * step[k] } else { delta[k] })
                .collect();
            let ft = resid(&trial);
            if ft.norm() < (1.0 - 1e-4 * alpha) * f0 || alpha < 1e-8 {
                delta = trial;
                f = ft;
                break;
            }
            alpha *= 0.5;
        }
        iter += 1;
    }
    coa_normalize(&mut delta, &red.m);
    let full = red.mismatch(&delta);
    let worst = full.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    if worst > 1e-10 {
        return Err(Error::NewtonDivergence {
            iterations: iter,
            residual: worst,
        });
    }
    let jr = manifold_jacobian(red, &delta);
    let max_re = jr
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0) {
        return Err(Error::NotStableEquilibrium(max_re));
    }
    Ok(delta)
}

/// Pre-fault operating point: bus voltages consistent with constant-power
/// loads folded in at their own voltage.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub bus_voltage: Vec<Complex64>,
    pub bus_vmag: Vec<f64>,
    pub gen_angles: Vec<f64>,
    pub iterations: usize,
}

/// Fixed-point phasor power-flow: fold loads at the current voltages,
/// reduce, solve the equilibrium, reconstruct voltages, repeat.
pub fn solve_operating_point(model: &NetworkModel) -> Result<OperatingPoint> {
    let topo = Topology::intact(model);
    let nb = model.buses.len();
    let mut vmag = vec![1.0; nb];
    let mut angles: Option<Vec<f64>> = None;
    for it in 0..200 {
        let ext = build_extended_admittance(model, &topo, &vmag)?;
        let red = kron_reduce(&ext)?;
        let delta = compute_sep(&red, angles.as_deref())?;
        let rec = voltage_recovery_matrix(&ext)?;
        let v = rec.bus_voltages(&delta);
        let new_mag: Vec<f64> = v.iter().take(nb).map(|c| c.norm()).collect();
        let change = new_mag
            .iter()
            .zip(&vmag)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        vmag = new_mag;
        angles = Some(delta.clone());
        if change < 1e-13 {
            return Ok(OperatingPoint {
                bus_voltage: v.iter().take(nb).cloned().collect(),
                bus_vmag: vmag,
                gen_angles: delta,
                iterations: it + 1,
            });
        }
    }
    Err(Error::SolverFailure("power flow fixed point did not converge".into()))
}

/// A network variant (pre-fault, fault-on, post-fault) fully prepared for
/// dynamics.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub ext: ExtendedAdmittance,
    pub reduced: ReducedModel,
    pub recovery: VoltageRecovery,
}

impl NetworkState {
    pub fn build(model: &NetworkModel, topology: &Topology, op: &OperatingPoint) -> Result<Self> {
        let ext = build_extended_admittance(model, topology, &op.bus_vmag)?;
        let reduced = kron_reduce(&ext)?;
        let recovery = voltage_recovery_matrix(&ext)?;
        Ok(NetworkState {
            ext,
            reduced,
            recovery,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machines(n: usize) -> MachineData {
        MachineData {
            m: vec![1.0; n],
            d: vec![0.5; n],
            p_m: vec![0.0; n],
            e_mag: vec![1.0; n],
        }
    }

    fn single_machine_json() -> &'static str {
        r#"{"base_mva": 100, "buses": [{"id": 1}], "branches": [],
            "generators": [{"bus": 1, "m": 0.1, "d": 0.05, "xd_prime": 0.5, "e_mag": 1.0, "p_m": 0.0}]}"#
    }

    #[test]
    fn minimal_model_loads() {
        let model = NetworkModel::from_json(single_machine_json()).unwrap();
        let op = solve_operating_point(&model).unwrap();
        let st = NetworkState::build(&model, &Topology::intact(&model), &op).unwrap();
        assert_eq!(st.reduced.n(), 1);
        assert!(st.reduced.edges.is_empty());
    }

    #[test]
    fn single_generator_assembly() {
        let model = NetworkModel::from_json(single_machine_json()).unwrap();
        let ext = build_extended_admittance(&model, &Topology::intact(&model), &[1.0]).unwrap();
        assert_eq!(ext.y_ext.shape(), (2, 2));
        let expected = -(Complex64::new(1.0, 0.0) / Complex64::new(0.0, 0.5));
        assert!((ext.y_ext[(0, 1)] - expected).norm() < 1e-15);
        assert!((ext.y_ext[(1, 0)] - expected).norm() < 1e-15);
    }

    #[test]
    fn single_generator_unloaded_bus_recovers_emf() {
        let model = NetworkModel::from_json(single_machine_json()).unwrap();
        let ext = build_extended_admittance(&model, &Topology::intact(&model), &[1.0]).unwrap();
        let rec = voltage_recovery_matrix(&ext).unwrap();
        assert!((rec.p_mat[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn resistance_is_zeroed_with_warning() {
        let json = r#"{"base_mva": 100, "buses": [{"id": 1}, {"id": 2}],
            "branches": [{"from": 1, "to": 2, "reactance_x": 0.2, "resistance_r": 0.01}],
            "generators": [{"bus": 1, "m": 0.1, "d": 0.05, "xd_prime": 0.5, "e_mag": 1.0, "p_m": 0.0}]}"#;
        let model = NetworkModel::from_json(json).unwrap();
        assert_eq!(model.branches[0].resistance_r, 0.0);
        assert_eq!(model.warnings.len(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dup = r#"{"base_mva": 100, "buses": [{"id": 1}, {"id": 1}], "branches": [],
            "generators": [{"bus": 1, "m": 0.1, "d": 0.05, "xd_prime": 0.5, "e_mag": 1.0, "p_m": 0.0}]}"#;
        assert!(matches!(NetworkModel::from_json(dup), Err(Error::DuplicateBus(1))));
        let unknown = r#"{"base_mva": 100, "buses": [{"id": 1}], "branches": [],
            "generators": [{"bus": 7, "m": 0.1, "d": 0.05, "xd_prime": 0.5, "e_mag": 1.0, "p_m": 0.0}]}"#;
        assert!(matches!(NetworkModel::from_json(unknown), Err(Error::UnknownBus { .. })));
        let neg = r#"{"base_mva": 100, "buses": [{"id": 1}], "branches": [],
            "generators": [{"bus": 1, "m": -0.1, "d": 0.05, "xd_prime": 0.5, "e_mag": 1.0, "p_m": 0.0}]}"#;
        assert!(matches!(NetworkModel::from_json(neg), Err(Error::NonPositiveInertia { .. })));
        assert!(matches!(NetworkModel::from_json("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn nothing_to_eliminate_keeps_susceptance() {
        let x = 0.4;
        let y12 = Complex64::new(1.0, 0.0) / Complex64::new(0.0, x);
        let y = DMatrix::from_row_slice(2, 2, &[y12, -y12, -y12, y12]);
        let red = kron_reduce(&ExtendedAdmittance::from_parts(y, 2, machines(2))).unwrap();
        assert!((red.b_red[(0, 1)] - 1.0 / x).abs() < 1e-14);
        assert_eq!(red.edges, vec![(0, 1)]);
    }

    #[test]
    fn series_reactances_combine() {
        let (x1, x2) = (0.3, 0.45);
        let a = Complex64::new(1.0, 0.0) / Complex64::new(0.0, x1);
        let b = Complex64::new(1.0, 0.0) / Complex64::new(0.0, x2);
        let z = Complex64::new(0.0, 0.0);
        // nodes: gen1, gen2 | middle bus
        let y = DMatrix::from_row_slice(3, 3, &[a, z, -a, z, b, -b, -a, -b, a + b]);
        let red = kron_reduce(&ExtendedAdmittance::from_parts(y, 2, machines(2))).unwrap();
        assert!((red.b_red[(0, 1)] - 1.0 / (x1 + x2)).abs() < 1e-13);
    }

    #[test]
    fn lossy_reduction_is_rejected() {
        let a = Complex64::new(0.5, -2.0);
        let z = Complex64::new(0.0, 0.0);
        let s = Complex64::new(0.0, -1.0);
        let y = DMatrix::from_row_slice(3, 3, &[a, z, -a, z, -s, s, -a, s, a - s]);
        assert!(matches!(
            kron_reduce(&ExtendedAdmittance::from_parts(y, 2, machines(2))),
            Err(Error::ResidualConductance(_))
        ));
    }

    #[test]
    fn zero_transfer_equilibrium() {
        let red = ReducedModel {
            b_red: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            e_mag: vec![1.0, 1.0],
            edges: vec![(0, 1)],
            m: vec![1.0, 1.0],
            d: vec![0.3, 0.3],
            p_m: vec![0.0, 0.0],
        };
        let d = compute_sep(&red, None).unwrap();
        assert!(d[0].abs() < 1e-14 && d[1].abs() < 1e-14);
    }

    #[test]
    fn sine_inversion_equilibrium() {
        // B12 E1 E2 = 1, equal inertia, transfer 0.5 pu from machine 1 to 2
        let red = ReducedModel {
            b_red: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            e_mag: vec![1.0, 1.0],
            edges: vec![(0, 1)],
            m: vec![1.0, 1.0],
            d: vec![0.3, 0.3],
            p_m: vec![0.5, -0.5],
        };
        let d = compute_sep(&red, None).unwrap();
        assert!((d[0] - d[1] - 0.5f64.asin()).abs() < 1e-12);
        assert!((d[0] + d[1]).abs() < 1e-14);
    }

    #[test]
    fn saddle_start_is_rejected() {
        let red = ReducedModel {
            b_red: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            e_mag: vec![1.0, 1.0],
            edges: vec![(0, 1)],
            m: vec![1.0, 1.0],
            d: vec![0.3, 0.3],
            p_m: vec![0.5, -0.5],
        };
        let uep = std::f64::consts::PI - 0.5f64.asin();
        let start = [uep / 2.0, -uep / 2.0];
        assert!(matches!(
            compute_sep(&red, Some(&start)),
            Err(Error::NotStableEquilibrium(_))
        ));
    }
}
