//! The Lyapunov function family
//!
//! ```text
//! V(x) = ½ xᵀQx + Σ_e K_e (c*_e − cos δ_e − δ_e sin δ*_e),   c*_e = cos δ*_e + δ*_e sin δ*_e
//! ```
//!
//! its derivative along the flow, the sector inequality behind the
//! S-procedure, and the LMI search over `(Q, K, H)`.
//!
//! The LMI is posed on the COA tangent space. With `x1 = T ξ1`, `x2 = T ξ2`
//! the `ξ1` block of the quadratic form is identically zero, so feasibility
//! forces its couplings to vanish: `Q11 = λ Q12` and `Q12 Tᵀγ(2) = TᵀC1ᵀH`.
//! These are imposed as equalities and the strict margin applies to the
//! remaining `(ξ2, F)` block.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{self, AffineLmi, Outcome, Problem};
use crate::dynamics::{nonlinearity_f, vector_field, COAState, StateMatrices};
use crate::error::{Error, Result};
use crate::linalg::{affine_nullspace, max_sym_eig, min_sym_eig, symmetrize, tangent_basis};

pub const EPS_Q: f64 = 1e-8;
pub const EPS_K: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCandidate {
    #[serde(with = "crate::report::dense")]
    pub q_mat: DMatrix<f64>,
    pub k_diag: Vec<f64>,
    pub h_diag: Vec<f64>,
    /// `Σ_e K_e c*_e`, making `V(0) = 0`.
    pub v_offset: f64,
    pub delta_star: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl LyapunovCandidate {
    pub fn n(&self) -> usize {
        self.delta_star.len()
    }

    fn edge_star(&self, e: usize) -> f64 {
        let (k, j) = self.edges[e];
        self.delta_star[k] - self.delta_star[j]
    }

    fn edge_abs(&self, x1: &[f64], e: usize) -> f64 {
        let (k, j) = self.edges[e];
        self.edge_star(e) + x1[k] - x1[j]
    }

    pub fn value(&self, x: &COAState) -> f64 {
        let xv = x.to_vector();
        let quad = 0.5 * xv.dot(&(&self.q_mat * &xv));
        let cos_part: f64 = (0..self.edges.len())
            .map(|e| {
                let d = self.edge_abs(&x.x1, e);
                self.k_diag[e] * (d.cos() + d * self.edge_star(e).sin())
            })
            .sum();
        quad - cos_part + self.v_offset
    }

    /// `∇V = Qx + Cᵀ K F`.
    pub fn gradient(&self, x: &COAState) -> DVector<f64> {
        let xv = x.to_vector();
        let mut g = &self.q_mat * &xv;
        for (e, &(k, j)) in self.edges.iter().enumerate() {
            let f = self.edge_abs(&x.x1, e).sin() - self.edge_star(e).sin();
            g[k] += self.k_diag[e] * f;
            g[j] -= self.k_diag[e] * f;
        }
        g
    }

    /// `∇²V = Q + Cᵀ diag(K cos δ) C`.
    pub fn hessian(&self, x: &COAState) -> DMatrix<f64> {
        let mut h = self.q_mat.clone();
        for (e, &(k, j)) in self.edges.iter().enumerate() {
            let w = self.k_diag[e] * self.edge_abs(&x.x1, e).cos();
            h[(k, k)] += w;
            h[(j, j)] += w;
            h[(k, j)] -= w;
            h[(j, k)] -= w;
        }
        h
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_json(path, self)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn evaluate_v(c: &LyapunovCandidate, x: &COAState) -> f64 {
    c.value(x)
}

/// `V̇ = xᵀQAx − xᵀQBF + (Gx)ᵀKF` with `G = CA`.
pub fn evaluate_vdot(c: &LyapunovCandidate, x: &COAState, mats: &StateMatrices) -> f64 {
    let xv = x.to_vector();
    let f = nonlinearity_f(x, mats);
    let qx = &c.q_mat * &xv;
    let kf = DVector::from_iterator(f.len(), f.iter().zip(&c.k_diag).map(|(f, k)| f * k));
    qx.dot(&(&mats.a_mat * &xv)) - qx.dot(&(&mats.b_mat * &f)) + (&mats.g_mat * &xv).dot(&kf)
}

/// Chain-rule form `∇V · ẋ`, independent of the closed-form derivative.
pub fn vdot_chain_rule(c: &LyapunovCandidate, x: &COAState, mats: &StateMatrices) -> f64 {
    c.gradient(x).dot(&vector_field(x, mats).to_vector())
}

/// `(sin δ − sin δ*)² ≤ (δ − δ*)(sin δ − sin δ*)` up to `1e−12`.
pub fn sector_inequality_holds(delta: f64, delta_star: f64) -> bool {
    sector_slack(delta, delta_star) >= -1e-12
}

/// `(δ − δ*)(sin δ − sin δ*) − (sin δ − sin δ*)²`.
pub fn sector_slack(delta: f64, delta_star: f64) -> f64 {
    let f = delta.sin() - delta_star.sin();
    (delta - delta_star) * f - f * f
}

/// Classical energy function with the angle block regularised:
/// `Q = blkdiag(ε_q I, M)`, `K_e = B_kj E_k E_j`.
pub fn energy_function_candidate(mats: &StateMatrices) -> LyapunovCandidate {
    let n = mats.n;
    let mut q = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        q[(k, k)] = EPS_Q;
        q[(n + k, n + k)] = mats.m[k];
    }
    candidate_from_parts(mats, q, mats.k_edge.clone(), vec![EPS_K; mats.n_edges()])
}

fn candidate_from_parts(mats: &StateMatrices, q: DMatrix<f64>, k: Vec<f64>, h: Vec<f64>) -> LyapunovCandidate {
    let v_offset = (0..mats.n_edges())
        .map(|e| {
            let s = mats.edge_star(e);
            k[e] * (s.cos() + s * s.sin())
        })
        .sum();
    LyapunovCandidate {
        q_mat: q,
        k_diag: k,
        h_diag: h,
        v_offset,
        delta_star: mats.delta_star.clone(),
        edges: mats.edges.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LFSearchConfig {
    pub lmi_margin: f64,
    /// `trace(Q) + Σ K`; `None` selects `2n + |ℰ|`.
    pub trace_normalization: Option<f64>,
    pub max_refinements: usize,
}

impl Default for LFSearchConfig {
    fn default() -> Self {
        LFSearchConfig {
            lmi_margin: 1e-9,
            trace_normalization: None,
            max_refinements: 5,
        }
    }
}

impl LFSearchConfig {
    pub fn normalization(&self, mats: &StateMatrices) -> f64 {
        self.trace_normalization
            .unwrap_or((2 * mats.n + mats.n_edges()) as f64)
    }
}

#[derive(Debug, Clone)]
pub enum LmiObjective {
    None,
    /// Minimise `V(x0)`; optional cut states `w` add `V(w) ≥ V(x0)`.
    MinimizeVAt {
        x0: COAState,
        cuts: Vec<COAState>,
    },
}

/// Residual diagnostics of the full-coordinate block matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiResidual {
    /// Largest eigenvalue on the tangent space, all blocks included.
    pub max_eig: f64,
    /// Largest eigenvalue of the `(ξ2, F)` block.
    pub strict_block_max_eig: f64,
    /// Largest entry of the `ξ1` rows (structural zero modes).
    pub zero_mode_coupling: f64,
    pub q_min_eig_tangent: f64,
    pub k_min: f64,
    pub h_min: f64,
}

/// Full block matrix `[[AᵀQ + QA, −(QB − (KCA)ᵀ − CᵀH)], [·ᵀ, −2H]]`.
pub fn lmi_block_matrix(c: &LyapunovCandidate, mats: &StateMatrices) -> DMatrix<f64> {
    let n2 = mats.dim();
    let ne = mats.n_edges();
    let q = &c.q_mat;
    let kd = DMatrix::from_diagonal(&DVector::from_vec(c.k_diag.clone()));
    let hd = DMatrix::from_diagonal(&DVector::from_vec(c.h_diag.clone()));
    let top = mats.a_mat.transpose() * q + q * &mats.a_mat;
    let off = -(q * &mats.b_mat - (&kd * &mats.g_mat).transpose() - mats.c_mat.transpose() * &hd);
    let mut m = DMatrix::zeros(n2 + ne, n2 + ne);
    m.view_mut((0, 0), (n2, n2)).copy_from(&top);
    m.view_mut((0, n2), (n2, ne)).copy_from(&off);
    m.view_mut((n2, 0), (ne, n2)).copy_from(&off.transpose());
    m.view_mut((n2, n2), (ne, ne)).copy_from(&(hd * -2.0));
    m
}

pub fn lmi_residual(c: &LyapunovCandidate, mats: &StateMatrices) -> LmiResidual {
    let n = mats.n;
    let r = n - 1;
    let ne = mats.n_edges();
    let t = tangent_basis(&mats.m);
    let mut w = DMatrix::zeros(2 * n + ne, 2 * r + ne);
    w.view_mut((0, 0), (n, r)).copy_from(&t);
    w.view_mut((n, r), (n, r)).copy_from(&t);
    w.view_mut((2 * n, 2 * r), (ne, ne)).fill_with_identity();
    let mut red = w.transpose() * lmi_block_matrix(c, mats) * &w;
    symmetrize(&mut red);
    let strict = red.view((r, r), (r + ne, r + ne)).into_owned();
    let zero_rows = red.rows(0, r).amax();
    let wq = w.view((0, 0), (2 * n, 2 * r)).into_owned();
    LmiResidual {
        max_eig: max_sym_eig(&red),
        strict_block_max_eig: max_sym_eig(&strict),
        zero_mode_coupling: if r == 0 { 0.0 } else { zero_rows },
        q_min_eig_tangent: min_sym_eig(&(wq.transpose() * &c.q_mat * &wq)),
        k_min: c.k_diag.iter().cloned().fold(f64::INFINITY, f64::min),
        h_min: c.h_diag.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// Decision-variable layout `[sym(Q12) | sym(Q22) | K | H]` in tangent
/// coordinates.
struct Layout {
    r: usize,
    ne: usize,
    lambda: f64,
    t: DMatrix<f64>,
    /// `Tᵀγ(2)`.
    tg: DMatrix<f64>,
    /// `TᵀC1ᵀ`.
    tc: DMatrix<f64>,
}

impl Layout {
    fn new(mats: &StateMatrices) -> Self {
        let n = mats.n;
        let t = tangent_basis(&mats.m);
        let c1 = mats.c_mat.columns(0, n).into_owned();
        Layout {
            r: n - 1,
            ne: mats.n_edges(),
            lambda: mats.lambda,
            tg: t.transpose() * &mats.gamma2,
            tc: t.transpose() * c1.transpose(),
            t,
        }
    }

    fn nsym(&self) -> usize {
        self.r * (self.r + 1) / 2
    }

    fn nvar(&self) -> usize {
        2 * self.nsym() + 2 * self.ne
    }

    fn sym(&self, z: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.r, self.r);
        let mut idx = 0;
        for a in 0..self.r {
            for b in a..self.r {
                s[(a, b)] = z[idx];
                s[(b, a)] = z[idx];
                idx += 1;
            }
        }
        s
    }

    fn split<'z>(&self, z: &'z [f64]) -> (DMatrix<f64>, DMatrix<f64>, &'z [f64], &'z [f64]) {
        let s = self.nsym();
        (
            self.sym(&z[..s]),
            self.sym(&z[s..2 * s]),
            &z[2 * s..2 * s + self.ne],
            &z[2 * s + self.ne..],
        )
    }

    /// `Q_r = [[λQ12, Q12], [Q12, Q22]]`.
    fn q_reduced(&self, z: &[f64]) -> DMatrix<f64> {
        let (q12, q22, _, _) = self.split(z);
        let r = self.r;
        let mut q = DMatrix::zeros(2 * r, 2 * r);
        q.view_mut((0, 0), (r, r)).copy_from(&(&q12 * self.lambda));
        q.view_mut((0, r), (r, r)).copy_from(&q12);
        q.view_mut((r, 0), (r, r)).copy_from(&q12);
        q.view_mut((r, r), (r, r)).copy_from(&q22);
        q
    }

    /// The `(ξ2, F)` block of the reduced quadratic form.
    fn strict_block(&self, z: &[f64]) -> DMatrix<f64> {
        let (q12, q22, k, h) = self.split(z);
        let r = self.r;
        let ne = self.ne;
        let kd = DMatrix::from_diagonal(&DVector::from_row_slice(k));
        let mut s = DMatrix::zeros(r + ne, r + ne);
        s.view_mut((0, 0), (r, r))
            .copy_from(&(&q12 * 2.0 - &q22 * (2.0 * self.lambda)));
        let off = &self.tc * kd - &q22 * &self.tg;
        s.view_mut((0, r), (r, ne)).copy_from(&off);
        s.view_mut((r, 0), (ne, r)).copy_from(&off.transpose());
        for e in 0..ne {
            s[(r + e, r + e)] = -2.0 * h[e];
        }
        s
    }

    /// `Q12 Tᵀγ(2) − TᵀC1ᵀ H`, row-major.
    fn coupling(&self, z: &[f64]) -> Vec<f64> {
        let (q12, _, _, h) = self.split(z);
        let hd = DMatrix::from_diagonal(&DVector::from_row_slice(h));
        let m = &q12 * &self.tg - &self.tc * hd;
        (0..self.r)
            .flat_map(|a| (0..self.ne).map(move |e| (a, e)))
            .map(|(a, e)| m[(a, e)])
            .collect()
    }

    fn trace(&self, z: &[f64]) -> f64 {
        let (q12, q22, k, _) = self.split(z);
        self.lambda * q12.trace() + q22.trace() + k.iter().sum::<f64>()
    }

    fn q_full(&self, z: &[f64], n: usize) -> DMatrix<f64> {
        let r = self.r;
        let mut wq = DMatrix::zeros(2 * n, 2 * r);
        wq.view_mut((0, 0), (n, r)).copy_from(&self.t);
        wq.view_mut((n, r), (n, r)).copy_from(&self.t);
        let mut q = &wq * self.q_reduced(z) * wq.transpose();
        symmetrize(&mut q);
        q
    }

    /// `V(x)` as a linear function of the decision vector.
    fn v_at(&self, z: &[f64], x: &COAState, mats: &StateMatrices) -> f64 {
        let n = mats.n;
        let q = self.q_full(z, n);
        let xv = x.to_vector();
        let (_, _, k, _) = self.split(z);
        let cos_part: f64 = (0..self.ne)
            .map(|e| {
                let s = mats.edge_star(e);
                let (a, b) = mats.edges[e];
                let d = s + x.x1[a] - x.x1[b];
                k[e] * (s.cos() + s * s.sin() - d.cos() - d * s.sin())
            })
            .sum();
        0.5 * xv.dot(&(q * &xv)) + cos_part
    }
}

/// Coefficients of a map that is affine in the decision vector.
fn affine_coeffs<F: Fn(&[f64]) -> DMatrix<f64>>(nvar: usize, f: F) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let zero = vec![0.0; nvar];
    let f0 = f(&zero);
    let fi = (0..nvar)
        .map(|i| {
            let mut e = zero.clone();
            e[i] = 1.0;
            f(&e) - &f0
        })
        .collect();
    (f0, fi)
}

/// Solve the family LMI. With no objective the analytic centre of the
/// feasible set is returned.
pub fn assemble_and_solve_lmi(
    mats: &StateMatrices,
    objective: &LmiObjective,
    config: &LFSearchConfig,
) -> Result<(LyapunovCandidate, LmiResidual)> {
    if mats.n < 2 {
        return Err(Error::InvalidArgument("the LMI needs at least two machines".into()));
    }
    let lay = Layout::new(mats);
    let nv = lay.nvar();
    let nsym = lay.nsym();
    let ne = lay.ne;
    let tau = config.normalization(mats);

    // equalities: structural couplings and the trace normalisation
    let n_coup = lay.r * ne;
    let mut a_eq = DMatrix::zeros(n_coup + 1, nv);
    let mut b_eq = DVector::zeros(n_coup + 1);
    for i in 0..nv {
        let mut e = vec![0.0; nv];
        e[i] = 1.0;
        for (row, v) in lay.coupling(&e).into_iter().enumerate() {
            a_eq[(row, i)] = v;
        }
        a_eq[(n_coup, i)] = lay.trace(&e);
    }
    b_eq[n_coup] = tau;
    let (z0, basis) = affine_nullspace(&a_eq, &b_eq, 1e-11)?;
    let nw = basis.ncols();
    let lift = |w: &[f64]| -> Vec<f64> {
        let wv = DVector::from_row_slice(w);
        (&z0 + &basis * wv).iter().cloned().collect()
    };

    let margin = config.lmi_margin;
    let mut problem = Problem::new(nw);
    let (f0, fi) = affine_coeffs(nw, |w| {
        let s = lay.strict_block(&lift(w));
        -s - DMatrix::identity(lay.r + ne, lay.r + ne) * margin
    });
    problem.lmis.push(AffineLmi { f0, fi });
    let (f0, fi) = affine_coeffs(nw, |w| {
        lay.q_reduced(&lift(w)) - DMatrix::identity(2 * lay.r, 2 * lay.r) * EPS_Q
    });
    problem.lmis.push(AffineLmi { f0, fi });
    for e in 0..2 * ne {
        let idx = 2 * nsym + e;
        let a = DVector::from_iterator(nw, (0..nw).map(|j| basis[(idx, j)]));
        problem.push_linear(&a, z0[idx] - EPS_K);
    }

    if let LmiObjective::MinimizeVAt { x0, cuts } = objective {
        if x0.manifold_residual(&mats.m) > 1e-8 {
            return Err(Error::InvalidArgument("x0 is not on the COA manifold".into()));
        }
        let v_lin = |x: &COAState| -> (f64, DVector<f64>) {
            let (c0, ci) = affine_coeffs(nw, |w| {
                DMatrix::from_element(1, 1, lay.v_at(&lift(w), x, mats))
            });
            (c0[(0, 0)], DVector::from_iterator(nw, ci.iter().map(|m| m[(0, 0)])))
        };
        let (_, c) = v_lin(x0);
        problem.c = c.clone();
        let (v00, _) = v_lin(x0);
        for w in cuts {
            let (w0, wc) = v_lin(w);
            // V(w) − V(x0) ≥ 0
            problem.push_linear(&(wc - &c), w0 - v00);
        }
    }

    let opts = barrier::Options::default();
    let z = match barrier::solve(&problem, None, &opts)? {
        Outcome::Optimal { z, .. } => z,
        Outcome::Infeasible { slack } => return Err(Error::LmiInfeasible { slack }),
    };
    if z.amax() > 0.5 * opts.box_bound {
        return Err(Error::Unbounded);
    }
    let zf = lift(z.as_slice());
    let (_, _, k, h) = lay.split(&zf);
    let cand = candidate_from_parts(mats, lay.q_full(&zf, mats.n), k.to_vec(), h.to_vec());
    let res = lmi_residual(&cand, mats);
    if res.max_eig > 1e-8 || res.q_min_eig_tangent < EPS_Q * 0.5 || res.k_min < EPS_K * 0.5 || res.h_min < EPS_K * 0.5 {
        return Err(Error::SolverFailure(format!(
            "LMI solution failed verification: {res:?}"
        )));
    }
    Ok((cand, res))
}
