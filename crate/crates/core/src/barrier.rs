//! Log-barrier interior-point method for small dense convex programs:
//!
//! ```text
//! minimize    cᵀz
//! subject to  F_j(z) = F_j0 + Σ_i z_i F_ji ⪰ 0      (affine LMIs)
//!             G z + h ≥ 0                           (linear rows)
//!             f_k(z) ≥ 0                            (smooth concave scalars)
//! ```
//!
//! Feasibility is established by a phase-I problem that maximises the
//! smallest slack; the optimality gap at exit is bounded by `m / t` where
//! `m` is the total barrier degree.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;

/// `F(z) = f0 + Σ z_i fi[i] ⪰ 0`.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub f0: DMatrix<f64>,
    pub fi: Vec<DMatrix<f64>>,
}

impl AffineLmi {
    pub fn value(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (zi, fi) in z.iter().zip(&self.fi) {
            if *zi != 0.0 {
                f += fi * *zi;
            }
        }
        f
    }
}

/// A scalar constraint `f(z) ≥ 0` with `f` concave and twice differentiable.
pub trait SmoothConstraint: Sync {
    /// Value, gradient and Hessian of `f` at `z`.
    fn eval(&self, z: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
}

pub struct Problem<'a> {
    pub c: DVector<f64>,
    pub lmis: Vec<AffineLmi>,
    pub lin_g: DMatrix<f64>,
    pub lin_h: DVector<f64>,
    pub smooth: Vec<&'a dyn SmoothConstraint>,
}

impl<'a> Problem<'a> {
    pub fn new(nvar: usize) -> Self {
        Problem {
            c: DVector::zeros(nvar),
            lmis: Vec::new(),
            lin_g: DMatrix::zeros(0, nvar),
            lin_h: DVector::zeros(0),
            smooth: Vec::new(),
        }
    }

    pub fn nvar(&self) -> usize {
        self.c.len()
    }

    pub fn push_linear(&mut self, a: &DVector<f64>, b: f64) {
        let rows = self.lin_g.nrows();
        let g = std::mem::replace(&mut self.lin_g, DMatrix::zeros(0, 0));
        self.lin_g = g.insert_row(rows, 0.0);
        self.lin_g.row_mut(rows).copy_from(&a.transpose());
        let h = std::mem::replace(&mut self.lin_h, DVector::zeros(0));
        self.lin_h = h.insert_row(rows, b);
    }

    fn degree(&self) -> f64 {
        (self.lmis.iter().map(|l| l.f0.nrows()).sum::<usize>()
            + self.lin_h.len()
            + self.smooth.len()) as f64
    }

    /// Smallest slack over all constraints (λ_min for LMIs).
    pub fn min_slack(&self, z: &DVector<f64>) -> f64 {
        let mut s = f64::INFINITY;
        for l in &self.lmis {
            s = s.min(crate::linalg::min_sym_eig(&l.value(z)));
        }
        if !self.lin_h.is_empty() {
            s = s.min((&self.lin_g * z + &self.lin_h).min());
        }
        for c in &self.smooth {
            s = s.min(c.eval(z).0);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub gap_tol: f64,
    pub mu: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    /// Phase I declares the interior empty when the best achievable minimum
    /// slack is below this value.
    pub interior_tol: f64,
    pub box_bound: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            gap_tol: 1e-10,
            mu: 12.0,
            max_newton: 80,
            max_outer: 60,
            interior_tol: 1e-12,
            box_bound: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Optimal {
        z: DVector<f64>,
        value: f64,
        gap: f64,
        newton_steps: usize,
    },
    /// No strictly feasible point exists (up to `interior_tol`); `slack` is
    /// the best minimum slack found by phase I.
    Infeasible { slack: f64 },
}

/// Internal problem view used for both phases: an optional extra slack
/// variable appended at the end of `z` shifts every constraint.
struct View<'p, 'a> {
    p: &'p Problem<'a>,
    with_slack: bool,
    c: DVector<f64>,
    box_bound: f64,
}

impl<'p, 'a> View<'p, 'a> {
    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, f64) {
        if self.with_slack {
            let n = z.len() - 1;
            (z.rows(0, n).into_owned(), z[n])
        } else {
            (z.clone(), 0.0)
        }
    }

    fn degree(&self) -> f64 {
        let base = self.p.degree() + 2.0 * self.p.nvar() as f64;
        if self.with_slack {
            base + 1.0
        } else {
            base
        }
    }

    /// Barrier value, gradient, Hessian. `None` when outside the domain.
    fn barrier(&self, zfull: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let nfull = zfull.len();
        let (z, s) = self.split(zfull);
        let nv = z.len();
        let mut val = 0.0;
        let mut grad = DVector::zeros(nfull);
        let mut hess = DMatrix::zeros(nfull, nfull);

        for lmi in &self.p.lmis {
            let d = lmi.f0.nrows();
            let mut f = lmi.value(&z);
            if self.with_slack {
                for i in 0..d {
                    f[(i, i)] += s;
                }
            }
            let ch = f.cholesky()?;
            let l = ch.l();
            for i in 0..d {
                val -= 2.0 * l[(i, i)].ln();
            }
            let finv = ch.inverse();
            let mut gs: Vec<DMatrix<f64>> = lmi.fi.iter().map(|fi| &finv * fi).collect();
            if self.with_slack {
                gs.push(finv.clone());
            }
            for (i, gi) in gs.iter().enumerate() {
                grad[i] -= gi.trace();
            }
            for i in 0..gs.len() {
                for j in i..gs.len() {
                    // tr(G_i G_j)
                    let mut acc = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            acc += gs[i][(a, b)] * gs[j][(b, a)];
                        }
                    }
                    hess[(i, j)] += acc;
                    if i != j {
                        hess[(j, i)] += acc;
                    }
                }
            }
            let _ = nv;
        }

        for r in 0..self.p.lin_h.len() {
            let a = self.p.lin_g.row(r);
            let slack = a.dot(&z.transpose()) + self.p.lin_h[r] + s;
            if !(slack > 0.0) {
                return None;
            }
            val -= slack.ln();
            let mut av = DVector::zeros(nfull);
            for i in 0..nv {
                av[i] = a[i];
            }
            if self.with_slack {
                av[nv] = 1.0;
            }
            grad -= &av / slack;
            hess += &av * av.transpose() / (slack * slack);
        }

        for c in &self.p.smooth {
            let (f, g, h) = c.eval(&z);
            let slack = f + s;
            if !(slack > 0.0) || !slack.is_finite() {
                return None;
            }
            val -= slack.ln();
            let mut gv = DVector::zeros(nfull);
            gv.rows_mut(0, nv).copy_from(&g);
            if self.with_slack {
                gv[nv] = 1.0;
            }
            grad -= &gv / slack;
            hess += &gv * gv.transpose() / (slack * slack);
            let mut hh = hess.view_mut((0, 0), (nv, nv));
            hh -= h / slack;
        }

        // box |z_i| ≤ R keeps phase I bounded
        let r = self.box_bound;
        for i in 0..nv {
            for sign in [1.0, -1.0] {
                let slack = r - sign * z[i];
                if !(slack > 0.0) {
                    return None;
                }
                val -= slack.ln();
                grad[i] += sign / slack;
                hess[(i, i)] += 1.0 / (slack * slack);
            }
        }
        if self.with_slack {
            // s ≥ -1
            let slack = s + 1.0;
            if !(slack > 0.0) {
                return None;
            }
            val -= slack.ln();
            grad[nv] -= 1.0 / slack;
            hess[(nv, nv)] += 1.0 / (slack * slack);
        }
        Some((val, grad, hess))
    }

    /// Newton centering on `t cᵀz + φ(z)`. Returns the number of steps.
    fn center(&self, z: &mut DVector<f64>, t: f64, max_newton: usize) -> Result<usize> {
        let mut steps = 0;
        let (mut phi, mut g, mut h) = self
            .barrier(z)
            .ok_or_else(|| Error::SolverFailure("centering started outside domain".into()))?;
        for _ in 0..max_newton {
            let obj = t * self.c.dot(z) + phi;
            let grad = &self.c * t + &g;
            let dz = match solve_spd(&h, &(-&grad)) {
                Some(d) => d,
                None => return Err(Error::SolverFailure("singular Newton system".into())),
            };
            let dec2 = -grad.dot(&dz);
            if !(dec2 > 0.0) || dec2 / 2.0 < 1e-12 {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &*z + &dz * alpha;
                if let Some((p2, g2, h2)) = self.barrier(&trial) {
                    let obj2 = t * self.c.dot(&trial) + p2;
                    if obj2 <= obj - 0.25 * alpha * dec2 || obj2 <= obj + 1e-14 * obj.abs().max(1.0) && alpha < 1e-3 {
                        *z = trial;
                        phi = p2;
                        g = g2;
                        h = h2;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            steps += 1;
            if !accepted {
                break;
            }
            if z.amax() > 1e10 {
                return Err(Error::Unbounded);
            }
        }
        Ok(steps)
    }

    fn run(&self, z: &mut DVector<f64>, opts: &Options, stop_below: Option<f64>) -> Result<(f64, usize)> {
        let m = self.degree();
        let cn = self.c.norm().max(1e-300);
        let mut t = (1.0 / cn).max(1e-6);
        let mut total = 0;
        for _ in 0..opts.max_outer {
            total += self.center(z, t, opts.max_newton)?;
            if let Some(thr) = stop_below {
                if self.c.dot(z) < thr {
                    break;
                }
            }
            if m / t < opts.gap_tol {
                break;
            }
            t *= opts.mu;
        }
        Ok((m / t, total))
    }
}

/// Find a strictly feasible point (maximising the minimum slack).
pub fn find_interior(p: &Problem<'_>, start: Option<&DVector<f64>>, opts: &Options) -> Result<Outcome> {
    let nv = p.nvar();
    let z0 = start.cloned().unwrap_or_else(|| DVector::zeros(nv));
    let s0 = (-p.min_slack(&z0)).max(0.0) + 1.0;
    if !s0.is_finite() {
        return Err(Error::SolverFailure("non-finite initial slack".into()));
    }
    let mut zfull = DVector::zeros(nv + 1);
    zfull.rows_mut(0, nv).copy_from(&z0);
    zfull[nv] = s0.min(0.9e6);
    let mut c = DVector::zeros(nv + 1);
    c[nv] = 1.0;
    let view = View {
        p,
        with_slack: true,
        c,
        box_bound: opts.box_bound,
    };
    let mut phase_opts = opts.clone();
    phase_opts.gap_tol = opts.interior_tol * 0.1;
    let (_, steps) = view.run(&mut zfull, &phase_opts, Some(-1.0 + 1e-9))?;
    let z = zfull.rows(0, nv).into_owned();
    let slack = p.min_slack(&z);
    if slack > opts.interior_tol {
        Ok(Outcome::Optimal {
            value: -slack,
            z,
            gap: 0.0,
            newton_steps: steps,
        })
    } else {
        Ok(Outcome::Infeasible { slack })
    }
}

/// Solve the problem to the requested duality gap.
pub fn solve(p: &Problem<'_>, start: Option<&DVector<f64>>, opts: &Options) -> Result<Outcome> {
    let (mut z, steps1) = match find_interior(p, start, opts)? {
        Outcome::Optimal { z, newton_steps, .. } => (z, newton_steps),
        inf => return Ok(inf),
    };
    let view = View {
        p,
        with_slack: false,
        c: p.c.clone(),
        box_bound: opts.box_bound,
    };
    let (gap, steps2) = if p.c.amax() == 0.0 {
        // analytic centre
        (0.0, view.center(&mut z, 0.0, opts.max_newton * 4)?)
    } else {
        view.run(&mut z, opts, None)?
    };
    Ok(Outcome::Optimal {
        value: p.c.dot(&z),
        z,
        gap,
        newton_steps: steps1 + steps2,
    })
}
