//! LVRT constraints in rotor-angle space, piecewise-linear lower bounds of
//! their cosine terms, and the polytopic approximate combined feasibility
//! region (ACFR) with per-facet provenance.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::COAState;
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::linalg::tangent_basis;
use crate::netmodel::{ReducedModel, RgConstants};

/// Facet membership tolerance.
pub const FACET_TOL: f64 = 1e-8;
/// Default signed-rate tolerance separating flow-out from semi-saddle.
pub const FLOW_TOL: f64 = 1e-9;
pub const DEFAULT_SAMPLES: usize = 721;
pub const DEFAULT_FACET_CAP: usize = 4096;
/// Margin of the a-posteriori lower-bound verification.
pub const VERIFY_MARGIN: f64 = 1e-10;

/// Time-independent LVRT floor: the largest voltage on the curve.
pub fn lvrt_max_from_curve(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::EmptyCurve);
    }
    if let Some(&(t, v)) = curve.iter().find(|(_, v)| !(*v >= 0.0 && *v <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "LVRT curve voltage {v} at t = {t} outside [0, 1]"
        )));
    }
    Ok(curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub i: usize,
    pub j: usize,
    /// `2 C_i C_j`.
    pub amplitude: f64,
    /// `δ_ic − δ_jc`.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvrtConstraint {
    pub rg_bus: u32,
    pub lvrt_max: f64,
    /// `Σ_i C_i²`.
    pub diag: f64,
    /// `lvrt_max² − Σ_i C_i²`.
    pub threshold: f64,
    pub terms: Vec<CosineTerm>,
}

impl LvrtConstraint {
    pub fn from_rg(rg: &RgConstants) -> Self {
        let n = rg.c.len();
        let diag: f64 = rg.c.iter().map(|c| c * c).sum();
        let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                terms.push(CosineTerm {
                    i,
                    j,
                    amplitude: 2.0 * rg.c[i] * rg.c[j],
                    phase: wrap_angle(rg.phase[i] - rg.phase[j]),
                });
            }
        }
        LvrtConstraint {
            rg_bus: rg.bus_id,
            lvrt_max: rg.lvrt_max,
            diag,
            threshold: rg.lvrt_max * rg.lvrt_max - diag,
            terms,
        }
    }
}

/// Wrap to `(−π, π]`.
fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// `|v_k|²` as a cosine sum over generator pairs at absolute COA angles.
pub fn voltage_sq(delta: &[f64], c: &LvrtConstraint) -> f64 {
    c.diag
        + c.terms
            .iter()
            .map(|t| t.amplitude * (delta[t.i] - delta[t.j] + t.phase).cos())
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlFit {
    pub edge: (usize, usize),
    pub phase: f64,
    /// `(a_k, b_k)` chords between successive vertices, padded with
    /// repeats when fewer chords fit better.
    pub lines: Vec<(f64, f64)>,
    /// Sorted vertex abscissae, endpoints at `±π/2`.
    pub vertices: Vec<f64>,
    /// Sum of squared gaps over the sample grid.
    pub objective: f64,
}

impl PwlFit {
    pub fn eval(&self, delta: f64) -> f64 {
        self.lines
            .iter()
            .map(|(a, b)| a * delta + b)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    /// Largest `min_k(a_k δ + b_k) − cos(δ + phase)` over a uniform grid.
    pub fn max_excess(&self, points: usize) -> f64 {
        (0..points)
            .map(|p| {
                let d = grid_point(p, points);
                self.eval(d) - (d + self.phase).cos()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, points: usize) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("delta,cos_value,approx_value\n");
        for p in 0..points {
            let d = grid_point(p, points);
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                d,
                (d + self.phase).cos(),
                self.eval(d)
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn grid_point(p: usize, points: usize) -> f64 {
    -FRAC_PI_2 + PI * p as f64 / (points - 1) as f64
}

/// Whether `a δ + b ≤ cos(δ + φ)` on `[u, w]`. Interior extrema of the gap
/// solve `sin(δ + φ) = −a`, so checking those and the ends is exact.
fn line_below(a: f64, b: f64, u: f64, w: f64, phase: f64) -> bool {
    let gap = |d: f64| (d + phase).cos() - (a * d + b);
    let tol = 1e-13;
    if gap(u) < -tol || gap(w) < -tol {
        return false;
    }
    if w - u <= 0.0 {
        return true;
    }
    if a.abs() <= 1.0 {
        let base = (-a).asin();
        for root in [base, PI - base] {
            // all solutions root + 2πk − phase inside (u, w)
            let first = root - phase;
            let k_lo = ((u - first) / (2.0 * PI)).ceil() as i64;
            let k_hi = ((w - first) / (2.0 * PI)).floor() as i64;
            for k in k_lo..=k_hi {
                let d = first + 2.0 * PI * k as f64;
                if d > u && d < w && gap(d) < -tol {
                    return false;
                }
            }
        }
    }
    // guard against roundoff at the critical points
    (1..16).all(|s| gap(u + (w - u) * s as f64 / 16.0) >= -tol)
}

/// Pieces `(line, u, w)` of the lower envelope `min_k(a_k δ + b_k)` over
/// `[lo, hi]`, left to right.
fn lower_envelope(lines: &[(f64, f64)], lo: f64, hi: f64) -> Vec<(usize, f64, f64)> {
    let value = |k: usize, d: f64| lines[k].0 * d + lines[k].1;
    let mut cur = (0..lines.len())
        .min_by(|&i, &j| {
            value(i, lo)
                .partial_cmp(&value(j, lo))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(lines[i].0.partial_cmp(&lines[j].0).unwrap_or(std::cmp::Ordering::Equal))
        })
        .expect("at least one line");
    let mut start = lo;
    let mut pieces = Vec::new();
    loop {
        // the next line to take over has a smaller slope and crosses first
        let mut next: Option<(usize, f64)> = None;
        for k in 0..lines.len() {
            let da = lines[cur].0 - lines[k].0;
            if da <= 0.0 {
                continue;
            }
            let x = (lines[k].1 - lines[cur].1) / da;
            if x > start && x < hi && next.is_none_or(|(_, bx)| x < bx) {
                next = Some((k, x));
            }
        }
        match next {
            Some((k, x)) => {
                pieces.push((cur, start, x));
                cur = k;
                start = x;
            }
            None => {
                pieces.push((cur, start, hi));
                return pieces;
            }
        }
    }
}

/// Whether the min of `lines` stays below `cos(δ + φ)` on the Π window.
fn envelope_below(lines: &[(f64, f64)], phase: f64) -> bool {
    lower_envelope(lines, -FRAC_PI_2, FRAC_PI_2)
        .into_iter()
        .all(|(k, u, w)| line_below(lines[k].0, lines[k].1, u, w, phase))
}

struct FitGrid {
    phase: f64,
    x: Vec<f64>,
    f: Vec<f64>,
}

impl FitGrid {
    fn new(phase: f64, n_samples: usize) -> Self {
        let x: Vec<f64> = (0..n_samples).map(|p| grid_point(p, n_samples)).collect();
        let f = x.iter().map(|d| (d + phase).cos()).collect();
        FitGrid { phase, x, f }
    }

    fn lines(&self, verts: &[f64]) -> Vec<(f64, f64)> {
        verts
            .windows(2)
            .map(|w| {
                let (u, v) = (w[0], w[1]);
                let fu = (u + self.phase).cos();
                let fv = (v + self.phase).cos();
                let a = (fv - fu) / (v - u);
                (a, fu - a * u)
            })
            .collect()
    }

    fn feasible(&self, verts: &[f64]) -> bool {
        verts.windows(2).all(|w| w[1] > w[0]) && envelope_below(&self.lines(verts), self.phase)
    }

    fn objective(&self, verts: &[f64]) -> f64 {
        let lines = self.lines(verts);
        self.x
            .iter()
            .zip(&self.f)
            .map(|(d, f)| {
                let m = lines.iter().map(|(a, b)| a * d + b).fold(f64::INFINITY, f64::min);
                (f - m) * (f - m)
            })
            .sum()
    }

    /// Objective of interior vertices given as sample indices; infinite when
    /// infeasible.
    fn score(&self, interior: &[usize]) -> f64 {
        let verts = self.vertices(interior);
        if self.feasible(&verts) {
            self.objective(&verts)
        } else {
            f64::INFINITY
        }
    }

    fn vertices(&self, interior: &[usize]) -> Vec<f64> {
        let mut v = Vec::with_capacity(interior.len() + 2);
        v.push(-FRAC_PI_2);
        v.extend(interior.iter().map(|&i| self.x[i]));
        v.push(FRAC_PI_2);
        v
    }

    /// Coordinate pattern search over interior vertex indices with a
    /// halving step.
    fn descend(&self, mut idx: Vec<usize>) -> (Vec<usize>, f64) {
        let last = self.x.len() - 1;
        let mut best = self.score(&idx);
        let mut step = (last / 16).max(1);
        loop {
            let mut improved = false;
            for c in 0..idx.len() {
                let lo = if c == 0 { 1 } else { idx[c - 1] + 1 };
                let hi = if c + 1 == idx.len() { last - 1 } else { idx[c + 1] - 1 };
                for dir in [-1i64, 1] {
                    loop {
                        let pos = idx[c] as i64 + dir * step as i64;
                        if pos < lo as i64 || pos > hi as i64 {
                            break;
                        }
                        let mut trial = idx.clone();
                        trial[c] = pos as usize;
                        let s = self.score(&trial);
                        if s < best - 1e-15 * best.abs().max(1e-300) {
                            best = s;
                            idx = trial;
                            improved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if !improved {
                if step == 1 {
                    return (idx, best);
                }
                step /= 2;
            }
        }
    }
}

/// Best-of placements for `n_line − 1` interior vertices.
fn search(grid: &FitGrid, n_line: usize, seed: u64, prev: Option<&[usize]>) -> Option<(Vec<usize>, f64)> {
    let k = n_line - 1;
    let last = grid.x.len() - 1;
    if k == 0 {
        let s = grid.score(&[]);
        return s.is_finite().then(|| (Vec::new(), s));
    }
    if k > last - 1 {
        return None;
    }
    let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
    if n_line <= 3 {
        // exhaustive over a coarse sub-grid, then polish on the full grid
        let stride = (last / 180).max(1);
        let coarse: Vec<usize> = (1..last).step_by(stride).collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut consider = |idx: Vec<usize>| {
            let s = grid.score(&idx);
            if s.is_finite() && best.as_ref().is_none_or(|b| s < b.1) {
                best = Some((idx, s));
            }
        };
        if k == 1 {
            for &a in &coarse {
                consider(vec![a]);
            }
        } else {
            for (ia, &a) in coarse.iter().enumerate() {
                for &b in &coarse[ia + 1..] {
                    consider(vec![a, b]);
                }
            }
        }
        if let Some((idx, _)) = best {
            candidates.push(grid.descend(idx));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for start in 0..8 {
            let mut idx: Vec<usize> = if start == 0 {
                (1..=k).map(|c| c * last / (k + 1)).collect()
            } else {
                let mut v: Vec<usize> = (0..k).map(|_| rng.gen_range(1..last)).collect();
                v.sort_unstable();
                v
            };
            idx.dedup();
            if idx.len() != k {
                continue;
            }
            let (idx, s) = grid.descend(idx);
            if s.is_finite() {
                candidates.push((idx, s));
            }
        }
    }
    // greedy insertion into the best (n_line − 1) placement
    if let Some(prev) = prev {
        let mut best_ins: Option<(Vec<usize>, f64)> = None;
        for pos in 1..last {
            if prev.contains(&pos) {
                continue;
            }
            let mut idx = prev.to_vec();
            idx.push(pos);
            idx.sort_unstable();
            let s = grid.score(&idx);
            if s.is_finite() && best_ins.as_ref().is_none_or(|b| s < b.1) {
                best_ins = Some((idx, s));
            }
        }
        if let Some((idx, _)) = best_ins {
            candidates.push(grid.descend(idx));
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
}

/// Piecewise-linear lower bound of `cos(δ + phase)` on `[−π/2, π/2]` with
/// vertices on the curve and endpoints pinned.
///
/// Placements for every line count up to `n_line` are searched in turn and
/// each seeds the next by vertex insertion. Where the curve is convex an
/// extra vertex can only lower the envelope, so the best placement over all
/// counts is kept and padded with repeated lines; the objective is therefore
/// nonincreasing in `n_line`.
pub fn fit_pwl_lower(phase: f64, n_line: usize, n_samples: usize) -> Result<PwlFit> {
    fit_pwl_lower_seeded(phase, n_line, n_samples, 0)
}

pub fn fit_pwl_lower_seeded(phase: f64, n_line: usize, n_samples: usize, seed: u64) -> Result<PwlFit> {
    fit_pwl_sequence(phase, n_line, n_samples, seed)
        .pop()
        .expect("n_line ≥ 1 yields one entry per count")
}

/// Fits for every line count `1..=max_lines` from one incremental search.
pub fn fit_pwl_sequence(phase: f64, max_lines: usize, n_samples: usize, seed: u64) -> Vec<Result<PwlFit>> {
    if max_lines == 0 || n_samples < 101 {
        return vec![Err(Error::InvalidArgument(format!(
            "n_line must be ≥ 1 and n_samples ≥ 101 (got {max_lines}, {n_samples})"
        )))];
    }
    let grid = FitGrid::new(phase, n_samples);
    let mut prev: Option<Vec<usize>> = None;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut out = Vec::with_capacity(max_lines);
    for n in 1..=max_lines {
        let found = search(&grid, n, seed.wrapping_add(n as u64), prev.as_deref());
        if let Some(f) = &found {
            prev = Some(f.0.clone());
            if best.as_ref().is_none_or(|b| f.1 <= b.1) {
                best = Some(f.clone());
            }
        }
        out.push(match &best {
            None => Err(Error::NoFeasibleFit { phase, n_line: n }),
            Some((idx, obj)) => finish_fit(&grid, idx, *obj, n, n_samples),
        });
    }
    out
}

fn finish_fit(grid: &FitGrid, idx: &[usize], objective: f64, n_line: usize, n_samples: usize) -> Result<PwlFit> {
    let vertices = grid.vertices(idx);
    let mut lines = grid.lines(&vertices);
    let pad = *lines.last().expect("at least one chord");
    lines.resize(n_line, pad);
    let fit = PwlFit {
        edge: (0, 0),
        phase: grid.phase,
        lines,
        vertices,
        objective,
    };
    let excess = fit.max_excess(10 * (n_samples - 1) + 1);
    if excess > VERIFY_MARGIN {
        return Err(Error::SolverFailure(format!(
            "lower-bound verification failed by {excess:e} for phase {}",
            grid.phase
        )));
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FacetTag {
    Lvrt {
        bus: u32,
        /// Index into the constraint list.
        constraint: usize,
        combination: usize,
        /// Chosen line per cosine term.
        lines: Vec<usize>,
    },
    PiBox {
        pair: (usize, usize),
        sign: i8,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polytope {
    pub l_ineq: DMatrix<f64>,
    pub l_ineq_const: DVector<f64>,
    pub tags: Vec<FacetTag>,
    /// COA equalities over the full state `[x1; x2]`.
    pub l_eq: DMatrix<f64>,
    pub l_eq_const: DVector<f64>,
}

impl Polytope {
    pub fn n_rows(&self) -> usize {
        self.l_ineq.nrows()
    }

    pub fn n(&self) -> usize {
        self.l_ineq.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.l_ineq.row(i).transpose()
    }

    /// `L_i x1 + l_i`.
    pub fn row_value(&self, i: usize, x1: &[f64]) -> f64 {
        (0..self.n()).map(|c| self.l_ineq[(i, c)] * x1[c]).sum::<f64>() + self.l_ineq_const[i]
    }

    pub fn max_row_value(&self, x1: &[f64]) -> f64 {
        (0..self.n_rows())
            .map(|i| self.row_value(i, x1))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eq_residual(&self, x: &COAState) -> f64 {
        let v = &self.l_eq * x.to_vector() + &self.l_eq_const;
        v.amax()
    }

    pub fn contains_x1(&self, x1: &[f64], tol: f64) -> bool {
        self.max_row_value(x1) <= tol
    }

    pub fn lvrt_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, FacetTag::Lvrt { .. }))
            .map(|(i, _)| i)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_json(path, &PolytopeExport::from(self))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ex: PolytopeExport = serde_json::from_str(&text)?;
        Ok(ex.into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolytopeRow {
    coeffs: Vec<f64>,
    constant: f64,
    tag: FacetTag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolytopeExport {
    n: usize,
    rows: Vec<PolytopeRow>,
    eq_rows: Vec<Vec<f64>>,
    eq_const: Vec<f64>,
}

impl From<&Polytope> for PolytopeExport {
    fn from(p: &Polytope) -> Self {
        PolytopeExport {
            n: p.n(),
            rows: (0..p.n_rows())
                .map(|i| PolytopeRow {
                    coeffs: p.row(i).iter().cloned().collect(),
                    constant: p.l_ineq_const[i],
                    tag: p.tags[i].clone(),
                })
                .collect(),
            eq_rows: (0..p.l_eq.nrows())
                .map(|i| p.l_eq.row(i).iter().cloned().collect())
                .collect(),
            eq_const: p.l_eq_const.iter().cloned().collect(),
        }
    }
}

impl From<PolytopeExport> for Polytope {
    fn from(ex: PolytopeExport) -> Self {
        let nr = ex.rows.len();
        let l_ineq = DMatrix::from_fn(nr, ex.n, |i, j| ex.rows[i].coeffs[j]);
        let l_ineq_const = DVector::from_iterator(nr, ex.rows.iter().map(|r| r.constant));
        let ne = ex.eq_rows.len();
        let width = ex.eq_rows.first().map_or(2 * ex.n, |r| r.len());
        Polytope {
            l_ineq,
            l_ineq_const,
            tags: ex.rows.into_iter().map(|r| r.tag).collect(),
            l_eq: DMatrix::from_fn(ne, width, |i, j| ex.eq_rows[i][j]),
            l_eq_const: DVector::from_vec(ex.eq_const),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AcfrConfig {
    pub facet_cap: usize,
}

impl Default for AcfrConfig {
    fn default() -> Self {
        AcfrConfig {
            facet_cap: DEFAULT_FACET_CAP,
        }
    }
}

/// One LVRT row for a fixed choice of line per cosine term.
pub fn lvrt_row(
    c: &LvrtConstraint,
    fits: &[PwlFit],
    choice: &[usize],
    delta_star: &[f64],
) -> (DVector<f64>, f64) {
    let n = delta_star.len();
    let mut row = DVector::zeros(n);
    let mut constant = c.threshold;
    for (t, term) in c.terms.iter().enumerate() {
        let (a, b) = fits[t].lines[choice[t]];
        let star = delta_star[term.i] - delta_star[term.j];
        row[term.i] -= term.amplitude * a;
        row[term.j] += term.amplitude * a;
        constant -= term.amplitude * (a * star + b);
    }
    (row, constant)
}

/// Assemble the ACFR: one LVRT row per combination of lines across each
/// constraint's cosine terms, the `|δ_kj| ≤ π/2` box for every pair, and the
/// COA equalities.
pub fn assemble_acfr(
    constraints: &[LvrtConstraint],
    fits: &[Vec<PwlFit>],
    delta_star: &[f64],
    reduced: &ReducedModel,
    config: &AcfrConfig,
) -> Result<Polytope> {
    let n = reduced.n();
    if delta_star.len() != n || fits.len() != constraints.len() {
        return Err(Error::Dimension("constraints, fits and angles disagree".into()));
    }
    for k in 0..n {
        for j in (k + 1)..n {
            let d = delta_star[k] - delta_star[j];
            if d.abs() >= FRAC_PI_2 {
                return Err(Error::SepInfeasible {
                    row: 0,
                    tag: format!("equilibrium difference δ*_{k}{j} = {d} outside the Π window"),
                    violation: d.abs() - FRAC_PI_2,
                });
            }
        }
    }
    let mut rows: Vec<(DVector<f64>, f64, FacetTag)> = Vec::new();
    for (ci, c) in constraints.iter().enumerate() {
        let f = &fits[ci];
        if f.len() != c.terms.len() {
            return Err(Error::Dimension(format!("constraint {ci}: one fit per cosine term required")));
        }
        let sizes: Vec<usize> = f.iter().map(|x| x.n_line()).collect();
        let total: usize = sizes.iter().product();
        if total > config.facet_cap {
            warn!(
                "RG bus {}: {total} LVRT facets exceed the cap of {}; consider a smaller n_line",
                c.rg_bus, config.facet_cap
            );
        }
        let mut choice = vec![0usize; sizes.len()];
        for comb in 0..total {
            let (row, constant) = lvrt_row(c, f, &choice, delta_star);
            rows.push((
                row,
                constant,
                FacetTag::Lvrt {
                    bus: c.rg_bus,
                    constraint: ci,
                    combination: comb,
                    lines: choice.clone(),
                },
            ));
            // mixed-radix increment, last term fastest
            for t in (0..choice.len()).rev() {
                choice[t] += 1;
                if choice[t] < sizes[t] {
                    break;
                }
                choice[t] = 0;
            }
        }
    }
    for k in 0..n {
        for j in (k + 1)..n {
            let star = delta_star[k] - delta_star[j];
            for sign in [1i8, -1i8] {
                let s = f64::from(sign);
                let mut row = DVector::zeros(n);
                row[k] = s;
                row[j] = -s;
                rows.push((row, s * star - FRAC_PI_2, FacetTag::PiBox { pair: (k, j), sign }));
            }
        }
    }
    let nr = rows.len();
    let l_ineq = DMatrix::from_fn(nr, n, |i, j| rows[i].0[j]);
    let l_ineq_const = DVector::from_iterator(nr, rows.iter().map(|r| r.1));
    let tags: Vec<FacetTag> = rows.into_iter().map(|r| r.2).collect();
    for (i, tag) in tags.iter().enumerate() {
        if l_ineq_const[i] >= 0.0 {
            return Err(Error::SepInfeasible {
                row: i,
                tag: format!("{tag:?}"),
                violation: l_ineq_const[i],
            });
        }
    }
    let mut l_eq = DMatrix::zeros(2, 2 * n);
    for k in 0..n {
        l_eq[(0, k)] = reduced.m[k];
        l_eq[(1, n + k)] = reduced.m[k];
    }
    Ok(Polytope {
        l_ineq,
        l_ineq_const,
        tags,
        l_eq,
        l_eq_const: DVector::zeros(2),
    })
}

/// Fits for every cosine term of every constraint, computed in parallel.
pub fn fit_all(
    constraints: &[LvrtConstraint],
    n_line: usize,
    n_samples: usize,
    seed: u64,
    mode: Mode,
) -> Result<Vec<Vec<PwlFit>>> {
    let jobs: Vec<(usize, usize)> = constraints
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.terms.len()).map(move |t| (ci, t)))
        .collect();
    let results = exec::map(mode, &jobs, |&(ci, t)| {
        let term = &constraints[ci].terms[t];
        fit_pwl_lower_seeded(term.phase, n_line, n_samples, seed).map(|mut f| {
            f.edge = (term.i, term.j);
            f
        })
    });
    let mut out: Vec<Vec<PwlFit>> = constraints.iter().map(|_| Vec::new()).collect();
    for (&(ci, _), r) in jobs.iter().zip(results) {
        out[ci].push(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    FlowIn,
    FlowOut,
    SemiSaddle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacetClass {
    pub kind: FlowKind,
    /// `L_i · x2`, the rate of the facet constraint along the flow.
    pub rate: f64,
}

pub fn classify_facet_point(poly: &Polytope, i: usize, x: &COAState, tol: f64) -> Result<FacetClass> {
    if i >= poly.n_rows() {
        return Err(Error::InvalidArgument(format!("facet {i} does not exist")));
    }
    let residual = poly.row_value(i, &x.x1);
    if residual.abs() > FACET_TOL {
        return Err(Error::NotOnFacet { facet: i, residual });
    }
    // outside another facet counts as off this facet's face
    if let Some(v) = (0..poly.n_rows())
        .filter(|&j| j != i)
        .map(|j| poly.row_value(j, &x.x1))
        .find(|v| *v > FACET_TOL)
    {
        return Err(Error::NotOnFacet { facet: i, residual: v });
    }
    let rate: f64 = (0..poly.n()).map(|c| poly.l_ineq[(i, c)] * x.x2[c]).sum();
    let kind = if rate > tol {
        FlowKind::FlowOut
    } else if rate < -tol {
        FlowKind::FlowIn
    } else {
        FlowKind::SemiSaddle
    };
    Ok(FacetClass { kind, rate })
}

/// Uniform rejection sampling of `x1` on the COA manifold slice of the
/// polytope.
pub fn sample_interior(poly: &Polytope, m: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = m.len();
    let t = tangent_basis(m);
    // |x1_k| ≤ π inside the box on the manifold, so ‖z‖∞ ≤ π√n
    let r = PI * (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count && tries < count.saturating_mul(100_000).max(1_000_000) {
        tries += 1;
        let z = DVector::from_iterator(n - 1, (0..n - 1).map(|_| rng.gen_range(-r..r)));
        let x1 = &t * z;
        if poly.contains_x1(x1.as_slice(), 0.0) {
            out.push(x1.as_slice().to_vec());
        }
    }
    out
}
