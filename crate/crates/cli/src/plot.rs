//! Phase-portrait data for two-machine systems, in tangent coordinates
//! `(ξ1, ξ2)` of the COA manifold.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context as _, Result};
use log::warn;
use serde::Serialize;

use lvrt_csr::csr::{self, CSREstimate};
use lvrt_csr::dynamics::{simulate, vector_field, FaultStudy, Monitors, StateMatrices};
use lvrt_csr::feasreg::{voltage_sq, FacetTag, LvrtConstraint};
use lvrt_csr::linalg::tangent_basis;
use lvrt_csr::ode::OdeOptions;
use lvrt_csr::oracle::{self, grid_state, GridSpec};
use lvrt_csr::report;

use crate::commands::{default_grid, Context};

const FIELD_POINTS: usize = 25;
const CONTOUR_POINTS: usize = 101;

#[derive(Serialize)]
struct Bundle {
    n: usize,
    partial: bool,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Levels {
    v_max: f64,
    v_max_energy: f64,
    x0: Vec<f64>,
    v_at_x0: f64,
    v_energy_at_x0: f64,
}

struct Writer<'a> {
    ctx: &'a Context,
    files: Vec<String>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.ctx.path(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        report::write_json(self.ctx.path(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn emit(ctx: &Context) -> Result<()> {
    let study = ctx.study()?;
    let setup = ctx.setup(&study)?;
    let (x0, est) = ctx.estimate(&study, &setup)?;
    let mut w = Writer { ctx, files: Vec::new() };

    let (result, _) = csr::assess_fault(&study, &setup, &ctx.csr_config())?;
    w.json("assessment.json", &result)?;
    let traj = simulate(&x0, &study.mats, ctx.args.horizon, &Monitors::full(&study.lvrt), &OdeOptions::default())?;
    let p = ctx.path("trajectory_postfault.csv");
    traj.write_csv(&p)?;
    w.files.push("trajectory_postfault.csv".into());

    let n = study.mats.n;
    let partial = n != 2;
    if partial {
        warn!("plot grids need two machines, got {n}; emitting trajectory and report data only");
    } else {
        two_machine(&mut w, &study, &est, &x0)?;
    }
    let bundle = Bundle {
        n,
        partial,
        files: w.files.clone(),
    };
    w.json("bundle.json", &bundle)?;
    for f in &w.files {
        println!("wrote {}", ctx.path(f).display());
    }
    Ok(())
}

fn xi_of(mats: &StateMatrices, v: &[f64]) -> f64 {
    let t = tangent_basis(&mats.m);
    t[(0, 0)] * v[0] + t[(1, 0)] * v[1]
}

fn two_machine(w: &mut Writer, study: &FaultStudy, est: &CSREstimate, x0: &lvrt_csr::dynamics::COAState) -> Result<()> {
    let mats = &study.mats;
    let spec = default_grid(study, est, w.ctx.args.grid);
    let energy = est.history.first().expect("nonempty history");

    let mut field = String::from("xi1,xi2,dxi1,dxi2\n");
    let coarse = resample(&spec, FIELD_POINTS);
    for cell in 0..coarse.n_cells() {
        let c = coarse.coords(cell);
        let f = vector_field(&grid_state(&mats.m, &c), mats);
        let _ = writeln!(
            field,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            c[0],
            c[1],
            xi_of(mats, &f.x1),
            xi_of(mats, &f.x2)
        );
    }
    w.text("vector_field.csv", &field)?;

    let mut contour = String::from("xi1,xi2,v,v_energy\n");
    let fine = resample(&spec, CONTOUR_POINTS);
    for cell in 0..fine.n_cells() {
        let c = fine.coords(cell);
        let x = grid_state(&mats.m, &c);
        let _ = writeln!(
            contour,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            c[0],
            c[1],
            est.candidate.value(&x),
            energy.candidate.value(&x)
        );
    }
    w.text("v_contour.csv", &contour)?;
    w.json(
        "levels.json",
        &Levels {
            v_max: est.v,
            v_max_energy: energy.v_max,
            x0: vec![xi_of(mats, &x0.x1), xi_of(mats, &x0.x2)],
            v_at_x0: est.candidate.value(x0),
            v_energy_at_x0: energy.candidate.value(x0),
        },
    )?;

    w.text("boundaries.csv", &boundaries(mats, &study.lvrt, est, &spec))?;

    let energy_est = CSREstimate {
        candidate: energy.candidate.clone(),
        v: energy.v_max,
        polytope: est.polytope.clone(),
        m: est.m.clone(),
        history: Vec::new(),
    };
    let mut mask = String::from("xi1,xi2,inside,inside_energy\n");
    for cell in 0..spec.n_cells() {
        let c = spec.coords(cell);
        let x = grid_state(&mats.m, &c);
        let _ = writeln!(
            mask,
            "{:.16e},{:.16e},{},{}",
            c[0],
            c[1],
            u8::from(csr::contains(est, &x)),
            u8::from(csr::contains(&energy_est, &x))
        );
    }
    w.text("estimate_mask.csv", &mask)?;

    let grid = oracle::brute_force_csr(mats, &study.lvrt, &spec, &w.ctx.oracle_options())?;
    w.text("oracle_mask.csv", &grid.to_csv())?;
    Ok(())
}

fn resample(spec: &GridSpec, points: usize) -> GridSpec {
    GridSpec {
        lower: spec.lower.clone(),
        upper: spec.upper.clone(),
        counts: vec![points; spec.counts.len()],
    }
}

/// Vertical boundary lines split at `ξ2 = 0` into flow-in and flow-out
/// halves: true LVRT and Π boundaries, and the approximate facets.
fn boundaries(mats: &StateMatrices, lvrt: &[LvrtConstraint], est: &CSREstimate, spec: &GridSpec) -> String {
    let t = tangent_basis(&mats.m);
    let s = t[(0, 0)] - t[(1, 0)];
    let (lo, hi) = (spec.lower[1], spec.upper[1]);
    let mut out = String::from("kind,facet,xi1,xi2_start,xi2_end,flow\n");
    let mut line = |kind: &str, facet: String, xi1: f64, outward: f64| {
        // outward sign of the constraint gradient along ξ1
        let (out_lo, out_hi) = if outward > 0.0 { (0.0, hi) } else { (lo, 0.0) };
        let (in_lo, in_hi) = if outward > 0.0 { (lo, 0.0) } else { (0.0, hi) };
        let _ = writeln!(out, "{kind},{facet},{xi1:.16e},{out_lo:.16e},{out_hi:.16e},flow-out");
        let _ = writeln!(out, "{kind},{facet},{xi1:.16e},{in_lo:.16e},{in_hi:.16e},flow-in");
    };
    let d = mats.delta_star[0] - mats.delta_star[1];
    for sign in [1.0, -1.0] {
        let xi1 = (sign * std::f64::consts::FRAC_PI_2 - d) / s;
        line("true-fb-pi", format!("pi{}", if sign > 0.0 { "+" } else { "-" }), xi1, sign * s);
    }
    for (k, c) in lvrt.iter().enumerate() {
        let g = |xi1: f64| {
            let delta = [
                mats.delta_star[0] + t[(0, 0)] * xi1,
                mats.delta_star[1] + t[(1, 0)] * xi1,
            ];
            voltage_sq(&delta, c) - c.lvrt_max * c.lvrt_max
        };
        let (a, b) = (spec.lower[0], spec.upper[0]);
        let steps = 4000;
        let mut prev = (a, g(a));
        for i in 1..=steps {
            let x = a + (b - a) * i as f64 / steps as f64;
            let gx = g(x);
            if prev.1.signum() != gx.signum() {
                let (mut l, mut r) = (prev.0, x);
                for _ in 0..80 {
                    let m = 0.5 * (l + r);
                    if g(m).signum() == g(l).signum() {
                        l = m;
                    } else {
                        r = m;
                    }
                }
                // leaving the feasible side means g decreases along +ξ1
                let outward = if gx < prev.1 { 1.0 } else { -1.0 };
                line("true-fb-lvrt", format!("lvrt{k}"), 0.5 * (l + r), outward);
            }
            prev = (x, gx);
        }
    }
    let poly = &est.polytope;
    for i in 0..poly.n_rows() {
        let row = poly.row(i);
        let a = row[0] * t[(0, 0)] + row[1] * t[(1, 0)];
        if a.abs() < 1e-12 {
            continue;
        }
        let xi1 = -poly.l_ineq_const[i] / a;
        let kind = match poly.tags[i] {
            FacetTag::Lvrt { .. } => "acfb-lvrt",
            FacetTag::PiBox { .. } => "acfb-pi",
        };
        line(kind, i.to_string(), xi1, a);
    }
    out
}
