use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::info;
use serde::Serialize;

use lvrt_csr::csr::{self, CSREstimate, CsrConfig, PolytopeConfig, Setup, Verdict};
use lvrt_csr::dynamics::{simulate, COAState, FaultScenario, FaultStudy, Monitors};
use lvrt_csr::lff::{self, LmiObjective};
use lvrt_csr::netmodel::{self, NetworkModel};
use lvrt_csr::ode::OdeOptions;
use lvrt_csr::oracle::{self, GridSpec, OracleOptions};
use lvrt_csr::{exec, report, Mode};

use crate::RunArgs;

pub const EXIT_OK: u8 = 0;
pub const EXIT_NOT_CERTIFIED: u8 = 2;
pub const EXIT_UNSOUND: u8 = 3;

/// Validated inputs shared by every subcommand.
pub struct Context {
    pub args: RunArgs,
    pub model: NetworkModel,
    pub scenario: Option<FaultScenario>,
    pub mode: Mode,
}

impl Context {
    pub fn load(args: &RunArgs) -> Result<Self> {
        if let Some(dv) = args.dv {
            if !(dv > 0.0 && dv.is_finite()) {
                bail!("--dv must be positive");
            }
        }
        if !(args.horizon > 0.0 && args.horizon.is_finite()) {
            bail!("--horizon must be positive");
        }
        if !(args.inflate_v > 0.0 && args.inflate_v.is_finite()) {
            bail!("--inflate-v must be positive");
        }
        exec::set_workers(args.jobs);
        let model = netmodel::load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
        for w in &model.warnings {
            log::warn!("{w}");
        }
        let scenario = match &args.scenario {
            Some(p) => Some(FaultScenario::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        Ok(Context {
            args: args.clone(),
            model,
            scenario,
            mode: if args.jobs == 1 { Mode::Sequential } else { Mode::Parallel },
        })
    }

    pub fn scenario(&self) -> Result<&FaultScenario> {
        self.scenario.as_ref().context("this subcommand needs --scenario")
    }

    pub fn study(&self) -> Result<FaultStudy> {
        Ok(FaultStudy::new(&self.model, self.scenario()?)?)
    }

    pub fn setup(&self, study: &FaultStudy) -> Result<Setup> {
        let cfg = PolytopeConfig {
            n_line: self.args.nline as usize,
            seed: self.args.seed,
            mode: self.mode,
            ..PolytopeConfig::default()
        };
        Ok(Setup::new(study, &cfg)?)
    }

    pub fn csr_config(&self) -> CsrConfig {
        CsrConfig {
            dv: self.args.dv,
            mode: self.mode,
            ..CsrConfig::default()
        }
    }

    pub fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            horizon: self.args.horizon,
            mode: self.mode,
            ..OracleOptions::default()
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    /// Estimate for the scenario's own cleared state.
    pub fn estimate(&self, study: &FaultStudy, setup: &Setup) -> Result<(COAState, CSREstimate)> {
        let x0 = study.fault_state(study.scenario.clearing_time)?;
        let est = csr::estimate_csr(&x0, setup, &self.csr_config())?;
        Ok((x0, est))
    }
}

fn written(path: &Path) {
    println!("wrote {}", path.display());
}

#[derive(Serialize)]
struct SepReport<'a> {
    bus_vmag: &'a [f64],
    prefault_sep: &'a [f64],
    postfault_sep: Option<&'a [f64]>,
    lambda: Option<f64>,
    #[serde(with = "report::dense")]
    b_red: lvrt_csr::nalgebra::DMatrix<f64>,
}

pub fn sep(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let op = netmodel::solve_operating_point(&ctx.model)?;
    let path = ctx.path("sep.json");
    match &ctx.scenario {
        Some(_) => {
            let study = ctx.study()?;
            report::write_json(
                &path,
                &SepReport {
                    bus_vmag: &op.bus_vmag,
                    prefault_sep: &study.pre_sep,
                    postfault_sep: Some(&study.post_sep),
                    lambda: Some(study.mats.lambda),
                    b_red: study.post.reduced.b_red.clone(),
                },
            )?;
            println!("post-fault SEP: {:?}", study.post_sep);
        }
        None => {
            let topo = netmodel::Topology::intact(&ctx.model);
            let state = netmodel::NetworkState::build(&ctx.model, &topo, &op)?;
            report::write_json(
                &path,
                &SepReport {
                    bus_vmag: &op.bus_vmag,
                    prefault_sep: &op.gen_angles,
                    postfault_sep: None,
                    lambda: None,
                    b_red: state.reduced.b_red,
                },
            )?;
            println!("pre-fault SEP: {:?}", op.gen_angles);
        }
    }
    written(&path);
    Ok(EXIT_OK)
}

pub fn polytope(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let study = ctx.study()?;
    let setup = ctx.setup(&study)?;
    let path = ctx.path("polytope.json");
    setup.polytope.write_json(&path)?;
    written(&path);
    let lvrt = ctx.path("lvrt_constraints.json");
    report::write_json(&lvrt, &setup.lvrt)?;
    written(&lvrt);
    for (k, fits) in setup.fits.iter().enumerate() {
        for (t, fit) in fits.iter().enumerate() {
            let p = ctx.path(&format!("pwl_fit_{k}_{t}.csv"));
            fit.write_csv(&p, 2001)?;
            written(&p);
        }
    }
    println!(
        "polytope: {} inequality rows, {} LVRT rows",
        setup.polytope.n_rows(),
        setup.polytope.lvrt_rows().count()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct LffReport {
    energy: lff::LmiResidual,
    lmi: lff::LmiResidual,
}

pub fn lff(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let study = ctx.study()?;
    let mats = &study.mats;
    let energy = lff::energy_function_candidate(mats);
    let (lmi, lmi_res) = lff::assemble_and_solve_lmi(mats, &LmiObjective::None, &ctx.csr_config().lf)?;
    for (name, c) in [("lff_energy.json", &energy), ("lff_lmi.json", &lmi)] {
        let p = ctx.path(name);
        c.write_json(&p)?;
        written(&p);
    }
    let p = ctx.path("lff_report.json");
    report::write_json(
        &p,
        &LffReport {
            energy: lff::lmi_residual(&energy, mats),
            lmi: lmi_res,
        },
    )?;
    written(&p);
    println!("LMI block max eigenvalue: {:.3e}", lmi_res.max_eig);
    Ok(EXIT_OK)
}

fn write_estimate(ctx: &Context, est: &CSREstimate) -> Result<()> {
    let p = ctx.path("estimate.json");
    est.write_json(&p)?;
    written(&p);
    let p = ctx.path("polytope.json");
    est.polytope.write_json(&p)?;
    written(&p);
    Ok(())
}

pub fn estimate(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let study = ctx.study()?;
    let setup = ctx.setup(&study)?;
    let (x0, est) = ctx.estimate(&study, &setup)?;
    write_estimate(&ctx, &est)?;
    println!(
        "v_max = {:.6e}, V(x0) = {:.6e}, contains x0: {}, iterations: {}",
        est.v,
        est.candidate.value(&x0),
        csr::contains(&est, &x0),
        est.history.len()
    );
    Ok(EXIT_OK)
}

pub fn assess(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let study = ctx.study()?;
    let setup = ctx.setup(&study)?;
    let (result, est) = csr::assess_fault(&study, &setup, &ctx.csr_config())?;
    let p = ctx.path("assessment.json");
    result.write_json(&p)?;
    written(&p);
    write_estimate(&ctx, &est)?;
    let x0 = study.fault_state(study.scenario.clearing_time)?;
    let traj = simulate(
        &x0,
        &study.mats,
        ctx.args.horizon,
        &Monitors::full(&study.lvrt),
        &OdeOptions::default(),
    )?;
    let p = ctx.path("trajectory_postfault.csv");
    traj.write_csv(&p)?;
    written(&p);
    println!(
        "verdict: {}, V(x0) = {:.6e}, v_max = {:.6e}, estimated CCT = {}",
        match result.verdict {
            Verdict::Stable => "stable",
            Verdict::NotCertified => "not-certified",
        },
        result.v_at_clearing,
        result.v_max,
        result
            .estimated_cct
            .map_or_else(|| "none".to_string(), |t| format!("{t:.4} s"))
    );
    Ok(match result.verdict {
        Verdict::Stable => EXIT_OK,
        Verdict::NotCertified => EXIT_NOT_CERTIFIED,
    })
}

/// Grid spec covering the Π slice and twice the estimate's speed extent.
pub fn default_grid(study: &FaultStudy, est: &CSREstimate, grid: (usize, usize)) -> GridSpec {
    let bounds = csr::tangent_bounds(est);
    let r = study.mats.n - 1;
    let speed = bounds[r..]
        .iter()
        .map(|&(lo, hi)| hi.max(-lo))
        .fold(0.0, f64::max);
    let speed = if speed.is_finite() && speed > 0.0 { 2.0 * speed } else { 10.0 };
    let mut spec = GridSpec::covering(&study.mats, grid.0, speed);
    for i in 0..r {
        spec.counts[i] = grid.0;
        spec.counts[r + i] = grid.1;
    }
    spec
}

pub fn oracle(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    let study = ctx.study()?;
    let setup = ctx.setup(&study)?;
    let (_, mut est) = ctx.estimate(&study, &setup)?;
    est.v *= ctx.args.inflate_v;
    write_estimate(&ctx, &est)?;
    let spec = default_grid(&study, &est, ctx.args.grid);
    info!("oracle grid with {} cells", spec.n_cells());
    let grid = oracle::brute_force_csr(&study.mats, &study.lvrt, &spec, &ctx.oracle_options())?;
    let p = ctx.path("oracle_grid.csv");
    grid.write_csv(&p)?;
    written(&p);
    let audit = oracle::audit_estimate(&est, &grid)?;
    let p = ctx.path("audit.json");
    audit.write_json(&p)?;
    written(&p);
    println!(
        "cells: {}, in-CSR: {}, contained: {}, soundness violations: {}, coverage: {:.4}",
        audit.cells, audit.in_csr, audit.contained, audit.soundness_violations, audit.coverage
    );
    Ok(if audit.soundness_violations > 0 { EXIT_UNSOUND } else { EXIT_OK })
}

pub fn plotdata(args: &RunArgs) -> Result<u8> {
    let ctx = Context::load(args)?;
    crate::plot::emit(&ctx)?;
    Ok(EXIT_OK)
}
