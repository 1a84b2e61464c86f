//! Dormand–Prince 5(4) integrator with cubic Hermite dense output,
//! sign-change event location and an optional post-step projection.

use crate::error::{Error, Result};

pub trait System {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Map an accepted state back onto an invariant manifold. Returns `true`
    /// when `y` was modified.
    fn project(&self, _y: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Dense sub-samples per step used when scanning event functions.
    pub event_subsamples: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: 0.02,
            max_steps: 2_000_000,
            event_subsamples: 6,
        }
    }
}

/// Event function `g(y)`; an event fires when `g` goes from `≥ 0` to `< 0`.
pub struct Event<'a> {
    pub g: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct EventHit {
    pub index: usize,
    pub time: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub t_end: f64,
    pub y_end: Vec<f64>,
    pub hits: Vec<EventHit>,
    pub terminated: bool,
    pub steps: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn hermite(y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64], h: f64, theta: f64, out: &mut [f64]) {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
    }
}

/// Integrate from `t0` to `t1` (either direction). `observer` sees the
/// initial state and every accepted step.
pub fn integrate<S: System + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
    events: &[Event<'_>],
    mut observer: impl FnMut(f64, &[f64]),
) -> Result<Integration> {
    let n = sys.dim();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0.to_vec();
    if sys.project(&mut y) {
        // keep caller's initial state on the manifold
    }
    observer(t, &y);
    let mut hits = Vec::new();
    if span == 0.0 {
        return Ok(Integration {
            t_end: t,
            y_end: y,
            hits,
            terminated: false,
            steps: 0,
        });
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut dense = vec![0.0; n];
    sys.rhs(t, &y, &mut k1);

    let mut g_prev: Vec<f64> = events.iter().map(|e| (e.g)(&y)).collect();
    let mut h = (0.01 * span).min(opts.h_max).min(1e-3_f64.max(1e-6 * span)) * dir;
    let mut steps = 0;

    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(Error::SolverFailure(format!("max_steps exceeded at t = {t}")));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        let hmin = 1e-14 * t.abs().max(1.0);
        if h.abs() < hmin {
            return Err(Error::StepUnderflow {
                time: t,
                last_state: y.clone(),
            });
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(t + h, &ytmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t + h, &ynew, &mut k7);

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            h *= 0.1;
            continue;
        }

        if err <= 1.0 {
            let t_new = t + h;
            // event scan on the dense interpolant before projection
            let mut fired: Option<(usize, f64)> = None;
            if !events.is_empty() {
                let subs = opts.event_subsamples.max(1);
                let mut lo_theta = 0.0;
                let mut g_lo = g_prev.clone();
                'scan: for s in 1..=subs {
                    let theta = s as f64 / subs as f64;
                    let g_now: Vec<f64> = {
                        let point: &[f64] = if s == subs {
                            &ynew
                        } else {
                            hermite(&y, &k1, &ynew, &k7, h, theta, &mut dense);
                            &dense
                        };
                        events.iter().map(|ev| (ev.g)(point)).collect()
                    };
                    for (ei, ev) in events.iter().enumerate() {
                        let gv = g_now[ei];
                        if g_lo[ei] >= 0.0 && gv < 0.0 {
                            // bisection on the interpolant
                            let (mut a, mut b) = (lo_theta, theta);
                            for _ in 0..60 {
                                let mid = 0.5 * (a + b);
                                hermite(&y, &k1, &ynew, &k7, h, mid, &mut dense);
                                if (ev.g)(&dense) < 0.0 {
                                    b = mid;
                                } else {
                                    a = mid;
                                }
                            }
                            let better = match fired {
                                None => true,
                                Some((_, th)) => b < th,
                            };
                            if better {
                                fired = Some((ei, b));
                            }
                        }
                    }
                    if fired.is_some() {
                        break 'scan;
                    }
                    lo_theta = theta;
                    g_lo = g_now;
                }
            }
            if let Some((ei, theta)) = fired {
                hermite(&y, &k1, &ynew, &k7, h, theta, &mut dense);
                let te = t + theta * h;
                hits.push(EventHit {
                    index: ei,
                    time: te,
                    state: dense.clone(),
                });
                if events[ei].terminal {
                    observer(te, &dense);
                    return Ok(Integration {
                        t_end: te,
                        y_end: dense.clone(),
                        hits,
                        terminated: true,
                        steps: steps + 1,
                    });
                }
            }

            t = t_new;
            std::mem::swap(&mut y, &mut ynew);
            if sys.project(&mut y) {
                sys.rhs(t, &y, &mut k1);
            } else {
                k1.copy_from_slice(&k7);
            }
            for (ei, ev) in events.iter().enumerate() {
                g_prev[ei] = (ev.g)(&y);
            }
            steps += 1;
            observer(t, &y);
        }
        let fac = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= fac;
        if h.abs() > opts.h_max {
            h = opts.h_max * dir;
        }
    }

    Ok(Integration {
        t_end: t,
        y_end: y,
        hits,
        terminated: false,
        steps,
    })
}
