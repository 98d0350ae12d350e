//! Root-finding baseline: solve `h(x, u) = 0` for `u` with Levenberg–Marquardt
//! at every tick, warm-started from the previous solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{assemble, GainSet, ReferenceSignal, WorkingEquation};
use crate::dynamics::{combine_jacobians, combine_parts, HerdModel, HerdState, InputState, Positions};
use crate::error::{HerdError, Result};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub damping0: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iters: usize,
    /// m/s
    pub tol_residual: f64,
    /// m
    pub tol_step: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            damping0: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iters: 100,
            tol_residual: 1e-8,
            tol_step: 1e-14,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping0 > 0.0 && self.tol_residual > 0.0 && self.tol_step > 0.0) {
            return Err(HerdError::InvalidParameter("LM damping and tolerances must be positive".into()));
        }
        if !(self.damping_up > 1.0 && self.damping_down > 1.0) {
            return Err(HerdError::InvalidParameter("LM damping factors must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LmSolution {
    pub u: InputState,
    pub iterations: usize,
    pub residual: f64,
}

fn working_equation(
    model: &HerdModel,
    x: &HerdState,
    u: &InputState,
    reference: &ReferenceSignal,
    t: f64,
    gains: &GainSet,
) -> Result<WorkingEquation> {
    let parts = model.parts(x, u)?;
    let pj = model.part_jacobians(x, u)?;
    let th = model.thetas();
    let (fx, fu) = combine_jacobians(&pj, &th);
    Ok(assemble(combine_parts(&parts, &th), fx, fu, &x.to_flat(), reference, t, gains))
}

/// Levenberg–Marquardt on the residual `h(x, ·)` with Jacobian `J_u`.
///
/// Steps that would push a herder inside the overlap guard are rejected like
/// any other non-improving step.
pub fn lm_solve(
    model: &HerdModel,
    x: &HerdState,
    u0: &InputState,
    reference: &ReferenceSignal,
    t: f64,
    gains: &GainSet,
    cfg: &LmConfig,
) -> Result<LmSolution> {
    cfg.validate()?;
    let mut u = u0.to_flat();
    let mut w = working_equation(model, x, u0, reference, t, gains)?;
    let mut cost = w.h.norm();
    let mut mu = cfg.damping0;
    let dim = u.len();
    for iter in 0..cfg.max_iters {
        if cost <= cfg.tol_residual {
            return Ok(LmSolution { u: Positions::from_flat(&u), iterations: iter, residual: cost });
        }
        let jt = w.ju.transpose();
        let jtj = &jt * &w.ju;
        let grad = &jt * &w.h;
        let mut accepted = false;
        // inner loop: raise damping until a step improves the residual
        for _ in 0..40 {
            let lhs = &jtj + DMatrix::<f64>::identity(dim, dim) * mu;
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= cfg.damping_up;
                continue;
            };
            let candidate: DVector<f64> = &u + &step;
            let cand_pos = Positions::from_flat(&candidate);
            match working_equation(model, x, &cand_pos, reference, t, gains) {
                Ok(cw) if cw.h.norm() < cost => {
                    let small_step = step.norm() < cfg.tol_step;
                    u = candidate;
                    cost = cw.h.norm();
                    w = cw;
                    mu = (mu / cfg.damping_down).max(1e-15);
                    accepted = true;
                    if small_step && cost > cfg.tol_residual {
                        return Err(HerdError::NoConvergence { iterations: iter + 1, residual: cost });
                    }
                    break;
                }
                Ok(_) | Err(HerdError::GuardViolation { .. }) => mu *= cfg.damping_up,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            return Err(HerdError::NoConvergence { iterations: iter + 1, residual: cost });
        }
    }
    if cost <= cfg.tol_residual {
        Ok(LmSolution { u: Positions::from_flat(&u), iterations: cfg.max_iters, residual: cost })
    } else {
        Err(HerdError::NoConvergence { iterations: cfg.max_iters, residual: cost })
    }
}

/// Per-tick position gaps between two traces on the same time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGap {
    pub t: Vec<f64>,
    /// Max over evaders of the position difference, m.
    pub evader_gap: Vec<f64>,
    /// Max over herders of the position difference, m.
    pub input_gap: Vec<f64>,
    pub max_evader_gap: f64,
    pub max_input_gap: f64,
}

impl TrajectoryGap {
    pub fn max_evader_gap_after(&self, t0: f64) -> f64 {
        self.t.iter().zip(&self.evader_gap).filter(|(t, _)| **t > t0).map(|(_, g)| *g).fold(0.0, f64::max)
    }

    pub fn max_input_gap_after(&self, t0: f64) -> f64 {
        self.t.iter().zip(&self.input_gap).filter(|(t, _)| **t > t0).map(|(_, g)| *g).fold(0.0, f64::max)
    }
}

fn max_pair_gap(a: &[f64], b: &[f64]) -> f64 {
    a.chunks_exact(2).zip(b.chunks_exact(2)).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).fold(0.0, f64::max)
}

pub fn compare_trajectories(a: &[TraceRecord], b: &[TraceRecord]) -> Result<TrajectoryGap> {
    if a.len() != b.len() {
        return Err(HerdError::GridMismatch(format!("{} vs {} rows", a.len(), b.len())));
    }
    let mut out = TrajectoryGap {
        t: Vec::with_capacity(a.len()),
        evader_gap: Vec::with_capacity(a.len()),
        input_gap: Vec::with_capacity(a.len()),
        max_evader_gap: 0.0,
        max_input_gap: 0.0,
    };
    for (ra, rb) in a.iter().zip(b) {
        if (ra.t - rb.t).abs() > 1e-9 * ra.t.abs().max(1.0) {
            return Err(HerdError::GridMismatch(format!("t = {} vs t = {}", ra.t, rb.t)));
        }
        if ra.x.len() != rb.x.len() || ra.u.len() != rb.u.len() {
            return Err(HerdError::GridMismatch("entity counts differ".into()));
        }
        let ge = max_pair_gap(&ra.x, &rb.x);
        let gu = max_pair_gap(&ra.u, &rb.u);
        out.t.push(ra.t);
        out.evader_gap.push(ge);
        out.input_gap.push(gu);
        out.max_evader_gap = out.max_evader_gap.max(ge);
        out.max_input_gap = out.max_input_gap.max(gu);
    }
    Ok(out)
}
