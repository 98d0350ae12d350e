//! Evader velocity fields and their analytic Jacobians.
//!
//! Two reactive models are supported, the inverse-square repulsion
//! `θ Σ d/‖d‖³` and the exponential repulsion
//! `θ Σ d e^{-‖d‖²/σ²} (1 − β sigm(d_min − ‖d‖))`, where `d = x_j − u_i`.
//! Both are linear in `θ`, which the adaptation law relies on: every field is
//! evaluated as `θ_j g_j(x, u) + c_j(x)` with `g_j` the unit-gain repulsion and
//! `c_j` the (known) inter-evader cohesion term.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{HerdError, PairKind, Result};

pub type Vec2 = Vector2<f64>;

/// Stacked planar positions, used both for evaders (state) and herders (input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Positions(pub Vec<Vec2>);

/// Evader positions `x`, meters.
pub type HerdState = Positions;
/// Herder positions `u`, meters.
pub type InputState = Positions;
/// Evader velocities, m/s.
pub type HerdVelocity = Positions;

impl Positions {
    pub fn new(points: Vec<Vec2>) -> Self {
        Positions(points)
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Self {
        Positions(pairs.iter().map(|p| Vec2::new(p[0], p[1])).collect())
    }

    pub fn from_flat(flat: &DVector<f64>) -> Self {
        assert!(flat.len().is_multiple_of(2), "flat position vector must have even length");
        Positions((0..flat.len() / 2).map(|k| Vec2::new(flat[2 * k], flat[2 * k + 1])).collect())
    }

    pub fn from_slice(flat: &[f64]) -> Self {
        Positions(flat.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect())
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.0.len(), self.0.iter().flat_map(|p| [p.x, p.y]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec2> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        self.0.iter().map(|p| [p.x, p.y]).collect()
    }

    pub fn mean(&self) -> Vec2 {
        let sum = self.0.iter().fold(Vec2::zeros(), |acc, p| acc + p);
        sum / self.0.len() as f64
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        Positions(self.0.iter().map(|p| p + offset).collect())
    }
}

impl std::ops::Index<usize> for Positions {
    type Output = Vec2;
    fn index(&self, i: usize) -> &Vec2 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Positions {
    fn index_mut(&mut self, i: usize) -> &mut Vec2 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaderModel {
    Inverse,
    Exponential,
}

/// Per-evader model and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaderParams {
    pub model: EvaderModel,
    /// Repulsion gain θ (> 0).
    pub theta: f64,
    /// Exponential only, in (0, 1).
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Exponential only, meters, > 1.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Exponential only, meters.
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    /// Inter-evader cohesion gain ϑ (≥ 0).
    #[serde(default)]
    pub cohesion: f64,
}

fn default_beta() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    2.0
}
fn default_d_min() -> f64 {
    1.0
}

impl EvaderParams {
    pub fn inverse(theta: f64) -> Self {
        EvaderParams {
            model: EvaderModel::Inverse,
            theta,
            beta: default_beta(),
            sigma: default_sigma(),
            d_min: default_d_min(),
            cohesion: 0.0,
        }
    }

    pub fn exponential(theta: f64, beta: f64, sigma: f64, d_min: f64) -> Self {
        EvaderParams { model: EvaderModel::Exponential, theta, beta, sigma, d_min, cohesion: 0.0 }
    }

    /// Inverse evader with θ = 1.
    pub fn standard_inverse() -> Self {
        Self::inverse(1.0)
    }

    /// Exponential evader with θ = 0.5, β = 0.5, σ = 2 m, d_min = 1 m.
    pub fn standard_exponential() -> Self {
        Self::exponential(0.5, 0.5, 2.0, 1.0)
    }

    pub fn with_cohesion(mut self, cohesion: f64) -> Self {
        self.cohesion = cohesion;
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HerdError::InvalidParameter(msg.to_string()));
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad("theta must be positive");
        }
        if !(self.cohesion >= 0.0 && self.cohesion.is_finite()) {
            return bad("cohesion must be non-negative");
        }
        if self.model == EvaderModel::Exponential {
            if !(self.beta > 0.0 && self.beta < 1.0) {
                return bad("beta must lie in (0, 1)");
            }
            if !(self.sigma > 1.0) {
                return bad("sigma must exceed 1");
            }
            if !(self.d_min > 0.0) {
                return bad("d_min must be positive");
            }
        }
        Ok(())
    }
}

/// Numerical knobs shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Overlap guard ε_d, meters.
    #[serde(default = "default_guard")]
    pub guard_radius: f64,
    /// Logistic slope k_sig, 1/m.
    #[serde(default = "default_slope")]
    pub sigmoid_slope: f64,
    /// Speed limit of every body, m/s.
    #[serde(default = "default_vmax")]
    pub v_max: f64,
}

fn default_guard() -> f64 {
    1e-3
}
fn default_slope() -> f64 {
    10.0
}
fn default_vmax() -> f64 {
    0.4
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { guard_radius: default_guard(), sigmoid_slope: default_slope(), v_max: default_vmax() }
    }
}

pub fn logistic(z: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (-slope * z).exp())
}

/// Clamps the magnitude of `v` to `v_max`.
pub fn saturate(v: Vec2, v_max: f64) -> Vec2 {
    let n = v.norm();
    if n > v_max {
        v * (v_max / n)
    } else {
        v
    }
}

fn check_guard(d: &Vec2, guard: f64, kind: PairKind, first: usize, second: usize) -> Result<f64> {
    let r = d.norm();
    if !r.is_finite() {
        return Err(HerdError::NonFinite("relative position"));
    }
    if r < guard {
        return Err(HerdError::GuardViolation { kind, first, second, distance: r });
    }
    Ok(r)
}

/// Unit-gain inverse-square repulsion term for one herder and its derivative
/// with respect to `d`.
fn inverse_term(d: &Vec2, r: f64) -> (Vec2, Matrix2<f64>) {
    let r3 = r * r * r;
    let value = d / r3;
    let jac = Matrix2::identity() / r3 - d * d.transpose() * (3.0 / (r3 * r * r));
    (value, jac)
}

/// Unit-gain exponential repulsion term and its derivative with respect to `d`.
fn exponential_term(d: &Vec2, p: &EvaderParams, slope: f64) -> (Vec2, Matrix2<f64>) {
    let r = d.norm();
    let s2 = p.sigma * p.sigma;
    let decay = (-(r * r) / s2).exp();
    let sig = logistic(p.d_min - r, slope);
    let gate = 1.0 - p.beta * sig;
    let phi = decay * gate;
    let value = d * phi;
    let mut jac = Matrix2::identity() * phi;
    if r > 1e-12 {
        // dφ/dr; the gate derivative uses sigm' = k sigm (1 - sigm)
        let dphi = decay * (-2.0 * r / s2 * gate + p.beta * slope * sig * (1.0 - sig));
        jac += d * d.transpose() * (dphi / r);
    }
    (value, jac)
}

/// Inverse-model velocity of one evader at `xj`.
pub fn eval_inverse(xj: &Vec2, u: &InputState, theta: f64, guard: f64) -> Result<Vec2> {
    let mut v = Vec2::zeros();
    for (i, ui) in u.iter().enumerate() {
        let d = xj - ui;
        let r = check_guard(&d, guard, PairKind::EvaderHerder, 0, i)?;
        v += inverse_term(&d, r).0;
    }
    Ok(v * theta)
}

/// Exponential-model velocity of one evader at `xj`.
pub fn eval_exponential(xj: &Vec2, u: &InputState, p: &EvaderParams, slope: f64) -> Result<Vec2> {
    let mut v = Vec2::zeros();
    for ui in u.iter() {
        let d = xj - ui;
        v += exponential_term(&d, p, slope).0;
    }
    let v = v * p.theta;
    if !(v.x.is_finite() && v.y.is_finite()) {
        return Err(HerdError::NonFinite("exponential velocity"));
    }
    Ok(v)
}

/// Cohesion increment for every evader with a common gain ϑ.
pub fn eval_cohesion(x: &HerdState, vartheta: f64, guard: f64) -> Result<HerdVelocity> {
    let m = x.len();
    let mut out = vec![Vec2::zeros(); m];
    if vartheta == 0.0 {
        return Ok(Positions(out));
    }
    for j in 0..m {
        for k in (j + 1)..m {
            let d = x[j] - x[k];
            let r = check_guard(&d, guard, PairKind::EvaderEvader, j, k)?;
            let q = d * (1.0 / (r * r * r) - r * r);
            out[j] += q * vartheta;
            out[k] -= q * vartheta;
        }
    }
    Ok(Positions(out))
}

fn cohesion_term(d: &Vec2, r: f64) -> (Vec2, Matrix2<f64>) {
    let value = d * (1.0 / (r * r * r) - r * r);
    let jac = Matrix2::identity() * (1.0 / (r * r * r) - r * r) - d * d.transpose() * (3.0 / r.powi(5) + 2.0);
    (value, jac)
}

/// The θ-factored decomposition of the field: `ẋ_j = θ_j g_j + c_j`.
#[derive(Debug, Clone)]
pub struct FieldParts {
    /// Unit-gain repulsion `g_j`.
    pub repulsion: Vec<Vec2>,
    /// Cohesion increment `c_j` (already scaled by ϑ_j).
    pub cohesion: Vec<Vec2>,
}

/// Jacobians of the θ-factored parts.
#[derive(Debug, Clone)]
pub struct FieldJacobians {
    /// ∂g/∂x, 2m×2m (block diagonal).
    pub repulsion_x: DMatrix<f64>,
    /// ∂g/∂u, 2m×2n.
    pub repulsion_u: DMatrix<f64>,
    /// ∂c/∂x, 2m×2m.
    pub cohesion_x: DMatrix<f64>,
}

/// A heterogeneous herd: one parameter set per evader plus the shared knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdModel {
    pub params: Vec<EvaderParams>,
    pub config: DynamicsConfig,
}

impl HerdModel {
    pub fn new(params: Vec<EvaderParams>, config: DynamicsConfig) -> Result<Self> {
        if params.is_empty() {
            return Err(HerdError::InvalidParameter("herd needs at least one evader".into()));
        }
        for p in &params {
            p.validate()?;
        }
        Ok(HerdModel { params, config })
    }

    pub fn m(&self) -> usize {
        self.params.len()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.theta).collect()
    }

    /// Same model with the repulsion gains replaced (used for θ̂).
    pub fn with_thetas(&self, thetas: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, &t) in out.params.iter_mut().zip(thetas) {
            p.theta = t;
        }
        out
    }

    fn check_sizes(&self, x: &HerdState, u: &InputState) -> Result<()> {
        if x.len() != self.m() {
            return Err(HerdError::InvalidParameter(format!("state has {} evaders, model has {}", x.len(), self.m())));
        }
        if u.is_empty() {
            return Err(HerdError::InvalidParameter("at least one herder is required".into()));
        }
        if !x.is_finite() || !u.is_finite() {
            return Err(HerdError::NonFinite("positions"));
        }
        Ok(())
    }

    pub fn parts(&self, x: &HerdState, u: &InputState) -> Result<FieldParts> {
        self.check_sizes(x, u)?;
        let guard = self.config.guard_radius;
        let mut repulsion = Vec::with_capacity(self.m());
        for (j, p) in self.params.iter().enumerate() {
            let mut g = Vec2::zeros();
            for (i, ui) in u.iter().enumerate() {
                let d = x[j] - ui;
                match p.model {
                    EvaderModel::Inverse => {
                        let r = check_guard(&d, guard, PairKind::EvaderHerder, j, i)?;
                        g += inverse_term(&d, r).0;
                    }
                    EvaderModel::Exponential => {
                        g += exponential_term(&d, p, self.config.sigmoid_slope).0;
                    }
                }
            }
            repulsion.push(g);
        }
        let cohesion = self.cohesion(x)?;
        Ok(FieldParts { repulsion, cohesion })
    }

    fn cohesion(&self, x: &HerdState) -> Result<Vec<Vec2>> {
        let m = self.m();
        let mut out = vec![Vec2::zeros(); m];
        if self.params.iter().all(|p| p.cohesion == 0.0) {
            return Ok(out);
        }
        for j in 0..m {
            for k in (j + 1)..m {
                let d = x[j] - x[k];
                let r = check_guard(&d, self.config.guard_radius, PairKind::EvaderEvader, j, k)?;
                let (q, _) = cohesion_term(&d, r);
                out[j] += q * self.params[j].cohesion;
                out[k] -= q * self.params[k].cohesion;
            }
        }
        Ok(out)
    }

    /// Unsaturated field `θ_j g_j + c_j` for each evader.
    pub fn velocity_unsaturated(&self, x: &HerdState, u: &InputState) -> Result<HerdVelocity> {
        let parts = self.parts(x, u)?;
        Ok(Positions(
            parts.repulsion.iter().zip(&parts.cohesion).zip(&self.params).map(|((g, c), p)| g * p.theta + c).collect(),
        ))
    }

    /// Stacked evader velocities with per-evader speed saturation.
    pub fn eval_herd(&self, x: &HerdState, u: &InputState) -> Result<HerdVelocity> {
        let v = self.velocity_unsaturated(x, u)?;
        Ok(Positions(v.0.into_iter().map(|vj| saturate(vj, self.config.v_max)).collect()))
    }

    pub fn part_jacobians(&self, x: &HerdState, u: &InputState) -> Result<FieldJacobians> {
        self.check_sizes(x, u)?;
        let m = self.m();
        let n = u.len();
        let guard = self.config.guard_radius;
        let mut gx = DMatrix::zeros(2 * m, 2 * m);
        let mut gu = DMatrix::zeros(2 * m, 2 * n);
        for (j, p) in self.params.iter().enumerate() {
            let mut block = Matrix2::zeros();
            for (i, ui) in u.iter().enumerate() {
                let d = x[j] - ui;
                let jac = match p.model {
                    EvaderModel::Inverse => {
                        let r = check_guard(&d, guard, PairKind::EvaderHerder, j, i)?;
                        inverse_term(&d, r).1
                    }
                    EvaderModel::Exponential => exponential_term(&d, p, self.config.sigmoid_slope).1,
                };
                block += jac;
                gu.fixed_view_mut::<2, 2>(2 * j, 2 * i).copy_from(&(-jac));
            }
            gx.fixed_view_mut::<2, 2>(2 * j, 2 * j).copy_from(&block);
        }
        let mut cx = DMatrix::zeros(2 * m, 2 * m);
        if self.params.iter().any(|p| p.cohesion != 0.0) {
            for j in 0..m {
                for k in (j + 1)..m {
                    let d = x[j] - x[k];
                    let r = check_guard(&d, guard, PairKind::EvaderEvader, j, k)?;
                    let (_, q) = cohesion_term(&d, r);
                    let (cj, ck) = (self.params[j].cohesion, self.params[k].cohesion);
                    // c_j gets +ϑ_j q(x_j - x_k), c_k gets -ϑ_k q(x_j - x_k)
                    add_block(&mut cx, j, j, &(q * cj));
                    add_block(&mut cx, j, k, &(-q * cj));
                    add_block(&mut cx, k, j, &(-q * ck));
                    add_block(&mut cx, k, k, &(q * ck));
                }
            }
        }
        Ok(FieldJacobians { repulsion_x: gx, repulsion_u: gu, cohesion_x: cx })
    }

    /// `(∂f/∂x, ∂f/∂u)` of the unsaturated field.
    pub fn jacobians(&self, x: &HerdState, u: &InputState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let pj = self.part_jacobians(x, u)?;
        Ok(combine_jacobians(&pj, &self.thetas()))
    }
}

fn add_block(mat: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix2<f64>) {
    let mut view = mat.fixed_view_mut::<2, 2>(2 * row, 2 * col);
    view += block;
}

/// Scales the repulsion Jacobians row-blockwise by `thetas` and adds cohesion.
pub fn combine_jacobians(pj: &FieldJacobians, thetas: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut fx = pj.repulsion_x.clone();
    let mut fu = pj.repulsion_u.clone();
    for (j, &t) in thetas.iter().enumerate() {
        fx.rows_mut(2 * j, 2).scale_mut(t);
        fu.rows_mut(2 * j, 2).scale_mut(t);
    }
    fx += &pj.cohesion_x;
    (fx, fu)
}

/// Stacks `θ_j g_j + c_j` into a flat vector.
pub fn combine_parts(parts: &FieldParts, thetas: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(2 * parts.repulsion.len());
    for (j, (g, c)) in parts.repulsion.iter().zip(&parts.cohesion).enumerate() {
        let v = g * thetas[j] + c;
        out[2 * j] = v.x;
        out[2 * j + 1] = v.y;
    }
    out
}
