//! Implicit Control: the input is integrated so that the working equation
//! `h(x, u) = f(x, u) − f*(x̃) − ẋ*` flows to zero with prescribed dynamics
//! `ḣ = −K_h h`, instead of being solved for algebraically.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dynamics::{combine_jacobians, combine_parts, HerdModel, HerdState, InputState, Vec2};
use crate::error::{HerdError, Result};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Callback form of a gain matrix: receives the vector it multiplies.
pub type GainFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A positive-definite gain, either constant or evaluated on its argument.
#[derive(Clone)]
pub enum Gain {
    /// `a·I` of whatever dimension is needed.
    Scalar(f64),
    Matrix(DMatrix<f64>),
    Scheduled(GainFn),
}

impl fmt::Debug for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gain::Scalar(a) => write!(f, "Scalar({a})"),
            Gain::Matrix(m) => write!(f, "Matrix({}x{})", m.nrows(), m.ncols()),
            Gain::Scheduled(_) => write!(f, "Scheduled(..)"),
        }
    }
}

impl Gain {
    pub fn eval(&self, arg: &DVector<f64>) -> DMatrix<f64> {
        let n = arg.len();
        match self {
            Gain::Scalar(a) => DMatrix::identity(n, n) * *a,
            Gain::Matrix(m) => {
                assert_eq!(m.nrows(), n, "gain dimension mismatch");
                m.clone()
            }
            Gain::Scheduled(f) => f(arg),
        }
    }

    /// `K·v` without materializing the matrix for scalar gains.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Gain::Scalar(a) => v * *a,
            _ => self.eval(v) * v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GainSet {
    pub k_f: Gain,
    pub k_h: Gain,
    pub k_theta: Gain,
    /// Damping of the right pseudoinverse; 0 gives the exact inverse when n = m.
    pub lambda_pinv: f64,
}

impl Default for GainSet {
    /// K_f = 0.25 I (12 s settling), K_h = 50 I, K_θ = 200 I.
    fn default() -> Self {
        GainSet { k_f: Gain::Scalar(0.25), k_h: Gain::Scalar(50.0), k_theta: Gain::Scalar(200.0), lambda_pinv: 1e-8 }
    }
}

/// Desired evader positions and velocities over time.
#[derive(Clone)]
pub enum ReferenceSignal {
    Static(DVector<f64>),
    /// Per evader: `ẋ* = v_j`, `ẏ* = 0.5 w_j cos(w_j t + 2π/j)` with 1-based `j`.
    Sinusoid {
        origin: DVector<f64>,
        speed: Vec<f64>,
        omega: Vec<f64>,
    },
    Custom {
        position: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
        velocity: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    },
}

impl fmt::Debug for ReferenceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceSignal::Static(x) => write!(f, "Static({:?})", x.as_slice()),
            ReferenceSignal::Sinusoid { speed, omega, .. } => {
                write!(f, "Sinusoid {{ speed: {speed:?}, omega: {omega:?} }}")
            }
            ReferenceSignal::Custom { .. } => write!(f, "Custom(..)"),
        }
    }
}

fn sinusoid_phase(j: usize) -> f64 {
    2.0 * std::f64::consts::PI / (j + 1) as f64
}

impl ReferenceSignal {
    pub fn position(&self, t: f64) -> DVector<f64> {
        match self {
            ReferenceSignal::Static(x) => x.clone(),
            ReferenceSignal::Sinusoid { origin, speed, omega } => {
                let mut out = origin.clone();
                for j in 0..speed.len() {
                    let phase = sinusoid_phase(j);
                    out[2 * j] += speed[j] * t;
                    out[2 * j + 1] += 0.5 * ((omega[j] * t + phase).sin() - phase.sin());
                }
                out
            }
            ReferenceSignal::Custom { position, .. } => position(t),
        }
    }

    pub fn velocity(&self, t: f64) -> DVector<f64> {
        match self {
            ReferenceSignal::Static(x) => DVector::zeros(x.len()),
            ReferenceSignal::Sinusoid { origin, speed, omega } => {
                let mut out = DVector::zeros(origin.len());
                for j in 0..speed.len() {
                    out[2 * j] = speed[j];
                    out[2 * j + 1] = 0.5 * omega[j] * (omega[j] * t + sinusoid_phase(j)).cos();
                }
                out
            }
            ReferenceSignal::Custom { velocity, .. } => velocity(t),
        }
    }

    pub fn dim(&self) -> usize {
        self.position(0.0).len()
    }
}

/// `h` and its Jacobian blocks at one instant.
#[derive(Debug, Clone)]
pub struct WorkingEquation {
    pub h: DVector<f64>,
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

/// `f*(x̃) = −K_f x̃`.
pub fn f_star(k_f: &Gain, x_tilde: &DVector<f64>) -> DVector<f64> {
    -k_f.apply(x_tilde)
}

/// `h* = −K_h h`.
pub fn h_star(k_h: &Gain, h: &DVector<f64>) -> DVector<f64> {
    -k_h.apply(h)
}

/// Working equation for `model` (whose θ is whatever the caller wants the
/// controller to believe) at time `t`.
pub fn compute_h(
    model: &HerdModel,
    x: &HerdState,
    u: &InputState,
    reference: &ReferenceSignal,
    t: f64,
    gains: &GainSet,
) -> Result<WorkingEquation> {
    let parts = model.parts(x, u)?;
    let pj = model.part_jacobians(x, u)?;
    let thetas = model.thetas();
    let f = combine_parts(&parts, &thetas);
    let (fx, fu) = combine_jacobians(&pj, &thetas);
    Ok(assemble(f, fx, fu, &x.to_flat(), reference, t, gains))
}

/// Builds `h = f − f*(x − x*(t)) − ẋ*(t)`, `J_x = ∂f/∂x + K_f`, `J_u = ∂f/∂u`.
pub(crate) fn assemble(
    f: DVector<f64>,
    fx: DMatrix<f64>,
    fu: DMatrix<f64>,
    x: &DVector<f64>,
    reference: &ReferenceSignal,
    t: f64,
    gains: &GainSet,
) -> WorkingEquation {
    let x_tilde = x - reference.position(t);
    let h = f - f_star(&gains.k_f, &x_tilde) - reference.velocity(t);
    let jx = fx + gains.k_f.eval(&x_tilde);
    WorkingEquation { h, jx, ju: fu }
}

/// Damped right pseudoinverse solve: returns `J_uᵀ (J_u J_uᵀ + λI)⁻¹ rhs`.
pub fn damped_right_solve(ju: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let rows = ju.nrows();
    let gram = ju * ju.transpose() + DMatrix::identity(rows, rows) * lambda;
    let y = match gram.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => gram.lu().solve(rhs)?,
    };
    Some(ju.transpose() * y)
}

/// `u̇ = J_u⁺ (h*(h) − J_x ẋ_model)`; fails when `J_u` loses row rank.
pub fn input_rate(w: &WorkingEquation, x_dot_model: &DVector<f64>, gains: &GainSet) -> Result<DVector<f64>> {
    let diag = existence_diagnostics(w);
    let expected = w.ju.nrows();
    if diag.rank < expected {
        return Err(HerdError::RankDeficient { rank: diag.rank, expected });
    }
    let rhs = h_star(&gains.k_h, &w.h) - &w.jx * x_dot_model;
    let u_dot = damped_right_solve(&w.ju, &rhs, gains.lambda_pinv)
        .ok_or(HerdError::RankDeficient { rank: diag.rank, expected })?;
    if u_dot.iter().any(|v| !v.is_finite()) {
        return Err(HerdError::NonFinite("input rate"));
    }
    Ok(u_dot)
}

/// Eigenvalue summary of a symmetric test matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefinitenessReport {
    pub negative_definite: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl DefinitenessReport {
    pub fn of(mat: DMatrix<f64>) -> Self {
        let sym = (&mat + mat.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        DefinitenessReport { negative_definite: max < 0.0, min_eigenvalue: min, max_eigenvalue: max }
    }
}

/// The 2×2-block matrix `[[−K_f, ½I], [½I, −K_h]]` whose negative
/// definiteness makes the expanded system globally asymptotically stable.
pub fn k_matrix(gains: &GainSet, x_tilde: &DVector<f64>, h: &DVector<f64>) -> DMatrix<f64> {
    let n = x_tilde.len();
    let mut k = DMatrix::zeros(2 * n, 2 * n);
    k.view_mut((0, 0), (n, n)).copy_from(&(-gains.k_f.eval(x_tilde)));
    k.view_mut((n, n), (n, n)).copy_from(&(-gains.k_h.eval(h)));
    k.view_mut((0, n), (n, n)).fill_diagonal(0.5);
    k.view_mut((n, 0), (n, n)).fill_diagonal(0.5);
    k
}

pub fn check_k_negdef(gains: &GainSet, x_tilde: &DVector<f64>, h: &DVector<f64>) -> DefinitenessReport {
    DefinitenessReport::of(k_matrix(gains, x_tilde, h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExistenceDiagnostics {
    pub rank: usize,
    pub condition_number: f64,
    pub min_singular_value: f64,
}

/// Numerical rank and conditioning of `J_u`.
pub fn existence_diagnostics(w: &WorkingEquation) -> ExistenceDiagnostics {
    singular_value_report(&w.ju)
}

pub fn singular_value_report(mat: &DMatrix<f64>) -> ExistenceDiagnostics {
    let sv = mat.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * max && max > 0.0).count();
    ExistenceDiagnostics {
        rank,
        condition_number: if min > 0.0 { max / min } else { f64::INFINITY },
        min_singular_value: min,
    }
}

/// Herd centroid and its (constant) distribution matrix `∂centroid/∂x`.
pub fn centroid_wrap(x: &HerdState) -> (Vec2, DMatrix<f64>) {
    let m = x.len();
    let mut dist = DMatrix::zeros(2, 2 * m);
    for j in 0..m {
        dist[(0, 2 * j)] = 1.0 / m as f64;
        dist[(1, 2 * j + 1)] = 1.0 / m as f64;
    }
    (x.mean(), dist)
}

/// What the controller uses for `ẋ` inside `u̇ = J_u⁺(h* − J_x ẋ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFeed {
    /// Evaluate the model field at the current (x, u).
    Perfect,
    /// Caller supplies `ẋ` (adaptation or estimator).
    Supplied,
}
