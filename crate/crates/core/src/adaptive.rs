//! Adaptation of the repulsion gains θ̂.
//!
//! The mismatch `h̃ = (θ − θ̂) g` is driven to zero with `dh̃/dt = −K_θ h̃`
//! using the same input-dynamics construction as the controller. `ẋ` and
//! `ḣ` are not available analytically and come from backward differences
//! over one control period.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{DefinitenessReport, Gain, GainSet};
use crate::dynamics::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Below this `‖g_j‖` (m/s) the estimate of evader j is frozen.
    #[serde(default = "default_excitation")]
    pub excitation_floor: f64,
    /// Projection floor keeping `θ̂_j` positive.
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
}

fn default_excitation() -> f64 {
    1e-4
}
fn default_theta_min() -> f64 {
    1e-3
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { excitation_floor: default_excitation(), theta_min: default_theta_min() }
    }
}

/// Current estimates and (simulation-only) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub theta_hat: Vec<f64>,
    pub theta_true: Vec<f64>,
}

impl ParamEstimate {
    pub fn new(theta_hat: Vec<f64>, theta_true: Vec<f64>) -> Self {
        ParamEstimate { theta_hat, theta_true }
    }

    /// Relative error `|θ̂_j − θ_j| / θ_j` per evader.
    pub fn relative_errors(&self) -> Vec<f64> {
        self.theta_hat.iter().zip(&self.theta_true).map(|(h, t)| (h - t).abs() / t).collect()
    }

    /// Euler step with projection onto `θ̂ ≥ θ_min`.
    pub fn integrate(&mut self, rate: &[f64], dt: f64, theta_min: f64) {
        for (th, r) in self.theta_hat.iter_mut().zip(rate) {
            *th = (*th + dt * r).max(theta_min);
        }
    }
}

/// Quantities the law consumes at one tick.
#[derive(Debug, Clone)]
pub struct AdaptState {
    /// `h̃ = ẋ − ẋ̂`.
    pub h_tilde: DVector<f64>,
    pub x_dot_measured: DVector<f64>,
    pub x_dot_hat: DVector<f64>,
}

/// `h̃* = −K_θ h̃ − ḣ + Ĵ_x (ẋ − ẋ̂)`.
pub fn h_tilde_star(
    k_theta: &Gain,
    h_tilde: &DVector<f64>,
    dh_dt: &DVector<f64>,
    jx_hat: &DMatrix<f64>,
    x_dot: &DVector<f64>,
    x_dot_hat: &DVector<f64>,
) -> DVector<f64> {
    -k_theta.apply(h_tilde) - dh_dt + jx_hat * (x_dot - x_dot_hat)
}

/// Result of one evaluation of the adaptation law.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRate {
    pub rate: Vec<f64>,
    /// Evaders whose estimate was frozen for lack of excitation.
    pub frozen: Vec<usize>,
}

/// `θ̂̇ = −J̃_θ⁺ (h̃* + Ĵ_x ẋ̂ + Ĵ_u u̇)`, where `J̃_θ` stacks each unit-gain
/// field `g_j` as the only nonzero entry of column j; its pseudoinverse acts
/// blockwise as `g_jᵀ / ‖g_j‖²`.
pub fn theta_rate(
    h_tilde_star: &DVector<f64>,
    jx_hat: &DMatrix<f64>,
    x_dot_hat: &DVector<f64>,
    ju_hat: &DMatrix<f64>,
    u_dot: &DVector<f64>,
    basis: &[Vec2],
    cfg: &AdaptConfig,
) -> ThetaRate {
    let r = h_tilde_star + jx_hat * x_dot_hat + ju_hat * u_dot;
    let mut rate = Vec::with_capacity(basis.len());
    let mut frozen = Vec::new();
    for (j, g) in basis.iter().enumerate() {
        let n2 = g.norm_squared();
        if n2.sqrt() < cfg.excitation_floor {
            frozen.push(j);
            rate.push(0.0);
            continue;
        }
        let rj = Vec2::new(r[2 * j], r[2 * j + 1]);
        rate.push(-g.dot(&rj) / n2);
    }
    ThetaRate { rate, frozen }
}

/// The 3×3-block matrix `K̄` of the adaptive closed loop.
pub fn kbar_matrix(gains: &GainSet, jx: &DMatrix<f64>, x_tilde: &DVector<f64>, h: &DVector<f64>) -> DMatrix<f64> {
    let n = x_tilde.len();
    let kf = gains.k_f.eval(x_tilde);
    let kh = gains.k_h.eval(h);
    let kt = gains.k_theta.eval(h);
    let coupling = jx * &kt * -0.5;
    let mut k = DMatrix::zeros(3 * n, 3 * n);
    k.view_mut((0, 0), (n, n)).copy_from(&(-kf));
    k.view_mut((n, n), (n, n)).copy_from(&(-kh));
    k.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(-kt));
    k.view_mut((0, n), (n, n)).fill_diagonal(0.5);
    k.view_mut((n, 0), (n, n)).fill_diagonal(0.5);
    k.view_mut((n, 2 * n), (n, n)).copy_from(&coupling);
    k.view_mut((2 * n, n), (n, n)).copy_from(&coupling);
    k
}

pub fn check_kbar_negdef(
    gains: &GainSet,
    jx: &DMatrix<f64>,
    x_tilde: &DVector<f64>,
    h: &DVector<f64>,
) -> DefinitenessReport {
    DefinitenessReport::of(kbar_matrix(gains, jx, x_tilde, h))
}

/// Backward-difference memory for `ẋ` and `ḣ`.
#[derive(Debug, Clone, Default)]
pub struct FiniteDifference {
    prev: Option<DVector<f64>>,
}

impl FiniteDifference {
    /// Returns `(v − v_prev)/dt`, or `None` on the first call.
    pub fn update(&mut self, v: &DVector<f64>, dt: f64) -> Option<DVector<f64>> {
        let out = self.prev.as_ref().map(|p| (v - p) / dt);
        self.prev = Some(v.clone());
        out
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}
