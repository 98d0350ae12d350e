//! Pre-herding phase: herders spread evenly over an inflated covariance
//! ellipse of the herd while a barrier filter keeps them away from an inner
//! ellipse.

use std::f64::consts::PI;

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{saturate, HerdState, InputState, Positions, Vec2};
use crate::error::{HerdError, Result};

/// Regularization added to the herd covariance, m².
pub const COVARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HerdEllipse {
    pub center: Vec2,
    pub cov: Matrix2<f64>,
}

impl HerdEllipse {
    /// Principal frame of `μ·P`: (unit major axis, semi-axes (major, minor)).
    pub fn principal(&self, mu: f64) -> (Vec2, f64, f64) {
        let eig = SymmetricEigen::new(self.cov * mu);
        let (imax, imin) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let axis = Vec2::new(eig.eigenvectors[(0, imax)], eig.eigenvectors[(1, imax)]);
        (axis, eig.eigenvalues[imax].max(0.0).sqrt(), eig.eigenvalues[imin].max(0.0).sqrt())
    }

    /// Radius of the `μ` ellipse along direction `ψ` from the center.
    pub fn radius_at(&self, mu: f64, psi: f64) -> f64 {
        let d = Vec2::new(psi.cos(), psi.sin());
        let inv = (self.cov * mu).try_inverse().unwrap_or_else(Matrix2::zeros);
        1.0 / d.dot(&(inv * d)).sqrt()
    }

    /// `yᵀ(μP)⁻¹y` with `y = q − center`; below 1 means inside.
    pub fn level(&self, mu: f64, q: &Vec2) -> f64 {
        let y = q - self.center;
        let inv = (self.cov * mu).try_inverse().unwrap_or_else(Matrix2::zeros);
        y.dot(&(inv * y))
    }
}

pub fn herd_ellipse(x: &HerdState) -> HerdEllipse {
    let center = x.mean();
    let mut cov = Matrix2::zeros();
    for p in x.iter() {
        let d = p - center;
        cov += d * d.transpose();
    }
    cov /= x.len().max(1) as f64;
    HerdEllipse { center, cov: cov + Matrix2::identity() * COVARIANCE_FLOOR }
}

fn wrap_2pi(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

/// Herder indices ordered counter-clockwise by polar angle, ties by index.
pub fn angle_order(angles: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..angles.len()).collect();
    idx.sort_by(|&a, &b| wrap_2pi(angles[a]).total_cmp(&wrap_2pi(angles[b])).then(a.cmp(&b)));
    idx
}

/// Per-herder `(forward gap, backward gap)` to its angular neighbors, rad.
fn neighbor_gaps(angles: &[f64]) -> Vec<(f64, f64)> {
    let n = angles.len();
    let order = angle_order(angles);
    let mut gaps = vec![(2.0 * PI, 2.0 * PI); n];
    if n < 2 {
        return gaps;
    }
    for (k, &i) in order.iter().enumerate() {
        let next = order[(k + 1) % n];
        let prev = order[(k + n - 1) % n];
        let fwd = wrap_2pi(angles[next] - angles[i]);
        let back = wrap_2pi(angles[i] - angles[prev]);
        // coincident neighbors wrap to zero; the sort order keeps them distinct
        gaps[i] = (fwd, back);
    }
    gaps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarRate {
    pub psi: f64,
    pub rho: f64,
    pub psi_dot: f64,
    pub rho_dot: f64,
    pub rho_star: f64,
    /// Cartesian nominal velocity, m/s.
    pub velocity: Vec2,
}

/// Angular consensus with the two angularly adjacent herders and linear
/// radial feedback towards the `μ1` ellipse.
pub fn polar_control(u: &InputState, ellipse: &HerdEllipse, mu1: f64, guard: f64) -> Result<Vec<PolarRate>> {
    let mut angles = Vec::with_capacity(u.len());
    let mut radii = Vec::with_capacity(u.len());
    for (i, p) in u.iter().enumerate() {
        let d = p - ellipse.center;
        let r = d.norm();
        if r < guard {
            return Err(HerdError::DegenerateAngle { herder: i });
        }
        angles.push(d.y.atan2(d.x));
        radii.push(r);
    }
    let gaps = neighbor_gaps(&angles);
    Ok((0..u.len())
        .map(|i| {
            let psi = angles[i];
            let rho = radii[i];
            let psi_dot = if u.len() < 2 { 0.0 } else { gaps[i].0 - gaps[i].1 };
            let rho_star = ellipse.radius_at(mu1, psi);
            let rho_dot = -(rho - rho_star);
            let er = Vec2::new(psi.cos(), psi.sin());
            let et = Vec2::new(-psi.sin(), psi.cos());
            PolarRate { psi, rho, psi_dot, rho_dot, rho_star, velocity: er * rho_dot + et * (rho * psi_dot) }
        })
        .collect())
}

/// Euclidean-nearest point on the boundary of the `μ` ellipse. Works for
/// interior queries too.
pub fn closest_point_on_ellipse(ellipse: &HerdEllipse, mu: f64, q: &Vec2) -> Vec2 {
    let (axis, e0, e1) = ellipse.principal(mu);
    let minor = Vec2::new(-axis.y, axis.x);
    let y = q - ellipse.center;
    let (y0, y1) = (y.dot(&axis), y.dot(&minor));
    let (x0, x1) = nearest_in_first_quadrant(e0, e1, y0.abs(), y1.abs());
    ellipse.center + axis * x0.copysign(y0) + minor * x1.copysign(y1)
}

/// Nearest point on `x0²/e0² + x1²/e1² = 1` to `(y0, y1)`, with `e0 ≥ e1 > 0`
/// and a query in the closed first quadrant. Bisection on the stationarity
/// equation in the scaled root variable.
fn nearest_in_first_quadrant(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, f64) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return (y0, y1);
            }
            let r0 = (e0 / e1).powi(2);
            let s = bisect_root(r0, z0, z1, g);
            (r0 * y0 / (s + r0), y1 / (s + 1.0))
        } else {
            (0.0, e1)
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xd = numer / denom;
            (e0 * xd, e1 * (1.0 - xd * xd).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    }
}

fn bisect_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let a = n0 / (s + r0);
        let b = z1 / (s + 1.0);
        let v = a * a + b * b - 1.0;
        if v > 0.0 {
            s0 = s;
        } else if v < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbfParams {
    /// Desired margin from the inner ellipse, m.
    pub varphi: f64,
    pub k_cbf: f64,
    /// Sampling time, s.
    pub t: f64,
}

impl CbfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.varphi > 0.0 && self.k_cbf > 0.0 && self.t > 0.0) {
            return Err(HerdError::InvalidParameter("barrier margin, gain and period must be positive".into()));
        }
        Ok(())
    }
}

/// Barrier geometry for one herder: `Δ = u − e` with `e` the nearest inner
/// boundary point, signed so that distances inside the ellipse are negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierGeometry {
    pub signed_distance: f64,
    /// Outward unit normal at `e`.
    pub normal: Vec2,
}

pub fn barrier_geometry(
    ellipse: &HerdEllipse,
    mu2: f64,
    u: &Vec2,
    herder: usize,
    guard: f64,
) -> Result<BarrierGeometry> {
    let e = closest_point_on_ellipse(ellipse, mu2, u);
    let delta = u - e;
    let dist = delta.norm();
    if dist < guard {
        return Err(HerdError::DegenerateBarrier { herder });
    }
    let sign = if ellipse.level(mu2, u) >= 1.0 { 1.0 } else { -1.0 };
    Ok(BarrierGeometry { signed_distance: sign * dist, normal: delta * (sign / dist) })
}

impl BarrierGeometry {
    /// Distance margin `±‖Δ‖ − φ`.
    pub fn margin(&self, p: &CbfParams) -> f64 {
        self.signed_distance - p.varphi
    }

    /// `h(Δ) = ±‖Δ‖ + T (Δ·u̇_nom)/‖Δ‖ − φ`.
    pub fn h(&self, u_nom: &Vec2, p: &CbfParams) -> f64 {
        self.signed_distance + p.t * self.normal.dot(u_nom) - p.varphi
    }
}

/// Minimum-norm correction of `u_nom` subject to `n·u̇ ≥ −k h³`, in closed
/// form: unchanged when feasible, otherwise projected onto the constraint line.
pub fn cbf_filter(u_nom: &Vec2, geom: &BarrierGeometry, p: &CbfParams) -> Vec2 {
    let h = geom.h(u_nom, p);
    let bound = -p.k_cbf * h.powi(3);
    let slack = geom.normal.dot(u_nom) - bound;
    if slack >= 0.0 {
        *u_nom
    } else {
        u_nom - geom.normal * (slack / geom.normal.norm_squared())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CagingConfig {
    #[serde(default = "default_mu1")]
    pub mu1: f64,
    #[serde(default = "default_mu2")]
    pub mu2: f64,
    /// m
    #[serde(default = "default_varphi")]
    pub varphi: f64,
    #[serde(default = "default_k_cbf")]
    pub k_cbf: f64,
    /// Switch when every herder is within this of its target radius, m.
    #[serde(default = "default_radial_tol")]
    pub radial_tol: f64,
    /// ...and every angle gap is within this of `360°/n`, degrees.
    #[serde(default = "default_angle_tol")]
    pub angle_tol_deg: f64,
    /// Consecutive ticks the switch test must hold.
    #[serde(default = "default_hold")]
    pub hold_ticks: usize,
}

fn default_mu1() -> f64 {
    7.0
}
fn default_mu2() -> f64 {
    4.0
}
fn default_varphi() -> f64 {
    3.0
}
fn default_k_cbf() -> f64 {
    50.0
}
fn default_radial_tol() -> f64 {
    0.04
}
fn default_angle_tol() -> f64 {
    4.0
}
fn default_hold() -> usize {
    20
}

impl Default for CagingConfig {
    fn default() -> Self {
        CagingConfig {
            mu1: default_mu1(),
            mu2: default_mu2(),
            varphi: default_varphi(),
            k_cbf: default_k_cbf(),
            radial_tol: default_radial_tol(),
            angle_tol_deg: default_angle_tol(),
            hold_ticks: default_hold(),
        }
    }
}

impl CagingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu1 > self.mu2 && self.mu2 > 1.0) {
            return Err(HerdError::InvalidParameter("caging needs mu1 > mu2 > 1".into()));
        }
        if !(self.radial_tol > 0.0 && self.angle_tol_deg > 0.0) {
            return Err(HerdError::InvalidParameter("switch tolerances must be positive".into()));
        }
        CbfParams { varphi: self.varphi, k_cbf: self.k_cbf, t: 1.0 }.validate()
    }

    pub fn cbf(&self, t: f64) -> CbfParams {
        CbfParams { varphi: self.varphi, k_cbf: self.k_cbf, t }
    }
}

/// How far the herders are from an even spread on the `μ1` ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacingReport {
    pub max_radial_error: f64,
    /// Largest `|gap − 2π/n|`, degrees.
    pub max_gap_deviation_deg: f64,
    /// Standard deviation of the angle gaps, degrees.
    pub gap_std_deg: f64,
}

pub fn spacing_report(u: &InputState, ellipse: &HerdEllipse, mu1: f64) -> SpacingReport {
    let n = u.len();
    let angles: Vec<f64> = u.iter().map(|p| (p - ellipse.center).y.atan2((p - ellipse.center).x)).collect();
    let max_radial_error = u
        .iter()
        .zip(&angles)
        .map(|(p, a)| ((p - ellipse.center).norm() - ellipse.radius_at(mu1, *a)).abs())
        .fold(0.0, f64::max);
    let gaps: Vec<f64> = neighbor_gaps(&angles).into_iter().map(|g| g.0).collect();
    let ideal = 2.0 * PI / n.max(1) as f64;
    let max_dev = if n < 2 { 0.0 } else { gaps.iter().map(|g| (g - ideal).abs()).fold(0.0, f64::max) };
    let mean = gaps.iter().sum::<f64>() / n.max(1) as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    SpacingReport {
        max_radial_error,
        max_gap_deviation_deg: max_dev.to_degrees(),
        gap_std_deg: if n < 2 { 0.0 } else { var.sqrt().to_degrees() },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CagingOutcome {
    pub u: InputState,
    /// Applied (filtered, saturated) velocities.
    pub u_dot: Vec<Vec2>,
    /// Per-herder distance margin `±‖Δ‖ − φ` before the step, m.
    pub margins: Vec<f64>,
    pub spacing: SpacingReport,
}

/// Herder velocities of the caging phase (filtered and saturated).
pub fn caging_velocity(
    x: &HerdState,
    u: &InputState,
    cfg: &CagingConfig,
    t: f64,
    v_max: f64,
    guard: f64,
) -> Result<(Vec<Vec2>, Vec<f64>)> {
    let ellipse = herd_ellipse(x);
    let nominal = polar_control(u, &ellipse, cfg.mu1, guard)?;
    let p = cfg.cbf(t);
    let mut vel = Vec::with_capacity(u.len());
    let mut margins = Vec::with_capacity(u.len());
    for (i, (pos, nom)) in u.iter().zip(&nominal).enumerate() {
        let geom = barrier_geometry(&ellipse, cfg.mu2, pos, i, guard)?;
        margins.push(geom.margin(&p));
        vel.push(saturate(cbf_filter(&nom.velocity, &geom, &p), v_max));
    }
    Ok((vel, margins))
}

/// One explicit-Euler caging update of every herder.
pub fn caging_step(
    x: &HerdState,
    u: &InputState,
    cfg: &CagingConfig,
    dt: f64,
    v_max: f64,
    guard: f64,
) -> Result<CagingOutcome> {
    let (vel, margins) = caging_velocity(x, u, cfg, dt, v_max, guard)?;
    let next = Positions(u.iter().zip(&vel).map(|(p, v)| p + v * dt).collect());
    let spacing = spacing_report(u, &herd_ellipse(x), cfg.mu1);
    Ok(CagingOutcome { u: next, u_dot: vel, margins, spacing })
}

/// Counts consecutive ticks satisfying the switch test.
#[derive(Debug, Clone, Default)]
pub struct SwitchDetector {
    held: usize,
}

impl SwitchDetector {
    /// Feeds one tick; returns true once the test has held long enough.
    pub fn update(&mut self, spacing: &SpacingReport, cfg: &CagingConfig) -> bool {
        if spacing.max_radial_error < cfg.radial_tol && spacing.max_gap_deviation_deg < cfg.angle_tol_deg {
            self.held += 1;
        } else {
            self.held = 0;
        }
        self.held >= cfg.hold_ticks.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn axis_ellipse(a: f64, b: f64) -> HerdEllipse {
        HerdEllipse { center: Vec2::zeros(), cov: Matrix2::new(a * a, 0.0, 0.0, b * b) }
    }

    #[test]
    fn single_evader_ellipse_is_regularized() {
        let e = herd_ellipse(&Positions::from_pairs(&[[2.0, -1.0]]));
        assert_eq!(e.center, Vec2::new(2.0, -1.0));
        assert_eq!(e.cov, Matrix2::identity() * COVARIANCE_FLOOR);
    }

    #[test]
    fn cross_layout_covariance() {
        let e = herd_ellipse(&Positions::from_pairs(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]));
        assert_eq!(e.center, Vec2::zeros());
        assert_relative_eq!(e.cov, Matrix2::identity() * (0.5 + COVARIANCE_FLOOR), epsilon = 1e-15);
    }

    #[test]
    fn circle_projection() {
        let e = axis_ellipse(1.0, 1.0);
        assert_relative_eq!(closest_point_on_ellipse(&e, 1.0, &Vec2::new(2.0, 0.0)), Vec2::new(1.0, 0.0));
    }

    #[test]
    fn on_axis_projection() {
        let e = axis_ellipse(2.0, 1.0);
        assert_relative_eq!(closest_point_on_ellipse(&e, 1.0, &Vec2::new(3.0, 0.0)), Vec2::new(2.0, 0.0));
    }

    #[test]
    fn uniform_spacing_is_fixed_point() {
        let e = axis_ellipse(2.0, 1.0);
        let mu = 3.0;
        let u = Positions(
            (0..4)
                .map(|k| {
                    let a = 0.3 + k as f64 * PI / 2.0;
                    Vec2::new(a.cos(), a.sin()) * e.radius_at(mu, a)
                })
                .collect(),
        );
        for r in polar_control(&u, &e, mu, 1e-3).unwrap() {
            assert!(r.psi_dot.abs() < 1e-12 && r.rho_dot.abs() < 1e-12);
        }
    }

    #[test]
    fn two_herders_spread_apart() {
        let e = axis_ellipse(1.0, 1.0);
        let u = Positions::from_pairs(&[[1.0, 0.0], [0.0, 1.0]]);
        let r = polar_control(&u, &e, 1.0, 1e-3).unwrap();
        assert_relative_eq!(r[0].psi_dot, -PI, epsilon = 1e-12);
        assert_relative_eq!(r[1].psi_dot, PI, epsilon = 1e-12);
    }

    #[test]
    fn radial_feedback_sign() {
        let e = axis_ellipse(1.0, 1.0);
        let u = Positions::from_pairs(&[[1.5, 0.0]]);
        let r = polar_control(&u, &e, 1.0, 1e-3).unwrap();
        assert_relative_eq!(r[0].rho_dot, -0.5, epsilon = 1e-12);
        assert_relative_eq!(r[0].velocity, Vec2::new(-0.5, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn herder_at_center_is_degenerate() {
        let e = axis_ellipse(1.0, 1.0);
        let u = Positions::from_pairs(&[[0.0, 0.0]]);
        assert!(matches!(polar_control(&u, &e, 1.0, 1e-3), Err(HerdError::DegenerateAngle { herder: 0 })));
    }

    #[test]
    fn far_herder_unfiltered() {
        let e = axis_ellipse(1.0, 1.0);
        let p = CbfParams { varphi: 3.0, k_cbf: 50.0, t: 0.01 };
        let g = barrier_geometry(&e, 4.0, &Vec2::new(30.0, 0.0), 0, 1e-3).unwrap();
        let nom = Vec2::new(-0.4, 0.1);
        assert_eq!(cbf_filter(&nom, &g, &p), nom);
    }

    #[test]
    fn approach_at_boundary_is_blocked() {
        let e = axis_ellipse(1.0, 1.0);
        let p = CbfParams { varphi: 3.0, k_cbf: 50.0, t: 0.01 };
        // inner radius 2, margin 3: h ≈ 0 at x = 5
        let g = barrier_geometry(&e, 4.0, &Vec2::new(5.0, 0.0), 0, 1e-3).unwrap();
        let out = cbf_filter(&Vec2::new(-0.4, 0.0), &g, &p);
        assert!(out.dot(&g.normal) >= -1e-12);
    }

    #[test]
    fn interior_barrier_is_negative() {
        let e = axis_ellipse(1.0, 1.0);
        let g = barrier_geometry(&e, 4.0, &Vec2::new(1.0, 0.0), 0, 1e-3).unwrap();
        assert_relative_eq!(g.signed_distance, -1.0, epsilon = 1e-12);
        assert_relative_eq!(g.normal, Vec2::new(1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn switch_needs_hold() {
        let cfg = CagingConfig { hold_ticks: 3, ..Default::default() };
        let good = SpacingReport { max_radial_error: 0.0, max_gap_deviation_deg: 0.0, gap_std_deg: 0.0 };
        let bad = SpacingReport { max_radial_error: 1.0, ..good };
        let mut d = SwitchDetector::default();
        assert!(!d.update(&good, &cfg));
        assert!(!d.update(&good, &cfg));
        assert!(!d.update(&bad, &cfg));
        assert!(!d.update(&good, &cfg));
        assert!(!d.update(&good, &cfg));
        assert!(d.update(&good, &cfg));
    }
}
