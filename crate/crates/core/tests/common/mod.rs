//! Oracle checks shared by the property suite and the acceptance suite.
#![allow(dead_code)]

use implicit_herd::adaptive::{check_kbar_negdef, kbar_matrix};
use implicit_herd::caging::{barrier_geometry, cbf_filter, closest_point_on_ellipse, herd_ellipse, CbfParams};
use implicit_herd::controller::{
    check_k_negdef, compute_h, existence_diagnostics, h_star, input_rate, k_matrix, Gain, GainSet, ReferenceSignal,
};
use implicit_herd::dynamics::{DynamicsConfig, EvaderParams, HerdModel, Positions, Vec2};
use implicit_herd::estimator::{fuse, topology, EstimatorBelief, EstimatorConfig, MeasurementPacket};
use implicit_herd::io::{trace_header, write_trace_to};
use implicit_herd::scenarios::{caging_3v3, inverse_5v5};
use implicit_herd::sim::{make_reference, run, ControllerMode, Scenario};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Check = Result<(), TestCaseError>;

pub fn points(flat: &[f64]) -> Positions {
    Positions::from_slice(flat)
}

pub fn min_separation(x: &Positions, u: &Positions) -> f64 {
    let mut best = f64::INFINITY;
    for (j, a) in x.iter().enumerate() {
        for b in u.iter() {
            best = best.min((a - b).norm());
        }
        for b in x.iter().skip(j + 1) {
            best = best.min((a - b).norm());
        }
    }
    best
}

fn evader(kind: u8, theta: f64, cohesion: f64) -> EvaderParams {
    match kind % 2 {
        0 => EvaderParams::inverse(theta),
        _ => EvaderParams::exponential(theta, 0.5, 2.0, 1.0),
    }
    .with_cohesion(cohesion)
}

/// Random herd: up to 4 evaders of mixed model and up to 4 herders, pairwise
/// at least 0.5 m apart.
pub fn herd() -> impl Strategy<Value = (HerdModel, Positions, Positions)> {
    (1usize..=4, 1usize..=4)
        .prop_flat_map(|(m, n)| {
            (
                prop::collection::vec((any::<u8>(), 0.2..2.0f64, prop_oneof![Just(0.0), 1e-4..1e-2f64]), m),
                prop::collection::vec(-4.0..4.0f64, 2 * m),
                prop::collection::vec(-4.0..4.0f64, 2 * n),
            )
        })
        .prop_filter_map("bodies too close", |(params, xs, us)| {
            let x = points(&xs);
            let u = points(&us);
            if min_separation(&x, &u) < 0.5 {
                return None;
            }
            let params = params.into_iter().map(|(k, t, c)| evader(k, t, c)).collect();
            Some((HerdModel::new(params, DynamicsConfig::default()).ok()?, x, u))
        })
}

fn fd_jacobians(model: &HerdModel, x: &Positions, u: &Positions) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = |xf: &DVector<f64>, uf: &DVector<f64>| {
        model.velocity_unsaturated(&Positions::from_flat(xf), &Positions::from_flat(uf)).unwrap().to_flat()
    };
    let (xf, uf) = (x.to_flat(), u.to_flat());
    let eps = 1e-6;
    let mut jx = DMatrix::zeros(xf.len(), xf.len());
    let mut ju = DMatrix::zeros(xf.len(), uf.len());
    for k in 0..xf.len() {
        let (mut a, mut b) = (xf.clone(), xf.clone());
        a[k] += eps;
        b[k] -= eps;
        jx.set_column(k, &((f(&a, &uf) - f(&b, &uf)) / (2.0 * eps)));
    }
    for k in 0..uf.len() {
        let (mut a, mut b) = (uf.clone(), uf.clone());
        a[k] += eps;
        b[k] -= eps;
        ju.set_column(k, &((f(&xf, &a) - f(&xf, &b)) / (2.0 * eps)));
    }
    (jx, ju)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-6)
}

pub fn check_jacobians((model, x, u): (HerdModel, Positions, Positions)) -> Check {
    let (jx, ju) = model.jacobians(&x, &u).unwrap();
    let (fx, fu) = fd_jacobians(&model, &x, &u);
    prop_assert!(rel_err(&jx, &fx) < 1e-5, "J_x rel err {}", rel_err(&jx, &fx));
    prop_assert!(rel_err(&ju, &fu) < 1e-5, "J_u rel err {}", rel_err(&ju, &fu));
    Ok(())
}

/// Oracle for negative definiteness: Cholesky of `−(M + Mᵀ)/2`.
fn cholesky_negdef(m: &DMatrix<f64>) -> bool {
    let sym = -(m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

fn gain(kind: u8, scale: f64, diag: &[f64]) -> Gain {
    if kind.is_multiple_of(2) {
        Gain::Scalar(scale)
    } else {
        Gain::Matrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }
}

pub type KCase = ((u8, u8), f64, f64, Vec<f64>, Vec<f64>);

pub fn k_case() -> impl Strategy<Value = KCase> {
    (
        (any::<u8>(), any::<u8>()),
        -1.0..2.0f64,
        -10.0..60.0f64,
        prop::collection::vec(-1.0..2.0f64, 4),
        prop::collection::vec(-10.0..60.0f64, 4),
    )
}

pub fn check_k((kinds, kf, kh, dkf, dkh): KCase) -> Check {
    let gains = GainSet { k_f: gain(kinds.0, kf, &dkf), k_h: gain(kinds.1, kh, &dkh), ..GainSet::default() };
    let z = DVector::zeros(4);
    let k = k_matrix(&gains, &z, &z);
    let report = check_k_negdef(&gains, &z, &z);
    prop_assume!(report.max_eigenvalue.abs() > 1e-9);
    prop_assert_eq!(report.negative_definite, cholesky_negdef(&k));
    // block layout [[−K_f, ½I], [½I, −K_h]]
    let kf_m = gains.k_f.eval(&z);
    let kh_m = gains.k_h.eval(&z);
    for r in 0..4 {
        for c in 0..4 {
            prop_assert_eq!(k[(r, c)], -kf_m[(r, c)]);
            prop_assert_eq!(k[(4 + r, 4 + c)], -kh_m[(r, c)]);
            prop_assert_eq!(k[(r, 4 + c)], if r == c { 0.5 } else { 0.0 });
            prop_assert_eq!(k[(4 + r, c)], if r == c { 0.5 } else { 0.0 });
        }
    }
    Ok(())
}

pub type KbarCase = (f64, f64, f64, Vec<f64>);

pub fn kbar_case() -> impl Strategy<Value = KbarCase> {
    (0.05..2.0f64, 1.0..80.0f64, 1.0..300.0f64, prop::collection::vec(-2.0..2.0f64, 16))
}

pub fn check_kbar((kf, kh, kt, jx): KbarCase) -> Check {
    let gains =
        GainSet { k_f: Gain::Scalar(kf), k_h: Gain::Scalar(kh), k_theta: Gain::Scalar(kt), ..GainSet::default() };
    let jx = DMatrix::from_row_slice(4, 4, &jx);
    let z = DVector::zeros(4);
    let report = check_kbar_negdef(&gains, &jx, &z, &z);
    prop_assume!(report.max_eigenvalue.abs() > 1e-9);
    let kbar = kbar_matrix(&gains, &jx, &z, &z);
    prop_assert_eq!(report.negative_definite, cholesky_negdef(&kbar));
    let coupling = &jx * (-0.5 * kt);
    prop_assert_eq!(kbar.view((4, 8), (4, 4)).into_owned(), coupling.clone());
    prop_assert_eq!(kbar.view((8, 4), (4, 4)).into_owned(), coupling);
    prop_assert_eq!(kbar.view((0, 8), (4, 4)).into_owned(), DMatrix::<f64>::zeros(4, 4));
    Ok(())
}

/// Central difference of `h` along `(f, u̇)`, relative to `h*(h) = −K_h h`.
fn h_rate_error(
    model: &HerdModel,
    x: &Positions,
    u: &Positions,
    reference: &ReferenceSignal,
    t: f64,
    gains: &GainSet,
) -> f64 {
    let w = compute_h(model, x, u, reference, t, gains).unwrap();
    let f = model.velocity_unsaturated(x, u).unwrap().to_flat();
    let ud = input_rate(&w, &f, gains).unwrap();
    let eps = 1e-6;
    let at = |s: f64| {
        let xe = Positions::from_flat(&(x.to_flat() + &f * s));
        let ue = Positions::from_flat(&(u.to_flat() + &ud * s));
        compute_h(model, &xe, &ue, reference, t, gains).unwrap().h
    };
    let h_dot = (at(eps) - at(-eps)) / (2.0 * eps);
    let want = h_star(&gains.k_h, &w.h);
    (&h_dot - &want).norm() / want.norm().max(1e-3)
}

pub type HRateCase = (Vec<f64>, Vec<f64>, Vec<f64>);

pub fn h_rate_case() -> impl Strategy<Value = HRateCase> {
    (
        prop::collection::vec(-2.0..2.0f64, 4),
        prop::collection::vec(-4.0..4.0f64, 4),
        prop::collection::vec(-2.0..2.0f64, 4),
    )
}

/// Under the implicit law, `ḣ` along `(f, u̇)` equals `−K_h h`.
pub fn check_h_rate((xs, us, target): HRateCase) -> Check {
    let x = points(&xs);
    let u = points(&us);
    prop_assume!(min_separation(&x, &u) > 0.8);
    let model = HerdModel::new(vec![EvaderParams::standard_inverse(); 2], DynamicsConfig::default()).unwrap();
    let reference = ReferenceSignal::Static(DVector::from_column_slice(&target));
    let gains = GainSet::default();
    let w = compute_h(&model, &x, &u, &reference, 0.0, &gains).unwrap();
    // the damped pseudoinverse is exact only where σ_min² ≫ λ
    prop_assume!(existence_diagnostics(&w).min_singular_value.powi(2) > 1e4 * gains.lambda_pinv);
    let err = h_rate_error(&model, &x, &u, &reference, 0.0, &gains);
    prop_assert!(err < 1e-2, "relative error {err}");
    Ok(())
}

/// Same check at states visited by the 5v5 Inverse fixture; returns how many
/// states had `h` above the noise floor.
pub fn check_h_rate_along_fixture() -> Result<usize, String> {
    let mut sc = inverse_5v5();
    sc.horizon = 3.0;
    let out = run(&sc).map_err(|e| e.to_string())?;
    let model = sc.model().map_err(|e| e.to_string())?;
    let reference = make_reference(&sc.reference).map_err(|e| e.to_string())?;
    let gains = sc.gains.to_gain_set();
    let mut checked = 0;
    for rec in out.trace.iter().step_by(5) {
        let (x, u) = (points(&rec.x), points(&rec.u));
        let w = compute_h(&model, &x, &u, &reference, rec.t, &gains).map_err(|e| e.to_string())?;
        if w.h.norm() < 1e-7 {
            continue;
        }
        let err = h_rate_error(&model, &x, &u, &reference, rec.t, &gains);
        if err >= 1e-2 {
            return Err(format!("relative error {err:.3e} at t = {}", rec.t));
        }
        checked += 1;
    }
    if checked < 10 {
        return Err(format!("only {checked} states with h above the noise floor"));
    }
    Ok(checked)
}

pub type FusionCase = (Vec<f64>, f64, Vec<Vec<f64>>, Vec<Vec<bool>>, f64);

pub fn fusion_case() -> impl Strategy<Value = FusionCase> {
    (
        prop::collection::vec(-3.0..3.0f64, 6),
        0.1..2.0f64,
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 6), 3),
        prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 3),
        0.01..0.5f64,
    )
}

pub fn check_fusion((prior, var, meas, seen, r): FusionCase) -> Check {
    let cfg = EstimatorConfig { r, ..EstimatorConfig::default() };
    let xi0 = DVector::from_column_slice(&prior);
    let p0 = DMatrix::identity(6, 6) * var;
    let beliefs = vec![EstimatorBelief::new(xi0.clone(), p0.clone(), &cfg).unwrap(); 3];
    let packets: Vec<MeasurementPacket> = (0..3)
        .map(|i| MeasurementPacket { values: meas[i].clone(), seen: seen[i].clone(), sender: i as u16, tick: 4 })
        .collect();
    let far = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
    let fused = fuse(&beliefs, &packets, &topology(&far, 1e3));
    // covariance-form Kalman filter, one scalar measurement at a time
    let (mut xc, mut pc) = (xi0, p0);
    for p in &packets {
        for k in (0..6).filter(|&k| p.seen[k]) {
            let s = pc[(k, k)] + r;
            let gain = pc.column(k) / s;
            xc += &gain * (p.values[k] - xc[k]);
            pc -= &gain * pc.row(k).clone_owned();
        }
    }
    for b in &fused {
        prop_assert!((&b.xi - &xc).amax() < 1e-10, "mean gap {}", (&b.xi - &xc).amax());
        prop_assert!((b.covariance() - &pc).amax() < 1e-10);
        prop_assert_eq!(&b.xi, &fused[0].xi);
    }
    Ok(())
}

pub type CbfCase = ((f64, f64), Vec<f64>, (f64, f64), (f64, f64), (f64, f64));

pub fn cbf_case() -> impl Strategy<Value = CbfCase> {
    (
        (-2.0..2.0f64, -2.0..2.0f64),
        prop::collection::vec(-3.0..3.0f64, 6),
        (0.0..std::f64::consts::TAU, 0.2..10.0f64),
        (-1.0..1.0f64, -1.0..1.0f64),
        (1.0..100.0f64, 0.5..4.0f64),
    )
}

pub fn check_cbf(((cx, cy), spread, (angle, dist), (vx, vy), (k_cbf, varphi)): CbfCase) -> Check {
    let x = points(&spread).translated(Vec2::new(cx, cy));
    let ell = herd_ellipse(&x);
    let (_, e0, _) = ell.principal(4.0);
    let q = ell.center + Vec2::new(angle.cos(), angle.sin()) * (e0 + dist);
    let geom = barrier_geometry(&ell, 4.0, &q, 0, 1e-6).unwrap();
    let p = CbfParams { varphi, k_cbf, t: 0.01 };
    let u_nom = Vec2::new(vx, vy);
    let got = cbf_filter(&u_nom, &geom, &p);
    // QP: min ‖v − u_nom‖² s.t. n·v ≥ b, solved by search on the constraint line
    let n = geom.normal;
    let b = -k_cbf * geom.h(&u_nom, &p).powi(3);
    let want = if n.dot(&u_nom) >= b {
        u_nom
    } else {
        let p0 = n * (b / n.norm_squared());
        let tangent = Vec2::new(-n.y, n.x);
        // the cost is convex in s, so bisect on the sign of its slope
        let slope = |s: f64| tangent.dot(&(p0 + tangent * s - u_nom));
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        p0 + tangent * (0.5 * (lo + hi))
    };
    prop_assert!((got - want).norm() < 1e-9 * (1.0 + want.norm()), "gap {}", (got - want).norm());
    prop_assert!(n.dot(&got) >= b - 1e-9 * (1.0 + b.abs()));
    Ok(())
}

pub type EllipseCase = (Vec<f64>, f64, f64, f64);

pub fn ellipse_case() -> impl Strategy<Value = EllipseCase> {
    (prop::collection::vec(-3.0..3.0f64, 2..12), -12.0..12.0f64, -12.0..12.0f64, 0.5..8.0f64)
}

pub fn check_ellipse((spread, qx, qy, mu): EllipseCase) -> Check {
    let spread = &spread[..spread.len() / 2 * 2];
    let ell = herd_ellipse(&points(spread));
    let q = Vec2::new(qx, qy);
    let got = closest_point_on_ellipse(&ell, mu, &q);
    let (axis, e0, e1) = ell.principal(mu);
    let minor = Vec2::new(-axis.y, axis.x);
    let at = |phi: f64| ell.center + axis * (e0 * phi.cos()) + minor * (e1 * phi.sin());
    let dist = |phi: f64| (at(phi) - q).norm();
    let samples = 20_000;
    let step = std::f64::consts::TAU / samples as f64;
    let best = (0..samples).map(|k| k as f64 * step).min_by(|a, b| dist(*a).total_cmp(&dist(*b))).unwrap();
    let (mut lo, mut hi) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (a, c) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if dist(a) < dist(c) {
            hi = c
        } else {
            lo = a
        }
    }
    let brute = dist(0.5 * (lo + hi));
    prop_assert!(((got - q).norm() - brute).abs() < 1e-6, "{} vs {}", (got - q).norm(), brute);
    prop_assert!((ell.level(mu, &got) - 1.0).abs() < 1e-6);
    Ok(())
}

pub fn trace_bytes(sc: &Scenario) -> Vec<u8> {
    let out = run(sc).unwrap();
    let mut buf = Vec::new();
    write_trace_to(&mut buf, &trace_header(sc).unwrap(), &out.trace).unwrap();
    buf
}

/// Repeated runs of the same scenario write identical bytes, and a different
/// seed writes different ones.
pub fn check_determinism() -> Result<(), String> {
    let mut dkf = inverse_5v5();
    dkf.estimator = Some(EstimatorConfig::default());
    dkf.horizon = 4.0;
    let mut adaptive = inverse_5v5();
    adaptive.mode = ControllerMode::ImplicitAdaptive;
    adaptive.horizon = 4.0;
    let mut cage = caging_3v3(5);
    cage.horizon = 4.0;
    for sc in [dkf.clone(), adaptive, cage] {
        if trace_bytes(&sc) != trace_bytes(&sc) {
            return Err(format!("{} differs between runs", sc.name));
        }
    }
    let mut other = dkf.clone();
    other.seed += 1;
    if trace_bytes(&dkf) == trace_bytes(&other) {
        return Err("seed does not change the trace".into());
    }
    Ok(())
}
