//! Closed-loop simulation: truth integration, the active herder branch
//! (caging, implicit, adaptive or root-finding), estimator rounds, phase
//! switching and run metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adaptive::{check_kbar_negdef, h_tilde_star, theta_rate, AdaptConfig, FiniteDifference};
use crate::baseline::{lm_solve, LmConfig};
use crate::caging::{caging_velocity, herd_ellipse, spacing_report, CagingConfig, SpacingReport, SwitchDetector};
use crate::controller::{
    assemble, check_k_negdef, damped_right_solve, existence_diagnostics, f_star, h_star, ExistenceDiagnostics, Gain,
    GainSet, ReferenceSignal, WorkingEquation,
};
use crate::dynamics::{
    combine_jacobians, combine_parts, saturate, DynamicsConfig, EvaderParams, HerdModel, HerdState, InputState,
    Positions, Vec2,
};
use crate::error::{HerdError, Result};
use crate::estimator::{
    field_jacobian, fuse, predict_with_jacobian, rmse, sense, stream_rng, topology, EstimatorBelief, EstimatorConfig,
    MeasurementPacket,
};
use crate::trace::{max_entity_norm, mean_entity_norm, Phase, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerMode {
    #[default]
    Implicit,
    #[serde(rename = "adaptive")]
    ImplicitAdaptive,
    #[serde(rename = "baseline")]
    LmBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// A gain in a config file: a scalar multiple of the identity or a diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl GainValue {
    pub fn to_gain(&self) -> Gain {
        match self {
            GainValue::Scalar(k) => Gain::Scalar(*k),
            GainValue::Diagonal(d) => Gain::Matrix(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
        }
    }

    fn is_positive(&self) -> bool {
        match self {
            GainValue::Scalar(k) => *k > 0.0,
            GainValue::Diagonal(d) => !d.is_empty() && d.iter().all(|k| *k > 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    /// 1/s
    #[serde(default = "default_kf")]
    pub k_f: GainValue,
    /// 1/s
    #[serde(default = "default_kh")]
    pub k_h: GainValue,
    /// 1/s
    #[serde(default = "default_ktheta")]
    pub k_theta: GainValue,
    #[serde(default = "default_lambda")]
    pub lambda_pinv: f64,
}

fn default_kf() -> GainValue {
    GainValue::Scalar(0.25)
}
fn default_kh() -> GainValue {
    GainValue::Scalar(50.0)
}
fn default_ktheta() -> GainValue {
    GainValue::Scalar(200.0)
}
fn default_lambda() -> f64 {
    1e-8
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec { k_f: default_kf(), k_h: default_kh(), k_theta: default_ktheta(), lambda_pinv: default_lambda() }
    }
}

impl GainSpec {
    pub fn to_gain_set(&self) -> GainSet {
        GainSet {
            k_f: self.k_f.to_gain(),
            k_h: self.k_h.to_gain(),
            k_theta: self.k_theta.to_gain(),
            lambda_pinv: self.lambda_pinv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSpec {
    Static {
        targets: Vec<[f64; 2]>,
    },
    /// `ẋ*_j = speed_j`, `ẏ*_j = 0.5 ω_j cos(ω_j t + 2π/j)` starting at `origin`.
    Sinusoid {
        origin: Vec<[f64; 2]>,
        speed: Vec<f64>,
        omega: Vec<f64>,
    },
}

impl ReferenceSpec {
    pub fn len(&self) -> usize {
        match self {
            ReferenceSpec::Static { targets } => targets.len(),
            ReferenceSpec::Sinusoid { origin, .. } => origin.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn flatten_pairs(p: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(2 * p.len(), p.iter().flat_map(|q| q.iter().copied()))
}

pub fn make_reference(spec: &ReferenceSpec) -> Result<ReferenceSignal> {
    match spec {
        ReferenceSpec::Static { targets } => {
            if targets.iter().flatten().any(|v| !v.is_finite()) {
                return Err(HerdError::Config("reference targets must be finite".into()));
            }
            Ok(ReferenceSignal::Static(flatten_pairs(targets)))
        }
        ReferenceSpec::Sinusoid { origin, speed, omega } => {
            if speed.len() != origin.len() || omega.len() != origin.len() {
                return Err(HerdError::Config("sinusoid origin, speed and omega lengths differ".into()));
            }
            if origin.iter().flatten().chain(speed).chain(omega).any(|v| !v.is_finite()) {
                return Err(HerdError::Config("sinusoid parameters must be finite".into()));
            }
            Ok(ReferenceSignal::Sinusoid { origin: flatten_pairs(origin), speed: speed.clone(), omega: omega.clone() })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// s
    pub at: f64,
    /// Evader indices per sub-herd; empty partitions the herd at split time
    /// along the axis through the targets.
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
    pub targets: Vec<[f64; 2]>,
}

/// Herd-level control: each group's centroid is driven as one virtual evader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidSpec {
    pub virtual_evader: EvaderParams,
    /// Evader indices per group; empty means one group with every evader.
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub evaders: Vec<EvaderParams>,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    /// Initial evader positions, m.
    pub x0: Vec<[f64; 2]>,
    /// Initial herder positions, m.
    pub u0: Vec<[f64; 2]>,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub gains: GainSpec,
    #[serde(default)]
    pub mode: ControllerMode,
    /// Initial `θ̂` for adaptive mode (defaults to the model values).
    #[serde(default)]
    pub theta_hat0: Option<Vec<f64>>,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub lm: LmConfig,
    /// Distributed estimator; absent means perfect feedback.
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    /// Caging phase; absent means herding starts immediately.
    #[serde(default)]
    pub caging: Option<CagingConfig>,
    #[serde(default)]
    pub centroid: Option<CentroidSpec>,
    /// Control period T, s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// s
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Relative band of the settling-time metric.
    #[serde(default = "default_band")]
    pub settling_band: f64,
}

fn default_dt() -> f64 {
    0.01
}
fn default_band() -> f64 {
    0.05
}

impl Scenario {
    pub fn m(&self) -> usize {
        self.x0.len()
    }

    pub fn n(&self) -> usize {
        self.u0.len()
    }

    pub fn ticks(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn model(&self) -> Result<HerdModel> {
        HerdModel::new(self.evaders.clone(), self.dynamics)
    }

    fn initial_groups(&self) -> Option<Vec<Vec<usize>>> {
        self.centroid
            .as_ref()
            .map(|c| if c.groups.is_empty() { vec![(0..self.m()).collect()] } else { c.groups.clone() })
    }

    fn check_groups(&self, groups: &[Vec<usize>], refs: usize, what: &str) -> Result<()> {
        if groups.len() != refs {
            return Err(HerdError::Config(format!("{what}: {} groups but {refs} reference points", groups.len())));
        }
        for g in groups {
            if g.is_empty() || g.iter().any(|&j| j >= self.m()) {
                return Err(HerdError::Config(format!("{what}: empty group or evader index out of range")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HerdError::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("control period must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive".into());
        }
        if self.evaders.len() != self.m() || self.m() == 0 {
            return bad(format!("{} evader parameter sets for {} evaders", self.evaders.len(), self.m()));
        }
        if self.n() == 0 {
            return bad("at least one herder is required".into());
        }
        if self.x0.iter().chain(&self.u0).flatten().any(|v| !v.is_finite()) {
            return bad("initial positions must be finite".into());
        }
        if !(self.settling_band > 0.0 && self.settling_band < 1.0) {
            return bad("settling band must lie in (0, 1)".into());
        }
        for e in &self.evaders {
            e.validate()?;
        }
        if !(self.dynamics.guard_radius > 0.0 && self.dynamics.v_max > 0.0 && self.dynamics.sigmoid_slope > 0.0) {
            return bad("dynamics knobs must be positive".into());
        }
        if !(self.gains.k_f.is_positive() && self.gains.k_h.is_positive() && self.gains.k_theta.is_positive()) {
            return bad("gains must be positive".into());
        }
        if !(self.gains.lambda_pinv >= 0.0) {
            return bad("pseudoinverse damping must be non-negative".into());
        }
        make_reference(&self.reference)?;
        let controlled = match &self.centroid {
            Some(c) => {
                c.virtual_evader.validate()?;
                let groups = self.initial_groups().unwrap_or_default();
                self.check_groups(&groups, self.reference.len(), "centroid")?;
                if let Some(s) = &c.split {
                    if s.groups.is_empty() {
                        if s.targets.is_empty() || s.targets.len() > self.m() {
                            return bad("split needs between one and m targets".into());
                        }
                    } else {
                        self.check_groups(&s.groups, s.targets.len(), "split")?;
                    }
                    if !(s.at >= 0.0) {
                        return bad("split time must be non-negative".into());
                    }
                }
                groups.len()
            }
            None => {
                if self.reference.len() != self.m() {
                    return bad(format!("reference has {} points for {} evaders", self.reference.len(), self.m()));
                }
                self.m()
            }
        };
        if let Some(th) = &self.theta_hat0 {
            if th.len() != controlled || th.iter().any(|t| !(*t > 0.0)) {
                return bad(format!("theta_hat0 needs {controlled} positive entries"));
            }
        }
        if let Some(e) = &self.estimator {
            e.validate()?;
            if self.mode == ControllerMode::LmBaseline {
                return bad("the root-finding baseline runs with perfect feedback only".into());
            }
            if self.centroid.is_some() {
                return bad("centroid herding runs with perfect feedback only".into());
            }
        }
        if let Some(c) = &self.caging {
            c.validate()?;
        }
        if self.integrator == Integrator::Rk4
            && (self.mode != ControllerMode::Implicit || self.estimator.is_some() || self.caging.is_some())
        {
            return bad("rk4 integrates the implicit expanded system with perfect feedback only".into());
        }
        self.lm.validate()?;
        if !(self.adapt.excitation_floor >= 0.0 && self.adapt.theta_min > 0.0) {
            return bad("adaptation floors must be positive".into());
        }
        Ok(())
    }

    /// Non-fatal remarks about the setup.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.caging.is_none() && self.mode != ControllerMode::LmBaseline {
            let reach = self.estimator.map(|e| e.sense_radius).unwrap_or(6.5);
            for (i, u) in self.u0.iter().enumerate() {
                let near = self.x0.iter().any(|x| (x[0] - u[0]).hypot(x[1] - u[1]) <= reach);
                if !near {
                    out.push(format!("herder {i} starts more than {reach} m from every evader"));
                }
            }
        }
        out
    }

    /// Stability-test matrices and `J_u` conditioning at the initial state.
    pub fn gain_report(&self) -> Result<GainReport> {
        self.validate()?;
        let gains = self.gains.to_gain_set();
        let reference = make_reference(&self.reference)?;
        let x = Positions::from_pairs(&self.x0);
        let u = Positions::from_pairs(&self.u0);
        let (model, y) = match (&self.centroid, self.initial_groups()) {
            (Some(c), Some(g)) => {
                (HerdModel::new(vec![c.virtual_evader.clone(); g.len()], self.dynamics)?, group_centroids(&x, &g))
            }
            _ => (self.model()?, x),
        };
        let w = crate::controller::compute_h(&model, &y, &u, &reference, 0.0, &gains)?;
        let x_tilde = y.to_flat() - reference.position(0.0);
        let k = check_k_negdef(&gains, &x_tilde, &w.h);
        let kbar = check_kbar_negdef(&gains, &w.jx, &x_tilde, &w.h);
        let diag = existence_diagnostics(&w);
        Ok(GainReport {
            k_negative_definite: k.negative_definite,
            k_max_eigenvalue: k.max_eigenvalue,
            k_min_eigenvalue: k.min_eigenvalue,
            kbar_negative_definite: kbar.negative_definite,
            kbar_max_eigenvalue: kbar.max_eigenvalue,
            kbar_min_eigenvalue: kbar.min_eigenvalue,
            ju_rank: diag.rank,
            ju_expected_rank: w.ju.nrows(),
            ju_condition: diag.condition_number,
            h0_norm: w.h.norm(),
        })
    }
}

/// Output of [`Scenario::gain_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub k_negative_definite: bool,
    pub k_max_eigenvalue: f64,
    pub k_min_eigenvalue: f64,
    pub kbar_negative_definite: bool,
    pub kbar_max_eigenvalue: f64,
    pub kbar_min_eigenvalue: f64,
    pub ju_rank: usize,
    pub ju_expected_rank: usize,
    pub ju_condition: f64,
    pub h0_norm: f64,
}

/// Mid-run failure: the trace up to this point is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub tick: u64,
    pub t: f64,
    pub kind: String,
    pub message: String,
}

impl FailureRecord {
    fn from_error(tick: u64, t: f64, e: &HerdError) -> Self {
        let kind = match e {
            HerdError::GuardViolation { .. } => "guard_violation",
            HerdError::RankDeficient { .. } => "rank_deficient",
            HerdError::DegenerateAngle { .. } => "degenerate_angle",
            HerdError::DegenerateBarrier { .. } => "degenerate_barrier",
            HerdError::NonFinite(_) => "non_finite",
            _ => "other",
        };
        FailureRecord { tick, t, kind: kind.into(), message: e.to_string() }
    }
}

/// Where exchange-round packets come from.
#[derive(Debug, Clone)]
pub enum PacketSource {
    Sense,
    /// Replay of a packet log keyed by tick.
    Log(BTreeMap<u32, Vec<MeasurementPacket>>),
}

struct Snapshot {
    basis: Vec<Vec2>,
    cohesion: DVector<f64>,
    h_meas_ref: DVector<f64>,
}

/// Per-herder decision state. With perfect feedback a single brain drives
/// every herder.
struct Brain {
    belief: Option<EstimatorBelief>,
    theta_hat: Vec<f64>,
    fd_y: FiniteDifference,
    fd_h: FiniteDifference,
    prev: Option<Snapshot>,
    h_tilde: Vec<f64>,
    switch: SwitchDetector,
}

impl Brain {
    fn reset_adaptation(&mut self) {
        self.fd_y.reset();
        self.fd_h.reset();
        self.prev = None;
    }
}

struct HerdingEval {
    w: WorkingEquation,
    parts_basis: Vec<Vec2>,
    cohesion: DVector<f64>,
    u_dot: DVector<f64>,
    diag: Option<ExistenceDiagnostics>,
}

fn group_centroids(x: &HerdState, groups: &[Vec<usize>]) -> HerdState {
    Positions(groups.iter().map(|g| g.iter().map(|&j| x[j]).sum::<Vec2>() / g.len() as f64).collect())
}

fn saturate_flat(v: &DVector<f64>, v_max: f64) -> DVector<f64> {
    let mut out = v.clone();
    for k in 0..v.len() / 2 {
        let s = saturate(Vec2::new(v[2 * k], v[2 * k + 1]), v_max);
        out[2 * k] = s.x;
        out[2 * k + 1] = s.y;
    }
    out
}

/// Splits the herd into `targets.len()` near-equal groups by position along
/// the axis from the first target to the last.
pub fn partition_along(x: &HerdState, targets: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let k = targets.len();
    let (a, b) = (targets[0], targets[k - 1]);
    let axis = Vec2::new(b[0] - a[0], b[1] - a[1]);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].dot(&axis).total_cmp(&x[j].dot(&axis)).then(i.cmp(&j)));
    (0..k).map(|g| order[g * x.len() / k..(g + 1) * x.len() / k].to_vec()).collect()
}

/// A running closed-loop simulation.
pub struct Simulation {
    sc: Scenario,
    model: HerdModel,
    gains: GainSet,
    reference: ReferenceSignal,
    groups: Option<Vec<Vec<usize>>>,
    ctrl_model: HerdModel,
    split_done: bool,
    tick: u64,
    x: HerdState,
    u: InputState,
    phase: Phase,
    brains: Vec<Brain>,
    packet_source: PacketSource,
    packet_log: Vec<MeasurementPacket>,
    lm_failures: usize,
    herding_start: Option<f64>,
    switch_spacing: Option<SpacingReport>,
}

impl Simulation {
    pub fn new(sc: Scenario) -> Result<Self> {
        Self::with_packets(sc, PacketSource::Sense)
    }

    pub fn with_packets(sc: Scenario, packet_source: PacketSource) -> Result<Self> {
        sc.validate()?;
        let model = sc.model()?;
        let gains = sc.gains.to_gain_set();
        let reference = make_reference(&sc.reference)?;
        let groups = sc.initial_groups();
        let ctrl_model = match (&sc.centroid, &groups) {
            (Some(c), Some(g)) => HerdModel::new(vec![c.virtual_evader.clone(); g.len()], sc.dynamics)?,
            _ => model.clone(),
        };
        let theta0 = sc.theta_hat0.clone().unwrap_or_else(|| ctrl_model.thetas());
        let x = Positions::from_pairs(&sc.x0);
        let u = Positions::from_pairs(&sc.u0);
        let make_brain = |belief| Brain {
            belief,
            theta_hat: theta0.clone(),
            fd_y: FiniteDifference::default(),
            fd_h: FiniteDifference::default(),
            prev: None,
            h_tilde: Vec::new(),
            switch: SwitchDetector::default(),
        };
        let brains = match &sc.estimator {
            None => vec![make_brain(None)],
            Some(cfg) => {
                let truth = DVector::from_iterator(
                    2 * (sc.m() + sc.n()),
                    sc.x0.iter().chain(&sc.u0).flat_map(|p| p.iter().copied()),
                );
                let dim = truth.len();
                let cov = DMatrix::identity(dim, dim) * (cfg.init_scale * cfg.r);
                (0..sc.n())
                    .map(|i| {
                        let mut rng = stream_rng(sc.seed, sc.n() + i, u64::MAX / 2);
                        let noise = DVector::from_iterator(
                            dim,
                            (0..dim).map(|_| {
                                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                                z * cfg.r.sqrt()
                            }),
                        );
                        Ok(make_brain(Some(EstimatorBelief::new(&truth + noise, cov.clone(), cfg)?)))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let phase = if sc.caging.is_some() { Phase::Caging } else { Phase::Herding };
        let herding_start = if phase == Phase::Herding { Some(0.0) } else { None };
        Ok(Simulation {
            model,
            gains,
            reference,
            groups,
            ctrl_model,
            split_done: false,
            tick: 0,
            x,
            u,
            phase,
            brains,
            packet_source,
            packet_log: Vec::new(),
            lm_failures: 0,
            herding_start,
            switch_spacing: None,
            sc,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.sc.dt
    }

    pub fn state(&self) -> (&HerdState, &InputState) {
        (&self.x, &self.u)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Herder spacing measured at the caging-to-herding switch.
    pub fn switch_spacing(&self) -> Option<SpacingReport> {
        self.switch_spacing
    }

    fn controlled(&self, x: &HerdState) -> HerdState {
        match &self.groups {
            Some(g) => group_centroids(x, g),
            None => x.clone(),
        }
    }

    fn observation(&self, b: usize) -> (HerdState, InputState) {
        match &self.brains[b].belief {
            None => (self.x.clone(), self.u.clone()),
            Some(bel) => {
                let m2 = 2 * self.sc.m();
                let xi = bel.xi.as_slice();
                (Positions::from_slice(&xi[..m2]), Positions::from_slice(&xi[m2..]))
            }
        }
    }

    fn herding_eval(&self, theta: &[f64], y: &HerdState, u: &InputState, t: f64, check: bool) -> Result<HerdingEval> {
        let model = &self.ctrl_model;
        let parts = model.parts(y, u)?;
        let pj = model.part_jacobians(y, u)?;
        let f = combine_parts(&parts, theta);
        let (fx, fu) = combine_jacobians(&pj, theta);
        let w = assemble(f.clone(), fx, fu, &y.to_flat(), &self.reference, t, &self.gains);
        let diag = if check {
            let d = existence_diagnostics(&w);
            if d.rank < w.ju.nrows() {
                return Err(HerdError::RankDeficient { rank: d.rank, expected: w.ju.nrows() });
            }
            Some(d)
        } else {
            None
        };
        let rhs = h_star(&self.gains.k_h, &w.h) - &w.jx * &f;
        let u_dot = damped_right_solve(&w.ju, &rhs, self.gains.lambda_pinv)
            .ok_or(HerdError::RankDeficient { rank: 0, expected: w.ju.nrows() })?;
        if u_dot.iter().any(|v| !v.is_finite()) {
            return Err(HerdError::NonFinite("input rate"));
        }
        let cohesion = DVector::from_iterator(2 * parts.cohesion.len(), parts.cohesion.iter().flat_map(|c| [c.x, c.y]));
        Ok(HerdingEval { w, parts_basis: parts.repulsion, cohesion, u_dot, diag })
    }

    /// Herder velocities (saturated, all herders) that brain-side prediction
    /// attributes to the current phase.
    fn predicted_herder_velocity(&self, theta: &[f64], x: &HerdState, u: &InputState, t: f64) -> Result<DVector<f64>> {
        match self.phase {
            Phase::Caging => {
                let cfg = self.sc.caging.as_ref().expect("caging phase has a config");
                let (vel, _) =
                    caging_velocity(x, u, cfg, self.sc.dt, self.sc.dynamics.v_max, self.sc.dynamics.guard_radius)?;
                Ok(DVector::from_iterator(2 * vel.len(), vel.iter().flat_map(|v| [v.x, v.y])))
            }
            Phase::Herding => {
                let y = self.controlled(x);
                let e = self.herding_eval(theta, &y, u, t, false)?;
                Ok(saturate_flat(&e.u_dot, self.sc.dynamics.v_max))
            }
        }
    }

    fn apply_split(&mut self) -> Result<()> {
        let Some(split) = self.sc.centroid.as_ref().and_then(|c| c.split.clone()) else {
            return Ok(());
        };
        if self.split_done || self.time() + 1e-12 < split.at {
            return Ok(());
        }
        let virt = self.sc.centroid.as_ref().expect("split implies centroid").virtual_evader.clone();
        self.ctrl_model = HerdModel::new(vec![virt; split.targets.len()], self.sc.dynamics)?;
        self.reference = ReferenceSignal::Static(flatten_pairs(&split.targets));
        let groups =
            if split.groups.is_empty() { partition_along(&self.x, &split.targets) } else { split.groups.clone() };
        self.groups = Some(groups);
        let th = self.ctrl_model.thetas();
        for b in &mut self.brains {
            b.theta_hat = th.clone();
            b.reset_adaptation();
        }
        self.split_done = true;
        Ok(())
    }

    fn exchange_round(&mut self) -> Result<()> {
        let Some(cfg) = self.sc.estimator else {
            return Ok(());
        };
        if !self.tick.is_multiple_of(cfg.every as u64) {
            return Ok(());
        }
        let tick = self.tick as u32;
        let packets: Vec<MeasurementPacket> = match &self.packet_source {
            PacketSource::Sense => (0..self.sc.n())
                .map(|i| {
                    let r = &self.brains[i].belief.as_ref().expect("estimator brains carry beliefs").r;
                    let mut rng = stream_rng(self.sc.seed, i, self.tick);
                    sense(&self.x.0, &self.u.0, i, cfg.sense_radius, r, tick, &mut rng)
                })
                .collect(),
            PacketSource::Log(log) => log.get(&tick).cloned().unwrap_or_default(),
        };
        let neighbors = topology(&self.u.0, cfg.comm_radius);
        let beliefs: Vec<EstimatorBelief> =
            self.brains.iter().map(|b| b.belief.clone().expect("estimator brains carry beliefs")).collect();
        for (b, nb) in self.brains.iter_mut().zip(fuse(&beliefs, &packets, &neighbors)) {
            b.belief = Some(nb);
        }
        self.packet_log.extend(packets);
        Ok(())
    }

    /// One adaptation update from the measured controlled coordinates.
    fn adapt(&mut self, b: usize, y: &HerdState, eval: &HerdingEval, u_dot_applied: &DVector<f64>, t: f64) {
        let dt = self.sc.dt;
        let v_max = self.sc.dynamics.v_max;
        let y_flat = y.to_flat();
        let x_tilde = &y_flat - self.reference.position(t);
        let h_ref = f_star(&self.gains.k_f, &x_tilde) + self.reference.velocity(t);
        let cfg = self.sc.adapt;
        let k_theta = self.gains.k_theta.clone();
        let brain = &mut self.brains[b];
        let snapshot = Snapshot { basis: eval.parts_basis.clone(), cohesion: eval.cohesion.clone(), h_meas_ref: h_ref };
        let prev = brain.prev.replace(snapshot);
        let Some(y_dot) = brain.fd_y.update(&y_flat, dt) else {
            return;
        };
        let Some(prev) = prev else {
            return;
        };
        // mismatch of the previous tick, seen through the current estimate
        let mut x_dot_hat_prev = prev.cohesion.clone();
        for (j, g) in prev.basis.iter().enumerate() {
            x_dot_hat_prev[2 * j] += brain.theta_hat[j] * g.x;
            x_dot_hat_prev[2 * j + 1] += brain.theta_hat[j] * g.y;
        }
        let h_tilde = &y_dot - &x_dot_hat_prev;
        brain.h_tilde = h_tilde.iter().copied().collect();
        let h_meas = &y_dot - &prev.h_meas_ref;
        let Some(h_dot) = brain.fd_h.update(&h_meas, dt) else {
            return;
        };
        let hts = h_tilde_star(&k_theta, &h_tilde, &h_dot, &eval.w.jx, &y_dot, &x_dot_hat_prev);
        let out = theta_rate(&hts, &eval.w.jx, &x_dot_hat_prev, &eval.w.ju, u_dot_applied, &prev.basis, &cfg);
        for (j, r) in out.rate.iter().enumerate() {
            let speed = Vec2::new(y_dot[2 * j], y_dot[2 * j + 1]).norm();
            if speed >= v_max * (1.0 - 1e-9) {
                continue;
            }
            brain.theta_hat[j] = (brain.theta_hat[j] + dt * r).max(cfg.theta_min);
        }
    }

    fn truth_margins(&self) -> Result<f64> {
        let cfg = self.sc.caging.as_ref().expect("caging config");
        let (_, margins) =
            caging_velocity(&self.x, &self.u, cfg, self.sc.dt, self.sc.dynamics.v_max, self.sc.dynamics.guard_radius)?;
        Ok(margins.into_iter().fold(f64::INFINITY, f64::min))
    }

    fn owner(&self, herder: usize) -> usize {
        if self.brains.len() == 1 {
            0
        } else {
            herder
        }
    }

    fn rk4_rates(&self, x: &HerdState, u: &InputState, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let y = self.controlled(x);
        let e = self.herding_eval(&self.brains[0].theta_hat, &y, u, t, false)?;
        let xd = self.model.eval_herd(x, u)?.to_flat();
        Ok((xd, saturate_flat(&e.u_dot, self.sc.dynamics.v_max)))
    }

    /// Computes the action at the current state, logs it and advances one tick.
    pub fn step(&mut self) -> Result<TraceRecord> {
        self.apply_split()?;
        self.exchange_round()?;
        let t = self.time();
        let dt = self.sc.dt;
        let v_max = self.sc.dynamics.v_max;
        let n = self.sc.n();
        let mut u_dot = DVector::zeros(2 * n);
        let mut record_h = Vec::new();
        let mut rank = 0;
        let mut condition = f64::NAN;
        let mut k_margin = f64::NAN;
        let mut barrier_min = f64::NAN;
        let mut switch_now = false;

        match self.phase {
            Phase::Caging => {
                barrier_min = self.truth_margins()?;
                let cfg = *self.sc.caging.as_ref().expect("caging config");
                let mut all_ready = true;
                for b in 0..self.brains.len() {
                    let (xo, uo) = self.observation(b);
                    let (vel, _) = caging_velocity(&xo, &uo, &cfg, dt, v_max, self.sc.dynamics.guard_radius)?;
                    for i in 0..n {
                        if self.owner(i) == b {
                            u_dot[2 * i] = vel[i].x;
                            u_dot[2 * i + 1] = vel[i].y;
                        }
                    }
                    let spacing = spacing_report(&uo, &herd_ellipse(&xo), cfg.mu1);
                    all_ready &= self.brains[b].switch.update(&spacing, &cfg);
                }
                if all_ready {
                    switch_now = true;
                    self.switch_spacing = Some(spacing_report(&self.u, &herd_ellipse(&self.x), cfg.mu1));
                }
            }
            Phase::Herding if self.sc.mode == ControllerMode::LmBaseline => {
                let y = self.controlled(&self.x);
                let theta = self.brains[0].theta_hat.clone();
                let model = self.ctrl_model.with_thetas(&theta);
                match lm_solve(&model, &y, &self.u, &self.reference, t, &self.gains, &self.sc.lm) {
                    Ok(sol) => self.u = sol.u,
                    Err(HerdError::NoConvergence { .. }) => self.lm_failures += 1,
                    Err(e) => return Err(e),
                }
                let e = self.herding_eval(&theta, &y, &self.u, t, true)?;
                record_h = e.w.h.iter().copied().collect();
                let d = e.diag.expect("checked eval");
                rank = d.rank;
                condition = d.condition_number;
                k_margin =
                    check_k_negdef(&self.gains, &(y.to_flat() - self.reference.position(t)), &e.w.h).max_eigenvalue;
            }
            Phase::Herding => {
                for b in 0..self.brains.len() {
                    let (xo, uo) = self.observation(b);
                    let y = self.controlled(&xo);
                    let theta = self.brains[b].theta_hat.clone();
                    let e = self.herding_eval(&theta, &y, &uo, t, true)?;
                    let applied = saturate_flat(&e.u_dot, v_max);
                    for i in 0..n {
                        if self.owner(i) == b {
                            u_dot[2 * i] = applied[2 * i];
                            u_dot[2 * i + 1] = applied[2 * i + 1];
                        }
                    }
                    if b == 0 {
                        record_h = e.w.h.iter().copied().collect();
                        let d = e.diag.expect("checked eval");
                        rank = d.rank;
                        condition = d.condition_number;
                        let x_tilde = y.to_flat() - self.reference.position(t);
                        k_margin = if self.sc.mode == ControllerMode::ImplicitAdaptive {
                            check_kbar_negdef(&self.gains, &e.w.jx, &x_tilde, &e.w.h).max_eigenvalue
                        } else {
                            check_k_negdef(&self.gains, &x_tilde, &e.w.h).max_eigenvalue
                        };
                    }
                    if self.sc.mode == ControllerMode::ImplicitAdaptive {
                        self.adapt(b, &y, &e, &applied, t);
                    }
                }
            }
        }

        let (rmse_e, rmse_h) = match self.sc.estimator {
            Some(_) => {
                let beliefs: Vec<EstimatorBelief> = self.brains.iter().filter_map(|b| b.belief.clone()).collect();
                let r = rmse(&beliefs, self.x.to_flat().as_slice(), self.u.to_flat().as_slice());
                (r.evaders_rmse, r.herders_rmse)
            }
            None => (f64::NAN, f64::NAN),
        };
        let y = self.controlled(&self.x);
        let record = TraceRecord {
            t,
            x: self.x.to_flat().iter().copied().collect(),
            u: self.u.to_flat().iter().copied().collect(),
            y: y.to_flat().iter().copied().collect(),
            x_ref: self.reference.position(t).iter().copied().collect(),
            h: record_h,
            h_tilde: if self.sc.mode == ControllerMode::ImplicitAdaptive {
                self.brains[0].h_tilde.clone()
            } else {
                Vec::new()
            },
            theta_hat: if self.sc.mode == ControllerMode::ImplicitAdaptive {
                self.brains[0].theta_hat.clone()
            } else {
                Vec::new()
            },
            phase: self.phase,
            rmse_evaders: rmse_e,
            rmse_herders: rmse_h,
            rank,
            condition,
            k_margin,
            barrier_min,
        };

        // advance the truth
        let use_rk4 = self.sc.integrator == Integrator::Rk4 && self.phase == Phase::Herding;
        if use_rk4 {
            let (x0, u0) = (self.x.to_flat(), self.u.to_flat());
            let at = |xv: &DVector<f64>, uv: &DVector<f64>, tt: f64| {
                self.rk4_rates(&Positions::from_flat(xv), &Positions::from_flat(uv), tt)
            };
            let (k1x, k1u) = at(&x0, &u0, t)?;
            let (k2x, k2u) = at(&(&x0 + &k1x * (dt / 2.0)), &(&u0 + &k1u * (dt / 2.0)), t + dt / 2.0)?;
            let (k3x, k3u) = at(&(&x0 + &k2x * (dt / 2.0)), &(&u0 + &k2u * (dt / 2.0)), t + dt / 2.0)?;
            let (k4x, k4u) = at(&(&x0 + &k3x * dt), &(&u0 + &k3u * dt), t + dt)?;
            self.x = Positions::from_flat(&(&x0 + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0)));
            self.u = Positions::from_flat(&(&u0 + (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0)));
        } else {
            let xd = self.model.eval_herd(&self.x, &self.u)?;
            let x_next = Positions(self.x.iter().zip(xd.iter()).map(|(p, v)| p + v * dt).collect());
            let u_next = Positions::from_flat(&(self.u.to_flat() + &u_dot * dt));
            self.x = x_next;
            self.u = u_next;
        }
        if !self.x.is_finite() || !self.u.is_finite() {
            return Err(HerdError::NonFinite("positions"));
        }

        // brain-side prediction of the next tick
        if self.sc.estimator.is_some() {
            for b in 0..self.brains.len() {
                let theta = self.brains[b].theta_hat.clone();
                let m2 = 2 * self.sc.m();
                let belief = self.brains[b].belief.as_ref().expect("estimator brains carry beliefs");
                let model = self.model.with_thetas(&self.prior_thetas(&theta));
                let xs = belief.xi.as_slice();
                let ud = self.predicted_herder_velocity(
                    &theta,
                    &Positions::from_slice(&xs[..m2]),
                    &Positions::from_slice(&xs[m2..]),
                    t,
                )?;
                // herder velocities are commanded from the belief, so they enter
                // the covariance step as a known input
                let field = |xi: &DVector<f64>| -> Result<DVector<f64>> {
                    let xs = xi.as_slice();
                    let xd = model.eval_herd(&Positions::from_slice(&xs[..m2]), &Positions::from_slice(&xs[m2..]))?;
                    let mut out = DVector::zeros(xi.len());
                    out.rows_mut(0, m2).copy_from(&xd.to_flat());
                    out.rows_mut(m2, ud.len()).copy_from(&ud);
                    Ok(out)
                };
                let rate = field(&belief.xi)?;
                let a = field_jacobian(&field, &belief.xi, &rate)?;
                let next = predict_with_jacobian(belief, &rate, &a, dt);
                self.brains[b].belief = Some(next);
            }
        }

        if switch_now {
            self.phase = Phase::Herding;
            self.herding_start = Some(self.time() + dt);
            for b in &mut self.brains {
                b.reset_adaptation();
            }
        }
        self.tick += 1;
        Ok(record)
    }

    /// Evader gains the herders assume when predicting the herd.
    fn prior_thetas(&self, theta_hat: &[f64]) -> Vec<f64> {
        if self.groups.is_none() && self.sc.mode == ControllerMode::ImplicitAdaptive {
            theta_hat.to_vec()
        } else {
            self.model.thetas()
        }
    }

    /// Logs the final state without advancing.
    fn final_record(&self) -> TraceRecord {
        let t = self.time();
        let y = self.controlled(&self.x);
        let mut rec = TraceRecord {
            t,
            x: self.x.to_flat().iter().copied().collect(),
            u: self.u.to_flat().iter().copied().collect(),
            y: y.to_flat().iter().copied().collect(),
            x_ref: self.reference.position(t).iter().copied().collect(),
            h: Vec::new(),
            h_tilde: Vec::new(),
            theta_hat: Vec::new(),
            phase: self.phase,
            rmse_evaders: f64::NAN,
            rmse_herders: f64::NAN,
            rank: 0,
            condition: f64::NAN,
            k_margin: f64::NAN,
            barrier_min: f64::NAN,
        };
        if self.sc.mode == ControllerMode::ImplicitAdaptive {
            rec.theta_hat = self.brains[0].theta_hat.clone();
            rec.h_tilde = self.brains[0].h_tilde.clone();
        }
        if self.phase == Phase::Herding {
            if let Ok(e) = self.herding_eval(&self.brains[0].theta_hat, &y, &self.u, t, true) {
                rec.h = e.w.h.iter().copied().collect();
                if let Some(d) = e.diag {
                    rec.rank = d.rank;
                    rec.condition = d.condition_number;
                }
            }
        } else if let Ok(b) = self.truth_margins() {
            rec.barrier_min = b;
        }
        if self.sc.estimator.is_some() {
            let beliefs: Vec<EstimatorBelief> = self.brains.iter().filter_map(|b| b.belief.clone()).collect();
            let r = rmse(&beliefs, &rec.x, &rec.u);
            rec.rmse_evaders = r.evaders_rmse;
            rec.rmse_herders = r.herders_rmse;
        }
        rec
    }

    pub fn packet_log(&self) -> &[MeasurementPacket] {
        &self.packet_log
    }

    /// Runs to the horizon, stopping early on a mid-run error.
    pub fn run(mut self) -> RunOutput {
        let warnings = self.sc.warnings();
        let mut trace = Vec::with_capacity(self.sc.ticks() + 1);
        let mut failure = None;
        for _ in 0..self.sc.ticks() {
            match self.step() {
                Ok(rec) => trace.push(rec),
                Err(e) => {
                    failure = Some(FailureRecord::from_error(self.tick, self.time(), &e));
                    break;
                }
            }
        }
        if failure.is_none() {
            trace.push(self.final_record());
        }
        let metrics = compute_metrics(&trace, &self.sc, self.herding_start, self.switch_spacing, self.lm_failures);
        RunOutput { trace, metrics, failure, warnings, packets: self.packet_log }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: MetricsReport,
    pub failure: Option<FailureRecord>,
    pub warnings: Vec<String>,
    pub packets: Vec<MeasurementPacket>,
}

pub fn run(sc: &Scenario) -> Result<RunOutput> {
    Ok(Simulation::new(sc.clone())?.run())
}

/// Centroid herding run; the scenario must carry a centroid section.
pub fn run_centroid(sc: &Scenario) -> Result<RunOutput> {
    if sc.centroid.is_none() {
        return Err(HerdError::Config("centroid run needs a centroid section".into()));
    }
    run(sc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Time from herding start until `‖x̃‖_∞` stays inside the band, s.
    pub settling_time: Option<f64>,
    /// Mean `‖x̃‖_∞` over the last tenth of the horizon, m.
    pub steady_state_error: f64,
    /// Mean over evaders of `‖x̃_j‖`, averaged over the last tenth of the horizon, m.
    pub herding_error: f64,
    /// Largest per-entity error at the final tick, m.
    pub final_error: f64,
    /// Log-linear slope of `‖h‖` over its transient, 1/s.
    pub h_decay_rate: Option<f64>,
    /// Time from herding start until `‖h‖` first drops by 10³, s.
    pub h_drop_time: Option<f64>,
    /// Log-linear slope of `‖x̃‖` after the `h` transient, 1/s.
    pub state_decay_rate: Option<f64>,
    /// Largest relative `θ̂` error at the final tick.
    pub theta_error_final: Option<f64>,
    /// `(t, evader RMSE, herder RMSE)` per tick.
    pub rmse_curve: Vec<(f64, f64, f64)>,
    /// Smallest barrier margin over the caging phase, m.
    pub min_barrier_value: Option<f64>,
    pub herding_start: Option<f64>,
    pub switch_spacing: Option<SpacingReportSer>,
    pub lm_failures: usize,
    /// Largest per-tick displacement of any body, m.
    pub max_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingReportSer {
    pub max_radial_error: f64,
    pub max_gap_deviation_deg: f64,
    pub gap_std_deg: f64,
}

impl From<SpacingReport> for SpacingReportSer {
    fn from(s: SpacingReport) -> Self {
        SpacingReportSer {
            max_radial_error: s.max_radial_error,
            max_gap_deviation_deg: s.max_gap_deviation_deg,
            gap_std_deg: s.gap_std_deg,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Least-squares slope of `ln v` against `t`.
pub fn log_linear_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, v)| *v > 0.0).map(|(t, v)| (*t, v.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// First time after which `values` stays within `band·values[0]`, relative
/// to `times[0]`.
pub fn settling_time(times: &[f64], values: &[f64], band: f64) -> Option<f64> {
    let first = *values.first()?;
    let limit = band * first;
    let last_out = values.iter().rposition(|v| *v > limit);
    match last_out {
        None => Some(0.0),
        Some(k) if k + 1 < values.len() => Some(times[k + 1] - times[0]),
        Some(_) => None,
    }
}

pub fn compute_metrics(
    trace: &[TraceRecord],
    sc: &Scenario,
    herding_start: Option<f64>,
    switch_spacing: Option<SpacingReport>,
    lm_failures: usize,
) -> MetricsReport {
    let herding: Vec<&TraceRecord> = match herding_start {
        Some(t0) => trace.iter().filter(|r| r.t >= t0 - 1e-9 && r.phase == Phase::Herding).collect(),
        None => Vec::new(),
    };
    // a group re-partition changes the controlled dimension; metrics follow the first block
    let dim0 = herding.first().map(|r| r.y.len()).unwrap_or(0);
    let block: Vec<&TraceRecord> = herding.iter().take_while(|r| r.y.len() == dim0).copied().collect();
    let times: Vec<f64> = block.iter().map(|r| r.t).collect();
    let errs: Vec<f64> = block.iter().map(|r| max_entity_norm(&r.error())).collect();
    let settling = settling_time(&times, &errs, sc.settling_band);

    let tail_from = sc.horizon * 0.9;
    let tail: Vec<&TraceRecord> = herding.iter().filter(|r| r.t >= tail_from).copied().collect();
    let tail_mean = |g: &dyn Fn(&TraceRecord) -> f64| {
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(|r| g(r)).sum::<f64>() / tail.len() as f64
        }
    };
    let steady_state_error = tail_mean(&|r| max_entity_norm(&r.error()));
    let herding_error = tail_mean(&|r| mean_entity_norm(&r.error()));
    let final_error = trace.last().map(|r| max_entity_norm(&r.error())).unwrap_or(f64::NAN);

    let hn: Vec<(f64, f64)> = block.iter().filter(|r| !r.h.is_empty()).map(|r| (r.t, norm(&r.h))).collect();
    let (h_decay_rate, h_drop_time, drop_t) = match hn.first() {
        Some(&(t0, h0)) if h0 > 0.0 => {
            let drop = hn.iter().find(|(_, v)| *v <= 1e-3 * h0).map(|p| p.0);
            let end = drop.unwrap_or(f64::INFINITY);
            let seg: Vec<(f64, f64)> = hn.iter().filter(|p| p.0 <= end).copied().collect();
            (log_linear_slope(&seg), drop.map(|d| d - t0), drop)
        }
        _ => (None, None, None),
    };
    let state_decay_rate = drop_t.and_then(|td| {
        let seg: Vec<(f64, f64)> = block
            .iter()
            .filter(|r| r.t >= td)
            .map(|r| (r.t, norm(&r.error())))
            .take_while(|(_, v)| *v > 1e-6)
            .collect();
        log_linear_slope(&seg)
    });

    let theta_error_final = trace.last().filter(|r| !r.theta_hat.is_empty()).map(|r| {
        let truth: Vec<f64> = match &sc.centroid {
            Some(c) => vec![c.virtual_evader.theta; r.theta_hat.len()],
            None => sc.evaders.iter().map(|e| e.theta).collect(),
        };
        r.theta_hat.iter().zip(&truth).map(|(h, t)| (h - t).abs() / t).fold(0.0, f64::max)
    });

    let rmse_curve = if sc.estimator.is_some() {
        trace.iter().map(|r| (r.t, r.rmse_evaders, r.rmse_herders)).collect()
    } else {
        Vec::new()
    };
    let min_barrier_value = trace
        .iter()
        .filter(|r| r.phase == Phase::Caging && r.barrier_min.is_finite())
        .map(|r| r.barrier_min)
        .reduce(f64::min);
    let max_step = trace
        .windows(2)
        .map(|w| {
            let a = w[0].x.iter().chain(&w[0].u).copied().collect::<Vec<_>>();
            let b = w[1].x.iter().chain(&w[1].u).copied().collect::<Vec<_>>();
            a.chunks_exact(2).zip(b.chunks_exact(2)).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    MetricsReport {
        settling_time: settling,
        steady_state_error,
        herding_error,
        final_error,
        h_decay_rate,
        h_drop_time,
        state_decay_rate,
        theta_error_final,
        rmse_curve,
        min_barrier_value,
        herding_start,
        switch_spacing: switch_spacing.map(Into::into),
        lm_failures,
        max_step,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_on_one(u0: [f64; 2], target: [f64; 2]) -> Scenario {
        Scenario {
            name: "1v1".into(),
            evaders: vec![EvaderParams::inverse(1.0)],
            dynamics: DynamicsConfig::default(),
            x0: vec![[0.0, 0.0]],
            u0: vec![u0],
            reference: ReferenceSpec::Static { targets: vec![target] },
            gains: GainSpec::default(),
            mode: ControllerMode::Implicit,
            theta_hat0: None,
            adapt: AdaptConfig::default(),
            lm: LmConfig::default(),
            estimator: None,
            caging: None,
            centroid: None,
            dt: 0.01,
            horizon: 0.05,
            seed: 0,
            integrator: Integrator::Euler,
            settling_band: 0.05,
        }
    }

    #[test]
    fn equilibrium_is_stationary() {
        // symmetric herders cancel, and the evader already sits on its target
        let mut sc = one_on_one([-1.0, 0.0], [0.0, 0.0]);
        sc.u0.push([1.0, 0.0]);
        for dt in [0.01, 0.02] {
            sc.dt = dt;
            let mut sim = Simulation::new(sc.clone()).unwrap();
            for _ in 0..3 {
                let rec = sim.step().unwrap();
                assert_eq!(norm(&rec.h), 0.0);
            }
            let (x, u) = sim.state();
            assert_eq!(x.to_pairs(), sc.x0);
            assert_eq!(u.to_pairs(), sc.u0);
        }
    }

    #[test]
    fn single_euler_step_matches_hand_propagation() {
        let sc = one_on_one([-1.0, 0.5], [2.0, 1.0]);
        let model = sc.model().unwrap();
        let x = Positions::from_pairs(&sc.x0);
        let u = Positions::from_pairs(&sc.u0);
        let gains = GainSet::default();
        let reference = make_reference(&sc.reference).unwrap();
        let w = crate::controller::compute_h(&model, &x, &u, &reference, 0.0, &gains).unwrap();
        let f = model.velocity_unsaturated(&x, &u).unwrap().to_flat();
        let ud = crate::controller::input_rate(&w, &f, &gains).unwrap();
        let ud = saturate(Vec2::new(ud[0], ud[1]), 0.4);
        let xd = model.eval_herd(&x, &u).unwrap();
        let mut sim = Simulation::new(sc).unwrap();
        sim.step().unwrap();
        let (x1, u1) = sim.state();
        assert_relative_eq!(x1[0], x[0] + xd[0] * 0.01, epsilon = 1e-15);
        assert_relative_eq!(u1[0], u[0] + ud * 0.01, epsilon = 1e-15);
    }

    #[test]
    fn settling_time_of_exponential() {
        let t: Vec<f64> = (0..3000).map(|k| k as f64 * 0.01).collect();
        let v: Vec<f64> = t.iter().map(|t| (-0.25 * t).exp()).collect();
        let st = settling_time(&t, &v, 0.05).unwrap();
        assert_relative_eq!(st, (20f64).ln() / 0.25, epsilon = 0.011);
        assert_relative_eq!(
            log_linear_slope(&t.iter().copied().zip(v).collect::<Vec<_>>()).unwrap(),
            -0.25,
            epsilon = 1e-9
        );
    }

    #[test]
    fn never_settling_is_none() {
        assert_eq!(settling_time(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 0.05), None);
        assert_eq!(settling_time(&[0.0, 1.0], &[1.0, 0.01], 0.05), Some(1.0));
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut sc = one_on_one([-2.0, 0.0], [1.0, 0.0]);
        sc.dt = 0.0;
        assert!(sc.validate().is_err());
        let mut sc = one_on_one([-2.0, 0.0], [1.0, 0.0]);
        sc.reference = ReferenceSpec::Static { targets: vec![] };
        assert!(sc.validate().is_err());
        let mut sc = one_on_one([-2.0, 0.0], [1.0, 0.0]);
        sc.integrator = Integrator::Rk4;
        sc.mode = ControllerMode::LmBaseline;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn static_reference_has_zero_velocity() {
        let r = make_reference(&ReferenceSpec::Static { targets: vec![[1.0, 2.0]] }).unwrap();
        assert_eq!(r.velocity(3.0), DVector::zeros(2));
    }

    #[test]
    fn sinusoid_velocity_at_start() {
        let r =
            make_reference(&ReferenceSpec::Sinusoid { origin: vec![[0.0, 0.0]], speed: vec![0.05], omega: vec![0.1] })
                .unwrap();
        let v = r.velocity(0.0);
        assert_relative_eq!(v[0], 0.05);
        assert_relative_eq!(v[1], 0.5 * 0.1, epsilon = 1e-15);
    }
}
