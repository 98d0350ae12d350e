//! Seeded scenario generators for the standard experiments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptConfig;
use crate::baseline::{lm_solve, LmConfig};
use crate::caging::CagingConfig;
use crate::controller::{GainSet, ReferenceSignal};
use crate::dynamics::{DynamicsConfig, EvaderParams, HerdModel, Positions, Vec2};
use crate::error::{HerdError, Result};
use crate::estimator::EstimatorConfig;
use crate::sim::{CentroidSpec, ControllerMode, GainSpec, Integrator, ReferenceSpec, Scenario, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HerdKind {
    Inverse,
    Exponential,
}

impl HerdKind {
    pub fn params(&self) -> EvaderParams {
        match self {
            HerdKind::Inverse => EvaderParams::standard_inverse(),
            HerdKind::Exponential => EvaderParams::standard_exponential(),
        }
    }
}

/// Seeds whose 5v5 layouts are used by the shipped examples and tests.
pub const INVERSE_5V5_SEED: u64 = 17;
pub const EXPONENTIAL_5V5_SEED: u64 = 297;

/// Distance each Exponential herder starts outward from its evader, m.
const EXPONENTIAL_STANDOFF: f64 = 1.0;

fn base_scenario(
    name: String,
    evaders: Vec<EvaderParams>,
    x0: Vec<[f64; 2]>,
    u0: Vec<[f64; 2]>,
    reference: ReferenceSpec,
) -> Scenario {
    Scenario {
        name,
        evaders,
        dynamics: DynamicsConfig::default(),
        x0,
        u0,
        reference,
        gains: GainSpec::default(),
        mode: ControllerMode::Implicit,
        theta_hat0: None,
        adapt: AdaptConfig::default(),
        lm: LmConfig::default(),
        estimator: None,
        caging: None,
        centroid: None,
        dt: 0.01,
        horizon: 30.0,
        seed: 0,
        integrator: Integrator::Euler,
        settling_band: 0.05,
    }
}

fn pairs(p: &Positions) -> Vec<[f64; 2]> {
    p.to_pairs()
}

/// Five evaders with targets spread over a 5×5 m square, each starting up to
/// 0.5 m per axis off its target, and five herders at a root of the working
/// equation found from a ring at 1.5× the herd radius, nudged by up to 2 cm.
pub fn layout_5v5(kind: HerdKind, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<Vec2> = Vec::new();
    while targets.len() < 5 {
        let c = Vec2::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        if targets.iter().all(|q| (q - c).norm() > 1.0) {
            targets.push(c);
        }
    }
    let x0 = Positions(
        targets.iter().map(|c| c + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.5).collect(),
    );
    let center = x0.mean();
    let radius = x0.iter().map(|q| (q - center).norm()).fold(1.0, f64::max);
    let phase = rng.random_range(0.0..2.0 * PI);
    let ring = Positions(
        (0..5)
            .map(|i| {
                let a = phase + 2.0 * PI * i as f64 / 5.0;
                center + Vec2::new(a.cos(), a.sin()) * 1.5 * radius
            })
            .collect(),
    );
    let params = vec![kind.params(); 5];
    let model = HerdModel::new(params.clone(), DynamicsConfig::default())?;
    let start = match kind {
        HerdKind::Inverse => ring,
        HerdKind::Exponential => Positions(
            x0.iter()
                .map(|p| {
                    let d = p - center;
                    let dir = if d.norm() > 0.1 { d / d.norm() } else { Vec2::new(phase.cos(), phase.sin()) };
                    p + dir * EXPONENTIAL_STANDOFF
                })
                .collect(),
        ),
    };
    let target_pos = Positions(targets);
    let reference = ReferenceSignal::Static(target_pos.to_flat());
    let lm = LmConfig { max_iters: 500, ..Default::default() };
    let root = lm_solve(&model, &x0, &start, &reference, 0.0, &GainSet::default(), &lm)?.u;
    let u0 = Positions(
        root.iter().map(|p| p + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.02).collect(),
    );
    let name = format!("5v5-{}-{seed}", if kind == HerdKind::Inverse { "inverse" } else { "exponential" });
    let mut sc =
        base_scenario(name, params, pairs(&x0), pairs(&u0), ReferenceSpec::Static { targets: pairs(&target_pos) });
    sc.seed = seed;
    Ok(sc)
}

pub fn inverse_5v5() -> Scenario {
    layout_5v5(HerdKind::Inverse, INVERSE_5V5_SEED).expect("pinned inverse layout")
}

pub fn exponential_5v5() -> Scenario {
    layout_5v5(HerdKind::Exponential, EXPONENTIAL_5V5_SEED).expect("pinned exponential layout")
}

/// Three evaders (two Inverse, one Exponential) on a triangle of radius 8.8 m
/// with three herders starting far away at seeded random positions; caging
/// precedes herding along sinusoidal references. The radius keeps the `μ1`
/// ring about 1 m clear of the barrier; on tighter herds a herder waiting on
/// the ring can flatten the herd until the ring falls inside the barrier.
pub fn caging_3v3(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = [[0.0, 8.8], [-7.59, -4.4], [7.59, -4.4]];
    let mut u0 = Vec::new();
    while u0.len() < 3 {
        let a = rng.random_range(0.0..2.0 * PI);
        let r = rng.random_range(30.0..40.0);
        let p = [r * a.cos(), r * a.sin()];
        if u0.iter().all(|q: &[f64; 2]| (q[0] - p[0]).hypot(q[1] - p[1]) > 5.0) {
            u0.push(p);
        }
    }
    let evaders =
        vec![EvaderParams::standard_inverse(), EvaderParams::standard_exponential(), EvaderParams::standard_inverse()];
    let reference = ReferenceSpec::Sinusoid { origin: x0.to_vec(), speed: vec![0.05; 3], omega: vec![0.05, 0.1, 0.02] };
    let mut sc = base_scenario(format!("caging-3v3-{seed}"), evaders, x0.to_vec(), u0, reference);
    sc.caging = Some(CagingConfig::default());
    sc.horizon = 300.0;
    sc.seed = seed;
    sc
}

/// Fifty cohesive Inverse evaders driven as one centroid by five herders,
/// then split at t = 50 s into the halves nearest each of two targets. The
/// targets sit 1.5 m apart; wider gaps lose rank mid-split. Adaptation absorbs
/// the gap between the centroid's motion and the single-evader model.
pub fn centroid_50v5(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0: Vec<Vec2> = Vec::new();
    while x0.len() < 50 {
        let p = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        if x0.iter().all(|q| (q - p).norm() > 0.3) {
            x0.push(p);
        }
    }
    let u0: Vec<[f64; 2]> = (0..5)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 5.0;
            [3.5 * a.cos(), 3.5 * a.sin()]
        })
        .collect();
    let evader = EvaderParams::standard_inverse().with_cohesion(2e-4);
    let x0p = Positions(x0);
    let mut sc = base_scenario(
        format!("centroid-50v5-{seed}"),
        vec![evader; 50],
        pairs(&x0p),
        u0,
        ReferenceSpec::Static { targets: vec![[2.0, 1.0]] },
    );
    sc.centroid = Some(CentroidSpec {
        virtual_evader: EvaderParams::standard_inverse(),
        groups: Vec::new(),
        split: Some(SplitSpec { at: 50.0, groups: Vec::new(), targets: vec![[1.25, 1.0], [2.75, 1.0]] }),
    });
    sc.mode = ControllerMode::ImplicitAdaptive;
    sc.horizon = 150.0;
    sc.seed = seed;
    sc
}

/// One Inverse evader at its target between two mirrored herders: the
/// repulsions cancel, so the run starts and stays at equilibrium.
pub fn equilibrium_1v2() -> Scenario {
    let mut sc = base_scenario(
        "equilibrium-1v2".into(),
        vec![EvaderParams::standard_inverse()],
        vec![[1.0, 2.0]],
        vec![[-0.5, 2.0], [2.5, 2.0]],
        ReferenceSpec::Static { targets: vec![[1.0, 2.0]] },
    );
    sc.horizon = 5.0;
    sc
}

/// Fixtures shipped as JSON configs, keyed by file stem.
pub fn catalog() -> Vec<(&'static str, Scenario)> {
    let with_dkf = |mut sc: Scenario| {
        sc.estimator = Some(EstimatorConfig::default());
        sc.name.push_str("-dkf");
        sc
    };
    let with_lm = |mut sc: Scenario| {
        sc.mode = ControllerMode::LmBaseline;
        sc.name.push_str("-lm");
        sc
    };
    let with_adapt = |mut sc: Scenario| {
        sc.mode = ControllerMode::ImplicitAdaptive;
        sc.theta_hat0 = Some(sc.evaders.iter().map(|e| 0.75 * e.theta).collect());
        sc.name.push_str("-adaptive");
        sc
    };
    vec![
        ("inverse-5v5", inverse_5v5()),
        ("inverse-5v5-lm", with_lm(inverse_5v5())),
        ("inverse-5v5-adaptive", with_adapt(inverse_5v5())),
        ("inverse-5v5-dkf", with_dkf(inverse_5v5())),
        ("exponential-5v5", exponential_5v5()),
        ("exponential-5v5-lm", with_lm(exponential_5v5())),
        ("exponential-5v5-adaptive", with_adapt(exponential_5v5())),
        ("exponential-5v5-dkf", with_dkf(exponential_5v5())),
        ("caging-3v3", caging_3v3(0)),
        ("centroid-50v5", centroid_50v5(0)),
        ("equilibrium-1v2", equilibrium_1v2()),
    ]
}

/// Checks that a generator produced something runnable.
pub fn check(sc: &Scenario) -> Result<()> {
    sc.validate().map_err(|e| HerdError::Config(format!("{}: {e}", sc.name)))
}
