use serde::{Deserialize, Serialize};

/// Which branch of the herding sequence produced a tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Caging,
    Herding,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Caging => "caging",
            Phase::Herding => "herding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "caging" => Some(Phase::Caging),
            "herding" => Some(Phase::Herding),
            _ => None,
        }
    }
}

/// One logged tick of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    /// True evader positions, flat.
    pub x: Vec<f64>,
    /// True herder positions, flat.
    pub u: Vec<f64>,
    /// Controlled coordinates: the evaders themselves, or group centroids.
    pub y: Vec<f64>,
    /// Reference for `y`.
    pub x_ref: Vec<f64>,
    /// Working equation seen by the controller (empty during caging).
    pub h: Vec<f64>,
    /// Model mismatch estimate `h̃` (empty without adaptation).
    pub h_tilde: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub phase: Phase,
    /// Estimator RMSE averaged over herders; NaN with perfect feedback.
    pub rmse_evaders: f64,
    pub rmse_herders: f64,
    pub rank: usize,
    pub condition: f64,
    /// Largest eigenvalue of the stability test matrix (negative is good).
    pub k_margin: f64,
    /// Smallest barrier value over herders (NaN outside caging).
    pub barrier_min: f64,
}

impl TraceRecord {
    pub fn m(&self) -> usize {
        self.x.len() / 2
    }

    pub fn n(&self) -> usize {
        self.u.len() / 2
    }

    /// Controlled-coordinate error `y − x*`.
    pub fn error(&self) -> Vec<f64> {
        self.y.iter().zip(&self.x_ref).map(|(a, b)| a - b).collect()
    }
}

/// Largest per-entity Euclidean norm in a flat position vector.
pub fn max_entity_norm(flat: &[f64]) -> f64 {
    flat.chunks_exact(2).map(|c| c[0].hypot(c[1])).fold(0.0, f64::max)
}

pub fn mean_entity_norm(flat: &[f64]) -> f64 {
    let count = flat.len() / 2;
    if count == 0 {
        return 0.0;
    }
    flat.chunks_exact(2).map(|c| c[0].hypot(c[1])).sum::<f64>() / count as f64
}
