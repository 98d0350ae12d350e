//! Extended distributed Kalman filter in information form over the joint
//! vector `ξ = (x, u)`.
//!
//! Each herder predicts its own belief through the expanded closed-loop field,
//! senses the entities within `d_m`, and fuses the information of its own
//! packet plus the packets of every herder within `d_c`. Packets always carry
//! the full `2(m+n)` coordinates; a boolean mask marks the rows that were
//! actually sensed.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec2;
use crate::error::{HerdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Process noise intensity: `Q = q·I`, added as `Q·dt`.
    #[serde(default = "default_q")]
    pub q: f64,
    /// Measurement variance per coordinate: `R_i = r·I`, m².
    #[serde(default = "default_r")]
    pub r: f64,
    /// Sensing radius d_m, m.
    #[serde(default = "default_radius")]
    pub sense_radius: f64,
    /// Communication radius d_c, m.
    #[serde(default = "default_radius")]
    pub comm_radius: f64,
    /// Control ticks per exchange round.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Initial covariance is `init_scale·R`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_q() -> f64 {
    0.02
}
fn default_r() -> f64 {
    0.07
}
fn default_radius() -> f64 {
    6.5
}
fn default_every() -> usize {
    10
}
fn default_init_scale() -> f64 {
    10.0
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            q: default_q(),
            r: default_r(),
            sense_radius: default_radius(),
            comm_radius: default_radius(),
            every: default_every(),
            init_scale: default_init_scale(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 0.0 && self.r > 0.0 && self.sense_radius >= 0.0 && self.comm_radius >= 0.0) {
            return Err(HerdError::InvalidParameter(
                "estimator covariances and radii must be non-negative (r > 0)".into(),
            ));
        }
        if self.every == 0 || !(self.init_scale > 0.0) {
            return Err(HerdError::InvalidParameter("estimator period and init scale must be positive".into()));
        }
        Ok(())
    }
}

/// One herder's belief about every position.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBelief {
    pub xi: DVector<f64>,
    /// Information matrix `Y = P⁻¹`.
    pub info: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Diagonal of `R_i`.
    pub r: DVector<f64>,
    pub sense_radius: f64,
    pub comm_radius: f64,
}

impl EstimatorBelief {
    pub fn new(xi: DVector<f64>, cov: DMatrix<f64>, cfg: &EstimatorConfig) -> Result<Self> {
        let dim = xi.len();
        let info = cov.try_inverse().ok_or(HerdError::NonFinite("initial covariance inverse"))?;
        Ok(EstimatorBelief {
            xi,
            info: symmetrize(info),
            q: DMatrix::identity(dim, dim) * cfg.q,
            r: DVector::from_element(dim, cfg.r),
            sense_radius: cfg.sense_radius,
            comm_radius: cfg.comm_radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self.info.clone().cholesky() {
            Some(ch) => symmetrize(ch.inverse()),
            None => symmetrize(
                self.info
                    .clone()
                    .try_inverse()
                    .unwrap_or_else(|| DMatrix::from_element(self.dim(), self.dim(), f64::NAN)),
            ),
        }
    }

    pub fn min_info_eigenvalue(&self) -> f64 {
        self.info.clone().symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Forward-difference Jacobian of `field` at `xi`.
pub fn field_jacobian<F>(field: &F, xi: &DVector<f64>, base: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let dim = xi.len();
    let mut jac = DMatrix::zeros(base.len(), dim);
    for k in 0..dim {
        let step = 1e-6 * xi[k].abs().max(1.0);
        let mut xp = xi.clone();
        xp[k] += step;
        let fp = field(&xp)?;
        jac.set_column(k, &((fp - base) / step));
    }
    Ok(jac)
}

/// Propagates the belief one Euler step of the expanded field, with the
/// covariance moved through `F = I + A·dt`, `A = ∂Σ/∂ξ` at the current mean.
pub fn predict<F>(belief: &EstimatorBelief, field: &F, dt: f64) -> Result<EstimatorBelief>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) {
        return Err(HerdError::InvalidParameter("prediction step must be positive".into()));
    }
    let rate = field(&belief.xi)?;
    let a = field_jacobian(field, &belief.xi, &rate)?;
    Ok(predict_with_jacobian(belief, &rate, &a, dt))
}

/// Same as [`predict`] with the field value and Jacobian supplied.
pub fn predict_with_jacobian(
    belief: &EstimatorBelief,
    rate: &DVector<f64>,
    a: &DMatrix<f64>,
    dt: f64,
) -> EstimatorBelief {
    let dim = belief.dim();
    let f = DMatrix::identity(dim, dim) + a * dt;
    let p = belief.covariance();
    let p_next = symmetrize(&f * p * f.transpose() + &belief.q * dt);
    let info = match p_next.clone().cholesky() {
        Some(ch) => symmetrize(ch.inverse()),
        None => belief.info.clone(),
    };
    EstimatorBelief { xi: &belief.xi + rate * dt, info, ..belief.clone() }
}

/// Fixed-size measurement message.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPacket {
    /// Measured coordinates, zero where unsensed.
    pub values: Vec<f64>,
    pub seen: Vec<bool>,
    pub sender: u16,
    pub tick: u32,
}

impl MeasurementPacket {
    /// Little-endian f64 values, bit-packed flags (LSB first), u16 sender, u32 tick.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::wire_len(self.values.len()));
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut flags = vec![0u8; self.seen.len().div_ceil(8)];
        for (k, s) in self.seen.iter().enumerate() {
            if *s {
                flags[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&flags);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.tick.to_le_bytes());
        out
    }

    pub fn wire_len(dim: usize) -> usize {
        8 * dim + dim.div_ceil(8) + 2 + 4
    }

    pub fn decode(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() != Self::wire_len(dim) {
            return Err(HerdError::Schema(format!(
                "packet has {} bytes, expected {} for dimension {dim}",
                bytes.len(),
                Self::wire_len(dim)
            )));
        }
        let values: Vec<f64> =
            bytes[..8 * dim].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let flag_bytes = &bytes[8 * dim..8 * dim + dim.div_ceil(8)];
        let seen: Vec<bool> = (0..dim).map(|k| flag_bytes[k / 8] & (1 << (k % 8)) != 0).collect();
        let tail = &bytes[8 * dim + dim.div_ceil(8)..];
        let sender = u16::from_le_bytes([tail[0], tail[1]]);
        let tick = u32::from_le_bytes([tail[2], tail[3], tail[4], tail[5]]);
        Ok(MeasurementPacket { values, seen, sender, tick })
    }
}

/// Deterministic RNG for a (seed, herder, tick) triple.
pub fn stream_rng(seed: u64, herder: usize, tick: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(herder as u64 + 1);
    rng.set_word_pos(tick as u128 * 1024);
    rng
}

/// Noisy proximity-gated measurement taken by `herder`. Entities (evaders
/// first, then herders, including the sensing herder itself) within the
/// sensing radius are measured with independent Gaussian noise of variance
/// `r[k]` per coordinate.
pub fn sense(
    evaders: &[Vec2],
    herders: &[Vec2],
    herder: usize,
    sense_radius: f64,
    r: &DVector<f64>,
    tick: u32,
    rng: &mut ChaCha8Rng,
) -> MeasurementPacket {
    let me = herders[herder];
    let dim = 2 * (evaders.len() + herders.len());
    let mut values = vec![0.0; dim];
    let mut seen = vec![false; dim];
    for (e, p) in evaders.iter().chain(herders.iter()).enumerate() {
        if (p - me).norm() <= sense_radius {
            for c in 0..2 {
                let k = 2 * e + c;
                let noise: f64 = StandardNormal.sample(rng);
                values[k] = p[c] + noise * r[k].sqrt();
                seen[k] = true;
            }
        }
    }
    MeasurementPacket { values, seen, sender: herder as u16, tick }
}

/// Herders within communication range of each herder (including itself),
/// from true herder positions.
pub fn topology(herders: &[Vec2], comm_radius: f64) -> Vec<Vec<usize>> {
    (0..herders.len())
        .map(|i| (0..herders.len()).filter(|&k| k == i || (herders[k] - herders[i]).norm() <= comm_radius).collect())
        .collect()
}

/// Adds the information of `packets` to `belief` (one information-form update).
/// Packets repeating a `(sender, tick)` key are ignored.
pub fn information_update(belief: &EstimatorBelief, packets: &[&MeasurementPacket]) -> EstimatorBelief {
    let dim = belief.dim();
    let mut info = belief.info.clone();
    let mut vec = &belief.info * &belief.xi;
    let mut keys = HashSet::new();
    for p in packets {
        if !keys.insert((p.sender, p.tick)) {
            continue;
        }
        for k in 0..dim {
            if p.seen[k] {
                let w = 1.0 / belief.r[k];
                info[(k, k)] += w;
                vec[k] += w * p.values[k];
            }
        }
    }
    let info = symmetrize(info);
    let xi = match info.clone().cholesky() {
        Some(ch) => ch.solve(&vec),
        None => info.clone().lu().solve(&vec).unwrap_or_else(|| belief.xi.clone()),
    };
    EstimatorBelief { xi, info, ..belief.clone() }
}

/// One exchange round: every herder fuses its own packet and its neighbors'.
pub fn fuse(
    beliefs: &[EstimatorBelief],
    packets: &[MeasurementPacket],
    neighbors: &[Vec<usize>],
) -> Vec<EstimatorBelief> {
    beliefs
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let incoming: Vec<&MeasurementPacket> =
                packets.iter().filter(|p| neighbors[i].contains(&(p.sender as usize))).collect();
            information_update(b, &incoming)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseReport {
    pub evaders_rmse: f64,
    pub herders_rmse: f64,
}

fn entity_rmse(est: &[f64], truth: &[f64]) -> f64 {
    let count = truth.len() / 2;
    if count == 0 {
        return 0.0;
    }
    let sq: f64 = est
        .chunks_exact(2)
        .zip(truth.chunks_exact(2))
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum();
    (sq / count as f64).sqrt()
}

/// Position RMSE (per entity, Euclidean) averaged over herders' beliefs.
pub fn rmse(beliefs: &[EstimatorBelief], x_true: &[f64], u_true: &[f64]) -> RmseReport {
    let m2 = x_true.len();
    let mut ev = 0.0;
    let mut he = 0.0;
    for b in beliefs {
        let xi = b.xi.as_slice();
        ev += entity_rmse(&xi[..m2], x_true);
        he += entity_rmse(&xi[m2..], u_true);
    }
    let k = beliefs.len().max(1) as f64;
    RmseReport { evaders_rmse: ev / k, herders_rmse: he / k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn belief(dim: usize) -> EstimatorBelief {
        EstimatorBelief::new(DVector::zeros(dim), DMatrix::identity(dim, dim) * 0.7, &EstimatorConfig::default())
            .unwrap()
    }

    #[test]
    fn infinite_radius_sees_everything() {
        let ev = [Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)];
        let he = [Vec2::new(1.0, 1.0), Vec2::new(-50.0, 3.0)];
        let r = DVector::from_element(8, 0.07);
        let p = sense(&ev, &he, 0, f64::INFINITY, &r, 0, &mut stream_rng(1, 0, 0));
        assert!(p.seen.iter().all(|s| *s));
    }

    #[test]
    fn zero_radius_sees_only_self() {
        let ev = [Vec2::new(0.0, 0.0)];
        let he = [Vec2::new(1.0, 1.0), Vec2::new(2.0, 3.0)];
        let r = DVector::from_element(6, 0.07);
        let p = sense(&ev, &he, 1, 0.0, &r, 3, &mut stream_rng(1, 1, 3));
        assert_eq!(p.seen, vec![false, false, false, false, true, true]);
        assert_eq!(p.values[0], 0.0);
        assert_eq!(p.sender, 1);
    }

    #[test]
    fn duplicate_packets_are_ignored() {
        let b = belief(2);
        let p = MeasurementPacket { values: vec![1.0, 2.0], seen: vec![true, true], sender: 0, tick: 4 };
        let once = information_update(&b, &[&p]);
        let twice = information_update(&b, &[&p, &p]);
        assert_eq!(once, twice);
    }

    #[test]
    fn packet_wire_layout() {
        let p = MeasurementPacket {
            values: vec![1.5, 0.0, -2.25],
            seen: vec![true, false, true],
            sender: 513,
            tick: 70000,
        };
        let bytes = p.encode();
        assert_eq!(bytes.len(), 3 * 8 + 1 + 2 + 4);
        assert_eq!(&bytes[..8], &1.5f64.to_le_bytes());
        assert_eq!(bytes[24], 0b101);
        assert_eq!(&bytes[25..27], &513u16.to_le_bytes());
        assert_eq!(&bytes[27..], &70000u32.to_le_bytes());
        assert_eq!(MeasurementPacket::decode(&bytes, 3).unwrap(), p);
        assert!(MeasurementPacket::decode(&bytes[1..], 3).is_err());
    }

    #[test]
    fn rmse_offsets() {
        let mut b = belief(4);
        b.xi = DVector::from_vec(vec![0.1, 0.0, 1.1, 1.0]);
        let r = rmse(&[b], &[0.0, 0.0], &[1.0, 1.0]);
        assert_relative_eq!(r.evaders_rmse, 0.1, epsilon = 1e-15);
        assert_relative_eq!(r.herders_rmse, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn stationary_prediction_adds_q_dt() {
        let b = belief(4);
        let zero = |_: &DVector<f64>| Ok(DVector::zeros(4));
        let next = predict(&b, &zero, 0.01).unwrap();
        assert_eq!(next.xi, b.xi);
        let grown = next.covariance() - b.covariance();
        assert_relative_eq!(grown, DMatrix::identity(4, 4) * (0.02 * 0.01), epsilon = 1e-12);
    }

    #[test]
    fn neighbor_packet_never_increases_trace() {
        let b = belief(4);
        let own = MeasurementPacket {
            values: vec![0.1, 0.0, 0.0, 0.0],
            seen: vec![true, true, false, false],
            sender: 0,
            tick: 0,
        };
        let other = MeasurementPacket {
            values: vec![0.0, 0.0, 1.0, 1.0],
            seen: vec![false, true, true, true],
            sender: 1,
            tick: 0,
        };
        let a = information_update(&b, &[&own]).covariance().trace();
        let c = information_update(&b, &[&own, &other]).covariance().trace();
        assert!(c <= a);
    }
}
