//! UWB range synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{config_error, SensorRig, SimError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub time: f64,
    pub tag_id: u32,
    pub anchor_id: u32,
    /// Meters.
    pub distance: f64,
    /// Standard deviation the estimators should assume, meters.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UwbNoiseModel {
    pub sigma: f64,
    pub bias: f64,
    pub dropout: f64,
    /// Hz.
    pub rate: f64,
}

impl Default for UwbNoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.12,
            bias: 0.0,
            dropout: 0.05,
            rate: 10.0,
        }
    }
}

/// Smallest sigma written into measurements; keeps residual weights finite
/// when synthesizing noiseless data.
pub const MIN_REPORTED_SIGMA: f64 = 0.01;

/// Shortest distance reported; a range of exactly zero carries no direction.
const MIN_DISTANCE: f64 = 1e-3;

impl UwbNoiseModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(config_error("uwb.sigma", "must be non-negative"));
        }
        if !self.bias.is_finite() {
            return Err(config_error("uwb.bias", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(config_error("uwb.dropout", "must lie in [0, 1]"));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(config_error("uwb.rate", "must be positive"));
        }
        Ok(())
    }

    pub fn reported_sigma(&self) -> f64 {
        self.sigma.max(MIN_REPORTED_SIGMA)
    }
}

/// Samples every tag-anchor pair at `model.rate` over the time span the two
/// trajectories share.
pub fn synthesize_uwb(
    uav: &Trajectory,
    ugv: &Trajectory,
    rig: &SensorRig,
    model: &UwbNoiseModel,
    seed: u64,
) -> Vec<RangeMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, model.sigma).expect("sigma validated non-negative");
    let t0 = uav.start_time().max(ugv.start_time());
    let t1 = uav.end_time().min(ugv.end_time());
    if uav.is_empty() || ugv.is_empty() || t1 < t0 {
        return Vec::new();
    }
    let period = 1.0 / model.rate;
    let ticks = ((t1 - t0) / period + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(ticks * rig.tags.len() * rig.anchors.len());
    for k in 0..ticks {
        let t = t0 + k as f64 * period;
        let (Some(pu), Some(pg)) = (uav.pose_at(t), ugv.pose_at(t)) else {
            continue;
        };
        for tag in &rig.tags {
            let p_tag = pu.transform_point(&tag.vector());
            for anchor in &rig.anchors {
                let p_anchor = pg.transform_point(&anchor.vector());
                // draw both numbers every time so dropout does not shift the noise stream
                let e = noise.sample(&mut rng);
                let keep = rng.gen::<f64>() >= model.dropout;
                if !keep {
                    continue;
                }
                let d = (p_tag - p_anchor).norm() + model.bias + e;
                out.push(RangeMeasurement {
                    time: t,
                    tag_id: tag.id,
                    anchor_id: anchor.id,
                    distance: d.max(MIN_DISTANCE),
                    sigma: model.reported_sigma(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose4, SE3Transform};
    use crate::sim::TrajectorySample;
    use nalgebra::Vector3;

    fn static_traj(x: f64, duration: f64) -> Trajectory {
        Trajectory::new(
            (0..=(duration * 10.0) as usize)
                .map(|k| TrajectorySample {
                    time: k as f64 * 0.1,
                    pose: Pose4::new(x, 0.0, 0.0, 0.0).to_se3(),
                    velocity: Vector3::zeros(),
                    roll: 0.0,
                    pitch: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn noiseless_static_distances() {
        let model = UwbNoiseModel {
            sigma: 0.0,
            dropout: 0.0,
            ..Default::default()
        };
        let rig = SensorRig::single_point();
        let r = synthesize_uwb(&static_traj(5.0, 2.0), &static_traj(0.0, 2.0), &rig, &model, 1);
        assert_eq!(r.len(), 21);
        assert!(r.iter().all(|m| m.distance == 5.0 && m.sigma > 0.0));
    }

    #[test]
    fn count_and_noise_statistics() {
        let model = UwbNoiseModel {
            dropout: 0.0,
            ..Default::default()
        };
        let rig = SensorRig::default();
        let uav = static_traj(5.0, 59.9);
        let ugv = static_traj(0.0, 59.9);
        let r = synthesize_uwb(&uav, &ugv, &rig, &model, 9);
        assert_eq!(r.len(), 4800);
        let pu = uav.samples[0].pose;
        let pg: SE3Transform = ugv.samples[0].pose;
        let errs: Vec<f64> = r
            .iter()
            .map(|m| {
                let truth = (pu.transform_point(&rig.tag(m.tag_id).unwrap())
                    - pg.transform_point(&rig.anchor(m.anchor_id).unwrap()))
                .norm();
                m.distance - truth
            })
            .collect();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.11..=0.13).contains(&std), "std {std}");
        assert!(mean.abs() < 3.0 * 0.12 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn dropout_thins_binomially() {
        let model = UwbNoiseModel {
            dropout: 0.1,
            ..Default::default()
        };
        let rig = SensorRig::default();
        let r = synthesize_uwb(&static_traj(3.0, 59.9), &static_traj(0.0, 59.9), &rig, &model, 2);
        let n = 4800.0;
        let expected = 0.9 * n;
        let sd = (n * 0.9 * 0.1f64).sqrt();
        assert!(((r.len() as f64) - expected).abs() < 2.576 * sd, "{}", r.len());
    }

    #[test]
    fn same_seed_same_stream() {
        let model = UwbNoiseModel::default();
        let rig = SensorRig::default();
        let a = synthesize_uwb(&static_traj(3.0, 5.0), &static_traj(0.0, 5.0), &rig, &model, 4);
        let b = synthesize_uwb(&static_traj(3.0, 5.0), &static_traj(0.0, 5.0), &rig, &model, 4);
        assert_eq!(a, b);
    }
}
