//! Odometry with arc-length-proportional drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{config_error, SimError, Trajectory, TrajectorySample};
use crate::geometry::{Pose4, SE3Transform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryDrift {
    /// Translational error per meter travelled.
    pub rate: f64,
    /// Per-step scale jitter as a fraction of `rate`.
    pub scale_jitter: f64,
    /// Yaw random-walk gain; 0 disables yaw drift.
    pub yaw_gain: f64,
    /// rad of yaw noise per meter of travel, before scaling by `rate`.
    pub yaw_per_meter: f64,
}

impl Default for OdometryDrift {
    fn default() -> Self {
        Self {
            rate: 0.02,
            scale_jitter: 0.25,
            yaw_gain: 1.0,
            yaw_per_meter: 0.01,
        }
    }
}

impl OdometryDrift {
    pub fn validate(&self) -> Result<(), SimError> {
        for (f, v) in [
            ("odometry.rate", self.rate),
            ("odometry.scale_jitter", self.scale_jitter),
            ("odometry.yaw_gain", self.yaw_gain),
            ("odometry.yaw_per_meter", self.yaw_per_meter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(f, "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Re-integrates `traj` from perturbed 4-DOF increments.
///
/// Each step's translation is scaled by `1 + sign·rate + N(0, (jitter·rate)²)`
/// with one sign drawn per trajectory, and its yaw increment receives
/// `N(0, (gain·rate·(|Δψ| + yaw_per_meter·|Δt|))²)`. Roll and pitch are
/// copied from the input.
pub fn apply_odometry_drift(traj: &Trajectory, drift: &OdometryDrift, seed: u64) -> Trajectory {
    if drift.rate == 0.0 || traj.is_empty() {
        return traj.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let first = traj.samples[0];
    let mut samples = Vec::with_capacity(traj.len());
    samples.push(first);
    let mut prev_truth = first.pose4();
    let mut est = prev_truth;
    for s in &traj.samples[1..] {
        let truth = s.pose4();
        let step = prev_truth.between(&truth);
        let len = step.translation().norm();
        let scale = 1.0 + sign * drift.rate + drift.scale_jitter * drift.rate * std_normal.sample(&mut rng);
        let yaw_sigma = drift.yaw_gain * drift.rate * (step.theta.abs() + drift.yaw_per_meter * len);
        let yaw_noise = yaw_sigma * std_normal.sample(&mut rng);
        let noisy = Pose4::new(
            step.x * scale,
            step.y * scale,
            step.z * scale,
            step.theta + yaw_noise,
        );
        est = est.compose(&noisy);
        prev_truth = truth;
        samples.push(TrajectorySample {
            time: s.time,
            pose: SE3Transform::from_rpy(est.translation(), s.roll, s.pitch, est.theta),
            velocity: s.velocity * scale,
            roll: s.roll,
            pitch: s.pitch,
        });
    }
    Trajectory::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line(length: f64, step: f64) -> Trajectory {
        let n = (length / step).round() as usize;
        Trajectory::new(
            (0..=n)
                .map(|k| TrajectorySample {
                    time: k as f64 * 0.1,
                    pose: Pose4::new(k as f64 * step, 0.0, 0.0, 0.0).to_se3(),
                    velocity: Vector3::new(step / 0.1, 0.0, 0.0),
                    roll: 0.0,
                    pitch: 0.0,
                })
                .collect(),
        )
    }

    fn final_error(a: &Trajectory, b: &Trajectory) -> f64 {
        let pa = a.samples.last().unwrap().pose.translation;
        let pb = b.samples.last().unwrap().pose.translation;
        (pa - pb).norm()
    }

    #[test]
    fn zero_rate_is_identity() {
        let tr = line(5.0, 0.05);
        let out = apply_odometry_drift(
            &tr,
            &OdometryDrift {
                rate: 0.0,
                ..Default::default()
            },
            1,
        );
        assert_eq!(out, tr);
    }

    #[test]
    fn two_percent_over_fifty_meters() {
        let tr = line(50.0, 0.05);
        for seed in 0..20 {
            let out = apply_odometry_drift(&tr, &OdometryDrift::default(), seed);
            let e = final_error(&tr, &out);
            assert!((0.5..=1.5).contains(&e), "seed {seed}: {e}");
        }
    }

    #[test]
    fn scale_only_error_grows_with_arc_length() {
        let step = 0.05;
        let tr = line(10.0, step);
        let drift = OdometryDrift {
            yaw_gain: 0.0,
            ..Default::default()
        };
        let out = apply_odometry_drift(&tr, &drift, 3);
        let mut last = 0.0;
        for (k, (a, b)) in tr.samples.iter().zip(&out.samples).enumerate().skip(1) {
            let e = (a.pose.translation - b.pose.translation).norm();
            assert!(e > last, "step {k}");
            last = e;
        }
        // sum of n independent scale errors: mean rate·L, sd jitter·rate·step·√n
        let n = tr.len() as f64 - 1.0;
        let sd = drift.scale_jitter * drift.rate * step * n.sqrt();
        assert!((last - drift.rate * 10.0).abs() < 5.0 * sd);
    }

    #[test]
    fn attitude_is_preserved() {
        let mut tr = line(2.0, 0.05);
        for (k, s) in tr.samples.iter_mut().enumerate() {
            s.roll = 0.01 * k as f64;
            s.pitch = -0.02;
            s.pose = SE3Transform::from_rpy(s.pose.translation, s.roll, s.pitch, 0.0);
        }
        let out = apply_odometry_drift(&tr, &OdometryDrift::default(), 5);
        for (a, b) in tr.samples.iter().zip(&out.samples) {
            let (r, p, _) = b.pose.rpy();
            assert!((r - a.roll).abs() < 1e-12 && (p - a.pitch).abs() < 1e-12);
        }
    }
}
