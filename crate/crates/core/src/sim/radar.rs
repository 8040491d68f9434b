//! Synthetic radar scans with per-point Doppler.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{config_error, SimError, Trajectory};
use crate::geometry::SE3Transform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// Sensor-frame position, meters.
    pub position: Vector3<f64>,
    /// Projection of the sensor velocity relative to the target onto the
    /// line of sight, m/s.
    pub doppler: f64,
    pub dynamic: bool,
}

impl RadarPoint {
    /// Unit line-of-sight vector.
    pub fn direction(&self) -> Vector3<f64> {
        self.position / self.position.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarScan {
    pub time: f64,
    pub points: Vec<RadarPoint>,
}

impl RadarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A target oscillating along a line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicPoint {
    pub origin: Vector3<f64>,
    pub amplitude: Vector3<f64>,
    pub period: f64,
}

impl DynamicPoint {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.origin + self.amplitude * (TAU * t / self.period).sin()
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.amplitude * (TAU / self.period) * (TAU * t / self.period).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarEnvironment {
    pub static_points: Vec<Vector3<f64>>,
    pub dynamic_points: Vec<DynamicPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub random_points: usize,
    /// Extent of the random-point box, centered over the mission area.
    pub box_size: [f64; 3],
    /// Ground grid spacing; 0 disables the grid.
    pub ground_spacing: f64,
    pub dynamic_points: usize,
    /// Peak speed of the dynamic targets, m/s.
    pub dynamic_speed: f64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            random_points: 500,
            box_size: [40.0, 40.0, 10.0],
            ground_spacing: 2.0,
            dynamic_points: 5,
            dynamic_speed: 1.5,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.box_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(config_error("environment.box_size", "must be positive"));
        }
        if !(self.ground_spacing.is_finite() && self.ground_spacing >= 0.0) {
            return Err(config_error("environment.ground_spacing", "must be non-negative"));
        }
        if self.random_points == 0 && self.ground_spacing == 0.0 {
            return Err(config_error("environment", "environment would be empty"));
        }
        if !(self.dynamic_speed.is_finite() && self.dynamic_speed >= 0.0) {
            return Err(config_error("environment.dynamic_speed", "must be non-negative"));
        }
        Ok(())
    }
}

/// Builds the static world plus moving targets, centered on the horizontal
/// bounding box of `trajectories`.
pub fn generate_environment(
    spec: &EnvironmentSpec,
    trajectories: &[&Trajectory],
    seed: u64,
) -> RadarEnvironment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (Vector3::repeat(f64::MAX), Vector3::repeat(f64::MIN));
    for tr in trajectories {
        for s in &tr.samples {
            lo = lo.inf(&s.pose.translation);
            hi = hi.sup(&s.pose.translation);
        }
    }
    let center = if lo.x <= hi.x {
        (lo + hi) / 2.0
    } else {
        Vector3::zeros()
    };
    let [bx, by, bz] = spec.box_size;
    let mut static_points = Vec::with_capacity(spec.random_points);
    for _ in 0..spec.random_points {
        static_points.push(Vector3::new(
            center.x + rng.gen_range(-bx / 2.0..bx / 2.0),
            center.y + rng.gen_range(-by / 2.0..by / 2.0),
            rng.gen_range(0.0..bz),
        ));
    }
    if spec.ground_spacing > 0.0 {
        let nx = (bx / spec.ground_spacing).floor() as i64;
        let ny = (by / spec.ground_spacing).floor() as i64;
        for i in -nx / 2..=nx / 2 {
            for j in -ny / 2..=ny / 2 {
                static_points.push(Vector3::new(
                    center.x + i as f64 * spec.ground_spacing,
                    center.y + j as f64 * spec.ground_spacing,
                    0.0,
                ));
            }
        }
    }
    let mut dynamic_points = Vec::with_capacity(spec.dynamic_points);
    for _ in 0..spec.dynamic_points {
        let period = rng.gen_range(4.0..10.0);
        let heading: f64 = rng.gen_range(0.0..TAU);
        let amp = spec.dynamic_speed * period / TAU;
        dynamic_points.push(DynamicPoint {
            origin: Vector3::new(
                center.x + rng.gen_range(-bx / 4.0..bx / 4.0),
                center.y + rng.gen_range(-by / 4.0..by / 4.0),
                rng.gen_range(0.5..2.0),
            ),
            amplitude: amp * Vector3::new(heading.cos(), heading.sin(), 0.0),
            period,
        });
    }
    RadarEnvironment {
        static_points,
        dynamic_points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSensorModel {
    pub enabled: bool,
    /// Full azimuth field of view, degrees.
    pub azimuth_fov: f64,
    /// Full elevation field of view, degrees.
    pub elevation_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub position_noise: f64,
    pub doppler_noise: f64,
    /// Hz.
    pub rate: f64,
}

impl Default for RadarSensorModel {
    fn default() -> Self {
        Self {
            enabled: true,
            azimuth_fov: 120.0,
            elevation_fov: 30.0,
            min_range: 0.5,
            max_range: 50.0,
            position_noise: 0.05,
            doppler_noise: 0.05,
            rate: 10.0,
        }
    }
}

impl RadarSensorModel {
    pub fn validate(&self) -> Result<(), SimError> {
        for (f, v) in [
            ("radar.azimuth_fov", self.azimuth_fov),
            ("radar.elevation_fov", self.elevation_fov),
            ("radar.max_range", self.max_range),
            ("radar.rate", self.rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_error(f, "must be positive"));
            }
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(config_error("radar.min_range", "must lie in [0, max_range)"));
        }
        for (f, v) in [
            ("radar.position_noise", self.position_noise),
            ("radar.doppler_noise", self.doppler_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(f, "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Whether a sensor-frame point lies inside the frustum.
    pub fn sees(&self, p: &Vector3<f64>) -> bool {
        let r = p.norm();
        if r < self.min_range.max(1e-9) || r > self.max_range {
            return false;
        }
        let az = p.y.atan2(p.x).to_degrees();
        let el = (p.z / r).asin().to_degrees();
        az.abs() <= self.azimuth_fov / 2.0 && el.abs() <= self.elevation_fov / 2.0
    }
}

/// Linear velocity of the sensor origin in the sensor frame, by central
/// difference over `[t − h, t + h]` (clamped to the trajectory span).
pub fn sensor_velocity(traj: &Trajectory, extrinsic: &SE3Transform, t: f64, h: f64) -> Option<Vector3<f64>> {
    let t0 = (t - h).max(traj.start_time());
    let t1 = (t + h).min(traj.end_time());
    let pose = traj.pose_at(t)? * *extrinsic;
    if t1 <= t0 {
        return Some(Vector3::zeros());
    }
    let a = traj.pose_at(t0)? * *extrinsic;
    let b = traj.pose_at(t1)? * *extrinsic;
    let v_world = (b.translation - a.translation) / (t1 - t0);
    Some(pose.rotation.transpose() * v_world)
}

/// One scan per tick at `model.rate`. Static points get
/// `doppler = h·v_sensor`; moving targets `h·(v_sensor − u)` with `u` their
/// own velocity in the sensor frame.
pub fn synthesize_radar(
    traj: &Trajectory,
    env: &RadarEnvironment,
    extrinsic: &SE3Transform,
    model: &RadarSensorModel,
    seed: u64,
) -> Vec<RadarScan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_noise = Normal::new(0.0, model.position_noise).expect("validated");
    let dop_noise = Normal::new(0.0, model.doppler_noise).expect("validated");
    if traj.is_empty() {
        return Vec::new();
    }
    let period = 1.0 / model.rate;
    let h = traj
        .samples
        .get(1)
        .map_or(0.05, |s| (s.time - traj.samples[0].time) / 2.0);
    let t0 = traj.start_time();
    let ticks = ((traj.end_time() - t0) / period + 1e-9).floor() as usize + 1;
    let mut scans = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = t0 + k as f64 * period;
        let Some(body) = traj.pose_at(t) else {
            continue;
        };
        let Some(v) = sensor_velocity(traj, extrinsic, t, h) else {
            continue;
        };
        let sensor = body * *extrinsic;
        let inv = sensor.inverse();
        let mut points = Vec::new();
        let targets = env.static_points.iter().map(|p| (*p, None)).chain(
            env.dynamic_points
                .iter()
                .map(|d| (d.position(t), Some(d.velocity(t)))),
        );
        for (p_world, own_velocity) in targets {
            let p = inv.transform_point(&p_world);
            if !model.sees(&p) {
                continue;
            }
            let dir = p / p.norm();
            let relative = match own_velocity {
                Some(u) => v - sensor.rotation.transpose() * u,
                None => v,
            };
            let noisy = p + Vector3::new(
                pos_noise.sample(&mut rng),
                pos_noise.sample(&mut rng),
                pos_noise.sample(&mut rng),
            );
            points.push(RadarPoint {
                position: noisy,
                doppler: dir.dot(&relative) + dop_noise.sample(&mut rng),
                dynamic: own_velocity.is_some(),
            });
        }
        scans.push(RadarScan { time: t, points });
    }
    scans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose4;
    use crate::sim::TrajectorySample;
    use nalgebra::{DMatrix, DVector};

    fn moving(v: Vector3<f64>, duration: f64) -> Trajectory {
        Trajectory::new(
            (0..=(duration * 10.0).round() as usize)
                .map(|k| {
                    let t = k as f64 * 0.1;
                    TrajectorySample {
                        time: t,
                        pose: Pose4::from_translation_yaw(&(v * t), 0.0).to_se3(),
                        velocity: v,
                        roll: 0.0,
                        pitch: 0.0,
                    }
                })
                .collect(),
        )
    }

    fn noiseless() -> RadarSensorModel {
        RadarSensorModel {
            position_noise: 0.0,
            doppler_noise: 0.0,
            ..Default::default()
        }
    }

    fn env_ahead() -> RadarEnvironment {
        RadarEnvironment {
            static_points: (0..60)
                .map(|k| {
                    let a = (k as f64 / 60.0 - 0.5) * 1.8;
                    let e = ((k * 7 % 11) as f64 / 11.0 - 0.5) * 0.4;
                    10.0 * Vector3::new(a.cos() * e.cos(), a.sin() * e.cos(), e.sin())
                })
                .collect(),
            dynamic_points: vec![],
        }
    }

    #[test]
    fn stationary_robot_sees_zero_doppler() {
        let scans = synthesize_radar(
            &moving(Vector3::zeros(), 2.0),
            &env_ahead(),
            &SE3Transform::identity(),
            &noiseless(),
            1,
        );
        assert!(!scans.is_empty());
        for s in &scans {
            assert!(!s.is_empty());
            assert!(s.points.iter().all(|p| p.doppler.abs() < 1e-12));
        }
    }

    #[test]
    fn dead_ahead_point_doppler_equals_speed() {
        let env = RadarEnvironment {
            static_points: vec![Vector3::new(30.0, 0.0, 0.0)],
            dynamic_points: vec![],
        };
        let scans = synthesize_radar(
            &moving(Vector3::new(1.0, 0.0, 0.0), 2.0),
            &env,
            &SE3Transform::identity(),
            &noiseless(),
            1,
        );
        for s in &scans {
            assert_eq!(s.len(), 1);
            assert!((s.points[0].doppler - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn least_squares_recovers_sensor_velocity() {
        let v = Vector3::new(0.7, -0.4, 0.2);
        let traj = moving(v, 1.0);
        let scans = synthesize_radar(&traj, &env_ahead(), &SE3Transform::identity(), &noiseless(), 1);
        let s = &scans[5];
        assert!(s.len() >= 50);
        let n = s.len();
        let h = DMatrix::from_fn(n, 3, |i, j| s.points[i].direction()[j]);
        let d = DVector::from_iterator(n, s.points.iter().map(|p| p.doppler));
        let est = h.clone().pseudo_inverse(1e-12).unwrap() * d;
        assert!((Vector3::new(est[0], est[1], est[2]) - v).norm() < 1e-9);
    }

    #[test]
    fn frustum_limits() {
        let m = RadarSensorModel::default();
        assert!(m.sees(&Vector3::new(10.0, 0.0, 0.0)));
        assert!(!m.sees(&Vector3::new(-10.0, 0.0, 0.0)));
        assert!(!m.sees(&Vector3::new(10.0, 0.0, 5.0)));
        assert!(!m.sees(&Vector3::new(60.0, 0.0, 0.0)));
        assert!(!m.sees(&Vector3::new(0.2, 0.0, 0.0)));
    }

    #[test]
    fn dynamic_targets_flagged_and_shifted() {
        let env = RadarEnvironment {
            static_points: vec![],
            dynamic_points: vec![DynamicPoint {
                origin: Vector3::new(10.0, 0.0, 0.0),
                amplitude: Vector3::new(2.0, 0.0, 0.0),
                period: 8.0,
            }],
        };
        let traj = moving(Vector3::zeros(), 1.0);
        let scans = synthesize_radar(&traj, &env, &SE3Transform::identity(), &noiseless(), 1);
        let p = scans[0].points[0];
        assert!(p.dynamic);
        // target moving away at 2·2π/8 m/s, sensor static
        assert!((p.doppler + 2.0 * TAU / 8.0).abs() < 1e-9);
    }

    #[test]
    fn environment_is_deterministic_and_sized() {
        let traj = moving(Vector3::new(1.0, 0.0, 0.0), 5.0);
        let spec = EnvironmentSpec::default();
        let a = generate_environment(&spec, &[&traj], 3);
        let b = generate_environment(&spec, &[&traj], 3);
        assert_eq!(a, b);
        assert_eq!(a.static_points.len(), 500 + 21 * 21);
        assert_eq!(a.dynamic_points.len(), 5);
    }
}
