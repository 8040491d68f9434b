//! Deterministic ground-truth world and sensor synthesis.
//!
//! Everything produced here is a pure function of a configuration and a seed.
//! Ground truth is expressed in the common frame, which coincides with the
//! UGV odometry frame (the UGV starts at the origin with zero yaw after
//! [`Dataset`] construction).

pub mod mission;
pub mod odometry;
pub mod radar;
pub mod rig;
pub mod uwb;

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose4, SE3Transform};

pub use mission::{generate_mission, MissionKind, MissionSpec};
pub use odometry::{apply_odometry_drift, OdometryDrift};
pub use radar::{
    generate_environment, sensor_velocity, synthesize_radar, DynamicPoint, EnvironmentSpec, RadarEnvironment,
    RadarPoint, RadarScan, RadarSensorModel,
};
pub use rig::{Extrinsic, SensorRig, UwbNode};
pub use uwb::{synthesize_uwb, RangeMeasurement, UwbNoiseModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
}

pub(crate) fn config_error(field: &str, message: impl Into<String>) -> SimError {
    SimError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// The two platforms of the team.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Robot {
    Uav,
    Ugv,
}

impl Robot {
    pub const ALL: [Robot; 2] = [Robot::Uav, Robot::Ugv];

    pub fn index(self) -> usize {
        match self {
            Robot::Uav => 0,
            Robot::Ugv => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Robot::Uav => "uav",
            Robot::Ugv => "ugv",
        }
    }

    pub fn parse(s: &str) -> Option<Robot> {
        match s {
            "uav" => Some(Robot::Uav),
            "ugv" => Some(Robot::Ugv),
            _ => None,
        }
    }
}

impl fmt::Display for Robot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    pub pose: SE3Transform,
    /// Linear velocity in the body frame.
    pub velocity: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
}

impl TrajectorySample {
    pub fn pose4(&self) -> Pose4 {
        Pose4::from_se3(&self.pose)
    }
}

/// Time-ordered pose samples with interpolation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.time)
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    /// Index of the last sample with `time <= t`.
    fn segment(&self, t: f64) -> Option<usize> {
        if self.samples.is_empty() || t < self.start_time() || t > self.end_time() {
            return None;
        }
        let idx = self.samples.partition_point(|s| s.time <= t);
        Some(idx.saturating_sub(1))
    }

    /// Pose at `t`; translation interpolated linearly, rotation spherically.
    pub fn pose_at(&self, t: f64) -> Option<SE3Transform> {
        let i = self.segment(t)?;
        let a = &self.samples[i];
        if i + 1 >= self.samples.len() || a.time == t {
            return Some(a.pose);
        }
        let b = &self.samples[i + 1];
        let s = (t - a.time) / (b.time - a.time);
        Some(a.pose.interpolate(&b.pose, s))
    }

    /// Translational path length between `t0` and `t1` (sample resolution).
    pub fn arc_length_between(&self, t0: f64, t1: f64) -> f64 {
        self.samples
            .windows(2)
            .filter(|w| w[0].time >= t0 && w[1].time <= t1)
            .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
            .sum()
    }

    pub fn arc_length(&self) -> f64 {
        self.arc_length_between(self.start_time(), self.end_time())
    }

    /// Cumulative arc length at every sample.
    pub fn cumulative_arc_length(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.samples.len());
        for (k, s) in self.samples.iter().enumerate() {
            if k > 0 {
                acc += (s.pose.translation - self.samples[k - 1].pose.translation).norm();
            }
            out.push(acc);
        }
        out
    }

    /// Re-expresses every pose as `frame⁻¹ ∘ pose`.
    pub fn in_frame(&self, frame: &SE3Transform) -> Trajectory {
        let inv = frame.inverse();
        Trajectory::new(
            self.samples
                .iter()
                .map(|s| TrajectorySample {
                    pose: inv * s.pose,
                    ..*s
                })
                .collect(),
        )
    }
}

/// Derives an independent stream seed from the run seed and a label.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters of a full synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub mission: MissionSpec,
    pub rig: SensorRig,
    pub uwb: UwbNoiseModel,
    pub odometry: OdometryDrift,
    pub radar: RadarSensorModel,
    pub environment: EnvironmentSpec,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.mission.validate()?;
        self.rig.validate()?;
        self.uwb.validate()?;
        self.odometry.validate()?;
        self.radar.validate()?;
        self.environment.validate()
    }
}

/// Every stream the estimators consume, plus the truth used to score them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    /// Ground truth in the common frame, indexed by [`Robot::index`].
    pub ground_truth: [Trajectory; 2],
    /// Drifted odometry, each in its robot's own odometry frame.
    pub odometry: [Trajectory; 2],
    pub ranges: Vec<RangeMeasurement>,
    pub radar: [Vec<RadarScan>; 2],
}

impl Dataset {
    pub fn truth(&self, robot: Robot) -> &Trajectory {
        &self.ground_truth[robot.index()]
    }

    pub fn odometry(&self, robot: Robot) -> &Trajectory {
        &self.odometry[robot.index()]
    }

    pub fn scans(&self, robot: Robot) -> &[RadarScan] {
        &self.radar[robot.index()]
    }

    pub fn duration(&self) -> f64 {
        let t = self.truth(Robot::Ugv);
        t.end_time() - t.start_time()
    }
}

/// The odometry frame of a robot: the gravity-aligned projection of its
/// starting pose.
pub fn odometry_frame(truth: &Trajectory) -> SE3Transform {
    truth
        .samples
        .first()
        .map(|s| s.pose4().to_se3())
        .unwrap_or_default()
}

/// Runs the whole synthetic world: mission, drifted odometry, UWB and radar.
pub fn simulate(config: &SimulationConfig, seed: u64) -> Result<Dataset, SimError> {
    config.validate()?;
    let (uav_world, ugv_world) = generate_mission(&config.mission)?;

    // common frame = UGV start
    let common = odometry_frame(&ugv_world);
    let uav = uav_world.in_frame(&common);
    let ugv = ugv_world.in_frame(&common);

    let mut odometry: [Trajectory; 2] = Default::default();
    for (robot, truth) in [(Robot::Uav, &uav), (Robot::Ugv, &ugv)] {
        let local = truth.in_frame(&odometry_frame(truth));
        odometry[robot.index()] = apply_odometry_drift(
            &local,
            &config.odometry,
            stream_seed(seed, &format!("odometry/{robot}")),
        );
    }

    let ranges = synthesize_uwb(&uav, &ugv, &config.rig, &config.uwb, stream_seed(seed, "uwb"));

    let mut radar: [Vec<RadarScan>; 2] = Default::default();
    if config.radar.enabled {
        let env = generate_environment(
            &config.environment,
            &[&uav, &ugv],
            stream_seed(seed, "environment"),
        );
        for (robot, truth) in [(Robot::Uav, &uav), (Robot::Ugv, &ugv)] {
            radar[robot.index()] = synthesize_radar(
                truth,
                &env,
                &config.rig.radar_extrinsic(robot).to_se3(),
                &config.radar,
                stream_seed(seed, &format!("radar/{robot}")),
            );
        }
    }

    Ok(Dataset {
        ground_truth: [uav, ugv],
        odometry,
        ranges,
        radar,
    })
}
