//! Parametric ground-truth missions.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{config_error, SimError, Trajectory, TrajectorySample};
use crate::geometry::{wrap_angle, SE3Transform};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissionKind {
    /// Both robots travel a figure-eight together, the UAV trailing the UGV.
    #[default]
    Coordinated,
    /// UGV on a circle, UAV on a rounded rectangle; they drift apart and rejoin.
    Divergent,
    /// Constant-speed polylines through user waypoints.
    Waypoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatedSpec {
    pub amplitude_x: f64,
    pub amplitude_y: f64,
    pub period: f64,
    /// Time by which the UAV trails the UGV along the same curve.
    pub lag: f64,
    pub altitude: f64,
    pub altitude_amplitude: f64,
    pub altitude_period: f64,
    pub yaw_oscillation: f64,
    pub yaw_period: f64,
}

impl Default for CoordinatedSpec {
    fn default() -> Self {
        Self {
            amplitude_x: 6.0,
            amplitude_y: 4.0,
            period: 120.0,
            lag: 2.0,
            altitude: 1.2,
            altitude_amplitude: 0.3,
            altitude_period: 30.0,
            yaw_oscillation: 0.3,
            yaw_period: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergentSpec {
    pub ugv_radius: f64,
    pub ugv_speed: f64,
    /// Rectangle extent along x.
    pub uav_width: f64,
    /// Rectangle extent along y.
    pub uav_length: f64,
    pub uav_corner_radius: f64,
    pub uav_speed: f64,
    pub altitude: f64,
    pub altitude_amplitude: f64,
    pub altitude_period: f64,
    pub yaw_oscillation: f64,
    pub yaw_period: f64,
}

impl Default for DivergentSpec {
    fn default() -> Self {
        Self {
            ugv_radius: 5.0,
            ugv_speed: 0.3,
            uav_width: 12.0,
            uav_length: 8.0,
            uav_corner_radius: 2.5,
            uav_speed: 1.0,
            altitude: 3.0,
            altitude_amplitude: 0.5,
            altitude_period: 20.0,
            yaw_oscillation: 0.1,
            yaw_period: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaypointSpec {
    pub uav: Vec<[f64; 3]>,
    pub ugv: Vec<[f64; 3]>,
    pub uav_speed: f64,
    pub ugv_speed: f64,
}

impl Default for WaypointSpec {
    fn default() -> Self {
        Self {
            uav: vec![
                [-1.0, 0.0, 1.5],
                [9.0, 0.0, 1.5],
                [9.0, 6.0, 2.0],
                [-1.0, 6.0, 1.5],
            ],
            ugv: vec![
                [0.0, 0.0, 0.0],
                [10.0, 0.0, 0.0],
                [10.0, 6.0, 0.0],
                [0.0, 6.0, 0.0],
            ],
            uav_speed: 0.5,
            ugv_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionSpec {
    pub kind: MissionKind,
    /// Seconds.
    pub duration: f64,
    /// Ground-truth and odometry sample period, seconds.
    pub dt: f64,
    pub coordinated: CoordinatedSpec,
    pub divergent: DivergentSpec,
    pub waypoints: WaypointSpec,
}

impl Default for MissionSpec {
    fn default() -> Self {
        Self {
            kind: MissionKind::Coordinated,
            duration: 120.0,
            dt: 0.1,
            coordinated: CoordinatedSpec::default(),
            divergent: DivergentSpec::default(),
            waypoints: WaypointSpec::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), SimError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_error(field, format!("must be positive, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<(), SimError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(config_error(field, "must be finite"))
    }
}

impl MissionSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        positive("mission.dt", self.dt)?;
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(config_error("mission.duration", "must be non-negative"));
        }
        match self.kind {
            MissionKind::Coordinated => {
                let c = &self.coordinated;
                positive("mission.coordinated.period", c.period)?;
                positive("mission.coordinated.altitude_period", c.altitude_period)?;
                positive("mission.coordinated.yaw_period", c.yaw_period)?;
                for (f, v) in [
                    ("amplitude_x", c.amplitude_x),
                    ("amplitude_y", c.amplitude_y),
                    ("lag", c.lag),
                    ("altitude", c.altitude),
                    ("altitude_amplitude", c.altitude_amplitude),
                    ("yaw_oscillation", c.yaw_oscillation),
                ] {
                    finite(&format!("mission.coordinated.{f}"), v)?;
                }
            }
            MissionKind::Divergent => {
                let d = &self.divergent;
                positive("mission.divergent.ugv_radius", d.ugv_radius)?;
                positive("mission.divergent.ugv_speed", d.ugv_speed)?;
                positive("mission.divergent.uav_speed", d.uav_speed)?;
                positive("mission.divergent.uav_corner_radius", d.uav_corner_radius)?;
                positive("mission.divergent.altitude_period", d.altitude_period)?;
                positive("mission.divergent.yaw_period", d.yaw_period)?;
                if d.uav_width < 2.0 * d.uav_corner_radius || d.uav_length < 2.0 * d.uav_corner_radius {
                    return Err(config_error(
                        "mission.divergent.uav_width",
                        "rectangle must fit its corner radius",
                    ));
                }
                finite("mission.divergent.altitude", d.altitude)?;
                finite("mission.divergent.altitude_amplitude", d.altitude_amplitude)?;
                finite("mission.divergent.yaw_oscillation", d.yaw_oscillation)?;
            }
            MissionKind::Waypoints => {
                let w = &self.waypoints;
                positive("mission.waypoints.uav_speed", w.uav_speed)?;
                positive("mission.waypoints.ugv_speed", w.ugv_speed)?;
                for (name, pts) in [("uav", &w.uav), ("ugv", &w.ugv)] {
                    if pts.is_empty() {
                        return Err(config_error(
                            &format!("mission.waypoints.{name}"),
                            "needs at least one waypoint",
                        ));
                    }
                    if pts.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(config_error(
                            &format!("mission.waypoints.{name}"),
                            "waypoints must be finite",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Position and yaw at a time.
#[derive(Debug, Clone, Copy)]
struct Kinematics {
    position: Vector3<f64>,
    yaw: f64,
}

trait Path {
    fn at(&self, t: f64) -> Kinematics;
    /// Whether roll/pitch follow the acceleration (multirotor) or stay level.
    fn tilts(&self) -> bool;
}

fn heading(v: &Vector3<f64>, fallback: f64) -> f64 {
    if v.x.hypot(v.y) < 1e-9 {
        fallback
    } else {
        v.y.atan2(v.x)
    }
}

struct Lissajous {
    ax: f64,
    ay: f64,
    omega: f64,
    lag: f64,
    altitude: Option<(f64, f64, f64)>,
    yaw_wobble: Option<(f64, f64)>,
}

impl Lissajous {
    fn position(&self, t: f64) -> Vector3<f64> {
        let s = t - self.lag;
        let z = self.altitude.map_or(0.0, |(h, a, p)| h + a * (TAU * t / p).sin());
        Vector3::new(
            self.ax * (self.omega * s).sin(),
            self.ay * (2.0 * self.omega * s).sin(),
            z,
        )
    }
}

impl Path for Lissajous {
    fn at(&self, t: f64) -> Kinematics {
        let s = t - self.lag;
        let v = Vector3::new(
            self.ax * self.omega * (self.omega * s).cos(),
            2.0 * self.ay * self.omega * (2.0 * self.omega * s).cos(),
            0.0,
        );
        let wobble = self.yaw_wobble.map_or(0.0, |(a, p)| a * (TAU * t / p).sin());
        Kinematics {
            position: self.position(t),
            yaw: heading(&v, 0.0) + wobble,
        }
    }

    fn tilts(&self) -> bool {
        self.altitude.is_some()
    }
}

struct Circle {
    center: Vector3<f64>,
    radius: f64,
    speed: f64,
}

impl Path for Circle {
    fn at(&self, t: f64) -> Kinematics {
        // starts at the bottom of the circle heading +x, counter-clockwise
        let a = self.speed * t / self.radius - PI / 2.0;
        Kinematics {
            position: self.center + self.radius * Vector3::new(a.cos(), a.sin(), 0.0),
            yaw: a + PI / 2.0,
        }
    }

    fn tilts(&self) -> bool {
        false
    }
}

struct RoundedRectangle {
    center: Vector3<f64>,
    half_w: f64,
    half_l: f64,
    r: f64,
    speed: f64,
    altitude: (f64, f64, f64),
    yaw_wobble: (f64, f64),
}

impl RoundedRectangle {
    fn perimeter(&self) -> f64 {
        let sx = 2.0 * (self.half_w - self.r);
        let sy = 2.0 * (self.half_l - self.r);
        2.0 * (sx + sy) + TAU * self.r
    }

    /// Planar point and tangent heading at arc length `s` from the middle of
    /// the bottom edge, counter-clockwise.
    fn planar(&self, s: f64) -> (f64, f64, f64) {
        let sx = 2.0 * (self.half_w - self.r);
        let sy = 2.0 * (self.half_l - self.r);
        let arc = PI / 2.0 * self.r;
        let mut s = s.rem_euclid(self.perimeter());
        let (hw, hl, r) = (self.half_w - self.r, self.half_l - self.r, self.r);
        // segments: half bottom, corner, right, corner, top, corner, left, corner, half bottom
        let straight = [sx / 2.0, sy, sx, sy, sx / 2.0];
        let starts = [
            (0.0, -hl - r),
            (hw + r, -hl),
            (hw, hl + r),
            (-hw - r, hl),
            (-hw, -hl - r),
        ];
        let dirs = [0.0, PI / 2.0, PI, -PI / 2.0, 0.0];
        let corners = [(hw, -hl), (hw, hl), (-hw, hl), (-hw, -hl)];
        for k in 0..5 {
            if s <= straight[k] || k == 4 {
                let (x0, y0) = starts[k];
                let d = dirs[k];
                return (x0 + s * d.cos(), y0 + s * d.sin(), d);
            }
            s -= straight[k];
            if s <= arc {
                let (cx, cy) = corners[k];
                let a = dirs[k] - PI / 2.0 + s / r;
                return (cx + r * a.cos(), cy + r * a.sin(), a + PI / 2.0);
            }
            s -= arc;
        }
        unreachable!("segment walk always returns on the last straight")
    }
}

impl Path for RoundedRectangle {
    fn at(&self, t: f64) -> Kinematics {
        let (x, y, yaw) = self.planar(self.speed * t);
        let (h, a, p) = self.altitude;
        let (wa, wp) = self.yaw_wobble;
        Kinematics {
            position: self.center + Vector3::new(x, y, h + a * (TAU * t / p).sin()),
            yaw: yaw + wa * (TAU * t / wp).sin(),
        }
    }

    fn tilts(&self) -> bool {
        true
    }
}

struct Polyline {
    points: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
    speed: f64,
    tilts: bool,
}

impl Polyline {
    fn new(points: &[[f64; 3]], speed: f64, tilts: bool) -> Self {
        let points: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap_or(&0.0);
            cumulative.push(last + (w[1] - w[0]).norm());
        }
        Self {
            points,
            cumulative,
            speed,
            tilts,
        }
    }
}

impl Path for Polyline {
    fn at(&self, t: f64) -> Kinematics {
        let s = (self.speed * t).max(0.0);
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let n = self.points.len();
        if n == 1 || total == 0.0 {
            return Kinematics {
                position: self.points[0],
                yaw: 0.0,
            };
        }
        let s = s.min(total);
        let mut k = self.cumulative.partition_point(|&c| c <= s).max(1) - 1;
        k = k.min(n - 2);
        // skip zero-length legs so the heading is defined
        let mut leg = self.points[k + 1] - self.points[k];
        let mut j = k;
        while leg.x.hypot(leg.y) < 1e-9 && j > 0 {
            j -= 1;
            leg = self.points[j + 1] - self.points[j];
        }
        let len = self.cumulative[k + 1] - self.cumulative[k];
        let u = if len > 0.0 {
            (s - self.cumulative[k]) / len
        } else {
            0.0
        };
        Kinematics {
            position: self.points[k] + u * (self.points[k + 1] - self.points[k]),
            yaw: heading(&leg, 0.0),
        }
    }

    fn tilts(&self) -> bool {
        self.tilts
    }
}

fn sample_path(path: &dyn Path, duration: f64, dt: f64) -> Trajectory {
    let n = (duration / dt + 1e-9).floor() as usize;
    let n = n.max(1);
    let h = 1e-3;
    let mut samples = Vec::with_capacity(n);
    let mut prev_yaw: Option<f64> = None;
    for k in 0..n {
        let t = k as f64 * dt;
        let now = path.at(t);
        let before = path.at(t - h);
        let after = path.at(t + h);
        let vel = (after.position - before.position) / (2.0 * h);
        let acc = (after.position - 2.0 * now.position + before.position) / (h * h);

        // keep yaw continuous across the ±π seam before wrapping the pose
        let yaw = match prev_yaw {
            Some(p) => p + wrap_angle(now.yaw - p),
            None => now.yaw,
        };
        prev_yaw = Some(yaw);

        let (roll, pitch) = if path.tilts() {
            let (s, c) = yaw.sin_cos();
            let fwd = c * acc.x + s * acc.y;
            let left = -s * acc.x + c * acc.y;
            ((-left / GRAVITY).atan(), (fwd / GRAVITY).atan())
        } else {
            (0.0, 0.0)
        };
        let pose = SE3Transform::from_rpy(now.position, roll, pitch, wrap_angle(yaw));
        samples.push(TrajectorySample {
            time: t,
            pose,
            velocity: pose.rotation.transpose() * vel,
            roll,
            pitch,
        });
    }
    Trajectory::new(samples)
}

/// Ground truth for both robots in the world frame, sampled every `spec.dt`.
///
/// Returns `(uav, ugv)`. A mission of duration `T` yields `floor(T/dt)`
/// samples per robot, and at least one.
pub fn generate_mission(spec: &MissionSpec) -> Result<(Trajectory, Trajectory), SimError> {
    spec.validate()?;
    let (uav, ugv): (Box<dyn Path>, Box<dyn Path>) = match spec.kind {
        MissionKind::Coordinated => {
            let c = &spec.coordinated;
            let omega = TAU / c.period;
            (
                Box::new(Lissajous {
                    ax: c.amplitude_x,
                    ay: c.amplitude_y,
                    omega,
                    lag: c.lag,
                    altitude: Some((c.altitude, c.altitude_amplitude, c.altitude_period)),
                    yaw_wobble: Some((c.yaw_oscillation, c.yaw_period)),
                }),
                Box::new(Lissajous {
                    ax: c.amplitude_x,
                    ay: c.amplitude_y,
                    omega,
                    lag: 0.0,
                    altitude: None,
                    yaw_wobble: None,
                }),
            )
        }
        MissionKind::Divergent => {
            let d = &spec.divergent;
            let center = Vector3::new(0.0, d.ugv_radius, 0.0);
            (
                Box::new(RoundedRectangle {
                    center,
                    half_w: d.uav_width / 2.0,
                    half_l: d.uav_length / 2.0,
                    r: d.uav_corner_radius,
                    speed: d.uav_speed,
                    altitude: (d.altitude, d.altitude_amplitude, d.altitude_period),
                    yaw_wobble: (d.yaw_oscillation, d.yaw_period),
                }),
                Box::new(Circle {
                    center,
                    radius: d.ugv_radius,
                    speed: d.ugv_speed,
                }),
            )
        }
        MissionKind::Waypoints => {
            let w = &spec.waypoints;
            (
                Box::new(Polyline::new(&w.uav, w.uav_speed, false)),
                Box::new(Polyline::new(&w.ugv, w.ugv_speed, false)),
            )
        }
    };
    Ok((
        sample_path(uav.as_ref(), spec.duration, spec.dt),
        sample_path(ugv.as_ref(), spec.duration, spec.dt),
    ))
}
