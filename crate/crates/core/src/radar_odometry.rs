//! Radar ego-motion from Doppler, Doppler-consistency filtering, and
//! point-to-point ICP producing relative-pose odometry.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_from_rpy, rpy_from_rotation, so3_log, Pose4, SE3Transform};
use crate::sim::{RadarPoint, RadarScan, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadarError {
    #[error("insufficient data: {have} points, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("velocity unobservable from this scan geometry")]
    UnobservableVelocity,
    #[error("scan match did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgoMode {
    /// Holonomic ground platform: two unknowns, vertical implied by attitude.
    Ground,
    /// Multirotor: all three components free.
    Aerial,
}

impl EgoMode {
    pub fn minimal_points(self) -> usize {
        match self {
            EgoMode::Ground => 2,
            EgoMode::Aerial => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoVelocity {
    /// Sensor-frame linear velocity, m/s.
    pub v: Vector3<f64>,
    pub inlier_count: usize,
    pub residual_rms: f64,
    pub mode: EgoMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarOdometryConfig {
    pub enabled: bool,
    pub ransac_iterations: usize,
    /// m/s.
    pub ransac_threshold: f64,
    /// Doppler residual above which a point is dropped before matching, m/s.
    pub filter_threshold: f64,
    pub min_points: usize,
    pub icp_max_iterations: usize,
    pub icp_min_gate: f64,
    pub icp_gate_factor: f64,
    /// Mean squared correspondence distance above which a match fails, m².
    pub fitness_threshold: f64,
    /// Fitness at which the base covariance applies unscaled, m².
    pub fitness_reference: f64,
    pub sigma_translation: f64,
    pub sigma_yaw: f64,
    /// Multiplier on the vertical translation variance.
    pub vertical_inflation: f64,
}

impl Default for RadarOdometryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ransac_iterations: 100,
            ransac_threshold: 0.15,
            filter_threshold: 0.3,
            min_points: 10,
            icp_max_iterations: 50,
            icp_min_gate: 0.5,
            icp_gate_factor: 3.0,
            fitness_threshold: 0.25,
            fitness_reference: 0.02,
            sigma_translation: 0.005,
            sigma_yaw: 0.001,
            vertical_inflation: 25.0,
        }
    }
}

impl RadarOdometryConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (f, v) in [
            ("radar_odometry.ransac_threshold", self.ransac_threshold),
            ("radar_odometry.filter_threshold", self.filter_threshold),
            ("radar_odometry.fitness_threshold", self.fitness_threshold),
            ("radar_odometry.fitness_reference", self.fitness_reference),
            ("radar_odometry.sigma_translation", self.sigma_translation),
            ("radar_odometry.sigma_yaw", self.sigma_yaw),
            ("radar_odometry.vertical_inflation", self.vertical_inflation),
        ] {
            if !(v > 0.0) {
                return Err(format!("{f}: must be positive"));
            }
        }
        if self.icp_max_iterations == 0 || self.ransac_iterations == 0 {
            return Err("radar_odometry: iteration counts must be positive".into());
        }
        if self.min_points < 3 {
            return Err("radar_odometry.min_points: at least 3".into());
        }
        Ok(())
    }
}

/// Maps the free unknowns to a sensor-frame velocity: `v_s = A·u`.
///
/// Ground mode uses the body-frame decomposition
/// `v_b = [cos θ·v_x, cos φ·v_y, sin θ·v_x + sin φ·v_y]` with roll `φ` and
/// pitch `θ` as reported by the IMU (angles in the same yaw·pitch·roll
/// convention as the rest of the crate), then rotates into the sensor frame.
fn unknown_map(mode: EgoMode, roll: f64, pitch: f64, sensor_rotation: &Matrix3<f64>) -> DMatrix<f64> {
    match mode {
        EgoMode::Aerial => DMatrix::identity(3, 3),
        EgoMode::Ground => {
            let g = nalgebra::Matrix3x2::new(pitch.cos(), 0.0, 0.0, roll.cos(), pitch.sin(), roll.sin());
            let a = sensor_rotation.transpose() * g;
            DMatrix::from_column_slice(3, 2, a.as_slice())
        }
    }
}

/// Least squares on the given rows; `None` when the system is rank deficient.
fn solve_rows(points: &[&RadarPoint], a: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = points.len();
    let k = a.ncols();
    let mut h = DMatrix::zeros(n, 3);
    let mut d = DVector::zeros(n);
    for (i, p) in points.iter().enumerate() {
        let dir = p.direction();
        for c in 0..3 {
            h[(i, c)] = dir[c];
        }
        d[i] = p.doppler;
    }
    let m = h * a;
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if svd.singular_values.len() < k || smax <= 0.0 || smin < 1e-6 * smax {
        return None;
    }
    svd.solve(&d, 0.0).ok()
}

fn residual(p: &RadarPoint, v: &Vector3<f64>) -> f64 {
    p.doppler - p.direction().dot(v)
}

/// Sensor-frame velocity from one scan.
///
/// RANSAC over minimal subsets (3 points aerial, 2 ground), then least
/// squares on the largest consensus set. `sensor_rotation` is the rotation
/// of the sensor in the body frame, used by ground mode.
pub fn estimate_ego_velocity(
    scan: &RadarScan,
    attitude: (f64, f64),
    mode: EgoMode,
    sensor_rotation: &Matrix3<f64>,
    config: &RadarOdometryConfig,
) -> Result<EgoVelocity, RadarError> {
    let pts: Vec<&RadarPoint> = scan.points.iter().filter(|p| p.position.norm() > 1e-9).collect();
    let need = mode.minimal_points();
    if pts.len() < need {
        return Err(RadarError::InsufficientData {
            have: pts.len(),
            need,
        });
    }
    let a = unknown_map(mode, attitude.0, attitude.1, sensor_rotation);
    let to_v = |u: &DVector<f64>| -> Vector3<f64> {
        let v = &a * u;
        Vector3::new(v[0], v[1], v[2])
    };
    // full-set solution doubles as the first hypothesis and the rank check
    let full = solve_rows(&pts, &a).ok_or(RadarError::UnobservableVelocity)?;

    let count = |v: &Vector3<f64>| -> (usize, f64) {
        let mut n = 0;
        let mut sq = 0.0;
        for p in &pts {
            let r = residual(p, v);
            if r.abs() <= config.ransac_threshold {
                n += 1;
                sq += r * r;
            }
        }
        (n, sq)
    };
    let mut best_v = to_v(&full);
    let mut best = count(&best_v);
    if best.0 < pts.len() {
        let seed = scan.time.to_bits() ^ (pts.len() as u64).rotate_left(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..config.ransac_iterations {
            let idx = sample(&mut rng, pts.len(), need);
            let subset: Vec<&RadarPoint> = idx.iter().map(|i| pts[i]).collect();
            let Some(u) = solve_rows(&subset, &a) else {
                continue;
            };
            let v = to_v(&u);
            let c = count(&v);
            if c.0 > best.0 || (c.0 == best.0 && c.1 < best.1) {
                best = c;
                best_v = v;
            }
        }
    }
    let inliers: Vec<&RadarPoint> = pts
        .iter()
        .copied()
        .filter(|p| residual(p, &best_v).abs() <= config.ransac_threshold)
        .collect();
    let v = if inliers.len() == pts.len() {
        to_v(&full)
    } else if inliers.len() >= need {
        solve_rows(&inliers, &a)
            .map(|u| to_v(&u))
            .ok_or(RadarError::UnobservableVelocity)?
    } else {
        best_v
    };
    let rms = if inliers.is_empty() {
        0.0
    } else {
        (inliers.iter().map(|p| residual(p, &v).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt()
    };
    Ok(EgoVelocity {
        v,
        inlier_count: inliers.len(),
        residual_rms: rms,
        mode,
    })
}

/// Keeps the points whose Doppler agrees with `velocity` within `threshold`.
pub fn filter_scan(scan: &RadarScan, velocity: &EgoVelocity, threshold: f64) -> RadarScan {
    RadarScan {
        time: scan.time,
        points: scan
            .points
            .iter()
            .filter(|p| p.position.norm() > 1e-9 && residual(p, &velocity.v).abs() <= threshold)
            .copied()
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanMatchResult {
    /// Pose of the current sensor frame in the previous one:
    /// `p_prev = T · p_curr`.
    pub relative: SE3Transform,
    /// Mean squared correspondence distance, m².
    pub fitness: f64,
    pub iterations: usize,
    pub converged: bool,
    pub correspondences: usize,
}

/// Uniform voxel hash over a point set for nearest-neighbour queries.
const MAX_RING: i64 = 3;

struct NeighborGrid<'a> {
    points: &'a [RadarPoint],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> NeighborGrid<'a> {
    fn new(points: &'a [RadarPoint], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(&p.position, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Index and squared distance of the closest point.
    fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=MAX_RING {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                self.consider(i, q, &mut best);
                            }
                        }
                    }
                }
            }
            // everything outside the scanned block is at least `ring · cell` away
            let covered = ring as f64 * self.cell;
            if best.1 <= covered * covered {
                return best;
            }
        }
        // far from every occupied cell: exhaustive scan
        for i in 0..self.points.len() {
            self.consider(i, q, &mut best);
        }
        best
    }

    fn consider(&self, i: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        let d = (self.points[i].position - q).norm_squared();
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
    }
}

/// Rigid transform minimizing `Σ ‖R·src + t − dst‖²`.
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> SE3Transform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    SE3Transform::new(r, cd - r * cs)
}

/// Point-to-point ICP aligning `curr` onto `prev`.
///
/// Correspondences are nearest neighbours within
/// `max(icp_min_gate, icp_gate_factor · median distance)`; iteration stops
/// when the correspondence set repeats or after `icp_max_iterations`.
pub fn scan_match(
    prev: &RadarScan,
    curr: &RadarScan,
    initial_guess: &SE3Transform,
    config: &RadarOdometryConfig,
) -> Result<ScanMatchResult, RadarError> {
    let need = config.min_points;
    for s in [prev, curr] {
        if s.len() < need {
            return Err(RadarError::InsufficientData { have: s.len(), need });
        }
    }
    let grid = NeighborGrid::new(&prev.points, 1.0);

    let mut t = *initial_guess;
    let mut last_pairs: Vec<(usize, usize)> = Vec::new();
    let mut fitness = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut pairs_len = 0;
    for it in 0..config.icp_max_iterations {
        iterations = it + 1;
        let moved: Vec<Vector3<f64>> = curr
            .points
            .iter()
            .map(|p| t.transform_point(&p.position))
            .collect();
        let nn: Vec<(usize, f64)> = moved.iter().map(|q| grid.nearest(q)).collect();
        let mut dists: Vec<f64> = nn.iter().map(|x| x.1.sqrt()).collect();
        dists.sort_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        let gate = config.icp_min_gate.max(config.icp_gate_factor * median);
        let pairs: Vec<(usize, usize)> = nn
            .iter()
            .enumerate()
            .filter(|(_, (_, d2))| d2.sqrt() <= gate)
            .map(|(i, (j, _))| (i, *j))
            .collect();
        pairs_len = pairs.len();
        if pairs.len() < 3 {
            fitness = f64::INFINITY;
            break;
        }
        fitness = pairs.iter().map(|&(i, _)| nn[i].1).sum::<f64>() / pairs.len() as f64;
        if pairs == last_pairs {
            converged = true;
            break;
        }
        let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| moved[i]).collect();
        let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| prev.points[j].position).collect();
        let delta = kabsch(&src, &dst);
        t = delta * t;
        last_pairs = pairs;
    }
    let enough = pairs_len >= need.min(curr.len());
    Ok(ScanMatchResult {
        relative: t,
        fitness,
        iterations,
        converged: converged && enough && fitness <= config.fitness_threshold,
        correspondences: pairs_len,
    })
}

/// A relative-pose constraint between consecutive poses of one robot,
/// expressed in 4-DOF coordinates of its odometry frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryMeasurement {
    pub relative: Pose4,
    pub covariance: Matrix4<f64>,
}

/// Reduces a full body-frame relative transform to 4-DOF using the known
/// attitude of the earlier pose: the translation is levelled and the yaw
/// increment taken from the levelled rotation.
pub fn level_relative(body_relative: &SE3Transform, roll: f64, pitch: f64) -> Pose4 {
    let level = rotation_from_rpy(roll, pitch, 0.0);
    let t = level * body_relative.translation;
    let (_, _, yaw) = rpy_from_rotation(&(level * body_relative.rotation));
    Pose4::new(t.x, t.y, t.z, yaw)
}

/// Turns a converged scan match into an odometry measurement.
///
/// `extrinsic` is the sensor pose in the body frame and `attitude` the
/// roll/pitch of the body at the earlier scan.
pub fn make_odometry_factor(
    result: &ScanMatchResult,
    extrinsic: &SE3Transform,
    attitude: (f64, f64),
    config: &RadarOdometryConfig,
) -> Result<OdometryMeasurement, RadarError> {
    if !result.converged {
        return Err(RadarError::NotConverged);
    }
    let body = *extrinsic * result.relative * extrinsic.inverse();
    let relative = level_relative(&body, attitude.0, attitude.1);
    Ok(OdometryMeasurement {
        relative,
        covariance: radar_covariance(result.fitness, config),
    })
}

/// Base diagonal, scaled up when the match is worse than the reference
/// fitness, with the vertical term inflated.
pub fn radar_covariance(fitness: f64, config: &RadarOdometryConfig) -> Matrix4<f64> {
    let scale = (fitness / config.fitness_reference).max(1.0);
    let st = config.sigma_translation.powi(2) * scale;
    Matrix4::from_diagonal(&nalgebra::Vector4::new(
        st,
        st,
        st * config.vertical_inflation,
        config.sigma_yaw.powi(2) * scale,
    ))
}

/// Initial guess for matching two scans `dt` apart: translation from the
/// mean ego-velocity, rotation from another source (e.g. wheel odometry or
/// gyro) already expressed in the sensor frame.
pub fn velocity_guess(
    v_prev: &Vector3<f64>,
    v_curr: &Vector3<f64>,
    dt: f64,
    rotation: &Matrix3<f64>,
) -> SE3Transform {
    SE3Transform::new(*rotation, (v_prev + v_curr) * 0.5 * dt)
}

/// Rotation angle of a transform, radians.
pub fn rotation_angle(t: &SE3Transform) -> f64 {
    so3_log(&t.rotation).map_or(std::f64::consts::PI, |v| v.norm())
}

/// 10-sample trailing moving average, for reporting only.
pub fn smooth_velocities(v: &[Vector3<f64>], width: usize) -> Vec<Vector3<f64>> {
    let width = width.max(1);
    (0..v.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(width);
            v[lo..=i].iter().sum::<Vector3<f64>>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Per-scan outputs of one robot's radar pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame {
    pub time: f64,
    pub ego: Option<EgoVelocity>,
    pub filtered: RadarScan,
}

/// A scan-to-scan match between frames `from` and `from + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarStep {
    pub from: usize,
    pub result: ScanMatchResult,
}

/// Ego-motion and scan-to-scan odometry for one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarTrack {
    pub frames: Vec<RadarFrame>,
    pub steps: Vec<RadarStep>,
    pub extrinsic: SE3Transform,
}

fn sensor_rotation_between(
    odometry: &Trajectory,
    extrinsic: &SE3Transform,
    t0: f64,
    t1: f64,
) -> Option<SE3Transform> {
    let a = odometry.pose_at(t0)?;
    let b = odometry.pose_at(t1)?;
    Some(extrinsic.inverse() * a.inverse() * b * *extrinsic)
}

/// Runs ego-motion, filtering and scan-to-scan matching over a scan stream.
///
/// `odometry` supplies the IMU attitude and the rotation part of the
/// matching guess.
pub fn process_scans(
    scans: &[RadarScan],
    odometry: &Trajectory,
    extrinsic: &SE3Transform,
    mode: EgoMode,
    config: &RadarOdometryConfig,
) -> RadarTrack {
    let mut frames = Vec::with_capacity(scans.len());
    for scan in scans {
        let attitude = odometry
            .pose_at(scan.time)
            .map(|p| {
                let (r, p, _) = p.rpy();
                (r, p)
            })
            .unwrap_or((0.0, 0.0));
        let ego = estimate_ego_velocity(scan, attitude, mode, &extrinsic.rotation, config).ok();
        let filtered = match &ego {
            Some(e) => filter_scan(scan, e, config.filter_threshold),
            None => scan.clone(),
        };
        frames.push(RadarFrame {
            time: scan.time,
            ego,
            filtered,
        });
    }
    let mut steps = Vec::new();
    for k in 1..frames.len() {
        let (a, b) = (&frames[k - 1], &frames[k]);
        let (Some(ea), Some(eb)) = (a.ego, b.ego) else {
            continue;
        };
        let Some(rel) = sensor_rotation_between(odometry, extrinsic, a.time, b.time) else {
            continue;
        };
        let guess = velocity_guess(&ea.v, &eb.v, b.time - a.time, &rel.rotation);
        if let Ok(result) = scan_match(&a.filtered, &b.filtered, &guess, config) {
            if result.converged {
                steps.push(RadarStep { from: k - 1, result });
            }
        }
    }
    RadarTrack {
        frames,
        steps,
        extrinsic: *extrinsic,
    }
}

impl RadarTrack {
    /// Body poses from chaining the scan-to-scan matches, starting at
    /// `start`. The chain stops at the first gap.
    pub fn concatenated(&self, start: &SE3Transform) -> Vec<(f64, SE3Transform)> {
        let mut out = Vec::new();
        let Some(first) = self.steps.first() else {
            return out;
        };
        let mut pose = *start;
        out.push((self.frames[first.from].time, pose));
        let mut expected = first.from;
        for s in &self.steps {
            if s.from != expected {
                break;
            }
            pose = pose * (self.extrinsic * s.result.relative * self.extrinsic.inverse());
            out.push((self.frames[s.from + 1].time, pose));
            expected = s.from + 1;
        }
        out
    }

    fn nearest_frame(&self, t: f64) -> Option<usize> {
        let idx = self.frames.partition_point(|f| f.time < t);
        [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&i| i < self.frames.len())
            .min_by(|&a, &b| {
                (self.frames[a].time - t)
                    .abs()
                    .total_cmp(&(self.frames[b].time - t).abs())
            })
    }

    /// Relative-pose measurement between two keyframe times from matching
    /// the nearest scans directly.
    pub fn keyframe_factor(
        &self,
        ta: f64,
        tb: f64,
        odometry: &Trajectory,
        config: &RadarOdometryConfig,
    ) -> Option<OdometryMeasurement> {
        let ia = self.nearest_frame(ta)?;
        let ib = self.nearest_frame(tb)?;
        if ib <= ia {
            return None;
        }
        let (fa, fb) = (&self.frames[ia], &self.frames[ib]);
        if fa.ego.is_none() || fb.ego.is_none() {
            return None;
        }
        // chain of scan-to-scan matches when complete, odometry otherwise
        let chain: Vec<&RadarStep> = self
            .steps
            .iter()
            .filter(|s| s.from >= ia && s.from < ib)
            .collect();
        let guess = if chain.len() == ib - ia {
            chain
                .iter()
                .fold(SE3Transform::identity(), |acc, s| acc * s.result.relative)
        } else {
            sensor_rotation_between(odometry, &self.extrinsic, fa.time, fb.time)?
        };
        let result = scan_match(&fa.filtered, &fb.filtered, &guess, config).ok()?;
        if !result.converged {
            return None;
        }
        let body = self.extrinsic * result.relative * self.extrinsic.inverse();
        // bridge keyframe time to scan time with odometry
        let da = odometry.pose_at(ta)?;
        let dsa = odometry.pose_at(fa.time)?;
        let dsb = odometry.pose_at(fb.time)?;
        let db = odometry.pose_at(tb)?;
        let full = da.inverse() * dsa * body * dsb.inverse() * db;
        let (roll, pitch, _) = da.rpy();
        Some(OdometryMeasurement {
            relative: level_relative(&full, roll, pitch),
            covariance: radar_covariance(result.fitness, config),
        })
    }
}
