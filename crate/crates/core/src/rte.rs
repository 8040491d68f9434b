//! Relative transform estimation between the two odometry frames from UWB
//! ranges.
//!
//! The estimated transform `T` maps UGV odometry coordinates into UAV
//! odometry coordinates, so a range between tag `t` (on the UAV) and anchor
//! `a` (on the UGV) is predicted as `‖p_t − T·p_a‖`.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose4_to_se3, rot_z, rot_z_derivative, Pose4, Pose4Jet, SE3Transform};
use crate::nls::{self, CostFunction, ResidualBlock, SolverOptions};
use crate::sim::{RangeMeasurement, Robot, SensorRig, Trajectory, TrajectorySample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RteError {
    #[error("window not ready: {0}")]
    NotReady(String),
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RteConfig {
    pub enabled: bool,
    /// Meters of travel each robot needs before the first solve.
    pub min_window: f64,
    /// Older data is evicted once either robot exceeds this arc length.
    pub max_window: f64,
    pub min_residuals: usize,
    /// Solves per second.
    pub cadence: f64,
    pub gating: bool,
    pub gate_sigmas: f64,
    pub gate_offset: f64,
    /// Relative cost difference under which the previous estimate wins a tie.
    pub tie_tolerance: f64,
    pub use_prior: bool,
    pub prior_sigma_translation: f64,
    /// Degrees.
    pub prior_sigma_yaw: f64,
    pub solver: SolverOptions,
}

impl Default for RteConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_window: 2.0,
            max_window: 10.0,
            min_residuals: 20,
            cadence: 1.0,
            gating: true,
            gate_sigmas: 5.0,
            gate_offset: 0.5,
            tie_tolerance: 0.01,
            use_prior: false,
            prior_sigma_translation: 0.5,
            prior_sigma_yaw: 10.0,
            solver: SolverOptions::default(),
        }
    }
}

impl RteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_window >= 0.0 && self.min_window.is_finite()) {
            return Err("rte.min_window: must be non-negative".into());
        }
        if !(self.max_window > 0.0 && self.max_window >= self.min_window) {
            return Err("rte.max_window: must be positive and at least min_window".into());
        }
        if !(self.cadence > 0.0 && self.cadence.is_finite()) {
            return Err("rte.cadence: must be positive".into());
        }
        if self.min_residuals < 4 {
            return Err("rte.min_residuals: at least 4 are needed for 4 unknowns".into());
        }
        if !(self.prior_sigma_translation > 0.0 && self.prior_sigma_yaw > 0.0) {
            return Err("rte.prior_sigma_*: must be positive".into());
        }
        if !(self.gate_sigmas >= 0.0 && self.gate_offset >= 0.0) {
            return Err("rte.gate_*: must be non-negative".into());
        }
        Ok(())
    }

    pub fn prior_covariance(&self) -> Matrix4<f64> {
        let st = self.prior_sigma_translation.powi(2);
        Matrix4::from_diagonal(&nalgebra::Vector4::new(
            st,
            st,
            st,
            self.prior_sigma_yaw.to_radians().powi(2),
        ))
    }
}

/// One solve of the window problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform4Estimate {
    pub time: f64,
    pub transform: Pose4,
    pub covariance: Matrix4<f64>,
    /// Arc length of the window per robot, indexed by [`Robot::index`].
    pub window_span: [f64; 2],
    pub residual_count: usize,
    pub rank_deficient: bool,
    pub cost: f64,
    /// Wall time of the solve, seconds. Not part of any deterministic output.
    pub solve_seconds: f64,
}

impl Transform4Estimate {
    pub fn se3(&self) -> SE3Transform {
        pose4_to_se3(&self.transform)
    }

    /// Yaw has no information when its variance is enormous or the
    /// information matrix is singular.
    pub fn observable(&self) -> bool {
        !self.rank_deficient && self.covariance.trace() < 1e6
    }
}

/// `‖p_t − T·p_a‖`.
pub fn predict_range(t: &SE3Transform, tag: &Vector3<f64>, anchor: &Vector3<f64>) -> f64 {
    (tag - t.transform_point(anchor)).norm()
}

/// Predicted range and its gradient with respect to `(x, y, z, θ)`.
pub fn range_jacobian(x: &Pose4, tag: &Vector3<f64>, anchor: &Vector3<f64>) -> (f64, [f64; 4]) {
    let diff = tag - (rot_z(x.theta) * anchor + x.translation());
    let r = diff.norm();
    if r < 1e-12 {
        return (r, [0.0; 4]);
    }
    let dtheta = -diff.dot(&(rot_z_derivative(x.theta) * anchor)) / r;
    (r, [-diff.x / r, -diff.y / r, -diff.z / r, dtheta])
}

/// A range already mapped into the two odometry frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRange {
    pub time: f64,
    /// Tag position in the UAV odometry frame.
    pub tag: Vector3<f64>,
    /// Anchor position in the UGV odometry frame.
    pub anchor: Vector3<f64>,
    pub distance: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    pub ranges: Vec<WindowRange>,
    /// Arc length per robot, indexed by [`Robot::index`].
    pub lengths: [f64; 2],
    pub start: f64,
    pub end: f64,
}

/// Earliest time from which `traj` travelled at most `max_len` up to `end`.
fn window_start(traj: &Trajectory, end: f64, max_len: f64) -> f64 {
    let mut acc = 0.0;
    let mut start = traj.start_time();
    let idx = traj.samples.partition_point(|s| s.time <= end);
    for k in (1..idx).rev() {
        let step = (traj.samples[k].pose.translation - traj.samples[k - 1].pose.translation).norm();
        if acc + step > max_len {
            start = traj.samples[k].time;
            break;
        }
        acc += step;
    }
    start
}

/// The newest window ending at `now`: at most `max_window` of travel per
/// robot, and at least `min_window` for both.
pub fn build_window(
    ranges: &[RangeMeasurement],
    uav_odometry: &Trajectory,
    ugv_odometry: &Trajectory,
    rig: &SensorRig,
    config: &RteConfig,
    now: f64,
) -> Result<MeasurementWindow, RteError> {
    if uav_odometry.is_empty() || ugv_odometry.is_empty() {
        return Err(RteError::NotReady("no odometry yet".into()));
    }
    let end = now.min(uav_odometry.end_time()).min(ugv_odometry.end_time());
    let start = window_start(uav_odometry, end, config.max_window)
        .max(window_start(ugv_odometry, end, config.max_window))
        .max(uav_odometry.start_time())
        .max(ugv_odometry.start_time());
    if end < start {
        return Err(RteError::NotReady("odometry streams do not overlap".into()));
    }
    let lengths = [
        uav_odometry.arc_length_between(start, end),
        ugv_odometry.arc_length_between(start, end),
    ];
    if lengths.iter().any(|&l| l < config.min_window) {
        return Err(RteError::NotReady(format!(
            "travel {:.2} m / {:.2} m below {:.2} m",
            lengths[0], lengths[1], config.min_window
        )));
    }
    let mut out = Vec::new();
    for m in ranges.iter().filter(|m| m.time >= start && m.time <= end) {
        let (Some(tag), Some(anchor)) = (rig.tag(m.tag_id), rig.anchor(m.anchor_id)) else {
            continue;
        };
        let (Some(pu), Some(pg)) = (uav_odometry.pose_at(m.time), ugv_odometry.pose_at(m.time)) else {
            continue;
        };
        out.push(WindowRange {
            time: m.time,
            tag: pu.transform_point(&tag),
            anchor: pg.transform_point(&anchor),
            distance: m.distance,
            sigma: m.sigma,
        });
    }
    Ok(MeasurementWindow {
        ranges: out,
        lengths,
        start,
        end,
    })
}

/// All window ranges as one whitened residual vector.
struct RangeCost {
    ranges: Vec<WindowRange>,
}

impl CostFunction for RangeCost {
    fn residual_dim(&self) -> usize {
        self.ranges.len()
    }

    fn evaluate(&self, p: &[f64]) -> DVector<f64> {
        let t = pose4_to_se3(&Pose4::from_slice(p));
        DVector::from_iterator(
            self.ranges.len(),
            self.ranges
                .iter()
                .map(|r| (predict_range(&t, &r.tag, &r.anchor) - r.distance) / r.sigma),
        )
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let x = Pose4::from_slice(p);
        let mut j = DMatrix::zeros(self.ranges.len(), 4);
        for (k, r) in self.ranges.iter().enumerate() {
            let (_, g) = range_jacobian(&x, &r.tag, &r.anchor);
            for c in 0..4 {
                j[(k, c)] = g[c] / r.sigma;
            }
        }
        Some(j)
    }
}

/// `log4(T_p⁻¹ · x)`.
struct PriorCost {
    prior: Pose4,
}

impl CostFunction for PriorCost {
    fn residual_dim(&self) -> usize {
        4
    }

    fn evaluate(&self, p: &[f64]) -> DVector<f64> {
        let v = crate::geometry::pose4_error(&self.prior, &Pose4::from_slice(p));
        DVector::from_column_slice(v.as_slice())
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let chain = Pose4Jet::constant(self.prior, 4)
            .inverse()
            .compose(&Pose4Jet::variable(Pose4::from_slice(p), 0, 4));
        Some(chain.log().1)
    }
}

/// Translation candidates for a fixed yaw: linearized trilateration
/// (both roots of the vertical component) and the centroid offset.
fn translation_seeds(ranges: &[WindowRange], yaw: f64) -> Vec<Vector3<f64>> {
    let r = rot_z(yaw);
    let n = ranges.len() as f64;
    let u: Vec<Vector3<f64>> = ranges.iter().map(|w| w.tag - r * w.anchor).collect();
    let u_mean = u.iter().sum::<Vector3<f64>>() / n;
    let d2: Vec<f64> = ranges.iter().map(|w| w.distance * w.distance).collect();
    let d2_mean = d2.iter().sum::<f64>() / n;
    let u2: Vec<f64> = u.iter().map(|v| v.norm_squared()).collect();
    let u2_mean = u2.iter().sum::<f64>() / n;

    let mut seeds = vec![u_mean];
    // d² − mean(d²) = ‖u‖² − mean‖u‖² − 2 (u − ū)·t
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for k in 0..ranges.len() {
        let du = u[k] - u_mean;
        let rhs = (u2[k] - u2_mean) - (d2[k] - d2_mean);
        a += 4.0 * du * du.transpose();
        b += 2.0 * du * rhs;
    }
    let svd = a.svd(true, true);
    let Ok(t_lin) = svd.solve(&b, 1e-9 * svd.singular_values.max().max(1e-300)) else {
        return seeds;
    };
    // mean(d²) = mean‖u‖² − 2 ū·t + ‖t‖² fixes t_z given t_xy
    let (tx, ty) = (t_lin.x, t_lin.y);
    let c = u2_mean - d2_mean - 2.0 * (u_mean.x * tx + u_mean.y * ty) + tx * tx + ty * ty;
    let bz = -2.0 * u_mean.z;
    let disc = bz * bz - 4.0 * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        seeds.push(Vector3::new(tx, ty, (-bz + s) / 2.0));
        seeds.push(Vector3::new(tx, ty, (-bz - s) / 2.0));
    } else {
        seeds.push(Vector3::new(tx, ty, -bz / 2.0));
    }
    if t_lin.iter().all(|v| v.is_finite()) {
        seeds.push(t_lin);
    }
    seeds
}

struct Candidate {
    state: DVector<f64>,
    cost: f64,
}

fn run_start(blocks: &[ResidualBlock], start: Pose4, options: &SolverOptions) -> Option<Candidate> {
    let init = DVector::from_column_slice(&start.to_array());
    let (state, report) = nls::solve(blocks, init, options).ok()?;
    if !report.final_cost.is_finite() || state.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Candidate {
        state,
        cost: report.final_cost,
    })
}

/// Solves the window problem.
///
/// Starts from every yaw in `{0, π/2, π, 3π/2}` combined with translation
/// seeds, plus `previous` if given; the lowest cost wins, except that the
/// previous estimate's basin is kept on near-ties.
pub fn estimate(
    window: &MeasurementWindow,
    prior: Option<(Pose4, Matrix4<f64>)>,
    previous: Option<&Transform4Estimate>,
    config: &RteConfig,
) -> Result<Transform4Estimate, RteError> {
    let clock = Instant::now();
    if window.ranges.len() < config.min_residuals {
        return Err(RteError::EstimationFailed(format!(
            "{} residuals, need {}",
            window.ranges.len(),
            config.min_residuals
        )));
    }
    let mut blocks = vec![ResidualBlock::new(
        vec![0, 1, 2, 3],
        RangeCost {
            ranges: window.ranges.clone(),
        },
    )];
    if let Some((p, cov)) = prior {
        let cov = DMatrix::from_column_slice(4, 4, cov.as_slice());
        let block = ResidualBlock::new(vec![0, 1, 2, 3], PriorCost { prior: p })
            .with_covariance(&cov)
            .map_err(|e| RteError::EstimationFailed(e.to_string()))?;
        blocks.push(block);
    }

    let mut best: Option<Candidate> = None;
    for k in 0..4 {
        let yaw = k as f64 * FRAC_PI_2;
        for t in translation_seeds(&window.ranges, yaw) {
            if let Some(c) = run_start(&blocks, Pose4::from_translation_yaw(&t, yaw), &config.solver) {
                if best.as_ref().map_or(true, |b| c.cost < b.cost) {
                    best = Some(c);
                }
            }
        }
    }
    if let Some(prev) = previous {
        if let Some(c) = run_start(&blocks, prev.transform, &config.solver) {
            let keep = match &best {
                None => true,
                Some(b) => c.cost <= b.cost * (1.0 + config.tie_tolerance),
            };
            if keep {
                best = Some(c);
            }
        }
    }
    let best = best.ok_or_else(|| RteError::EstimationFailed("no start converged".into()))?;
    let cov = nls::covariance(&blocks, &best.state, &config.solver);
    let covariance = Matrix4::from_fn(|r, c| cov.matrix[(r, c)]);
    if covariance.iter().any(|v| !v.is_finite()) {
        return Err(RteError::EstimationFailed("non-finite covariance".into()));
    }
    Ok(Transform4Estimate {
        time: window.end,
        transform: Pose4::from_slice(best.state.as_slice()),
        covariance,
        window_span: window.lengths,
        residual_count: window.ranges.len(),
        rank_deficient: cov.rank_deficient,
        cost: best.cost,
        solve_seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Streaming estimator: owns the buffers and the latest estimate.
#[derive(Debug, Clone)]
pub struct RelativeTransformEstimator {
    config: RteConfig,
    rig: SensorRig,
    ranges: VecDeque<RangeMeasurement>,
    odometry: [VecDeque<TrajectorySample>; 2],
    previous: Option<Transform4Estimate>,
    prior: Option<(Pose4, Matrix4<f64>)>,
}

impl RelativeTransformEstimator {
    pub fn new(config: RteConfig, rig: SensorRig) -> Self {
        Self {
            config,
            rig,
            ranges: VecDeque::new(),
            odometry: Default::default(),
            previous: None,
            prior: None,
        }
    }

    pub fn config(&self) -> &RteConfig {
        &self.config
    }

    /// Fixed prior used in every later solve, with the configured covariance.
    /// Without one, `use_prior` makes each solve use the previous estimate.
    pub fn set_prior(&mut self, prior: Option<Pose4>) {
        self.prior = prior.map(|p| (p, self.config.prior_covariance()));
    }

    pub fn latest(&self) -> Option<&Transform4Estimate> {
        self.previous.as_ref()
    }

    pub fn push_range(&mut self, m: RangeMeasurement) {
        self.ranges.push_back(m);
    }

    pub fn push_odometry(&mut self, robot: Robot, sample: TrajectorySample) {
        let buf = &mut self.odometry[robot.index()];
        if buf.back().map_or(true, |s| sample.time > s.time) {
            buf.push_back(sample);
        }
    }

    fn trajectory(&self, robot: Robot) -> Trajectory {
        Trajectory::new(self.odometry[robot.index()].iter().copied().collect())
    }

    fn gated(&self, window: MeasurementWindow) -> MeasurementWindow {
        let Some(prev) = (self.config.gating).then_some(()).and(self.previous.as_ref()) else {
            return window;
        };
        let t = prev.se3();
        let ranges = window
            .ranges
            .into_iter()
            .filter(|r| {
                let gate = self.config.gate_sigmas * r.sigma + self.config.gate_offset;
                (predict_range(&t, &r.tag, &r.anchor) - r.distance).abs() <= gate
            })
            .collect();
        MeasurementWindow { ranges, ..window }
    }

    /// Solves with all data up to `now`. On failure the previous estimate is
    /// kept.
    pub fn update(&mut self, now: f64) -> Result<Transform4Estimate, RteError> {
        let uav = self.trajectory(Robot::Uav);
        let ugv = self.trajectory(Robot::Ugv);
        let ranges: Vec<RangeMeasurement> = self.ranges.iter().copied().collect();
        let window = build_window(&ranges, &uav, &ugv, &self.rig, &self.config, now)?;
        self.evict(window.start);
        let window = self.gated(window);
        let prior = self.prior.or_else(|| {
            let prev = self.previous.as_ref().filter(|_| self.config.use_prior)?;
            Some((prev.transform, self.config.prior_covariance()))
        });
        let est = estimate(&window, prior, self.previous.as_ref(), &self.config)?;
        self.previous = Some(est.clone());
        Ok(est)
    }

    /// Drops data that can no longer enter a window.
    fn evict(&mut self, start: f64) {
        while self.ranges.front().is_some_and(|m| m.time < start) {
            self.ranges.pop_front();
        }
        for buf in &mut self.odometry {
            // keep one sample before the start for interpolation
            while buf.len() > 1 && buf[1].time <= start {
                buf.pop_front();
            }
        }
    }
}

/// Instantaneous truth of the estimated transform: with `D` the odometry pose
/// and `W` the true pose of each robot at the same instant,
/// `D_uav · W_uav⁻¹ · W_ugv · D_ugv⁻¹`, reduced to 4-DOF.
pub fn true_transform(
    uav_truth: &SE3Transform,
    uav_odometry: &SE3Transform,
    ugv_truth: &SE3Transform,
    ugv_odometry: &SE3Transform,
) -> Pose4 {
    let du = Pose4::from_se3(uav_odometry);
    let dg = Pose4::from_se3(ugv_odometry);
    let wu = Pose4::from_se3(uav_truth);
    let wg = Pose4::from_se3(ugv_truth);
    du.compose(&wu.inverse()).compose(&wg).compose(&dg.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::wrap_angle;
    use crate::sim::synthesize_uwb;
    use crate::sim::{generate_mission, MissionKind, MissionSpec, UwbNoiseModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predict_range_examples() {
        let t = SE3Transform::identity();
        assert_eq!(
            predict_range(&t, &Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)),
            5.0
        );
        let t = pose4_to_se3(&Pose4::new(1.0, 0.0, 0.0, FRAC_PI_2));
        let d = predict_range(&t, &Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0));
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn predict_range_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Pose4::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.0..3.0),
            );
            let tag = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.5);
            let anchor = Vector3::new(rng.gen_range(-3.0..3.0), 0.2, rng.gen_range(-1.0..1.0));
            let m = pose4_to_se3(&p).to_matrix();
            let h = m * nalgebra::Vector4::new(anchor.x, anchor.y, anchor.z, 1.0);
            let oracle = ((tag.x - h[0]).powi(2) + (tag.y - h[1]).powi(2) + (tag.z - h[2]).powi(2)).sqrt();
            assert!((predict_range(&pose4_to_se3(&p), &tag, &anchor) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn range_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.0..3.0),
            ];
            let tag = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 1.0);
            let anchor = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.3);
            let (_, g) = range_jacobian(&Pose4::from_slice(&p), &tag, &anchor);
            for k in 0..4 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let fa = predict_range(&pose4_to_se3(&Pose4::from_slice(&a)), &tag, &anchor);
                let fb = predict_range(&pose4_to_se3(&Pose4::from_slice(&b)), &tag, &anchor);
                let fd = (fa - fb) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    fn noiseless() -> UwbNoiseModel {
        UwbNoiseModel {
            sigma: 0.0,
            dropout: 0.0,
            ..Default::default()
        }
    }

    /// UGV odometry = world, UAV odometry = `truth · world`.
    fn rig_frames(truth: &Pose4, duration: f64) -> (Trajectory, Trajectory, Vec<RangeMeasurement>) {
        let spec = MissionSpec {
            kind: MissionKind::Coordinated,
            duration,
            ..Default::default()
        };
        let (uav, ugv) = generate_mission(&spec).unwrap();
        let ranges = synthesize_uwb(&uav, &ugv, &SensorRig::default(), &noiseless(), 1);
        let frame = pose4_to_se3(truth);
        (uav.in_frame(&frame.inverse()), ugv, ranges)
    }

    #[test]
    fn noiseless_recovery() {
        let truth = Pose4::new(2.0, -1.0, 1.5, 0.7);
        let (uav, ugv, ranges) = rig_frames(&truth, 15.0);
        let cfg = RteConfig::default();
        let w = build_window(&ranges, &uav, &ugv, &SensorRig::default(), &cfg, 15.0).unwrap();
        let est = estimate(&w, None, None, &cfg).unwrap();
        let e = est.transform;
        assert!((e.translation() - truth.translation()).norm() < 1e-6, "{e:?}");
        assert!(wrap_angle(e.theta - truth.theta).abs() < 1e-6);
        assert!(est.observable());
    }

    #[test]
    fn static_robots_never_ready() {
        let spec = MissionSpec {
            kind: MissionKind::Waypoints,
            duration: 20.0,
            waypoints: crate::sim::mission::WaypointSpec {
                uav: vec![[3.0, 0.0, 1.0]],
                ugv: vec![[0.0, 0.0, 0.0]],
                ..Default::default()
            },
            ..Default::default()
        };
        let (uav, ugv) = generate_mission(&spec).unwrap();
        let ranges = synthesize_uwb(&uav, &ugv, &SensorRig::default(), &noiseless(), 1);
        let cfg = RteConfig::default();
        for now in [1.0, 10.0, 19.9] {
            let r = build_window(&ranges, &uav, &ugv, &SensorRig::default(), &cfg, now);
            assert!(matches!(r, Err(RteError::NotReady(_))));
        }
    }

    #[test]
    fn window_is_capped_and_counted() {
        let truth = Pose4::identity();
        let (uav, ugv, ranges) = rig_frames(&truth, 60.0);
        let cfg = RteConfig::default();
        let w = build_window(&ranges, &uav, &ugv, &SensorRig::default(), &cfg, 59.9).unwrap();
        assert!(w.lengths.iter().all(|&l| l <= 10.0 + 1e-9));
        assert!(w.lengths.iter().any(|&l| l > 9.0));
        // every range in the span is used: 8 pairs at 10 Hz
        let expected = ranges
            .iter()
            .filter(|m| m.time >= w.start && m.time <= w.end)
            .count();
        assert_eq!(w.ranges.len(), expected);
        let ticks = ((w.end - w.start) * 10.0).round() as usize + 1;
        assert!((w.ranges.len() as i64 - 8 * ticks as i64).abs() <= 8);
    }

    #[test]
    fn too_few_residuals_fail() {
        let truth = Pose4::identity();
        let (uav, ugv, ranges) = rig_frames(&truth, 15.0);
        let cfg = RteConfig::default();
        let mut w = build_window(&ranges, &uav, &ugv, &SensorRig::default(), &cfg, 15.0).unwrap();
        w.ranges.truncate(19);
        assert!(matches!(
            estimate(&w, None, None, &cfg),
            Err(RteError::EstimationFailed(_))
        ));
    }

    #[test]
    fn sigma_scaling_keeps_argmin() {
        let truth = Pose4::new(-1.0, 2.0, 0.5, -2.0);
        let (uav, ugv, ranges) = rig_frames(&truth, 15.0);
        let cfg = RteConfig::default();
        let w = build_window(&ranges, &uav, &ugv, &SensorRig::default(), &cfg, 15.0).unwrap();
        let a = estimate(&w, None, None, &cfg).unwrap();
        let mut scaled = w.clone();
        for r in &mut scaled.ranges {
            r.sigma *= 7.0;
        }
        let b = estimate(&scaled, None, None, &cfg).unwrap();
        assert!((a.transform.to_vector() - b.transform.to_vector()).norm() < 1e-6);
    }

    #[test]
    fn streaming_prior_adds_information() {
        let truth = Pose4::new(1.0, 0.5, -0.5, 0.3);
        let (uav, ugv, ranges) = rig_frames(&truth, 20.0);
        let run = |use_prior: bool| {
            let cfg = RteConfig {
                use_prior,
                ..Default::default()
            };
            let mut est = RelativeTransformEstimator::new(cfg, SensorRig::default());
            for m in &ranges {
                est.push_range(*m);
            }
            for (robot, tr) in [(Robot::Uav, &uav), (Robot::Ugv, &ugv)] {
                for s in &tr.samples {
                    est.push_odometry(robot, *s);
                }
            }
            est.update(15.0).unwrap();
            est.update(16.0).unwrap()
        };
        let free = run(false);
        let held = run(true);
        assert!(held.covariance.trace() < free.covariance.trace());
        assert!((held.transform.to_vector() - truth.to_vector()).norm() < 1e-6);
    }

    #[test]
    fn prior_residual_jacobian() {
        let cost = PriorCost {
            prior: Pose4::new(0.3, -0.2, 0.1, 2.5),
        };
        let p = [1.0, 2.0, -0.5, -2.9];
        let a = cost.jacobian(&p).unwrap();
        let n = nls::numeric_jacobian(&cost, &p);
        assert!((a - n).abs().max() < 1e-6);
    }

    #[test]
    fn true_transform_of_rigid_frames() {
        let g = Pose4::new(1.0, 2.0, 0.0, 0.4);
        let w = Pose4::new(3.0, -1.0, 1.0, 1.1);
        // UAV odometry frame sits at g in the world, UGV frame at identity
        let du = g.inverse().compose(&w);
        let t = true_transform(
            &w.to_se3(),
            &du.to_se3(),
            &Pose4::identity().to_se3(),
            &Pose4::identity().to_se3(),
        );
        assert!((t.to_vector() - g.inverse().to_vector()).norm() < 1e-12);
    }
}
