//! End-to-end estimation over a dataset, evaluation, and artifact output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::geometry::{Pose4, SE3Transform};
use crate::io::{self, IoError};
use crate::metrics::{range_stats, trajectory_error, transform_rmse_trace, RangeStats, TransformTrace};
use crate::pose_graph::{FactorKind, GlobalPose, MultiRobotGraph};
use crate::radar_odometry::{process_scans, smooth_velocities, EgoMode, EgoVelocity, RadarTrack};
use crate::rte::{true_transform, RelativeTransformEstimator, RteError, Transform4Estimate};
use crate::sim::{sensor_velocity, simulate, Dataset, Robot, SimError, Trajectory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    Runtime(String),
}

/// Switches for ablations and replay pacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub use_rte: bool,
    pub use_radar: bool,
    /// Sleep so that measurement time tracks wall-clock time.
    pub paced: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            use_rte: true,
            use_radar: true,
            paced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarFactorRecord {
    pub robot: Robot,
    pub from: usize,
    pub to: usize,
    pub time: f64,
    pub measurement: Pose4,
    pub covariance: Matrix4<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub rte_estimates: Vec<Transform4Estimate>,
    pub trajectories: [Vec<GlobalPose>; 2],
    pub radar: Option<[RadarTrack; 2]>,
    pub radar_factors: Vec<RadarFactorRecord>,
    pub graph: MultiRobotGraph,
    /// Wall time of every graph solve, seconds.
    pub graph_solve_seconds: Vec<f64>,
    pub graph_failures: usize,
    pub wall_seconds: f64,
}

fn ego_mode(robot: Robot) -> EgoMode {
    match robot {
        Robot::Uav => EgoMode::Aerial,
        Robot::Ugv => EgoMode::Ground,
    }
}

/// Runs the radar front end of both robots on their own threads.
fn radar_tracks(data: &Dataset, config: &RunConfig) -> [RadarTrack; 2] {
    let track = |robot: Robot| {
        let scans: Vec<_> = data
            .scans(robot)
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect();
        process_scans(
            &scans,
            data.odometry(robot),
            &config.rig.radar_extrinsic(robot).to_se3(),
            ego_mode(robot),
            &config.radar_odometry,
        )
    };
    std::thread::scope(|s| {
        let uav = s.spawn(|| track(Robot::Uav));
        let ugv = track(Robot::Ugv);
        [uav.join().expect("radar thread"), ugv]
    })
}

/// Streams odometry, ranges and radar factors through the relative transform
/// estimator and the pose graph in timestamp order.
pub fn run_pipeline(
    data: &Dataset,
    config: &RunConfig,
    options: PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let started = Instant::now();
    let use_radar = options.use_radar && config.radar_odometry.enabled;
    let use_rte = options.use_rte && config.rte.enabled;
    let radar = use_radar.then(|| radar_tracks(data, config));

    let mut rte = RelativeTransformEstimator::new(config.rte.clone(), config.rig.clone());
    let mut graph = MultiRobotGraph::new(config.pose_graph);
    let mut out = PipelineOutput {
        rte_estimates: Vec::new(),
        trajectories: Default::default(),
        radar: None,
        radar_factors: Vec::new(),
        graph: MultiRobotGraph::new(config.pose_graph),
        graph_solve_seconds: Vec::new(),
        graph_failures: 0,
        wall_seconds: 0.0,
    };

    let mut ticks: Vec<f64> = Robot::ALL
        .iter()
        .flat_map(|&r| data.odometry(r).samples.iter().map(|s| s.time))
        .collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    let Some(&t0) = ticks.first() else {
        return Err(PipelineError::Runtime("no odometry samples".into()));
    };

    let period = 1.0 / config.rte.cadence;
    let mut next_rte = t0 + period;
    let mut cursor = [0usize; 2];
    let mut next_range = 0usize;
    // estimates wait until keyframes up to max_time_offset after them exist
    let mut pending: std::collections::VecDeque<Transform4Estimate> = Default::default();
    let wait = config.pose_graph.max_time_offset;
    let last_tick = *ticks.last().expect("non-empty");

    for &t in &ticks {
        if options.paced {
            let due = started + Duration::from_secs_f64((t - t0).max(0.0));
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let mut changed = false;
        for robot in Robot::ALL {
            let samples = &data.odometry(robot).samples;
            let c = &mut cursor[robot.index()];
            while *c < samples.len() && samples[*c].time <= t {
                let s = samples[*c];
                *c += 1;
                rte.push_odometry(robot, s);
                let Some(k) = graph.add_keyframe(robot, s.pose4(), s.time) else {
                    continue;
                };
                changed = true;
                if let (Some(tracks), true) = (&radar, k > 0) {
                    let kf = graph.keyframes(robot);
                    let (ta, tb) = (kf[k - 1].time, kf[k].time);
                    if let Some(m) = tracks[robot.index()].keyframe_factor(
                        ta,
                        tb,
                        data.odometry(robot),
                        &config.radar_odometry,
                    ) {
                        graph
                            .add_relative_factor(FactorKind::Radar, robot, k - 1, k, m.relative, m.covariance)
                            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
                        out.radar_factors.push(RadarFactorRecord {
                            robot,
                            from: k - 1,
                            to: k,
                            time: tb,
                            measurement: m.relative,
                            covariance: m.covariance,
                        });
                    }
                }
            }
        }
        while next_range < data.ranges.len() && data.ranges[next_range].time <= t {
            rte.push_range(data.ranges[next_range]);
            next_range += 1;
        }
        if config.rte.enabled && t + 1e-9 >= next_rte {
            while next_rte <= t + 1e-9 {
                next_rte += period;
            }
            match rte.update(t) {
                Ok(est) => {
                    if use_rte && est.observable() {
                        pending.push_back(est.clone());
                    }
                    out.rte_estimates.push(est);
                }
                Err(RteError::NotReady(_)) | Err(RteError::EstimationFailed(_)) => {}
            }
        }
        while pending
            .front()
            .is_some_and(|e| e.time + wait < t || t >= last_tick)
        {
            let est = pending.pop_front().expect("checked");
            if graph.add_encounter(&est).is_ok() {
                changed = true;
            }
        }
        if changed {
            match graph.optimize_window() {
                Ok(solve) => out.graph_solve_seconds.push(solve.report.wall_time),
                Err(_) => out.graph_failures += 1,
            }
        }
    }

    out.trajectories = graph.export_global_trajectories();
    out.graph = graph;
    out.radar = radar;
    out.wall_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Flat summary used for acceptance checks. Everything here is a pure
/// function of the data and the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub duration: f64,
    pub uwb: Option<RangeStats>,
    pub rte_estimates: usize,
    /// RMS errors over estimates after the first quarter of the mission.
    pub rte_steady_translation_rmse: Option<f64>,
    pub rte_steady_rotation_rmse_deg: Option<f64>,
    /// First time after which the translational error stays below 1.5 m.
    pub rte_settling_time: Option<f64>,
    pub rte_final_translation_error: Option<f64>,
    pub rte_final_rotation_error_deg: Option<f64>,
    pub ugv_ate: Option<f64>,
    pub ugv_yaw_rmse_deg: Option<f64>,
    pub uav_ate: Option<f64>,
    pub uav_yaw_rmse_deg: Option<f64>,
    /// Raw UGV odometry against truth (the UGV odometry frame is the common frame).
    pub ugv_odometry_ate: Option<f64>,
    pub ugv_odometry_yaw_rmse_deg: Option<f64>,
    pub keyframes_uav: usize,
    pub keyframes_ugv: usize,
    pub encounters: usize,
    pub encounters_dropped: usize,
    pub radar_factors: usize,
    pub graph_solves: usize,
    pub graph_failures: usize,
    /// Sensor-frame ego-velocity RMS error, m/s.
    pub uav_ego_velocity_rmse: Option<f64>,
    pub ugv_ego_velocity_rmse: Option<f64>,
    /// End-point error of chained scan-to-scan odometry over arc length, percent.
    pub uav_radar_drift_percent: Option<f64>,
    pub ugv_radar_drift_percent: Option<f64>,
}

/// Translational error (m) below which the relative transform counts as settled.
pub const SETTLING_THRESHOLD: f64 = 1.5;

/// Truth of the relative transform at time `t`.
pub fn true_transform_at(data: &Dataset, t: f64) -> Option<Pose4> {
    Some(true_transform(
        &data.truth(Robot::Uav).pose_at(t)?,
        &data.odometry(Robot::Uav).pose_at(t)?,
        &data.truth(Robot::Ugv).pose_at(t)?,
        &data.odometry(Robot::Ugv).pose_at(t)?,
    ))
}

pub fn rte_trace(data: &Dataset, estimates: &[Transform4Estimate]) -> TransformTrace {
    transform_rmse_trace(estimates, |t| true_transform_at(data, t))
}

/// True range of every measurement.
pub fn true_ranges(data: &Dataset, config: &RunConfig) -> (Vec<f64>, Vec<f64>) {
    let mut measured = Vec::with_capacity(data.ranges.len());
    let mut truth = Vec::with_capacity(data.ranges.len());
    for m in &data.ranges {
        let (Some(pu), Some(pg), Some(tag), Some(anchor)) = (
            data.truth(Robot::Uav).pose_at(m.time),
            data.truth(Robot::Ugv).pose_at(m.time),
            config.rig.tag(m.tag_id),
            config.rig.anchor(m.anchor_id),
        ) else {
            continue;
        };
        measured.push(m.distance);
        truth.push((pu.transform_point(&tag) - pg.transform_point(&anchor)).norm());
    }
    (measured, truth)
}

fn ego_rmse(track: &RadarTrack, truth: &Trajectory) -> Option<f64> {
    let errs: Vec<f64> = track
        .frames
        .iter()
        .filter_map(|f| {
            let v = f.ego?.v;
            let u = sensor_velocity(truth, &track.extrinsic, f.time, 1e-3)?;
            Some((v - u).norm_squared())
        })
        .collect();
    (!errs.is_empty()).then(|| (errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
}

/// End-point drift of the chained scan-to-scan odometry, percent of arc length.
pub fn radar_drift_percent(track: &RadarTrack, truth: &Trajectory) -> Option<f64> {
    let chain = track.concatenated(&SE3Transform::identity());
    let (&(ta, _), &(tb, est)) = (chain.first()?, chain.last()?);
    let truth_rel = truth.pose_at(ta)?.inverse() * truth.pose_at(tb)?;
    let arc = truth.arc_length_between(ta, tb);
    (arc > 0.0).then(|| 100.0 * (est.translation - truth_rel.translation).norm() / arc)
}

fn global_to_series(poses: &[GlobalPose]) -> Vec<(f64, Pose4)> {
    poses.iter().map(|p| (p.time, p.pose)).collect()
}

pub fn summarize(data: &Dataset, config: &RunConfig, out: &PipelineOutput) -> MetricsSummary {
    let duration = data.duration();
    let (measured, truth) = true_ranges(data, config);
    let trace = rte_trace(data, &out.rte_estimates);
    let steady = trace.rmse_after(data.truth(Robot::Ugv).start_time() + 0.25 * duration);
    let ate =
        |r: Robot| trajectory_error(&global_to_series(&out.trajectories[r.index()]), data.truth(r)).ok();
    let ugv = ate(Robot::Ugv);
    let uav = ate(Robot::Uav);
    let odo: Vec<(f64, Pose4)> = data
        .odometry(Robot::Ugv)
        .samples
        .iter()
        .map(|s| (s.time, s.pose4()))
        .collect();
    let odo_err = trajectory_error(&odo, data.truth(Robot::Ugv)).ok();
    let radar = out.radar.as_ref();
    MetricsSummary {
        duration,
        uwb: range_stats(&measured, &truth).ok(),
        rte_estimates: out.rte_estimates.len(),
        rte_steady_translation_rmse: steady.map(|s| s.0),
        rte_steady_rotation_rmse_deg: steady.map(|s| s.1),
        rte_settling_time: trace.settled_below(SETTLING_THRESHOLD),
        rte_final_translation_error: trace.translation.last().copied(),
        rte_final_rotation_error_deg: trace.rotation.last().copied(),
        ugv_ate: ugv.as_ref().map(|e| e.ate),
        ugv_yaw_rmse_deg: ugv.as_ref().map(|e| e.yaw_rmse),
        uav_ate: uav.as_ref().map(|e| e.ate),
        uav_yaw_rmse_deg: uav.as_ref().map(|e| e.yaw_rmse),
        ugv_odometry_ate: odo_err.as_ref().map(|e| e.ate),
        ugv_odometry_yaw_rmse_deg: odo_err.as_ref().map(|e| e.yaw_rmse),
        keyframes_uav: out.graph.keyframes(Robot::Uav).len(),
        keyframes_ugv: out.graph.keyframes(Robot::Ugv).len(),
        encounters: out.graph.encounter_count(),
        encounters_dropped: out.graph.dropped_encounters(),
        radar_factors: out.radar_factors.len(),
        graph_solves: out.graph_solve_seconds.len(),
        graph_failures: out.graph_failures,
        uav_ego_velocity_rmse: radar.and_then(|t| ego_rmse(&t[0], data.truth(Robot::Uav))),
        ugv_ego_velocity_rmse: radar.and_then(|t| ego_rmse(&t[1], data.truth(Robot::Ugv))),
        uav_radar_drift_percent: radar.and_then(|t| radar_drift_percent(&t[0], data.truth(Robot::Uav))),
        ugv_radar_drift_percent: radar.and_then(|t| radar_drift_percent(&t[1], data.truth(Robot::Ugv))),
    }
}

impl MetricsSummary {
    /// `key = value` lines; absent values are written as `none`.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("summary serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.join("\n") + "\n"
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}_{k}")
                };
                flatten(&key, x, out);
            }
        }
        serde_json::Value::Null => out.push(format!("{prefix} = none")),
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl TimingStats {
    pub fn from_samples(s: &[f64]) -> Self {
        let n = s.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: 0.0,
                std: 0.0,
                max: 0.0,
            };
        }
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            count: n,
            mean,
            std: var.sqrt(),
            max: s.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Solver timing report. Wall-clock values; not deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rte: TimingStats,
    pub pose_graph: TimingStats,
    pub pipeline_seconds: f64,
}

impl TimingReport {
    pub fn from_output(out: &PipelineOutput) -> Self {
        let rte: Vec<f64> = out.rte_estimates.iter().map(|e| e.solve_seconds).collect();
        Self {
            rte: TimingStats::from_samples(&rte),
            pose_graph: TimingStats::from_samples(&out.graph_solve_seconds),
            pipeline_seconds: out.wall_seconds,
        }
    }
}

#[derive(Serialize)]
struct EstimateRow {
    time: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    var_x: f64,
    var_y: f64,
    var_z: f64,
    var_yaw: f64,
    residuals: usize,
    rank_deficient: bool,
    error_translation: Option<f64>,
    error_yaw_deg: Option<f64>,
}

#[derive(Serialize)]
struct GlobalRow {
    robot: Robot,
    time: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
}

#[derive(Serialize)]
struct EgoRow {
    robot: Robot,
    time: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    smooth_vx: f64,
    smooth_vy: f64,
    smooth_vz: f64,
    inliers: usize,
    residual_rms: f64,
}

#[derive(Serialize)]
struct RadarFactorRow {
    robot: Robot,
    from: usize,
    to: usize,
    time: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    var_x: f64,
    var_y: f64,
    var_z: f64,
    var_yaw: f64,
}

pub const ESTIMATES_FILE: &str = "rte_estimates.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const EGO_FILE: &str = "ego_velocity.csv";
/// Moving-average width of the reported ego-velocity.
const EGO_SMOOTHING: usize = 10;
pub const RADAR_FACTORS_FILE: &str = "radar_factors.csv";
pub const GRAPH_FILE: &str = "graph.txt";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes every estimation artifact into `dir`.
pub fn write_results(
    dir: &Path,
    data: &Dataset,
    config: &RunConfig,
    out: &PipelineOutput,
    metrics: &MetricsSummary,
) -> Result<(), IoError> {
    let trace = rte_trace(data, &out.rte_estimates);
    let rows = out.rte_estimates.iter().map(|e| {
        let k = trace.time.iter().position(|&t| t == e.time);
        EstimateRow {
            time: e.time,
            x: e.transform.x,
            y: e.transform.y,
            z: e.transform.z,
            yaw: e.transform.theta,
            var_x: e.covariance[(0, 0)],
            var_y: e.covariance[(1, 1)],
            var_z: e.covariance[(2, 2)],
            var_yaw: e.covariance[(3, 3)],
            residuals: e.residual_count,
            rank_deficient: e.rank_deficient,
            error_translation: k.map(|k| trace.translation[k]),
            error_yaw_deg: k.map(|k| trace.rotation[k]),
        }
    });
    io::write_csv(&dir.join(ESTIMATES_FILE), rows)?;

    let rows = Robot::ALL.iter().flat_map(|&r| {
        out.trajectories[r.index()].iter().map(move |p| GlobalRow {
            robot: r,
            time: p.time,
            x: p.pose.x,
            y: p.pose.y,
            z: p.pose.z,
            yaw: p.pose.theta,
        })
    });
    io::write_csv(&dir.join(TRAJECTORIES_FILE), rows)?;

    let mut ego: Vec<EgoRow> = Vec::new();
    if let Some(tracks) = &out.radar {
        for r in Robot::ALL {
            let frames: Vec<(f64, EgoVelocity)> = tracks[r.index()]
                .frames
                .iter()
                .filter_map(|f| Some((f.time, f.ego?)))
                .collect();
            let raw: Vec<_> = frames.iter().map(|(_, e)| e.v).collect();
            let smooth = smooth_velocities(&raw, EGO_SMOOTHING);
            ego.extend(frames.iter().zip(smooth).map(|((time, e), s)| EgoRow {
                robot: r,
                time: *time,
                vx: e.v.x,
                vy: e.v.y,
                vz: e.v.z,
                smooth_vx: s.x,
                smooth_vy: s.y,
                smooth_vz: s.z,
                inliers: e.inlier_count,
                residual_rms: e.residual_rms,
            }));
        }
    }
    io::write_csv(&dir.join(EGO_FILE), ego)?;

    let rows = out.radar_factors.iter().map(|f| RadarFactorRow {
        robot: f.robot,
        from: f.from,
        to: f.to,
        time: f.time,
        x: f.measurement.x,
        y: f.measurement.y,
        z: f.measurement.z,
        yaw: f.measurement.theta,
        var_x: f.covariance[(0, 0)],
        var_y: f.covariance[(1, 1)],
        var_z: f.covariance[(2, 2)],
        var_yaw: f.covariance[(3, 3)],
    });
    io::write_csv(&dir.join(RADAR_FACTORS_FILE), rows)?;

    write_text(&dir.join(GRAPH_FILE), &out.graph.dump())?;
    write_text(&dir.join(METRICS_TEXT_FILE), &metrics.to_text())?;
    write_text(
        &dir.join(METRICS_JSON_FILE),
        &(serde_json::to_string_pretty(metrics).expect("summary serializes") + "\n"),
    )?;
    let timing = TimingReport::from_output(out);
    write_text(
        &dir.join(TIMING_FILE),
        &(serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n"),
    )?;
    write_text(&dir.join(CONFIG_FILE), &config.to_toml())
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub output_dir: PathBuf,
    pub metrics: MetricsSummary,
    pub timing: TimingReport,
}

/// Builds the artifact directory next to `out` and swaps it into place
/// only after every file is written.
fn with_staging<F>(out: &Path, fill: F) -> Result<(), PipelineError>
where
    F: FnOnce(&Path) -> Result<(), PipelineError>,
{
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| PipelineError::Runtime(format!("{}: {e}", parent.display())))?;
    let name = out
        .file_name()
        .ok_or_else(|| PipelineError::Runtime(format!("{}: not a directory name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    fs::create_dir(&staging).map_err(|e| PipelineError::Runtime(format!("{}: {e}", staging.display())))?;
    let result = fill(&staging);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out.display())))?;
    }
    fs::rename(&staging, out).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out.display())))
}

fn finish(
    dir: &Path,
    data: &Dataset,
    config: &RunConfig,
    options: PipelineOptions,
) -> Result<(MetricsSummary, TimingReport), PipelineError> {
    let out = run_pipeline(data, config, options)?;
    let metrics = summarize(data, config, &out);
    write_results(dir, data, config, &out, &metrics)?;
    Ok((metrics, TimingReport::from_output(&out)))
}

/// Simulates, writes the measurement files, then estimates from the files
/// as written so that a later replay sees exactly the same inputs.
pub fn run_sim(
    config: &RunConfig,
    out_dir: &Path,
    options: PipelineOptions,
) -> Result<RunResult, PipelineError> {
    let mut result = None;
    with_staging(out_dir, |dir| {
        let sim = simulate(&config.simulation(), config.seed)?;
        io::write_dataset(dir, &sim)?;
        let data = io::read_dataset(dir)?;
        result = Some(finish(dir, &data, config, options)?);
        Ok(())
    })?;
    let (metrics, timing) = result.expect("filled on success");
    Ok(RunResult {
        output_dir: out_dir.to_path_buf(),
        metrics,
        timing,
    })
}

/// Estimation only, from a directory of measurement files. The inputs are
/// copied into the output directory.
pub fn replay(
    measurements: &Path,
    config: &RunConfig,
    out_dir: &Path,
    options: PipelineOptions,
) -> Result<RunResult, PipelineError> {
    let data = io::read_dataset(measurements)?;
    let mut result = None;
    with_staging(out_dir, |dir| {
        for f in [
            io::GROUND_TRUTH_FILE,
            io::ODOMETRY_FILE,
            io::RANGES_FILE,
            io::RADAR_FILE,
        ] {
            fs::copy(measurements.join(f), dir.join(f))
                .map_err(|e| PipelineError::Runtime(format!("{f}: {e}")))?;
        }
        result = Some(finish(dir, &data, config, options)?);
        Ok(())
    })?;
    let (metrics, timing) = result.expect("filled on success");
    Ok(RunResult {
        output_dir: out_dir.to_path_buf(),
        metrics,
        timing,
    })
}
