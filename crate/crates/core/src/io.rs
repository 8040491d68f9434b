//! CSV interchange for measurement streams.
//!
//! | file | columns |
//! |---|---|
//! | `ground_truth.csv`, `odometry.csv` | robot, time, x, y, z, roll, pitch, yaw, vx, vy, vz |
//! | `uwb_ranges.csv` | time, tag_id, anchor_id, distance, sigma |
//! | `radar_scans.csv` | robot, time, x, y, z, doppler, dynamic |
//!
//! Poses are in meters and radians, velocities in the body frame. Radar
//! points are in the sensor frame, one row per point; scans without points
//! are not written. Floats are printed in their shortest round-trip form.
//! Rotations are rebuilt from roll, pitch and yaw on reading, which can move
//! them in the last bits; every estimator therefore runs on data read back
//! from these files, never on the in-memory simulation.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SE3Transform;
use crate::sim::{Dataset, RadarPoint, RadarScan, RangeMeasurement, Robot, Trajectory, TrajectorySample};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const ODOMETRY_FILE: &str = "odometry.csv";
pub const RANGES_FILE: &str = "uwb_ranges.csv";
pub const RADAR_FILE: &str = "radar_scans.csv";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
}

fn file_error(path: &Path, message: impl ToString) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub robot: Robot,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl PoseRow {
    fn from_sample(robot: Robot, s: &TrajectorySample) -> Self {
        let t = s.pose.translation;
        Self {
            robot,
            time: s.time,
            x: t.x,
            y: t.y,
            z: t.z,
            roll: s.roll,
            pitch: s.pitch,
            yaw: s.pose.yaw(),
            vx: s.velocity.x,
            vy: s.velocity.y,
            vz: s.velocity.z,
        }
    }

    fn to_sample(self) -> TrajectorySample {
        TrajectorySample {
            time: self.time,
            pose: SE3Transform::from_rpy(
                Vector3::new(self.x, self.y, self.z),
                self.roll,
                self.pitch,
                self.yaw,
            ),
            velocity: Vector3::new(self.vx, self.vy, self.vz),
            roll: self.roll,
            pitch: self.pitch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    pub robot: Robot,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub doppler: f64,
    pub dynamic: bool,
}

/// Writes serializable rows with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_error(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(|e| file_error(path, e))?;
    }
    w.flush().map_err(|e| file_error(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| file_error(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    r.deserialize()
        .enumerate()
        .map(|(k, row)| row.map_err(|e| file_error(path, format!("record {}: {e}", k + 1))))
        .collect()
}

fn trajectory_rows(trajectories: &[Trajectory; 2]) -> Vec<PoseRow> {
    Robot::ALL
        .iter()
        .flat_map(|&r| {
            trajectories[r.index()]
                .samples
                .iter()
                .map(move |s| PoseRow::from_sample(r, s))
        })
        .collect()
}

fn rows_to_trajectories(path: &Path, rows: Vec<PoseRow>) -> Result<[Trajectory; 2], IoError> {
    let mut samples: [Vec<TrajectorySample>; 2] = Default::default();
    for row in rows {
        let buf = &mut samples[row.robot.index()];
        if buf.last().is_some_and(|s| s.time >= row.time) {
            return Err(file_error(
                path,
                format!("{} samples not increasing at t = {}", row.robot, row.time),
            ));
        }
        let values = [
            row.time, row.x, row.y, row.z, row.roll, row.pitch, row.yaw, row.vx, row.vy, row.vz,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(file_error(path, format!("non-finite value at t = {}", row.time)));
        }
        buf.push(row.to_sample());
    }
    for r in Robot::ALL {
        if samples[r.index()].is_empty() {
            return Err(file_error(path, format!("no samples for the {r}")));
        }
    }
    let [a, b] = samples;
    Ok([Trajectory::new(a), Trajectory::new(b)])
}

/// Writes the four measurement files into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), IoError> {
    write_csv(&dir.join(GROUND_TRUTH_FILE), trajectory_rows(&data.ground_truth))?;
    write_csv(&dir.join(ODOMETRY_FILE), trajectory_rows(&data.odometry))?;
    write_csv(&dir.join(RANGES_FILE), data.ranges.iter())?;
    let radar = Robot::ALL.iter().flat_map(|&r| {
        data.radar[r.index()].iter().flat_map(move |scan| {
            scan.points.iter().map(move |p| RadarRow {
                robot: r,
                time: scan.time,
                x: p.position.x,
                y: p.position.y,
                z: p.position.z,
                doppler: p.doppler,
                dynamic: p.dynamic,
            })
        })
    });
    write_csv(&dir.join(RADAR_FILE), radar)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = rows_to_trajectories(&gt_path, read_csv(&gt_path)?)?;
    let od_path = dir.join(ODOMETRY_FILE);
    let odometry = rows_to_trajectories(&od_path, read_csv(&od_path)?)?;

    let rg_path = dir.join(RANGES_FILE);
    let ranges: Vec<RangeMeasurement> = read_csv(&rg_path)?;
    for (k, m) in ranges.iter().enumerate() {
        if !(m.distance.is_finite() && m.sigma.is_finite() && m.sigma > 0.0) {
            return Err(file_error(
                &rg_path,
                format!("record {}: bad distance or sigma", k + 1),
            ));
        }
        if k > 0 && ranges[k - 1].time > m.time {
            return Err(file_error(
                &rg_path,
                format!("record {}: time goes backwards", k + 1),
            ));
        }
    }

    let rd_path = dir.join(RADAR_FILE);
    let mut radar: [Vec<RadarScan>; 2] = Default::default();
    for row in read_csv::<RadarRow>(&rd_path)? {
        let scans = &mut radar[row.robot.index()];
        let point = RadarPoint {
            position: Vector3::new(row.x, row.y, row.z),
            doppler: row.doppler,
            dynamic: row.dynamic,
        };
        match scans.last_mut() {
            Some(s) if s.time == row.time => s.points.push(point),
            Some(s) if s.time > row.time => {
                return Err(file_error(
                    &rd_path,
                    format!("scan time goes backwards at {}", row.time),
                ))
            }
            _ => scans.push(RadarScan {
                time: row.time,
                points: vec![point],
            }),
        }
    }

    Ok(Dataset {
        ground_truth,
        odometry,
        ranges,
        radar,
    })
}
