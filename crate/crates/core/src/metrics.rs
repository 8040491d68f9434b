//! Range statistics, trajectory error and relative-transform error traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose4};
use crate::rte::Transform4Estimate;
use crate::sim::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} samples")]
    TooShort(usize),
    #[error("estimate and truth do not overlap in time")]
    NoOverlap,
}

/// Truth samples further than this from an estimate timestamp are not associated.
pub const ASSOCIATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub mbe: f64,
    pub sigma: f64,
    pub rmse: f64,
    pub count: usize,
}

pub fn range_stats(measured: &[f64], truth: &[f64]) -> Result<RangeStats, MetricsError> {
    if measured.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(measured.len(), truth.len()));
    }
    let n = measured.len();
    if n < 2 {
        return Err(MetricsError::TooShort(2));
    }
    let errs: Vec<f64> = measured.iter().zip(truth).map(|(m, t)| m - t).collect();
    let nf = n as f64;
    let mbe = errs.iter().sum::<f64>() / nf;
    let var = errs.iter().map(|e| (e - mbe).powi(2)).sum::<f64>() / (nf - 1.0);
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    Ok(RangeStats {
        mbe,
        sigma: var.sqrt(),
        rmse,
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// RMS translational error, meters.
    pub ate: f64,
    /// RMS wrapped yaw error, degrees.
    pub yaw_rmse: f64,
    /// `(time, translation error m, yaw error deg)` per associated sample.
    pub samples: Vec<(f64, f64, f64)>,
}

/// Pose of `truth` at `t`, or `None` when the closest truth samples are
/// further than the association tolerance.
fn truth_at(truth: &Trajectory, t: f64) -> Option<Pose4> {
    let s = &truth.samples;
    if s.is_empty() {
        return None;
    }
    let idx = s.partition_point(|x| x.time < t);
    let near = |i: usize| s.get(i).map_or(f64::INFINITY, |x| (x.time - t).abs());
    let gap = near(idx).min(if idx > 0 { near(idx - 1) } else { f64::INFINITY });
    if gap > ASSOCIATION_TOLERANCE {
        return None;
    }
    let pose = if t <= s[0].time {
        s[0].pose
    } else if t >= s[s.len() - 1].time {
        s[s.len() - 1].pose
    } else {
        truth.pose_at(t)?
    };
    Some(Pose4::from_se3(&pose))
}

/// ATE and yaw RMSE of time-stamped poses against interpolated truth. No
/// alignment is applied; both must already be in the same frame.
pub fn trajectory_error(
    estimate: &[(f64, Pose4)],
    truth: &Trajectory,
) -> Result<TrajectoryError, MetricsError> {
    let mut samples = Vec::with_capacity(estimate.len());
    for (t, p) in estimate {
        let Some(q) = truth_at(truth, *t) else {
            continue;
        };
        let dt = (p.translation() - q.translation()).norm();
        let dy = wrap_angle(p.theta - q.theta).to_degrees();
        samples.push((*t, dt, dy));
    }
    if samples.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let n = samples.len() as f64;
    let ate = (samples.iter().map(|s| s.1 * s.1).sum::<f64>() / n).sqrt();
    let yaw_rmse = (samples.iter().map(|s| s.2 * s.2).sum::<f64>() / n).sqrt();
    Ok(TrajectoryError {
        ate,
        yaw_rmse,
        samples,
    })
}

/// Per-estimate translational error (m) and absolute wrapped yaw error (deg).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformTrace {
    pub time: Vec<f64>,
    pub translation: Vec<f64>,
    pub rotation: Vec<f64>,
}

impl TransformTrace {
    /// Root mean square of both traces over estimates at or after `from`.
    pub fn rmse_after(&self, from: f64) -> Option<(f64, f64)> {
        let idx: Vec<usize> = (0..self.time.len()).filter(|&k| self.time[k] >= from).collect();
        if idx.is_empty() {
            return None;
        }
        let n = idx.len() as f64;
        let rms = |v: &[f64]| (idx.iter().map(|&k| v[k] * v[k]).sum::<f64>() / n).sqrt();
        Some((rms(&self.translation), rms(&self.rotation)))
    }

    /// Time of the first estimate after which the translational error stays
    /// below `threshold`.
    pub fn settled_below(&self, threshold: f64) -> Option<f64> {
        let last_bad = self.translation.iter().rposition(|&e| e >= threshold);
        match last_bad {
            None => self.time.first().copied(),
            Some(k) => self.time.get(k + 1).copied(),
        }
    }
}

/// `truth` gives the true transform at a timestamp.
pub fn transform_rmse_trace(
    estimates: &[Transform4Estimate],
    truth: impl Fn(f64) -> Option<Pose4>,
) -> TransformTrace {
    let mut out = TransformTrace::default();
    for e in estimates {
        let Some(t) = truth(e.time) else {
            continue;
        };
        out.time.push(e.time);
        out.translation
            .push((e.transform.translation() - t.translation()).norm());
        out.rotation
            .push(wrap_angle(e.transform.theta - t.theta).abs().to_degrees());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TrajectorySample;
    use nalgebra::{Matrix4, Vector3};
    use proptest::prelude::*;

    fn line(n: usize, dt: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    TrajectorySample {
                        time: t,
                        pose: Pose4::new(t, 0.5 * t * t, 0.1 * t, 0.3 * t).to_se3(),
                        velocity: Vector3::zeros(),
                        roll: 0.0,
                        pitch: 0.0,
                    }
                })
                .collect(),
        )
    }

    fn as_estimate(tr: &Trajectory) -> Vec<(f64, Pose4)> {
        tr.samples.iter().map(|s| (s.time, s.pose4())).collect()
    }

    #[test]
    fn range_stats_examples() {
        let s = range_stats(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((s.mbe, s.sigma, s.rmse), (0.0, 0.0, 0.0));
        let s = range_stats(&[1.1, 0.9], &[1.0, 1.0]).unwrap();
        assert!(s.mbe.abs() < 1e-15 && (s.rmse - 0.1).abs() < 1e-12);
        assert_eq!(
            range_stats(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch(1, 2))
        );
        assert!(range_stats(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_decomposes(errs in prop::collection::vec(-1.0f64..1.0, 2..50)) {
            let truth = vec![0.0; errs.len()];
            let s = range_stats(&errs, &truth).unwrap();
            let n = errs.len() as f64;
            let rhs = s.mbe * s.mbe + s.sigma * s.sigma * (n - 1.0) / n;
            prop_assert!((s.rmse * s.rmse - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_error_examples() {
        let truth = line(50, 0.1);
        let e = trajectory_error(&as_estimate(&truth), &truth).unwrap();
        assert!(e.ate < 1e-12 && e.yaw_rmse < 1e-9);

        let shifted: Vec<(f64, Pose4)> = as_estimate(&truth)
            .into_iter()
            .map(|(t, p)| (t, Pose4::new(p.x + 1.0, p.y, p.z, p.theta)))
            .collect();
        let e = trajectory_error(&shifted, &truth).unwrap();
        assert!((e.ate - 1.0).abs() < 1e-12 && e.yaw_rmse < 1e-9);

        let wobble: Vec<(f64, Pose4)> = as_estimate(&truth)
            .into_iter()
            .enumerate()
            .map(|(k, (t, p))| {
                let d: f64 = if k % 2 == 0 { 10.0 } else { -10.0 };
                (t, Pose4::new(p.x, p.y, p.z, p.theta + d.to_radians()))
            })
            .collect();
        let e = trajectory_error(&wobble, &truth).unwrap();
        assert!((e.yaw_rmse - 10.0).abs() < 1e-9);
    }

    #[test]
    fn yaw_error_is_wrapped() {
        let truth = Trajectory::new(vec![TrajectorySample {
            time: 0.0,
            pose: Pose4::new(0.0, 0.0, 0.0, 179f64.to_radians()).to_se3(),
            velocity: Vector3::zeros(),
            roll: 0.0,
            pitch: 0.0,
        }]);
        let est = [(0.0, Pose4::new(0.0, 0.0, 0.0, (-179f64).to_radians()))];
        let e = trajectory_error(&est, &truth).unwrap();
        assert!((e.yaw_rmse - 2.0).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let truth = line(10, 0.1);
        let est = [(5.0, Pose4::identity())];
        assert_eq!(trajectory_error(&est, &truth), Err(MetricsError::NoOverlap));
    }

    #[test]
    fn subsampled_truth_gives_same_error() {
        let fine = line(201, 0.01);
        let coarse = Trajectory::new(fine.samples.iter().step_by(2).copied().collect());
        let est: Vec<(f64, Pose4)> = (0..40)
            .map(|k| {
                let t = 0.013 + k as f64 * 0.047;
                let p = Pose4::from_se3(&fine.pose_at(t).unwrap());
                (t, Pose4::new(p.x + 0.2, p.y - 0.1, p.z, p.theta + 0.05))
            })
            .collect();
        let a = trajectory_error(&est, &fine).unwrap();
        let b = trajectory_error(&est, &coarse).unwrap();
        assert!((a.ate - b.ate).abs() / a.ate < 0.01);
        assert!((a.yaw_rmse - b.yaw_rmse).abs() / a.yaw_rmse < 0.01);
    }

    fn est(time: f64, p: Pose4) -> Transform4Estimate {
        Transform4Estimate {
            time,
            transform: p,
            covariance: Matrix4::identity(),
            window_span: [0.0; 2],
            residual_count: 0,
            rank_deficient: false,
            cost: 0.0,
            solve_seconds: 0.0,
        }
    }

    #[test]
    fn trace_examples() {
        let truth = Pose4::new(1.0, 2.0, 0.0, 0.5);
        let tr = transform_rmse_trace(&[est(0.0, truth)], |_| Some(truth));
        assert_eq!((tr.translation[0], tr.rotation[0]), (0.0, 0.0));
        let off = Pose4::new(2.0, 2.0, 0.0, 0.5);
        let tr = transform_rmse_trace(&[est(0.0, off)], |_| Some(truth));
        assert!((tr.translation[0] - 1.0).abs() < 1e-12 && tr.rotation[0] == 0.0);
    }

    #[test]
    fn settling_time() {
        let tr = TransformTrace {
            time: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            translation: vec![3.0, 1.0, 2.0, 1.0, 0.5],
            rotation: vec![0.0; 5],
        };
        assert_eq!(tr.settled_below(1.5), Some(3.0));
        assert_eq!(tr.settled_below(0.1), None);
        assert_eq!(tr.settled_below(5.0), Some(0.0));
        let (t, _) = tr.rmse_after(3.0).unwrap();
        assert!((t - (0.625f64).sqrt()).abs() < 1e-12);
    }
}
