//! UWB node placement and radar mounting.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{config_error, Robot, SimError};
use crate::geometry::SE3Transform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UwbNode {
    pub id: u32,
    /// Body-frame position, meters.
    pub position: [f64; 3],
}

impl UwbNode {
    pub fn new(id: u32, position: [f64; 3]) -> Self {
        Self { id, position }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }
}

/// Pose of a sensor in its robot's body frame (maps sensor coordinates to
/// body coordinates). Angles in radians, applied as yaw·pitch·roll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extrinsic {
    pub translation: [f64; 3],
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Default for Extrinsic {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
        }
    }
}

impl Extrinsic {
    pub fn to_se3(&self) -> SE3Transform {
        SE3Transform::from_rpy(Vector3::from(self.translation), self.roll, self.pitch, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorRig {
    /// Tags carried by the UAV.
    pub tags: Vec<UwbNode>,
    /// Anchors carried by the UGV.
    pub anchors: Vec<UwbNode>,
    pub uav_radar: Extrinsic,
    pub ugv_radar: Extrinsic,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            tags: vec![
                UwbNode::new(1, [0.2, 0.0, -0.1]),
                UwbNode::new(2, [-0.2, 0.0, -0.1]),
            ],
            anchors: vec![
                UwbNode::new(1, [0.4, 0.3, 0.5]),
                UwbNode::new(2, [0.4, -0.3, 0.5]),
                UwbNode::new(3, [-0.4, -0.3, 0.5]),
                UwbNode::new(4, [-0.4, 0.3, 0.5]),
            ],
            uav_radar: Extrinsic {
                translation: [0.15, 0.0, -0.1],
                pitch: 0.35,
                ..Default::default()
            },
            ugv_radar: Extrinsic {
                translation: [0.3, 0.0, 0.4],
                ..Default::default()
            },
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, nodes) in [("rig.tags", &self.tags), ("rig.anchors", &self.anchors)] {
            if nodes.is_empty() {
                return Err(config_error(name, "at least one node required"));
            }
            let mut seen = HashSet::new();
            for n in nodes.iter() {
                if !seen.insert(n.id) {
                    return Err(config_error(name, format!("duplicate id {}", n.id)));
                }
                if n.position.iter().any(|v| !v.is_finite()) {
                    return Err(config_error(name, format!("node {} not finite", n.id)));
                }
            }
        }
        Ok(())
    }

    pub fn tag(&self, id: u32) -> Option<Vector3<f64>> {
        self.tags.iter().find(|n| n.id == id).map(UwbNode::vector)
    }

    pub fn anchor(&self, id: u32) -> Option<Vector3<f64>> {
        self.anchors.iter().find(|n| n.id == id).map(UwbNode::vector)
    }

    pub fn radar_extrinsic(&self, robot: Robot) -> Extrinsic {
        match robot {
            Robot::Uav => self.uav_radar,
            Robot::Ugv => self.ugv_radar,
        }
    }

    /// A rig with one tag and one anchor, both at the body origins.
    pub fn single_point() -> Self {
        Self {
            tags: vec![UwbNode::new(1, [0.0; 3])],
            anchors: vec![UwbNode::new(1, [0.0; 3])],
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_shape() {
        let rig = SensorRig::default();
        rig.validate().unwrap();
        assert_eq!(rig.tags.len(), 2);
        assert_eq!(rig.anchors.len(), 4);
        let t = rig.tag(1).unwrap() - rig.tag(2).unwrap();
        assert!((t.norm() - 0.4).abs() < 1e-12);
        assert!((rig.anchor(1).unwrap() - rig.anchor(3).unwrap()).norm() - 1.0 < 1e-12);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut rig = SensorRig::default();
        rig.anchors[1].id = 1;
        assert!(rig.validate().is_err());
    }
}
