//! Multi-robot 4-DOF pose graph with anchor nodes and encounter factors.
//!
//! Keyframe states live in their robot's odometry frame. Each robot has an
//! anchor node mapping its odometry frame into the common frame; the UGV
//! anchor is held at identity by a strong prior, so the common frame is the
//! UGV odometry frame.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{log4, Pose4, Pose4Jet};
use crate::nls::{self, CostFunction, ResidualBlock, SolverOptions, SolverReport};
use crate::rte::Transform4Estimate;
use crate::sim::Robot;

/// Robot whose anchor carries the gauge prior.
pub const GAUGE_ROBOT: Robot = Robot::Ugv;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no keyframe of the {0} within {1} s of the encounter")]
    NoCompatibleKeyframe(Robot, f64),
    #[error("keyframe {index} of the {robot} does not exist")]
    UnknownKeyframe { robot: Robot, index: usize },
    #[error("covariance is not positive definite")]
    BadCovariance,
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("graph dump line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseGraphConfig {
    /// Translation arc length between keyframes, meters.
    pub keyframe_spacing: f64,
    /// Keyframes per robot optimized in each solve; older ones are held fixed.
    pub window: usize,
    /// Largest keyframe/estimate time offset accepted for an encounter, s.
    pub max_time_offset: f64,
    pub gauge_sigma: f64,
    /// Weak prior on the non-gauge anchor until the first encounter.
    pub anchor_sigma: f64,
    /// Prior holding each robot's first keyframe at its odometry origin.
    pub origin_sigma: f64,
    /// Odometry factor σ per meter of step.
    pub odometry_rate: f64,
    pub odometry_yaw_base: f64,
    pub odometry_yaw_rate: f64,
    /// Multiplies every encounter covariance. The estimator's Gauss-Newton
    /// covariance only sees range noise, not odometry drift inside its window
    /// or the overlap between consecutive windows.
    pub encounter_scale: f64,
    pub solver: SolverOptions,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        Self {
            keyframe_spacing: 0.5,
            window: 40,
            max_time_offset: 0.25,
            gauge_sigma: 1e-3,
            anchor_sigma: 100.0,
            origin_sigma: 1e-3,
            odometry_rate: 0.02,
            odometry_yaw_base: 0.01,
            odometry_yaw_rate: 0.02,
            encounter_scale: 100.0,
            solver: SolverOptions::default(),
        }
    }
}

impl PoseGraphConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("keyframe_spacing", self.keyframe_spacing),
            ("max_time_offset", self.max_time_offset),
            ("gauge_sigma", self.gauge_sigma),
            ("anchor_sigma", self.anchor_sigma),
            ("origin_sigma", self.origin_sigma),
            ("odometry_rate", self.odometry_rate),
            ("odometry_yaw_base", self.odometry_yaw_base),
            ("encounter_scale", self.encounter_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("pose_graph.{name}: must be positive"));
            }
        }
        if !(self.odometry_yaw_rate.is_finite() && self.odometry_yaw_rate >= 0.0) {
            return Err("pose_graph.odometry_yaw_rate: must be non-negative".into());
        }
        if self.window < 2 {
            return Err("pose_graph.window: at least 2 keyframes".into());
        }
        Ok(())
    }

    /// Wheel/IMU odometry covariance for a relative step.
    pub fn odometry_covariance(&self, step: &Pose4) -> Matrix4<f64> {
        let st = (self.odometry_rate * step.translation().norm()).max(1e-6);
        let sy = self.odometry_yaw_base + self.odometry_yaw_rate * step.theta.abs();
        Matrix4::from_diagonal(&Vector4::new(st * st, st * st, st * st, sy * sy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeNode {
    pub robot: Robot,
    pub index: usize,
    pub time: f64,
    pub arc_length: f64,
    /// Optimized state in the robot's odometry frame.
    pub state: Pose4,
    /// Odometry pose the keyframe was created from.
    pub odometry: Pose4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Keyframe(Robot, usize),
    Anchor(Robot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Prior,
    Odometry,
    Radar,
    Encounter,
}

impl FactorKind {
    fn name(self) -> &'static str {
        match self {
            FactorKind::Prior => "prior",
            FactorKind::Odometry => "odometry",
            FactorKind::Radar => "radar",
            FactorKind::Encounter => "encounter",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "prior" => FactorKind::Prior,
            "odometry" => FactorKind::Odometry,
            "radar" => FactorKind::Radar,
            "encounter" => FactorKind::Encounter,
            _ => return None,
        })
    }
}

/// Node layouts by kind:
/// - prior: `[n]`, predicted = n
/// - odometry / radar: `[xᵢ, xⱼ]`, predicted = xᵢ⁻¹ xⱼ
/// - encounter: `[A_g, x_g, A_a, x_a]`, predicted = (A_g x_g)⁻¹ (A_a x_a)
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub nodes: Vec<NodeRef>,
    pub measurement: Pose4,
    pub covariance: Matrix4<f64>,
    /// Timestamp of the source measurement.
    pub time: f64,
}

impl Factor {
    fn predicted(&self, jets: &[Pose4Jet]) -> Pose4Jet {
        match self.kind {
            FactorKind::Prior => jets[0].clone(),
            FactorKind::Odometry | FactorKind::Radar => jets[0].inverse().compose(&jets[1]),
            FactorKind::Encounter => jets[0]
                .compose(&jets[1])
                .inverse()
                .compose(&jets[2].compose(&jets[3])),
        }
    }
}

/// Residual `log4(Z⁻¹ Ẑ)` where some nodes are constants.
struct FactorCost {
    factor: Factor,
    /// Per node: parameter slot in this block, or the fixed value.
    slots: Vec<Result<usize, Pose4>>,
    n_params: usize,
}

impl FactorCost {
    fn chain(&self, p: &[f64]) -> Pose4Jet {
        let jets: Vec<Pose4Jet> = self
            .slots
            .iter()
            .map(|s| match s {
                Ok(k) => Pose4Jet::variable(Pose4::from_slice(&p[4 * k..4 * k + 4]), 4 * k, self.n_params),
                Err(v) => Pose4Jet::constant(*v, self.n_params),
            })
            .collect();
        Pose4Jet::constant(self.factor.measurement, self.n_params)
            .inverse()
            .compose(&self.factor.predicted(&jets))
    }
}

impl CostFunction for FactorCost {
    fn residual_dim(&self) -> usize {
        4
    }

    fn evaluate(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(log4(&self.chain(p).value).as_slice())
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.chain(p).log().1)
    }
}

/// Outcome of one windowed solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolve {
    pub report: SolverReport,
    pub variables: usize,
    pub factors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalPose {
    pub time: f64,
    pub pose: Pose4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRobotGraph {
    config: PoseGraphConfig,
    keyframes: [Vec<KeyframeNode>; 2],
    anchors: [Pose4; 2],
    factors: Vec<Factor>,
    /// Last odometry pose seen per robot and the arc length accumulated so far.
    last_odometry: [Option<(Pose4, f64)>; 2],
    dropped_encounters: usize,
    solves: usize,
}

impl MultiRobotGraph {
    pub fn new(config: PoseGraphConfig) -> Self {
        let gauge = Factor {
            kind: FactorKind::Prior,
            nodes: vec![NodeRef::Anchor(GAUGE_ROBOT)],
            measurement: Pose4::identity(),
            covariance: diag_cov(config.gauge_sigma),
            time: 0.0,
        };
        let other = other_robot(GAUGE_ROBOT);
        let weak = Factor {
            kind: FactorKind::Prior,
            nodes: vec![NodeRef::Anchor(other)],
            measurement: Pose4::identity(),
            covariance: diag_cov(config.anchor_sigma),
            time: 0.0,
        };
        Self {
            config,
            keyframes: [Vec::new(), Vec::new()],
            anchors: [Pose4::identity(); 2],
            factors: vec![gauge, weak],
            last_odometry: [None; 2],
            dropped_encounters: 0,
            solves: 0,
        }
    }

    pub fn config(&self) -> &PoseGraphConfig {
        &self.config
    }

    pub fn keyframes(&self, robot: Robot) -> &[KeyframeNode] {
        &self.keyframes[robot.index()]
    }

    pub fn anchor(&self, robot: Robot) -> Pose4 {
        self.anchors[robot.index()]
    }

    /// Sets an anchor state. Before the first encounter this also moves the
    /// weak regularizing prior of that anchor.
    pub fn set_anchor(&mut self, robot: Robot, pose: Pose4) {
        self.anchors[robot.index()] = pose;
        if robot != GAUGE_ROBOT {
            for f in &mut self.factors {
                if f.kind == FactorKind::Prior && f.nodes == [NodeRef::Anchor(robot)] {
                    f.measurement = pose;
                }
            }
        }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn dropped_encounters(&self) -> usize {
        self.dropped_encounters
    }

    pub fn encounter_count(&self) -> usize {
        self.factors
            .iter()
            .filter(|f| f.kind == FactorKind::Encounter)
            .count()
    }

    /// Feeds one odometry pose. Returns the new keyframe index when the
    /// translation arc length since the last keyframe reaches the spacing.
    pub fn add_keyframe(&mut self, robot: Robot, odometry: Pose4, time: f64) -> Option<usize> {
        let r = robot.index();
        let arc = match self.last_odometry[r] {
            None => 0.0,
            Some((prev, arc)) => arc + (odometry.translation() - prev.translation()).norm(),
        };
        self.last_odometry[r] = Some((odometry, arc));

        let Some(last) = self.keyframes[r].last().copied() else {
            self.keyframes[r].push(KeyframeNode {
                robot,
                index: 0,
                time,
                arc_length: 0.0,
                state: odometry,
                odometry,
            });
            self.factors.push(Factor {
                kind: FactorKind::Prior,
                nodes: vec![NodeRef::Keyframe(robot, 0)],
                measurement: odometry,
                covariance: diag_cov(self.config.origin_sigma),
                time,
            });
            return Some(0);
        };
        if arc - last.arc_length < self.config.keyframe_spacing {
            return None;
        }
        let step = last.odometry.between(&odometry);
        let index = last.index + 1;
        self.keyframes[r].push(KeyframeNode {
            robot,
            index,
            time,
            arc_length: arc,
            state: last.state.compose(&step),
            odometry,
        });
        self.factors.push(Factor {
            kind: FactorKind::Odometry,
            nodes: vec![
                NodeRef::Keyframe(robot, last.index),
                NodeRef::Keyframe(robot, index),
            ],
            measurement: step,
            covariance: self.config.odometry_covariance(&step),
            time,
        });
        Some(index)
    }

    /// Adds a relative-pose factor between two keyframes of one robot.
    pub fn add_relative_factor(
        &mut self,
        kind: FactorKind,
        robot: Robot,
        from: usize,
        to: usize,
        measurement: Pose4,
        covariance: Matrix4<f64>,
    ) -> Result<(), GraphError> {
        for index in [from, to] {
            if index >= self.keyframes[robot.index()].len() {
                return Err(GraphError::UnknownKeyframe { robot, index });
            }
        }
        if covariance.cholesky().is_none() {
            return Err(GraphError::BadCovariance);
        }
        let time = self.keyframes[robot.index()][to].time;
        self.factors.push(Factor {
            kind,
            nodes: vec![NodeRef::Keyframe(robot, from), NodeRef::Keyframe(robot, to)],
            measurement,
            covariance,
            time,
        });
        Ok(())
    }

    fn nearest_keyframe(&self, robot: Robot, time: f64) -> Option<&KeyframeNode> {
        self.keyframes[robot.index()]
            .iter()
            .filter(|k| (k.time - time).abs() <= self.config.max_time_offset)
            .min_by(|a, b| (a.time - time).abs().total_cmp(&(b.time - time).abs()))
    }

    /// Turns a relative-transform estimate into an encounter between the
    /// temporally nearest keyframes of both robots.
    ///
    /// The estimate maps UGV odometry coordinates into UAV odometry
    /// coordinates; the virtual observation is the UAV keyframe seen from the
    /// UGV keyframe, `x̃_g⁻¹ T⁻¹ x̃_a`, built from the keyframes' odometry poses.
    pub fn add_encounter(&mut self, estimate: &Transform4Estimate) -> Result<usize, GraphError> {
        let g = GAUGE_ROBOT;
        let a = other_robot(g);
        let Some(kg) = self.nearest_keyframe(g, estimate.time).copied() else {
            self.dropped_encounters += 1;
            return Err(GraphError::NoCompatibleKeyframe(g, self.config.max_time_offset));
        };
        let Some(ka) = self.nearest_keyframe(a, estimate.time).copied() else {
            self.dropped_encounters += 1;
            return Err(GraphError::NoCompatibleKeyframe(a, self.config.max_time_offset));
        };
        let fixed_g = Pose4Jet::constant(kg.odometry.inverse(), 4);
        let t = Pose4Jet::variable(estimate.transform, 0, 4);
        let z = fixed_g
            .compose(&t.inverse())
            .compose(&Pose4Jet::constant(ka.odometry, 4));
        // propagate the estimate covariance through log4(Z₀⁻¹ Z(T))
        let rel = Pose4Jet::constant(z.value.inverse(), 4).compose(&z);
        let (_, j) = rel.log();
        let j = Matrix4::from_iterator(j.iter().copied());
        let mut cov = j * estimate.covariance * j.transpose() * self.config.encounter_scale;
        cov = 0.5 * (cov + cov.transpose());
        for k in 0..4 {
            cov[(k, k)] = cov[(k, k)].max(1e-12);
        }
        if cov.cholesky().is_none() {
            return Err(GraphError::BadCovariance);
        }

        if self.encounter_count() == 0 {
            // close the loop with the current states
            let ag = self.anchors[g.index()];
            let aa = ag
                .compose(&kg.state)
                .compose(&z.value)
                .compose(&ka.state.inverse());
            self.anchors[a.index()] = aa;
            self.factors
                .retain(|f| !(f.kind == FactorKind::Prior && f.nodes == [NodeRef::Anchor(a)]));
        }
        self.factors.push(Factor {
            kind: FactorKind::Encounter,
            nodes: vec![
                NodeRef::Anchor(g),
                NodeRef::Keyframe(g, kg.index),
                NodeRef::Anchor(a),
                NodeRef::Keyframe(a, ka.index),
            ],
            measurement: z.value,
            covariance: cov,
            time: estimate.time,
        });
        Ok(self.factors.len() - 1)
    }

    fn value(&self, node: NodeRef) -> Pose4 {
        match node {
            NodeRef::Keyframe(r, i) => self.keyframes[r.index()][i].state,
            NodeRef::Anchor(r) => self.anchors[r.index()],
        }
    }

    /// Variable layout: both anchors, then the newest `window` keyframes of
    /// each robot (`None` = full graph).
    fn layout(&self, window: Option<usize>) -> Vec<NodeRef> {
        let mut vars = vec![NodeRef::Anchor(Robot::Uav), NodeRef::Anchor(Robot::Ugv)];
        for robot in Robot::ALL {
            let n = self.keyframes[robot.index()].len();
            let first = window.map_or(0, |w| n.saturating_sub(w));
            vars.extend((first..n).map(|i| NodeRef::Keyframe(robot, i)));
        }
        vars
    }

    fn blocks(&self, vars: &[NodeRef]) -> Result<Vec<ResidualBlock>, GraphError> {
        let index_of = |n: &NodeRef| vars.iter().position(|v| v == n);
        let mut blocks = Vec::new();
        for f in &self.factors {
            let mut indices = Vec::new();
            let mut slots = Vec::new();
            for n in &f.nodes {
                match index_of(n) {
                    Some(v) => {
                        slots.push(Ok(indices.len() / 4));
                        indices.extend((0..4).map(|k| 4 * v + k));
                    }
                    None => slots.push(Err(self.value(*n))),
                }
            }
            if indices.is_empty() {
                continue;
            }
            let n_params = indices.len();
            let cov = DMatrix::from_column_slice(4, 4, f.covariance.as_slice());
            let block = ResidualBlock::new(
                indices,
                FactorCost {
                    factor: f.clone(),
                    slots,
                    n_params,
                },
            )
            .with_covariance(&cov)
            .map_err(|_| GraphError::BadCovariance)?;
            blocks.push(block);
        }
        Ok(blocks)
    }

    fn state_vector(&self, vars: &[NodeRef]) -> DVector<f64> {
        DVector::from_iterator(
            4 * vars.len(),
            vars.iter().flat_map(|n| self.value(*n).to_array()),
        )
    }

    /// Optimizes the newest `window` keyframes per robot plus both anchors;
    /// `None` optimizes everything. States are replaced only on success.
    pub fn optimize(&mut self, window: Option<usize>) -> Result<GraphSolve, GraphError> {
        let vars = self.layout(window);
        let blocks = self.blocks(&vars)?;
        let x0 = self.state_vector(&vars);
        let (x, report) =
            nls::solve(&blocks, x0, &self.config.solver).map_err(|e| GraphError::Solver(e.to_string()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::Solver("non-finite state".into()));
        }
        for (k, n) in vars.iter().enumerate() {
            let p = Pose4::from_slice(&x.as_slice()[4 * k..4 * k + 4]);
            match *n {
                NodeRef::Keyframe(r, i) => self.keyframes[r.index()][i].state = p,
                NodeRef::Anchor(r) => self.anchors[r.index()] = p,
            }
        }
        self.solves += 1;
        Ok(GraphSolve {
            report,
            variables: x.len(),
            factors: blocks.len(),
        })
    }

    /// Optimizes with the configured window.
    pub fn optimize_window(&mut self) -> Result<GraphSolve, GraphError> {
        self.optimize(Some(self.config.window))
    }

    /// Total weighted cost of every factor at the current states.
    pub fn cost(&self) -> f64 {
        let vars = self.layout(None);
        let x = self.state_vector(&vars);
        match self.blocks(&vars) {
            Ok(blocks) => blocks
                .iter()
                .map(|b| 0.5 * b.weighted_residual(&x).norm_squared())
                .sum(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Marginal covariance of an anchor from the full graph.
    pub fn anchor_covariance(&self, robot: Robot) -> Result<Matrix4<f64>, GraphError> {
        let vars = self.layout(None);
        let blocks = self.blocks(&vars)?;
        let x = self.state_vector(&vars);
        let cov = nls::covariance(&blocks, &x, &self.config.solver);
        let k = vars
            .iter()
            .position(|n| *n == NodeRef::Anchor(robot))
            .expect("anchors are always variables");
        Ok(Matrix4::from_fn(|r, c| cov.matrix[(4 * k + r, 4 * k + c)]))
    }

    /// `anchor ∘ keyframe` for every keyframe of `robot`, in time order.
    pub fn export_global(&self, robot: Robot) -> Vec<GlobalPose> {
        let a = self.anchors[robot.index()];
        self.keyframes[robot.index()]
            .iter()
            .map(|k| GlobalPose {
                time: k.time,
                pose: a.compose(&k.state),
            })
            .collect()
    }

    pub fn export_global_trajectories(&self) -> [Vec<GlobalPose>; 2] {
        [self.export_global(Robot::Uav), self.export_global(Robot::Ugv)]
    }

    /// Line-oriented text dump.
    ///
    /// ```text
    /// anchor <robot> x y z yaw
    /// keyframe <robot> <index> time arc x y z yaw ox oy oz oyaw
    /// factor <kind> time <n> <node>... x y z yaw c00 c01 c02 c03 c11 c12 c13 c22 c23 c33
    /// ```
    /// Nodes are written `a:<robot>` or `k:<robot>:<index>`; floats use the
    /// shortest representation that round-trips.
    pub fn dump(&self) -> String {
        let mut s = String::from("# radioloc pose graph\n");
        for robot in Robot::ALL {
            let a = self.anchors[robot.index()];
            let _ = writeln!(s, "anchor {} {}", robot, floats(&a.to_array()));
        }
        for robot in Robot::ALL {
            for k in &self.keyframes[robot.index()] {
                let _ = writeln!(
                    s,
                    "keyframe {} {} {} {} {} {}",
                    robot,
                    k.index,
                    k.time,
                    k.arc_length,
                    floats(&k.state.to_array()),
                    floats(&k.odometry.to_array())
                );
            }
        }
        for f in &self.factors {
            let nodes: Vec<String> = f
                .nodes
                .iter()
                .map(|n| match n {
                    NodeRef::Anchor(r) => format!("a:{r}"),
                    NodeRef::Keyframe(r, i) => format!("k:{r}:{i}"),
                })
                .collect();
            let mut cov = Vec::with_capacity(10);
            for r in 0..4 {
                for c in r..4 {
                    cov.push(f.covariance[(r, c)]);
                }
            }
            let _ = writeln!(
                s,
                "factor {} {} {} {} {} {}",
                f.kind.name(),
                f.time,
                f.nodes.len(),
                nodes.join(" "),
                floats(&f.measurement.to_array()),
                floats(&cov)
            );
        }
        s
    }

    /// Rebuilds a graph from [`MultiRobotGraph::dump`] output.
    pub fn parse(text: &str, config: PoseGraphConfig) -> Result<Self, GraphError> {
        let mut g = Self::new(config);
        g.factors.clear();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| GraphError::Parse {
                line: ln + 1,
                message: message.to_string(),
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let robot = |s: &str| Robot::parse(s).ok_or_else(|| err("bad robot"));
            match tok[0] {
                "anchor" if tok.len() == 6 => {
                    let r = robot(tok[1])?;
                    g.anchors[r.index()] = pose(&tok[2..6], &num)?;
                }
                "keyframe" if tok.len() == 13 => {
                    let r = robot(tok[1])?;
                    let index: usize = tok[2].parse().map_err(|_| err("bad index"))?;
                    if index != g.keyframes[r.index()].len() {
                        return Err(err("keyframes out of order"));
                    }
                    let node = KeyframeNode {
                        robot: r,
                        index,
                        time: num(tok[3])?,
                        arc_length: num(tok[4])?,
                        state: pose(&tok[5..9], &num)?,
                        odometry: pose(&tok[9..13], &num)?,
                    };
                    g.last_odometry[r.index()] = Some((node.odometry, node.arc_length));
                    g.keyframes[r.index()].push(node);
                }
                "factor" if tok.len() >= 4 => {
                    let kind = FactorKind::parse(tok[1]).ok_or_else(|| err("bad factor kind"))?;
                    let time = num(tok[2])?;
                    let n: usize = tok[3].parse().map_err(|_| err("bad node count"))?;
                    if tok.len() != 4 + n + 14 {
                        return Err(err("wrong field count"));
                    }
                    let mut nodes = Vec::with_capacity(n);
                    for t in &tok[4..4 + n] {
                        let parts: Vec<&str> = t.split(':').collect();
                        nodes.push(match parts.as_slice() {
                            ["a", r] => NodeRef::Anchor(robot(r)?),
                            ["k", r, i] => {
                                let r = robot(r)?;
                                let i: usize = i.parse().map_err(|_| err("bad node index"))?;
                                if i >= g.keyframes[r.index()].len() {
                                    return Err(err("unknown keyframe"));
                                }
                                NodeRef::Keyframe(r, i)
                            }
                            _ => return Err(err("bad node")),
                        });
                    }
                    let rest = &tok[4 + n..];
                    let measurement = pose(&rest[..4], &num)?;
                    let mut cov = Matrix4::zeros();
                    let mut k = 4;
                    for r in 0..4 {
                        for c in r..4 {
                            cov[(r, c)] = num(rest[k])?;
                            cov[(c, r)] = cov[(r, c)];
                            k += 1;
                        }
                    }
                    g.factors.push(Factor {
                        kind,
                        nodes,
                        measurement,
                        covariance: cov,
                        time,
                    });
                }
                _ => return Err(err("unrecognized record")),
            }
        }
        Ok(g)
    }
}

fn pose<E>(tok: &[&str], num: &impl Fn(&str) -> Result<f64, E>) -> Result<Pose4, E> {
    Ok(Pose4::new(num(tok[0])?, num(tok[1])?, num(tok[2])?, num(tok[3])?))
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn diag_cov(sigma: f64) -> Matrix4<f64> {
    Matrix4::identity() * sigma * sigma
}

pub fn other_robot(robot: Robot) -> Robot {
    match robot {
        Robot::Uav => Robot::Ugv,
        Robot::Ugv => Robot::Uav,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::wrap_angle;

    fn estimate(time: f64, transform: Pose4, sigma: f64) -> Transform4Estimate {
        Transform4Estimate {
            time,
            transform,
            covariance: Matrix4::identity() * sigma * sigma,
            window_span: [2.0, 2.0],
            residual_count: 100,
            rank_deficient: false,
            cost: 0.0,
            solve_seconds: 0.0,
        }
    }

    /// World-frame paths and odometry frames for both robots.
    struct Scene {
        ugv_world: Vec<Pose4>,
        uav_world: Vec<Pose4>,
        ugv_frame: Pose4,
        uav_frame: Pose4,
    }

    impl Scene {
        fn new(n: usize) -> Self {
            let ugv_world: Vec<Pose4> = (0..n)
                .map(|k| {
                    let s = k as f64 * 0.15;
                    Pose4::new(5.0 * s.cos(), 4.0 * s.sin(), 0.0, s)
                })
                .collect();
            let uav_world: Vec<Pose4> = (0..n)
                .map(|k| {
                    let s = k as f64 * 0.15;
                    Pose4::new(
                        1.0 + 4.0 * s.cos(),
                        -1.0 + 5.0 * s.sin(),
                        1.5 + 0.2 * s,
                        0.3 - 0.5 * s,
                    )
                })
                .collect();
            Self {
                ugv_frame: ugv_world[0],
                uav_frame: uav_world[0],
                ugv_world,
                uav_world,
            }
        }

        fn odom(&self, robot: Robot, k: usize) -> Pose4 {
            match robot {
                Robot::Ugv => self.ugv_frame.inverse().compose(&self.ugv_world[k]),
                Robot::Uav => self.uav_frame.inverse().compose(&self.uav_world[k]),
            }
        }

        /// Maps UGV odometry coordinates into UAV odometry coordinates.
        fn transform(&self) -> Pose4 {
            self.uav_frame.inverse().compose(&self.ugv_frame)
        }

        fn graph(&self, config: PoseGraphConfig, encounter_every: usize) -> MultiRobotGraph {
            let mut g = MultiRobotGraph::new(config);
            for k in 0..self.ugv_world.len() {
                let t = k as f64;
                for r in Robot::ALL {
                    assert_eq!(g.add_keyframe(r, self.odom(r, k), t), Some(k));
                }
                if encounter_every > 0 && k % encounter_every == encounter_every - 1 {
                    g.add_encounter(&estimate(t, self.transform(), 0.05)).unwrap();
                }
            }
            g
        }
    }

    fn pose_close(a: &Pose4, b: &Pose4, tol: f64) -> bool {
        (a.translation() - b.translation()).norm() < tol && wrap_angle(a.theta - b.theta).abs() < tol
    }

    #[test]
    fn first_call_creates_keyframe_and_prior() {
        let mut g = MultiRobotGraph::new(PoseGraphConfig::default());
        assert_eq!(g.add_keyframe(Robot::Ugv, Pose4::identity(), 0.0), Some(0));
        let priors: Vec<&Factor> = g
            .factors()
            .iter()
            .filter(|f| f.nodes == [NodeRef::Keyframe(Robot::Ugv, 0)])
            .collect();
        assert_eq!(priors.len(), 1);
        assert_eq!(priors[0].kind, FactorKind::Prior);
    }

    #[test]
    fn spacing_gates_keyframes() {
        let mut g = MultiRobotGraph::new(PoseGraphConfig::default());
        g.add_keyframe(Robot::Ugv, Pose4::identity(), 0.0);
        assert_eq!(
            g.add_keyframe(Robot::Ugv, Pose4::new(0.3, 0.0, 0.0, 0.0), 1.0),
            None
        );
        // spinning in place adds no arc length
        assert_eq!(
            g.add_keyframe(Robot::Ugv, Pose4::new(0.3, 0.0, 0.0, 2.0), 2.0),
            None
        );
        let p = Pose4::new(0.6, 0.0, 0.0, 0.4);
        assert_eq!(g.add_keyframe(Robot::Ugv, p, 3.0), Some(1));
        let f = g.factors().last().unwrap();
        assert_eq!(f.kind, FactorKind::Odometry);
        // composing the measurement onto keyframe 0 reproduces the odometry pose
        assert!(pose_close(&Pose4::identity().compose(&f.measurement), &p, 1e-12));
        assert!(g.keyframes(Robot::Ugv)[1].arc_length >= 0.5);
    }

    #[test]
    fn coincident_identity_encounter_has_zero_residual() {
        let mut g = MultiRobotGraph::new(PoseGraphConfig::default());
        g.add_keyframe(Robot::Ugv, Pose4::identity(), 0.0);
        g.add_keyframe(Robot::Uav, Pose4::identity(), 0.0);
        g.add_encounter(&estimate(0.1, Pose4::identity(), 0.1)).unwrap();
        assert!(g.cost() < 1e-20);
    }

    #[test]
    fn encounter_without_keyframes_is_dropped() {
        let mut g = MultiRobotGraph::new(PoseGraphConfig::default());
        g.add_keyframe(Robot::Ugv, Pose4::identity(), 0.0);
        g.add_keyframe(Robot::Uav, Pose4::identity(), 0.0);
        assert!(g.add_encounter(&estimate(1.0, Pose4::identity(), 0.1)).is_err());
        assert_eq!(g.dropped_encounters(), 1);
    }

    #[test]
    fn noiseless_graph_recovers_truth() {
        let scene = Scene::new(60);
        let mut g = scene.graph(PoseGraphConfig::default(), 10);
        // perturb the free states
        g.set_anchor(
            Robot::Uav,
            g.anchor(Robot::Uav).compose(&Pose4::new(0.3, -0.2, 0.1, 0.2)),
        );
        let report = g.optimize(None).unwrap().report;
        assert!(report.final_cost < 1e-12, "cost {}", report.final_cost);
        // anchor of the UAV = UAV odometry frame in the common (UGV odometry) frame
        let truth = scene.ugv_frame.inverse().compose(&scene.uav_frame);
        assert!(pose_close(&g.anchor(Robot::Uav), &truth, 1e-6));
        assert!(pose_close(&g.anchor(Robot::Ugv), &Pose4::identity(), 1e-9));
        for r in Robot::ALL {
            for k in g.keyframes(r) {
                assert!(pose_close(&k.state, &k.odometry, 1e-6));
            }
        }
    }

    #[test]
    fn odometry_only_graph_keeps_states_and_free_anchor() {
        let scene = Scene::new(30);
        let mut g = scene.graph(PoseGraphConfig::default(), 0);
        let start = Pose4::new(4.0, -3.0, 1.0, 0.5);
        g.set_anchor(Robot::Uav, start);
        let report = g.optimize(None).unwrap().report;
        assert!(report.final_cost < 1e-12);
        assert!(pose_close(&g.anchor(Robot::Uav), &start, 1e-9));
        assert!(pose_close(&g.anchor(Robot::Ugv), &Pose4::identity(), 1e-9));
    }

    #[test]
    fn encounters_make_anchor_observable() {
        let scene = Scene::new(40);
        let free = scene.graph(PoseGraphConfig::default(), 0);
        let unconstrained = free.anchor_covariance(Robot::Uav).unwrap().trace();
        assert!((unconstrained - 4.0 * 100.0f64.powi(2)).abs() / unconstrained < 1e-3);
        let mut g = scene.graph(PoseGraphConfig::default(), 12);
        assert!(g.encounter_count() >= 3);
        g.optimize(None).unwrap();
        let trace = g.anchor_covariance(Robot::Uav).unwrap().trace();
        assert!(trace.is_finite() && trace < 1e-3 * unconstrained, "{trace}");
    }

    #[test]
    fn loose_encounters_move_the_anchor_less() {
        let scene = Scene::new(30);
        let wrong = Pose4::new(0.5, 0.5, 0.0, 0.1);
        let run = |scale: f64| {
            let config = PoseGraphConfig {
                encounter_scale: scale,
                anchor_sigma: 0.1,
                ..Default::default()
            };
            let mut g = MultiRobotGraph::new(config);
            g.factors.retain(|f| f.nodes != [NodeRef::Anchor(Robot::Uav)]);
            // a tight anchor prior at a wrong value competes with the encounters
            let truth = scene.ugv_frame.inverse().compose(&scene.uav_frame);
            let prior = truth.compose(&wrong);
            for k in 0..30 {
                for r in Robot::ALL {
                    g.add_keyframe(r, scene.odom(r, k), k as f64);
                }
            }
            for t in [5.0, 15.0, 25.0] {
                g.factors.push(Factor {
                    kind: FactorKind::Encounter,
                    nodes: vec![
                        NodeRef::Anchor(Robot::Ugv),
                        NodeRef::Keyframe(Robot::Ugv, t as usize),
                        NodeRef::Anchor(Robot::Uav),
                        NodeRef::Keyframe(Robot::Uav, t as usize),
                    ],
                    measurement: scene
                        .odom(Robot::Ugv, t as usize)
                        .inverse()
                        .compose(&scene.transform().inverse())
                        .compose(&scene.odom(Robot::Uav, t as usize)),
                    covariance: Matrix4::identity() * 0.01 * scale,
                    time: t,
                });
            }
            g.factors.push(Factor {
                kind: FactorKind::Prior,
                nodes: vec![NodeRef::Anchor(Robot::Uav)],
                measurement: prior,
                covariance: Matrix4::identity() * 0.01,
                time: 0.0,
            });
            g.set_anchor(Robot::Uav, prior);
            g.optimize(None).unwrap();
            log4(&prior.between(&g.anchor(Robot::Uav))).norm()
        };
        let tight = run(1.0);
        let loose = run(100.0);
        assert!(loose < tight, "{loose} vs {tight}");
    }

    #[test]
    fn windowed_matches_full_on_noiseless_graph() {
        let scene = Scene::new(80);
        let config = PoseGraphConfig {
            window: 10,
            ..Default::default()
        };
        let mut full = scene.graph(config, 7);
        let mut windowed = full.clone();
        full.optimize(None).unwrap();
        windowed.optimize_window().unwrap();
        for r in Robot::ALL {
            let n = full.keyframes(r).len();
            for i in n - 10..n {
                let a = full.keyframes(r)[i].state;
                let b = windowed.keyframes(r)[i].state;
                assert!(pose_close(&a, &b, 1e-3));
            }
        }
    }

    #[test]
    fn export_composes_anchor() {
        let mut g = MultiRobotGraph::new(PoseGraphConfig::default());
        let p = Pose4::new(2.0, 1.0, 0.5, 0.3);
        g.add_keyframe(Robot::Uav, Pose4::identity(), 0.0);
        g.add_keyframe(Robot::Uav, p, 1.0);
        assert_eq!(g.export_global(Robot::Uav)[1].pose, p);
        g.set_anchor(Robot::Uav, Pose4::new(1.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let out = g.export_global(Robot::Uav);
        // rotate (2,1,0.5) by 90° → (−1,2,0.5), then shift by (1,0,0)
        let q = out[1].pose;
        assert!((q.x - 0.0).abs() < 1e-12 && (q.y - 2.0).abs() < 1e-12 && (q.z - 0.5).abs() < 1e-12);
        assert!((q.theta - (0.3 + std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        assert!(out.windows(2).all(|w| w[0].time < w[1].time));
    }

    #[test]
    fn dump_round_trips() {
        let scene = Scene::new(25);
        let mut g = scene.graph(PoseGraphConfig::default(), 8);
        g.optimize(None).unwrap();
        let text = g.dump();
        let back = MultiRobotGraph::parse(&text, PoseGraphConfig::default()).unwrap();
        assert_eq!(back.dump(), text);
        assert_eq!(back.keyframes, g.keyframes);
        assert_eq!(back.anchors, g.anchors);
        assert_eq!(back.factors, g.factors);
        assert!(MultiRobotGraph::parse("factor bogus 0 0", PoseGraphConfig::default()).is_err());
    }
}
