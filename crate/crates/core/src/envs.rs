//! Two small manipulation tasks with scripted experts.
//!
//! `SphereReach` moves a spherical tool towards a spherical target and only
//! needs translation. `DockPose` moves an L-shaped tool onto a copy of itself
//! resting at the origin; the tool starts yawed and displaced, so it needs
//! full rigid motions. Observations are segmented
//! point clouds with tool points first (class 0) followed by target points
//! (class 1), freshly sampled at every step.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::SegPointCloud;
use crate::error::{Error, Result};
use crate::geom::{axis_angle_to_rotation, RigidTransform, Rotation3, Vec3};

pub const TOOL_CLASS: usize = 0;
pub const TARGET_CLASS: usize = 1;
pub const NUM_CLASSES: usize = 2;

pub const SPHERE_RADIUS: f64 = 0.05;
pub const SUCCESS_EPS: f64 = 0.02;
pub const STEP_CAP: f64 = 0.02;
pub const ROT_CAP: f64 = 10.0 * std::f64::consts::PI / 180.0;
pub const DOCK_EPS_TRANS: f64 = 0.01;
pub const DOCK_EPS_ROT: f64 = 5.0 * std::f64::consts::PI / 180.0;
pub const DOCK_HOLD: usize = 10;

/// Bar lengths of the L-shaped tool along its body x, y and z axes.
const BARS: [f64; 3] = [0.12, 0.08, 0.05];
/// Range of the initial yaw offset for `DockPose`, in degrees.
const DOCK_ANGLE_RANGE: (f64, f64) = (20.0, 45.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    SphereReach,
    DockPose,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::SphereReach => "sphere-reach",
            EnvKind::DockPose => "dock-pose",
        }
    }

    /// Whether the task ignores rotations.
    pub fn translation_only(self) -> bool {
        self == EnvKind::SphereReach
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere-reach" => Ok(EnvKind::SphereReach),
            "dock-pose" => Ok(EnvKind::DockPose),
            _ => Err(Error::BadConfig(format!("unknown environment `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    /// Standard deviation of the position noise added to stored training
    /// clouds.
    pub noise_sigma: f64,
    pub points_per_body: usize,
    /// Range of the initial tool-to-target center distance.
    pub distance_range: (f64, f64),
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            horizon: 100,
            noise_sigma: 0.0,
            points_per_body: 100,
            distance_range: (0.1, 0.15),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.distance_range;
        if self.horizon == 0 {
            return Err(Error::BadConfig("horizon must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::BadConfig(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.points_per_body < 3 {
            return Err(Error::BadConfig("points_per_body must be at least 3".into()));
        }
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::BadConfig(format!("bad distance range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereReachState {
    pub tool_center: Vec3,
    pub target_center: Vec3,
    pub tool_radius: f64,
    pub target_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DockPoseState {
    /// Body-to-world pose of the tool; the body origin is the tool centroid.
    pub tool_pose: RigidTransform,
    pub goal_pose: RigidTransform,
    pub hold_counter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    SphereReach(SphereReachState),
    DockPose(DockPoseState),
}

/// One running episode. Episodes are pure functions of
/// `(config, seed, actions)`.
#[derive(Clone, Debug)]
pub struct Episode {
    kind: EnvKind,
    config: EpisodeConfig,
    seed: u64,
    step_index: usize,
    success: bool,
    state: EnvState,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: SegPointCloud,
    pub reward: f64,
    pub success: bool,
    pub done: bool,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sphere_surface(rng: &mut ChaCha8Rng, center: &Vec3, radius: f64, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| center + unit_vector(rng) * radius).collect()
}

fn l_shape_centroid() -> Vec3 {
    let total: f64 = BARS.iter().sum();
    Vec3::new(BARS[0] * BARS[0], BARS[1] * BARS[1], BARS[2] * BARS[2]) / (2.0 * total)
}

/// Points sampled uniformly along the three bars, in body coordinates.
fn l_shape_body(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    let total: f64 = BARS.iter().sum();
    let c = l_shape_centroid();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut axis = 0;
            while axis < 2 && u >= BARS[axis] {
                u -= BARS[axis];
                axis += 1;
            }
            let mut p = Vec3::zeros();
            p[axis] = u.min(BARS[axis]);
            p - c
        })
        .collect()
}

fn yaw(deg: f64) -> Rotation3 {
    axis_angle_to_rotation(&(Vec3::z() * deg.to_radians()))
}

fn cap(v: Vec3, max: f64) -> Vec3 {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Starts an episode. The returned observation is for step 0.
pub fn reset(kind: EnvKind, config: &EpisodeConfig, seed: u64) -> Result<(Episode, SegPointCloud)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.distance_range;
    let mut distance = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let d = distance();
    let state = match kind {
        EnvKind::SphereReach => {
            let target_center = Vec3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let tool_center = target_center + unit_vector(&mut rng) * d;
            EnvState::SphereReach(SphereReachState {
                tool_center,
                target_center,
                tool_radius: SPHERE_RADIUS,
                target_radius: SPHERE_RADIUS,
            })
        }
        EnvKind::DockPose => {
            // The dock sits at the origin in its canonical orientation; only
            // the tool's start varies.
            let goal = RigidTransform::identity();
            let angle = rng.random_range(DOCK_ANGLE_RANGE.0..DOCK_ANGLE_RANGE.1);
            let offset = yaw(if rng.random::<bool>() { angle } else { -angle });
            let tool_trans = goal.trans + unit_vector(&mut rng) * d;
            EnvState::DockPose(DockPoseState {
                tool_pose: RigidTransform::new(offset * goal.rot, tool_trans),
                goal_pose: goal,
                hold_counter: 0,
            })
        }
    };
    let episode = Episode {
        kind,
        config: config.clone(),
        seed,
        step_index: 0,
        success: false,
        state,
    };
    let obs = episode.observe();
    Ok((episode, obs))
}

impl Episode {
    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn done(&self) -> bool {
        self.success || self.step_index >= self.config.horizon
    }

    /// Tool-to-target center distance.
    pub fn distance(&self) -> f64 {
        match &self.state {
            EnvState::SphereReach(s) => (s.tool_center - s.target_center).norm(),
            EnvState::DockPose(s) => (s.tool_pose.trans - s.goal_pose.trans).norm(),
        }
    }

    /// Geodesic distance between tool and goal orientation (zero for
    /// `SphereReach`).
    pub fn rotation_error(&self) -> f64 {
        match &self.state {
            EnvState::SphereReach(_) => 0.0,
            EnvState::DockPose(s) => s.tool_pose.rot.geodesic(&s.goal_pose.rot),
        }
    }

    /// Observation at the current step. Surface samples are drawn from a
    /// stream keyed by `(seed, step)`, so there is no fixed correspondence
    /// between steps.
    pub fn observe(&self) -> SegPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step_index as u64 + 1);
        let n = self.config.points_per_body;
        let (mut positions, target) = match &self.state {
            EnvState::SphereReach(s) => (
                sphere_surface(&mut rng, &s.tool_center, s.tool_radius, n),
                sphere_surface(&mut rng, &s.target_center, s.target_radius, n),
            ),
            EnvState::DockPose(s) => {
                let tool = s.tool_pose.apply(&l_shape_body(&mut rng, n));
                let goal = s.goal_pose.apply(&l_shape_body(&mut rng, n));
                (tool, goal)
            }
        };
        positions.extend(target);
        let classes = (0..2 * n).map(|i| if i < n { TOOL_CLASS } else { TARGET_CLASS }).collect();
        SegPointCloud::new(positions, classes, NUM_CLASSES, TOOL_CLASS).expect("well-formed observation")
    }

    /// Applies `action` (a world-frame rigid motion of the tool).
    /// `SphereReach` uses only the translation.
    pub fn step(&mut self, action: &RigidTransform) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::EpisodeOver {
                step: self.step_index,
                horizon: self.config.horizon,
            });
        }
        if !action.trans.iter().chain(action.rot.matrix().iter()).all(|x| x.is_finite()) {
            return Err(Error::Format("non-finite action".into()));
        }
        self.step_index += 1;
        match &mut self.state {
            EnvState::SphereReach(s) => {
                s.tool_center += action.trans;
                if (s.tool_center - s.target_center).norm() < SUCCESS_EPS {
                    self.success = true;
                }
            }
            EnvState::DockPose(s) => {
                let moved = action.compose(&s.tool_pose);
                s.tool_pose = RigidTransform::new(moved.rot.renormalized(), moved.trans);
                let close = (s.tool_pose.trans - s.goal_pose.trans).norm() < DOCK_EPS_TRANS
                    && s.tool_pose.rot.geodesic(&s.goal_pose.rot) < DOCK_EPS_ROT;
                s.hold_counter = if close { s.hold_counter + 1 } else { 0 };
                if s.hold_counter >= DOCK_HOLD {
                    self.success = true;
                }
            }
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward: -self.distance(),
            success: self.success,
            done: self.done(),
        })
    }

    /// The scripted demonstrator: head straight for the target, with the
    /// translation capped at [`STEP_CAP`] and the rotation at [`ROT_CAP`].
    pub fn expert_action(&self) -> RigidTransform {
        match &self.state {
            EnvState::SphereReach(s) => {
                RigidTransform::from_translation(cap(s.target_center - s.tool_center, STEP_CAP))
            }
            EnvState::DockPose(s) => {
                let rel = s.goal_pose.rot * s.tool_pose.rot.inverse();
                let rot = axis_angle_to_rotation(&cap(rel.to_axis_angle(), ROT_CAP));
                let c = s.tool_pose.trans;
                let dc = cap(s.goal_pose.trans - c, STEP_CAP);
                // Rotate about the tool centroid while moving it by dc.
                let trans = c + dc - rot.matrix() * c;
                RigidTransform::new(rot, trans)
            }
        }
    }
}

/// Adds fixed Gaussian noise to every point of `clouds`. The draw for cloud
/// `i` depends only on `(seed, i)`.
pub fn inject_noise(clouds: &mut [SegPointCloud], sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::BadConfig(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    for (i, cloud) in clouds.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for p in cloud.positions_mut() {
            for x in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
    }
    Ok(())
}

/// Keeps `n_keep` tool points chosen by farthest-point selection from a
/// seeded start; non-tool points are kept as they are. Kept points stay in
/// their original order.
pub fn subsample_tool(cloud: &SegPointCloud, n_keep: usize, seed: u64) -> Result<SegPointCloud> {
    let tool = cloud.tool_indices();
    if n_keep == 0 || n_keep > tool.len() {
        return Err(Error::BadConfig(format!(
            "cannot keep {n_keep} of {} tool points",
            tool.len()
        )));
    }
    if n_keep == tool.len() {
        return Ok(cloud.clone());
    }
    let pos = cloud.positions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..tool.len())];
    let mut dist: Vec<f64> = tool.iter().map(|&i| (pos[i] - pos[tool[chosen[0]]]).norm_squared()).collect();
    while chosen.len() < n_keep {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &d)| if d > best.1 { (j, d) } else { best });
        chosen.push(next);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = d.min((pos[tool[j]] - pos[tool[next]]).norm_squared());
        }
    }
    let mut keep = vec![false; cloud.len()];
    for j in chosen {
        keep[tool[j]] = true;
    }
    let tool_class = cloud.tool_class();
    let indices: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.classes()[i] != tool_class || keep[i])
        .collect();
    cloud.select(&indices)
}
