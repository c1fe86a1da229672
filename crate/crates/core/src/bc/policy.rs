use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PolicyKind;
use crate::align::{kabsch_align, mean_flow_align, SegPointCloud};
use crate::envs::{EnvKind, Episode, NUM_CLASSES, ROT_CAP, STEP_CAP};
use crate::error::{Error, Result};
use crate::geom::{project_to_rotation, RigidTransform, Rotation3, RotationKind, RotationRepr, Vec3};
use crate::net::{Checkpoint, Head, PointNetLite};

/// Maps an observation to an action. The episode is available to
/// privileged policies such as the scripted expert.
pub trait Policy {
    fn act(&self, obs: &SegPointCloud, episode: &Episode) -> Result<RigidTransform>;
}

/// The scripted demonstrator.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&self, _obs: &SegPointCloud, episode: &Episode) -> Result<RigidTransform> {
        Ok(episode.expert_action())
    }
}

/// Uniformly random actions within the expert's step limits.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub seed: u64,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &SegPointCloud, episode: &Episode) -> Result<RigidTransform> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode.seed());
        rng.set_stream(episode.step_index() as u64);
        let mut ball = |r: f64| loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                return v * r;
            }
        };
        let trans = ball(STEP_CAP);
        let rot = Rotation3::from_axis_angle(&ball(ROT_CAP));
        Ok(RigidTransform::new(rot, trans))
    }
}

/// A trained network together with the conventions needed to turn its
/// output into an action.
#[derive(Clone, Debug)]
pub struct NetPolicy {
    pub net: PointNetLite,
    pub kind: PolicyKind,
    pub env: EnvKind,
    pub scale_s: f64,
    pub rot_scale: f64,
}

impl NetPolicy {
    /// Unscaled per-tool-point flow predicted by a dense policy.
    pub fn tool_flow(&self, obs: &SegPointCloud) -> Result<Vec<Vec3>> {
        if self.kind != PolicyKind::DenseFlow {
            return Err(Error::BadConfig("tool flow requested from a direct-vector policy".into()));
        }
        let (flows, _) = self.net.forward_dense(obs)?;
        Ok(obs.tool_indices().iter().map(|&i| flows[i] / self.scale_s).collect())
    }

    pub fn action(&self, obs: &SegPointCloud) -> Result<RigidTransform> {
        match self.kind {
            PolicyKind::DenseFlow => {
                let flow = self.tool_flow(obs)?;
                let points = obs.tool_positions();
                let align = if self.env.translation_only() {
                    mean_flow_align(&points, &flow, None)?
                } else {
                    kabsch_align(&points, &flow, None)?
                };
                Ok(align.transform)
            }
            PolicyKind::DirectVector(kind) => {
                let (y, _) = self.net.forward_direct(obs)?;
                let trans = Vec3::new(y[0], y[1], y[2]) / self.scale_s;
                if self.env.translation_only() {
                    return Ok(RigidTransform::from_translation(trans));
                }
                let mut rot = y[3..].to_vec();
                if kind == RotationKind::AxisAngle3 {
                    rot.iter_mut().for_each(|v| *v /= self.rot_scale);
                }
                let rot = project_to_rotation(&RotationRepr::from_slice(kind, &rot)?)?;
                Ok(RigidTransform::new(rot, trans))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.clone());
        ck.meta.insert("env".into(), self.env.name().into());
        ck.meta.insert("policy".into(), self.kind.name().into());
        if let PolicyKind::DirectVector(kind) = self.kind {
            ck.meta.insert("repr".into(), kind.name().into());
        }
        ck.meta.insert("scale_s".into(), self.scale_s.to_string());
        ck.meta.insert("rot_scale".into(), self.rot_scale.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks `{k}`")))
        };
        let mismatch = |e: Error| Error::CheckpointMismatch(e.to_string());
        let env: EnvKind = get("env")?.parse().map_err(mismatch)?;
        let number = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::CheckpointMismatch(format!("`{k}` is not a number")))
        };
        let kind = match get("policy")?.as_str() {
            "dense-flow" => PolicyKind::DenseFlow,
            "direct-vector" => PolicyKind::DirectVector(get("repr")?.parse().map_err(mismatch)?),
            other => return Err(Error::CheckpointMismatch(format!("unknown policy `{other}`"))),
        };
        let arch = ck.net.architecture();
        let head_ok = match (kind, arch.head) {
            (PolicyKind::DenseFlow, Head::Dense) => true,
            (PolicyKind::DirectVector(k), Head::Direct(h)) => k == h,
            _ => false,
        };
        if !head_ok || arch.input_width != 3 + NUM_CLASSES {
            return Err(Error::CheckpointMismatch(format!(
                "network {arch:?} does not fit policy {}",
                kind.name()
            )));
        }
        Ok(NetPolicy {
            scale_s: number("scale_s")?,
            rot_scale: number("rot_scale")?,
            net: ck.net,
            kind,
            env,
        })
    }
}

impl Policy for NetPolicy {
    fn act(&self, obs: &SegPointCloud, _episode: &Episode) -> Result<RigidTransform> {
        self.action(obs)
    }
}
