//! Behavioral cloning: datasets, training, closed-loop evaluation and the
//! normalized success metrics.
//!
//! Episode seeds are split by parity: training demonstrations come from even
//! seeds and evaluation starts from odd ones, so the two sets never overlap.

mod data;
mod policy;
mod report;
mod train;

pub use data::{
    generate_demos, provenance_path, read_records, record_from_json, record_to_json, rollout, write_records, BcDataset,
    Provenance, Record,
};
pub use policy::{ExpertPolicy, NetPolicy, Policy, RandomPolicy};
pub use report::{summarize, EvalReport, Metric};
pub use train::{build_report, sample_loss, train, train_seed, EpochLog, SampleLoss, SeedRun, TrainOutput, CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{self, EnvKind, EpisodeConfig};
use crate::error::{Error, Result};
use crate::geom::RotationKind;

fn split_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(1 << 20).wrapping_add(index) << 1
}

/// Even episode seeds for demonstrations.
pub fn train_episode_seed(run_seed: u64, index: u64) -> u64 {
    split_seed(run_seed, index)
}

/// Odd episode seeds for held-out evaluation.
pub fn eval_episode_seed(run_seed: u64, index: u64) -> u64 {
    split_seed(run_seed, index) | 1
}

pub fn eval_seeds(run_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| eval_episode_seed(run_seed, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Point matching plus λ·consistency.
    Combo,
    /// Point matching alone (the combo path with λ = 0).
    PmOnly,
    /// Action MSE; on the SVD output for flow policies.
    Mse,
    /// Action MSE on the SVD output plus λ·consistency.
    MseAfterSvd,
    /// Point matching on flow-displaced points, skipping the SVD layer.
    PmBeforeSvd,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Combo,
        LossKind::PmOnly,
        LossKind::Mse,
        LossKind::MseAfterSvd,
        LossKind::PmBeforeSvd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Combo => "combo",
            LossKind::PmOnly => "pm-only",
            LossKind::Mse => "mse",
            LossKind::MseAfterSvd => "mse-after-svd",
            LossKind::PmBeforeSvd => "pm-before-svd",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('_', "-");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown loss `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    DenseFlow,
    DirectVector(RotationKind),
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DenseFlow => "dense-flow",
            PolicyKind::DirectVector(_) => "direct-vector",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_configs: usize,
    pub seeds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Scale applied to translational targets.
    pub scale_s: f64,
    /// Scale applied to axis-angle targets of direct-vector policies.
    pub rot_scale: f64,
    pub use_skip: bool,
    pub policy: PolicyKind,
    /// Factor applied to positions at the network input.
    pub input_scale: f64,
    pub encoder: Vec<usize>,
    pub global: usize,
    pub decoder: Vec<usize>,
    /// Base seed; training seed `k` uses `seed + k`.
    pub seed: u64,
    /// Clamp small singular-value gaps instead of skipping the batch.
    pub clamp_svd: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            eval_every: 25,
            eval_configs: 25,
            seeds: 5,
            batch_size: 24,
            lr: 1e-4,
            loss: LossKind::Combo,
            lambda: 0.1,
            beta1: 1.0,
            beta2: 1.0,
            scale_s: 250.0,
            rot_scale: 20.0,
            use_skip: true,
            policy: PolicyKind::DenseFlow,
            input_scale: 10.0,
            encoder: vec![64, 128],
            global: 256,
            decoder: vec![128, 128],
            seed: 0,
            clamp_svd: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.epochs == 0 || self.eval_every == 0 || !self.epochs.is_multiple_of(self.eval_every) {
            return bad(format!("eval_every {} must divide epochs {}", self.eval_every, self.epochs));
        }
        if self.seeds == 0 || self.batch_size == 0 || self.eval_configs == 0 {
            return bad("seeds, batch_size and eval_configs must be at least 1".into());
        }
        let positive = [self.lr, self.scale_s, self.rot_scale, self.input_scale];
        if !positive.iter().all(|x| x.is_finite() && *x > 0.0) {
            return bad("lr, scale_s, rot_scale and input_scale must be positive".into());
        }
        let non_negative = [self.lambda, self.beta1, self.beta2];
        if !non_negative.iter().all(|x| x.is_finite() && *x >= 0.0) {
            return bad("lambda, beta1 and beta2 must be non-negative".into());
        }
        if let PolicyKind::DirectVector(kind) = self.policy {
            match self.loss {
                LossKind::Mse => {}
                LossKind::PmOnly if kind == RotationKind::AxisAngle3 => {}
                other => {
                    return bad(format!("loss `{other}` is not available for direct-vector/{kind}"));
                }
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> crate::loss::LossConfig {
        crate::loss::LossConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            lambda: self.lambda,
            scale_s: self.scale_s,
        }
    }

    pub fn eval_epochs(&self) -> Vec<usize> {
        (1..=self.epochs / self.eval_every).map(|k| k * self.eval_every).collect()
    }
}

/// Closed-loop success statistics over a set of start configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub successes: usize,
    pub episodes: usize,
    /// Episodes cut short by a numerical failure of the policy.
    pub numeric_failures: usize,
}

impl EvalOutcome {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Rolls `policy` out from every seed. A numerical failure ends that episode
/// as unsuccessful.
pub fn evaluate(policy: &dyn Policy, kind: EnvKind, config: &EpisodeConfig, seeds: &[u64]) -> Result<EvalOutcome> {
    let mut out = EvalOutcome {
        successes: 0,
        episodes: seeds.len(),
        numeric_failures: 0,
    };
    if seeds.is_empty() {
        return Err(Error::BadConfig("no evaluation seeds".into()));
    }
    for &seed in seeds {
        let (mut ep, mut obs) = envs::reset(kind, config, seed)?;
        while !ep.done() {
            match policy.act(&obs, &ep) {
                Ok(a) => obs = ep.step(&a)?.observation,
                Err(e) if e.is_numeric() => {
                    out.numeric_failures += 1;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        out.successes += usize::from(ep.success());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_partition_by_parity() {
        for run in 0..5 {
            for i in 0..100 {
                assert_eq!(train_episode_seed(run, i) % 2, 0);
                assert_eq!(eval_episode_seed(run, i) % 2, 1);
            }
        }
        assert_ne!(train_episode_seed(0, 1), train_episode_seed(1, 1));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().eval_epochs().len(), 20);
        let bad = TrainConfig { eval_every: 30, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            policy: PolicyKind::DirectVector(RotationKind::SixD),
            loss: LossKind::PmOnly,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            policy: PolicyKind::DirectVector(RotationKind::AxisAngle3),
            loss: LossKind::PmOnly,
            ..TrainConfig::default()
        };
        ok.validate().unwrap();
        assert_eq!("pm_only".parse::<LossKind>().unwrap(), LossKind::PmOnly);
    }

    #[test]
    fn expert_policy_matches_demonstrator_rate() {
        let cfg = EpisodeConfig { points_per_body: 8, ..EpisodeConfig::default() };
        for kind in [EnvKind::SphereReach, EnvKind::DockPose] {
            let seeds = eval_seeds(0, 25);
            let out = evaluate(&ExpertPolicy, kind, &cfg, &seeds).unwrap();
            let demos = generate_demos(kind, &cfg, 25, 0).unwrap();
            assert_eq!(out.success_rate(), demos.provenance.demo_success_rate);
            assert_eq!(out.success_rate(), 1.0);
        }
    }

    #[test]
    fn random_policy_fails_dock_pose() {
        let cfg = EpisodeConfig { points_per_body: 8, ..EpisodeConfig::default() };
        let seeds = eval_seeds(0, 25);
        let out = evaluate(&RandomPolicy { seed: 3 }, EnvKind::DockPose, &cfg, &seeds).unwrap();
        assert_eq!(out.successes, 0);
        let again = evaluate(&RandomPolicy { seed: 3 }, EnvKind::DockPose, &cfg, &seeds).unwrap();
        assert_eq!(out, again);
    }
}
