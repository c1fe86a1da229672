use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, eval_seeds, BcDataset, EvalReport, LossKind, NetPolicy, PolicyKind, Record, TrainConfig};
use crate::align::{kabsch_align, mean_flow_align, GapPolicy, TargetScaling};
use crate::envs::{EnvKind, EpisodeConfig};
use crate::error::{Error, Result};
use crate::geom::{axis_angle_jacobian, axis_angle_to_rotation, RigidTransform, RotationKind, RotationRepr, Vec3};
use crate::loss::{consistency_loss_grad, mse_action_loss_grad, point_matching_loss_grad};
use crate::net::{Adam, Architecture, Head, PointNetLite};

pub const CSV_HEADER: &str = "seed,epoch,train_loss,pm_term,consistency_term,eval_success";

/// One row of the training log. `pm_term` holds the supervised term (point
/// matching or action MSE) and `consistency_term` the unweighted consistency
/// loss; both are epoch means over the samples actually used.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub pm_term: f64,
    pub consistency_term: f64,
    pub eval_success: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let eval = self.eval_success.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.seed, self.epoch, self.train_loss, self.pm_term, self.consistency_term, eval
        )
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub log: Vec<EpochLog>,
    /// Raw success at each evaluation epoch.
    pub eval_success: Vec<f64>,
    pub policy: NetPolicy,
    pub skipped_batches: usize,
    /// One message per skipped batch, naming the offending sample.
    pub numeric_errors: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub runs: Vec<SeedRun>,
    pub report: EvalReport,
}

impl TrainOutput {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for run in &self.runs {
            for row in &run.log {
                out.push_str(&row.csv_row());
                out.push('\n');
            }
        }
        out
    }
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub supervised: f64,
    pub consistency: f64,
}

fn architecture(cfg: &TrainConfig, input_width: usize) -> Architecture {
    Architecture {
        input_width,
        input_scale: cfg.input_scale,
        encoder: cfg.encoder.clone(),
        global: cfg.global,
        decoder: cfg.decoder.clone(),
        use_skip: cfg.use_skip,
        head: match cfg.policy {
            PolicyKind::DenseFlow => Head::Dense,
            PolicyKind::DirectVector(kind) => Head::Direct(kind),
        },
    }
}

/// Loss and parameter gradient for one demonstration sample. All terms are
/// computed in scaled units: tool points and target translations are
/// multiplied by `scale_s` while the network input stays unscaled.
pub fn sample_loss(net: &PointNetLite, cfg: &TrainConfig, env: EnvKind, record: &Record) -> Result<(SampleLoss, Vec<f64>)> {
    let cloud = &record.cloud;
    let s = cfg.scale_s;
    let tool = cloud.tool_indices();
    if tool.is_empty() {
        return Err(Error::NoToolPoints);
    }
    let points: Vec<Vec3> = tool.iter().map(|&i| cloud.positions()[i] * s).collect();
    let target = record.action.scaled(s);
    let gap = if cfg.clamp_svd { GapPolicy::Clamp } else { GapPolicy::Error };

    match cfg.policy {
        PolicyKind::DenseFlow => {
            let (flows, cache) = net.forward_dense(cloud)?;
            let flow: Vec<Vec3> = tool.iter().map(|&i| flows[i]).collect();
            let inv_n = 1.0 / flow.len() as f64;
            let (terms, grad_flow) = match cfg.loss {
                LossKind::PmBeforeSvd => {
                    let mut total = 0.0;
                    let mut grad = Vec::with_capacity(flow.len());
                    for (p, f) in points.iter().zip(&flow) {
                        let e = p + f - target.apply_point(p);
                        let n = e.norm();
                        total += n;
                        grad.push(if n > 0.0 { e * (inv_n / n) } else { Vec3::zeros() });
                    }
                    let l = total * inv_n;
                    (SampleLoss { total: l, supervised: l, consistency: 0.0 }, grad)
                }
                kind => {
                    let align = if env.translation_only() {
                        mean_flow_align(&points, &flow, None)?
                    } else {
                        kabsch_align(&points, &flow, None)?
                    };
                    let fitted = &align.transform;
                    let (sup, g_sup) = match kind {
                        LossKind::Mse | LossKind::MseAfterSvd => mse_action_loss_grad(fitted, &target, &cfg.loss_config()),
                        _ => point_matching_loss_grad(&points, fitted, &target)?,
                    };
                    let lambda = match kind {
                        LossKind::Combo | LossKind::MseAfterSvd => cfg.lambda,
                        _ => 0.0,
                    };
                    let (cons, g_cons) = consistency_loss_grad(&points, &flow, fitted)?;
                    let upstream = g_sup + g_cons.fitted * lambda;
                    let mut grad = align.backward(&upstream, gap)?;
                    for (g, c) in grad.iter_mut().zip(&g_cons.flow) {
                        *g += c * lambda;
                    }
                    let terms = SampleLoss {
                        total: sup + lambda * cons,
                        supervised: sup,
                        consistency: cons,
                    };
                    (terms, grad)
                }
            };
            let mut upstream = vec![0.0; cloud.len() * 3];
            for (&i, g) in tool.iter().zip(&grad_flow) {
                upstream[3 * i..3 * i + 3].copy_from_slice(g.as_slice());
            }
            Ok((terms, net.backward(&cache, &upstream)?))
        }
        PolicyKind::DirectVector(kind) => {
            let (y, cache) = net.forward_direct(cloud)?;
            let mut dy = vec![0.0; y.len()];
            let l = match cfg.loss {
                LossKind::Mse => {
                    let mut rot = RotationRepr::encode(&record.action.rot, kind).as_slice().to_vec();
                    if kind == RotationKind::AxisAngle3 {
                        rot.iter_mut().for_each(|v| *v *= cfg.rot_scale);
                    }
                    let want: Vec<f64> = target.trans.iter().copied().chain(rot).collect();
                    let inv = 1.0 / y.len() as f64;
                    let mut l = 0.0;
                    for ((d, a), b) in dy.iter_mut().zip(&y).zip(&want) {
                        l += (a - b).powi(2) * inv;
                        *d = 2.0 * (a - b) * inv;
                    }
                    l
                }
                LossKind::PmOnly if kind == RotationKind::AxisAngle3 => {
                    let v = Vec3::new(y[3], y[4], y[5]) / cfg.rot_scale;
                    let pred = RigidTransform::new(axis_angle_to_rotation(&v), Vec3::new(y[0], y[1], y[2]));
                    let (l, g) = point_matching_loss_grad(&points, &pred, &target)?;
                    dy[..3].copy_from_slice(g.trans.as_slice());
                    for (k, jk) in axis_angle_jacobian(&v).iter().enumerate() {
                        dy[3 + k] = g.rot.component_mul(jk).sum() / cfg.rot_scale;
                    }
                    l
                }
                other => {
                    return Err(Error::BadConfig(format!("loss `{other}` is not available for direct-vector/{kind}")));
                }
            };
            let terms = SampleLoss { total: l, supervised: l, consistency: 0.0 };
            Ok((terms, net.backward(&cache, &dy)?))
        }
    }
}

/// Trains one seed. The network, the shuffling and nothing else depend on
/// `cfg.seed + seed_index`; evaluation starts are shared by all seeds.
pub fn train_seed(cfg: &TrainConfig, data: &BcDataset, seed_index: usize) -> Result<SeedRun> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::BadConfig("empty dataset".into()));
    }
    let env = data.provenance.env;
    let seed = cfg.seed.wrapping_add(seed_index as u64);
    let arch = architecture(cfg, data.records[0].cloud.feature_width());
    let mut policy = NetPolicy {
        net: PointNetLite::new(arch, seed)?,
        kind: cfg.policy,
        env,
        scale_s: cfg.scale_s,
        rot_scale: cfg.rot_scale,
    };
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let eval_config = EpisodeConfig {
        noise_sigma: 0.0,
        ..data.provenance.episode.clone()
    };
    let starts = eval_seeds(cfg.seed, cfg.eval_configs);

    let mut order: Vec<usize> = (0..data.records.len()).collect();
    let mut run = SeedRun {
        seed,
        log: Vec::with_capacity(cfg.epochs),
        eval_success: Vec::new(),
        policy: policy.clone(),
        skipped_batches: 0,
        numeric_errors: Vec::new(),
    };
    let mut grad = vec![0.0; policy.net.num_params()];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = SampleLoss::default();
        let mut used = 0usize;
        'batch: for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut batch_sums = SampleLoss::default();
            for &i in batch {
                let rec = &data.records[i];
                match sample_loss(&policy.net, cfg, env, rec) {
                    Ok((terms, g)) => {
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                        batch_sums.total += terms.total;
                        batch_sums.supervised += terms.supervised;
                        batch_sums.consistency += terms.consistency;
                    }
                    Err(e) if e.is_numeric() => {
                        run.skipped_batches += 1;
                        run.numeric_errors.push(format!(
                            "seed {seed} epoch {epoch}: episode {} step {}: {e}",
                            rec.episode_id, rec.t
                        ));
                        continue 'batch;
                    }
                    Err(e) => return Err(e),
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(policy.net.params_mut(), &grad)?;
            sums.total += batch_sums.total;
            sums.supervised += batch_sums.supervised;
            sums.consistency += batch_sums.consistency;
            used += batch.len();
        }
        let mean = |x: f64| if used > 0 { x / used as f64 } else { f64::NAN };
        let eval_success = if epoch % cfg.eval_every == 0 {
            let rate = evaluate(&policy, env, &eval_config, &starts)?.success_rate();
            run.eval_success.push(rate);
            Some(rate)
        } else {
            None
        };
        run.log.push(EpochLog {
            seed,
            epoch,
            train_loss: mean(sums.total),
            pm_term: mean(sums.supervised),
            consistency_term: mean(sums.consistency),
            eval_success,
        });
    }
    run.policy = policy;
    Ok(run)
}

pub fn build_report(cfg: &TrainConfig, data: &BcDataset, runs: &[SeedRun]) -> Result<EvalReport> {
    let policy = match cfg.policy {
        PolicyKind::DenseFlow => "dense-flow".to_string(),
        PolicyKind::DirectVector(kind) => format!("direct-vector/{kind}"),
    };
    EvalReport::new(
        data.provenance.env.name(),
        &policy,
        data.provenance.demo_success_rate,
        runs.iter().map(|r| r.seed).collect(),
        cfg.eval_epochs(),
        runs.iter().map(|r| r.eval_success.clone()).collect(),
        runs.iter().map(|r| r.skipped_batches).collect(),
    )
}

/// Trains every seed in turn and summarizes the evaluation history.
pub fn train(cfg: &TrainConfig, data: &BcDataset) -> Result<TrainOutput> {
    let runs = (0..cfg.seeds)
        .map(|k| train_seed(cfg, data, k))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(cfg, data, &runs)?;
    Ok(TrainOutput { runs, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::generate_demos;
    use crate::net::GradCheck;

    fn tiny_cfg(policy: PolicyKind, loss: LossKind) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            eval_every: 2,
            eval_configs: 3,
            seeds: 2,
            batch_size: 8,
            lr: 1e-3,
            loss,
            policy,
            encoder: vec![6],
            global: 8,
            decoder: vec![6],
            ..TrainConfig::default()
        }
    }

    fn tiny_data(kind: EnvKind) -> BcDataset {
        let cfg = EpisodeConfig { points_per_body: 6, ..EpisodeConfig::default() };
        generate_demos(kind, &cfg, 3, 1).unwrap()
    }

    fn randomized(cfg: &TrainConfig, data: &BcDataset, seed: u64) -> PointNetLite {
        let mut net = PointNetLite::new(architecture(cfg, 5), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        for p in net.params_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
        let _ = data;
        net
    }

    fn end_to_end(policy: PolicyKind, loss: LossKind, env: EnvKind) {
        let cfg = TrainConfig { scale_s: 25.0, ..tiny_cfg(policy, loss) };
        let data = tiny_data(env);
        let rec = &data.records[1];
        let net = randomized(&cfg, &data, 5);
        let (_, analytic) = sample_loss(&net, &cfg, env, rec).unwrap();
        let report = GradCheck { h: 1e-6, ..GradCheck::default() }.run(
            |x: &[f64]| {
                let mut probe = net.clone();
                probe.set_params(x.to_vec()).unwrap();
                (sample_loss(&probe, &cfg, env, rec).unwrap().0.total, analytic.clone())
            },
            net.params(),
        );
        assert!(report.max_rel_error < 1e-4, "{policy:?} {loss:?} {env:?}: {report:?}");
        assert!(report.checked > net.num_params() / 2);
    }

    #[test]
    fn end_to_end_gradients() {
        for loss in LossKind::ALL {
            end_to_end(PolicyKind::DenseFlow, loss, EnvKind::DockPose);
        }
        end_to_end(PolicyKind::DenseFlow, LossKind::Combo, EnvKind::SphereReach);
        end_to_end(PolicyKind::DirectVector(RotationKind::AxisAngle3), LossKind::Mse, EnvKind::DockPose);
        end_to_end(PolicyKind::DirectVector(RotationKind::AxisAngle3), LossKind::PmOnly, EnvKind::DockPose);
        end_to_end(PolicyKind::DirectVector(RotationKind::SixD), LossKind::Mse, EnvKind::DockPose);
    }

    #[test]
    fn combo_with_zero_lambda_matches_pm_only() {
        let data = tiny_data(EnvKind::DockPose);
        let a = train(&TrainConfig { lambda: 0.0, ..tiny_cfg(PolicyKind::DenseFlow, LossKind::Combo) }, &data).unwrap();
        let b = train(&tiny_cfg(PolicyKind::DenseFlow, LossKind::PmOnly), &data).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.runs[0].policy.net.params(), b.runs[0].policy.net.params());
    }

    #[test]
    fn training_is_reproducible_and_logs_snapshots() {
        let data = tiny_data(EnvKind::SphereReach);
        let cfg = tiny_cfg(PolicyKind::DenseFlow, LossKind::Combo);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.report, b.report);
        assert_eq!(a.runs.len(), 2);
        assert_eq!(a.runs[0].eval_success.len(), 2);
        assert_eq!(a.csv().lines().count(), 1 + 2 * 4);
        assert!(a.csv().lines().nth(1).unwrap().ends_with(','));
        assert_ne!(a.runs[0].policy.net.params(), a.runs[1].policy.net.params());
    }

    #[test]
    fn direct_combo_rejected() {
        let data = tiny_data(EnvKind::SphereReach);
        let cfg = tiny_cfg(PolicyKind::DirectVector(RotationKind::Quat4), LossKind::Combo);
        assert!(matches!(train(&cfg, &data), Err(Error::BadConfig(_))));
    }
}
