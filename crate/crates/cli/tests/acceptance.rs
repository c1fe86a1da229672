//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p toolflow-cli --test acceptance -- 1 2 9`.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolflow::align::{
    ground_truth_flow, induced_flow, kabsch_align, kabsch_backward, GapPolicy, SegPointCloud, TransformGrad,
};
use toolflow::bc::{
    generate_demos, sample_loss, train, BcDataset, LossKind, PolicyKind, TrainConfig, TrainOutput,
};
use toolflow::envs::{self, subsample_tool, EnvKind, EpisodeConfig};
use toolflow::error::Error;
use toolflow::geom::{axis_angle_to_rotation, Mat3, RigidTransform, RotationKind, Vec3};
use toolflow::loss::{combo_loss, consistency_loss, point_matching_loss, LossConfig};
use toolflow::net::{Architecture, PointNetLite};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rv(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        rng.random_range(-r..r),
    )
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = rv(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng, max_angle: f64) -> RigidTransform {
    let angle = rng.random_range(0.0..=max_angle);
    RigidTransform::new(axis_angle_to_rotation(&(unit(rng) * angle)), rv(rng, 0.5))
}

/// A cloud whose points are all tool points.
fn tool_cloud(rng: &mut ChaCha8Rng, n: usize) -> SegPointCloud {
    let positions = (0..n).map(|_| rv(rng, 0.2)).collect();
    SegPointCloud::new(positions, vec![0; n], 1, 0).unwrap()
}

fn frobenius(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).norm()
}

fn c1_kabsch_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut rot_err, mut trans_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(8..=200);
        let cloud = tool_cloud(&mut rng, n);
        let t = random_transform(&mut rng, 150f64.to_radians());
        let flow = ground_truth_flow(&cloud, &t).unwrap();
        let fit = kabsch_align(&cloud.tool_positions(), &flow.vectors, None).unwrap().transform;
        rot_err = rot_err.max(frobenius(fit.rot.matrix(), t.rot.matrix()));
        trans_err = trans_err.max((fit.trans - t.trans).norm());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rot_err < 1e-9 && trans_err < 1e-9 && secs < 10.0,
        format!("max rotation error {rot_err:.2e}, max translation error {trans_err:.2e}, {secs:.2}s"),
    )
}

/// `⟨G, R(F)⟩ + g·t(F)`, the scalar whose gradient the backward pass returns.
fn projected(points: &[Vec3], flow: &[Vec3], g: &TransformGrad) -> f64 {
    let t = kabsch_align(points, flow, None).unwrap().transform;
    t.rot.matrix().component_mul(&g.rot).sum() + g.trans.dot(&t.trans)
}

fn c2_svd_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(8..=40);
        let points: Vec<Vec3> = (0..n).map(|_| rv(&mut rng, 0.2)).collect();
        let t = random_transform(&mut rng, PI / 2.0);
        // A rigid motion plus noise, so the flow is not exactly rigid.
        let flow: Vec<Vec3> = points
            .iter()
            .map(|p| t.apply_point(p) - p + rv(&mut rng, 0.02))
            .collect();
        let upstream = TransformGrad {
            rot: Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            trans: rv(&mut rng, 1.0),
        };
        let analytic = kabsch_backward(&points, &flow, None, &upstream, GapPolicy::Error).unwrap();
        let mut diff = 0.0;
        let mut scale = 0.0f64;
        for i in 0..n {
            for k in 0..3 {
                let mut plus = flow.clone();
                plus[i][k] += h;
                let mut minus = flow.clone();
                minus[i][k] -= h;
                let numeric = (projected(&points, &plus, &upstream) - projected(&points, &minus, &upstream)) / (2.0 * h);
                diff += (analytic[i][k] - numeric).powi(2);
                scale = scale.max(analytic[i][k].abs()).max(numeric.abs());
            }
        }
        worst = worst.max(diff.sqrt() / scale.max(1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e} over 100 cases, {secs:.2}s"),
    )
}

fn c3_loss_fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let (mut pm_same, mut pm_diff_min, mut consistency_max) = (0.0f64, f64::INFINITY, 0.0f64);
    let mut combo_matches = true;
    for _ in 0..100 {
        let n = rng.random_range(8..=60);
        let cloud = tool_cloud(&mut rng, n);
        let points = cloud.tool_positions();
        let t = random_transform(&mut rng, PI);
        let other = random_transform(&mut rng, PI);
        pm_same = pm_same.max(point_matching_loss(&points, &t, &t).unwrap());
        pm_diff_min = pm_diff_min.min(point_matching_loss(&points, &other, &t).unwrap());
        let flow = induced_flow(&cloud, &t).unwrap().vectors;
        consistency_max = consistency_max.max(consistency_loss(&points, &flow, &t).unwrap());
        let noisy: Vec<Vec3> = flow.iter().map(|f| f + rv(&mut rng, 0.01)).collect();
        let combo = combo_loss(&points, &noisy, &other, &t, &cfg).unwrap();
        combo_matches &= combo.total == point_matching_loss(&points, &other, &t).unwrap();
    }

    // The same identity through a full training sample, gradients included.
    let ep = EpisodeConfig {
        points_per_body: 12,
        ..EpisodeConfig::default()
    };
    let data = generate_demos(EnvKind::DockPose, &ep, 1, 0).unwrap();
    let base = TrainConfig {
        encoder: vec![8],
        global: 8,
        decoder: vec![8],
        ..TrainConfig::default()
    };
    let combo_cfg = TrainConfig {
        loss: LossKind::Combo,
        lambda: 0.0,
        ..base.clone()
    };
    let pm_cfg = TrainConfig {
        loss: LossKind::PmOnly,
        ..base
    };
    let net = PointNetLite::new(
        Architecture {
            encoder: vec![8],
            global: 8,
            decoder: vec![8],
            input_scale: 10.0,
            ..Architecture::dense(data.records[0].cloud.feature_width())
        },
        7,
    )
    .unwrap();
    let mut sample_matches = true;
    for rec in data.records.iter().take(10) {
        let a = sample_loss(&net, &combo_cfg, EnvKind::DockPose, rec).unwrap();
        let b = sample_loss(&net, &pm_cfg, EnvKind::DockPose, rec).unwrap();
        sample_matches &= a.0.total == b.0.total && a.1 == b.1;
    }

    outcome(
        pm_same == 0.0 && pm_diff_min > 0.0 && consistency_max == 0.0 && combo_matches && sample_matches,
        format!(
            "PM(T,T) max {pm_same:e}, PM(T',T) min {pm_diff_min:.2e}, consistency max {consistency_max:e}, \
             combo(λ=0) == PM: {}",
            combo_matches && sample_matches
        ),
    )
}

/// Network and optimizer settings shared by the training criteria.
fn small(policy: PolicyKind, loss: LossKind, epochs: usize, eval_every: usize, seeds: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        eval_every,
        seeds,
        lr: 1e-3,
        policy,
        loss,
        encoder: vec![16, 32],
        global: 64,
        decoder: vec![32, 32],
        ..TrainConfig::default()
    }
}

const DIRECT: PolicyKind = PolicyKind::DirectVector(RotationKind::AxisAngle3);

fn demos(env: EnvKind, n: usize, distance_range: (f64, f64)) -> BcDataset {
    let ep = EpisodeConfig {
        points_per_body: 16,
        distance_range,
        ..EpisodeConfig::default()
    };
    generate_demos(env, &ep, n, 0).unwrap()
}

fn max_epoch(out: &TrainOutput) -> f64 {
    out.report.max_epoch.mean
}

fn c4_skip_ablation(dock: &BcDataset) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = Architecture {
        encoder: vec![16, 32],
        global: 64,
        decoder: vec![32, 32],
        use_skip: false,
        input_scale: 10.0,
        ..Architecture::dense(3 + envs::NUM_CLASSES)
    };
    let (mut identical, mut rot_dev) = (true, 0.0f64);
    for case in 0..100 {
        let mut net = PointNetLite::new(arch.clone(), case).unwrap();
        // Fresh networks predict zero flow; random weights give a real test.
        for p in net.params_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
        let n = rng.random_range(8..=40);
        let positions: Vec<Vec3> = (0..2 * n).map(|_| rv(&mut rng, 0.2)).collect();
        let classes = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        let cloud = SegPointCloud::new(positions, classes, envs::NUM_CLASSES, envs::TOOL_CLASS).unwrap();
        let (flow, _) = net.forward_dense(&cloud).unwrap();
        identical &= flow.iter().all(|f| *f == flow[0]);
        let tool: Vec<Vec3> = cloud.tool_indices().iter().map(|&i| flow[i]).collect();
        let fit = kabsch_align(&cloud.tool_positions(), &tool, None).unwrap().transform;
        rot_dev = rot_dev.max(frobenius(fit.rot.matrix(), &Mat3::identity()));
    }

    let cfg = TrainConfig {
        use_skip: false,
        ..small(PolicyKind::DenseFlow, LossKind::Combo, 50, 10, 3)
    };
    let out = train(&cfg, dock).unwrap();
    let best_raw = out
        .report
        .raw_success
        .iter()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b));
    outcome(
        identical && rot_dev < 1e-6 && best_raw == 0.0,
        format!(
            "per-point outputs identical: {identical}, rotation deviation {rot_dev:.1e}, \
             best raw DockPose success {best_raw:.2} over 3 seeds"
        ),
    )
}

fn c5_locality() -> Outcome {
    let start = Instant::now();
    let bins = [(0.1, 0.15), (0.2, 0.25), (0.3, 0.35)];
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for bin in bins {
        let data = demos(EnvKind::SphereReach, 50, bin);
        let dense = max_epoch(&train(&small(PolicyKind::DenseFlow, LossKind::Combo, 200, 20, 3), &data).unwrap());
        let direct = max_epoch(&train(&small(DIRECT, LossKind::Mse, 200, 20, 3), &data).unwrap());
        gaps.push(dense - direct);
        detail.push(format!("[{},{}] {dense:.3}-{direct:.3}={:+.3}", bin.0, bin.1, dense - direct));
    }
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0]);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        gaps[0] > 0.0 && monotone && minutes < 20.0,
        format!("{} (dense - direct, normalized max-epoch), {minutes:.1} min", detail.join(", ")),
    )
}

fn c6_sphere_reach(sphere: &BcDataset) -> Outcome {
    let start = Instant::now();
    let dense = max_epoch(&train(&small(PolicyKind::DenseFlow, LossKind::Combo, 500, 25, 5), sphere).unwrap());
    let direct = max_epoch(&train(&small(DIRECT, LossKind::Mse, 500, 25, 5), sphere).unwrap());
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        dense >= 0.9 && dense >= direct && minutes < 30.0,
        format!("dense-flow {dense:.3}, direct-vector {direct:.3} (normalized max-epoch, 5 seeds), {minutes:.1} min"),
    )
}

fn c7_consistency(dock: &BcDataset) -> Outcome {
    let run = |lambda: f64| {
        let cfg = TrainConfig {
            lambda,
            ..small(PolicyKind::DenseFlow, LossKind::Combo, 200, 20, 5)
        };
        max_epoch(&train(&cfg, dock).unwrap())
    };
    let (with, without) = (run(0.1), run(0.0));
    outcome(
        with >= without,
        format!("λ=0.1 {with:.3}, λ=0 {without:.3} (normalized max-epoch, 5 seeds)"),
    )
}

fn c8_target_scaling(sphere: &BcDataset) -> Outcome {
    let scaled = small(DIRECT, LossKind::Mse, 200, 20, 3);
    let unscaled = TrainConfig {
        scale_s: 1.0,
        rot_scale: 1.0,
        ..scaled.clone()
    };
    let s = max_epoch(&train(&scaled, sphere).unwrap());
    let u = max_epoch(&train(&unscaled, sphere).unwrap());
    outcome(u <= s, format!("unscaled {u:.3}, scaled {s:.3} (direct-vector, 3 seeds)"))
}

fn c9_few_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ep = EpisodeConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (_, obs) = envs::reset(EnvKind::DockPose, &ep, seed).unwrap();
        let t = random_transform(&mut rng, PI / 2.0);
        let full = obs.tool_positions();
        let few = subsample_tool(&obs, 10, seed).unwrap().tool_positions();
        let fit = |pts: &[Vec3]| {
            let flow: Vec<Vec3> = pts.iter().map(|p| t.apply_point(p) - p).collect();
            kabsch_align(pts, &flow, None).unwrap().transform
        };
        let (a, b) = (fit(&full), fit(&few));
        worst = worst
            .max(frobenius(a.rot.matrix(), b.rot.matrix()))
            .max((a.trans - b.trans).norm());
    }
    let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(1.0, -2.0, 0.5) * (i as f64 * 0.03)).collect();
    let flow: Vec<Vec3> = line.iter().map(|p| Vec3::new(0.01, 0.0, 0.0) + p * 0.1).collect();
    let collinear = matches!(kabsch_align(&line, &flow, None), Err(Error::RankDeficient { .. }));
    outcome(
        worst < 1e-9 && collinear,
        format!("10-point vs full-cloud difference {worst:.2e}, collinear input rank deficient: {collinear}"),
    )
}

fn toolflow(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_toolflow"))
        .current_dir(dir)
        .env_remove("TOOLFLOW_SEED")
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Every file below `dir`, sorted by path, with its contents.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10_cli_determinism() -> Outcome {
    let net = ["-s", "encoder=8,8", "-s", "global=16", "-s", "decoder=8", "-s", "eval_configs=3"];
    let mut script: Vec<Vec<&str>> = vec![
        vec!["gen-demos", "--env", "dock-pose", "--episodes", "4", "--points-per-body", "10", "--noise-sigma", "0.001"],
        vec!["train", "--epochs", "4", "--eval-every", "2", "--seeds", "2", "--parallel-seeds", "2", "--out-dir", "dense"],
        vec!["train", "--epochs", "4", "--eval-every", "2", "--seeds", "2", "--policy", "direct-vector", "--loss", "mse", "--out-dir", "direct"],
        vec!["eval", "--checkpoint", "dense/seed_0.ckpt", "--checkpoint", "dense/seed_1.ckpt", "--data", "demos.jsonl", "--out", "eval.json"],
        vec!["eval", "--expert", "--env", "dock-pose", "--eval-configs", "3", "--out", "expert.json"],
        vec!["rollout", "--checkpoint", "direct/seed_0.ckpt", "--out", "rollout.jsonl"],
        vec!["export-flow", "--checkpoint", "dense/seed_1.ckpt", "--observation", "demos.jsonl", "--index", "2", "--out", "flow.ply"],
        vec!["gradcheck", "--cases", "1", "--out", "gradcheck.csv"],
    ];
    for cmd in &mut script[1..3] {
        cmd.extend(net);
    }
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        for cmd in &script {
            if !toolflow(dir.path(), cmd) {
                return Err(format!("`toolflow {}` failed", cmd.join(" ")));
            }
        }
        Ok(snapshot(dir.path()))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            let same = a.len() == b.len() && differing.is_empty();
            outcome(
                same,
                format!("{} files over {} commands, differing: {differing:?}", a.len(), script.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);

    let sphere = (selected(6) || selected(8)).then(|| demos(EnvKind::SphereReach, 100, (0.1, 0.15)));
    let dock = (selected(4) || selected(7)).then(|| demos(EnvKind::DockPose, 100, (0.1, 0.15)));

    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "kabsch round trip", Box::new(c1_kabsch_round_trip)),
        (2, "SVD layer gradients", Box::new(c2_svd_gradients)),
        (3, "loss fixed points", Box::new(c3_loss_fixed_points)),
        (4, "skip-connection ablation", Box::new(|| c4_skip_ablation(dock.as_ref().unwrap()))),
        (5, "locality trend", Box::new(c5_locality)),
        (6, "SphereReach behavioral cloning", Box::new(|| c6_sphere_reach(sphere.as_ref().unwrap()))),
        (7, "consistency loss benefit", Box::new(|| c7_consistency(dock.as_ref().unwrap()))),
        (8, "target scaling", Box::new(|| c8_target_scaling(sphere.as_ref().unwrap()))),
        (9, "few-point robustness", Box::new(c9_few_points)),
        (10, "CLI determinism", Box::new(c10_cli_determinism)),
    ];

    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (n, name, check) in &criteria {
        if !selected(*n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        total += elapsed;
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {n:>2} {name}: {} [{:.1}s]", o.detail, elapsed.as_secs_f64());
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {failed} failed, {:.0}s", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
