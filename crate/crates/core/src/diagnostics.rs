//! Finite-difference checks of every differentiable stage, from the
//! alignment layer alone up to a full training sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{kabsch_align, kabsch_backward, GapPolicy, TransformGrad};
use crate::bc::{generate_demos, sample_loss, LossKind, PolicyKind, TrainConfig};
use crate::envs::{EnvKind, EpisodeConfig};
use crate::error::Result;
use crate::geom::{axis_angle_to_rotation, Mat3, RigidTransform, RotationKind, Vec3};
use crate::loss::{consistency_loss_grad, mse_action_loss_grad, point_matching_loss_grad, point_matching_raw, LossConfig};
use crate::net::{Architecture, GradCheck, Head, PointNetLite};

/// Relative error every component must stay under.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Random cases per component.
    pub cases: usize,
    pub seed: u64,
    pub h: f64,
    pub gap: GapPolicy,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: 10,
            seed: 0,
            h: 1e-5,
            gap: GapPolicy::Error,
        }
    }
}

/// Worst result for one component over all its cases.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rv(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Random rigid motion with rotation angle at most 150°.
fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = rv(rng, 1.0).normalize();
    let angle = rng.random_range(0.0..150f64.to_radians());
    RigidTransform::new(axis_angle_to_rotation(&(axis * angle)), rv(rng, 1.0))
}

fn flat(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Points and a roughly rigid flow with some non-rigid residual.
fn flow_case(rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = rng.random_range(8..40);
    let t = random_transform(rng);
    let points: Vec<Vec3> = (0..n).map(|_| rv(rng, 1.0)).collect();
    let flow = points.iter().map(|p| t.apply_point(p) - p + rv(rng, 0.05)).collect();
    (points, flow)
}

struct Acc {
    check: ComponentCheck,
}

impl Acc {
    fn new(name: &str) -> Self {
        Acc {
            check: ComponentCheck {
                name: name.to_string(),
                cases: 0,
                checked: 0,
                kinks: 0,
                max_rel_error: 0.0,
            },
        }
    }

    fn add(&mut self, r: crate::net::GradCheckReport) {
        let c = &mut self.check;
        c.cases += 1;
        c.checked += r.checked;
        c.kinks += r.kinks.len();
        c.max_rel_error = c.max_rel_error.max(r.max_rel_error);
    }
}

/// Gradient of a flow-space loss that depends on the fitted transform and,
/// optionally, on the flow directly.
fn through_alignment<F>(points: &[Vec3], flow: &[Vec3], gap: GapPolicy, outer: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&RigidTransform, &[Vec3]) -> Result<(f64, TransformGrad, Vec<Vec3>)>,
{
    let align = kabsch_align(points, flow, None)?;
    let (l, g_fit, g_flow) = outer(&align.transform, flow)?;
    let mut g = align.backward(&g_fit, gap)?;
    for (a, b) in g.iter_mut().zip(&g_flow) {
        *a += b;
    }
    Ok((l, flat(&g)))
}

fn kabsch_component(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentCheck> {
    let mut acc = Acc::new("kabsch_backward");
    let checker = GradCheck { h: opts.h, ..GradCheck::default() };
    for _ in 0..opts.cases {
        let (points, flow) = flow_case(rng);
        let upstream = TransformGrad {
            rot: Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            trans: rv(rng, 1.0),
        };
        let grad = flat(&kabsch_backward(&points, &flow, None, &upstream, opts.gap)?);
        let value = |fl: &[Vec3]| {
            kabsch_align(&points, fl, None)
                .map(|a| upstream.rot.component_mul(a.transform.rot.matrix()).sum() + upstream.trans.dot(&a.transform.trans))
                .unwrap_or(f64::NAN)
        };
        acc.add(checker.run(|x| (value(&unflat(x)), grad.clone()), &flat(&flow)));
    }
    Ok(acc.check)
}

fn point_matching_component(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentCheck> {
    let mut acc = Acc::new("point_matching");
    let checker = GradCheck { h: opts.h, ..GradCheck::default() };
    for _ in 0..opts.cases {
        let points: Vec<Vec3> = (0..rng.random_range(8..40)).map(|_| rv(rng, 1.0)).collect();
        let pred = random_transform(rng);
        let target = random_transform(rng);
        let eval = |x: &[f64]| {
            let rot = Mat3::from_row_slice(&x[..9]);
            let trans = Vec3::new(x[9], x[10], x[11]);
            point_matching_raw(&points, &rot, &trans, &target)
        };
        let (rot, trans) = pred.to_flat();
        let x: Vec<f64> = rot.iter().chain(&trans).copied().collect();
        let (_, g) = eval(&x)?;
        let analytic: Vec<f64> = g.rot.transpose().iter().chain(g.trans.iter()).copied().collect();
        acc.add(checker.run(|x| (eval(x).map(|r| r.0).unwrap_or(f64::NAN), analytic.clone()), &x));
    }
    Ok(acc.check)
}

fn end_to_end_component(
    opts: &GradcheckOptions,
    policy: PolicyKind,
    loss: LossKind,
    env: EnvKind,
) -> Result<ComponentCheck> {
    let name = match policy {
        PolicyKind::DenseFlow => format!("end_to_end/{}/dense-flow/{loss}", env.name()),
        PolicyKind::DirectVector(k) => format!("end_to_end/{}/direct-vector/{k}/{loss}", env.name()),
    };
    let mut acc = Acc::new(&name);
    let cfg = TrainConfig {
        policy,
        loss,
        scale_s: 25.0,
        clamp_svd: opts.gap == GapPolicy::Clamp,
        ..TrainConfig::default()
    };
    let ep = EpisodeConfig { points_per_body: 6, ..EpisodeConfig::default() };
    let data = generate_demos(env, &ep, 2, opts.seed)?;
    let arch = Architecture {
        input_width: data.records[0].cloud.feature_width(),
        input_scale: cfg.input_scale,
        encoder: vec![6],
        global: 8,
        decoder: vec![6],
        use_skip: true,
        head: match policy {
            PolicyKind::DenseFlow => Head::Dense,
            PolicyKind::DirectVector(k) => Head::Direct(k),
        },
    };
    // A finer step: the network composes several nonlinear stages.
    let checker = GradCheck { h: opts.h / 10.0, ..GradCheck::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..opts.cases {
        let mut net = PointNetLite::new(arch.clone(), opts.seed + case as u64)?;
        for p in net.params_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
        let rec = &data.records[case % data.records.len()];
        let (_, analytic) = sample_loss(&net, &cfg, env, rec)?;
        acc.add(checker.run(
            |x| {
                let mut probe = net.clone();
                probe.set_params(x.to_vec()).expect("same length");
                let v = sample_loss(&probe, &cfg, env, rec).map(|r| r.0.total).unwrap_or(f64::NAN);
                (v, analytic.clone())
            },
            net.params(),
        ));
    }
    Ok(acc.check)
}

/// Runs every component. Numerical failures (for example a vanishing
/// singular-value gap under [`GapPolicy::Error`]) are returned as errors.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lc = LossConfig::default();
    let mut out = vec![
        kabsch_component(opts, &mut rng)?,
        point_matching_component(opts, &mut rng)?,
    ];

    let mut acc = Acc::new("consistency");
    let mut acc_combo = Acc::new("combo");
    let mut acc_mse = Acc::new("mse_after_svd");
    let checker = GradCheck { h: opts.h, ..GradCheck::default() };
    for _ in 0..opts.cases {
        let (points, flow) = flow_case(&mut rng);
        let target = random_transform(&mut rng);
        let cons = |fit: &RigidTransform, fl: &[Vec3]| -> Result<(f64, TransformGrad, Vec<Vec3>)> {
            let (l, g) = consistency_loss_grad(&points, fl, fit)?;
            Ok((l, g.fitted, g.flow))
        };
        let combo = |fit: &RigidTransform, fl: &[Vec3]| -> Result<(f64, TransformGrad, Vec<Vec3>)> {
            let (pm, g_pm) = point_matching_loss_grad(&points, fit, &target)?;
            let (c, g_c) = consistency_loss_grad(&points, fl, fit)?;
            let flow_grad = g_c.flow.iter().map(|g| g * lc.lambda).collect();
            Ok((pm + lc.lambda * c, g_pm + g_c.fitted * lc.lambda, flow_grad))
        };
        let mse = |fit: &RigidTransform, fl: &[Vec3]| -> Result<(f64, TransformGrad, Vec<Vec3>)> {
            let (m, g_m) = mse_action_loss_grad(fit, &target, &lc);
            let (c, g_c) = consistency_loss_grad(&points, fl, fit)?;
            let flow_grad = g_c.flow.iter().map(|g| g * lc.lambda).collect();
            Ok((m + lc.lambda * c, g_m + g_c.fitted * lc.lambda, flow_grad))
        };
        let x = flat(&flow);
        for (acc, outer) in [
            (&mut acc, &cons as &dyn Fn(&RigidTransform, &[Vec3]) -> Result<(f64, TransformGrad, Vec<Vec3>)>),
            (&mut acc_combo, &combo),
            (&mut acc_mse, &mse),
        ] {
            let (_, analytic) = through_alignment(&points, &flow, opts.gap, outer)?;
            acc.add(checker.run(
                |x| {
                    let v = through_alignment(&points, &unflat(x), opts.gap, outer)
                        .map(|r| r.0)
                        .unwrap_or(f64::NAN);
                    (v, analytic.clone())
                },
                &x,
            ));
        }
    }
    out.extend([acc.check, acc_combo.check, acc_mse.check]);

    for loss in LossKind::ALL {
        out.push(end_to_end_component(opts, PolicyKind::DenseFlow, loss, EnvKind::DockPose)?);
    }
    out.push(end_to_end_component(opts, PolicyKind::DenseFlow, LossKind::Combo, EnvKind::SphereReach)?);
    for (kind, loss) in [
        (RotationKind::AxisAngle3, LossKind::Mse),
        (RotationKind::AxisAngle3, LossKind::PmOnly),
        (RotationKind::SixD, LossKind::Mse),
    ] {
        out.push(end_to_end_component(opts, PolicyKind::DirectVector(kind), loss, EnvKind::DockPose)?);
    }
    Ok(out)
}

/// Cube vertices mapped by `diag(2, 1, −1)`. The reflection splits a pair of
/// equal singular values, so the SVD differential has a zero denominator.
pub fn degenerate_cube() -> (Vec<Vec3>, Vec<Vec3>) {
    let mut points = Vec::with_capacity(8);
    for i in 0..8 {
        let s = |b: usize| if i >> b & 1 == 1 { 1.0 } else { -1.0 };
        points.push(Vec3::new(s(0), s(1), s(2)));
    }
    let flow = points.iter().map(|p| Vec3::new(2.0 * p.x, p.y, -p.z) - p).collect();
    (points, flow)
}

/// Backward pass of the alignment layer on [`degenerate_cube`] with a unit
/// rotation upstream.
pub fn degenerate_backward(gap: GapPolicy) -> Result<Vec<Vec3>> {
    let (points, flow) = degenerate_cube();
    let upstream = TransformGrad {
        rot: Mat3::from_element(1.0),
        trans: Vec3::zeros(),
    };
    kabsch_backward(&points, &flow, None, &upstream, gap)
}
