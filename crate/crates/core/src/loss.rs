//! Training objectives.
//!
//! Point-matching and consistency terms use unsquared per-point Euclidean
//! norms. Their subgradient at a zero residual is taken to be zero.

use crate::align::TransformGrad;
use crate::error::{Error, Result};
use crate::geom::{Mat3, RigidTransform, Rotation3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight on the rotation term of the action MSE.
    pub beta1: f64,
    /// Weight on the translation term of the action MSE.
    pub beta2: f64,
    /// Weight of the consistency term.
    pub lambda: f64,
    /// Target scale factor.
    pub scale_s: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta1: 1.0,
            beta2: 1.0,
            lambda: 0.1,
            scale_s: 250.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.beta1, self.beta2, self.lambda]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
            && self.scale_s.is_finite()
            && self.scale_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid loss configuration {self:?}")))
        }
    }
}

/// `x / ‖x‖`, or zero at the origin.
fn unit_or_zero(x: &Vec3) -> Vec3 {
    let n = x.norm();
    if n > 0.0 {
        x / n
    } else {
        Vec3::zeros()
    }
}

fn frobenius_unit_or_zero(m: &Mat3) -> Mat3 {
    let n = m.norm();
    if n > 0.0 {
        m / n
    } else {
        Mat3::zeros()
    }
}

/// `‖R̂ − R*‖_F`.
pub fn frobenius_rotation_loss(pred: &Rotation3, target: &Rotation3) -> f64 {
    (pred.matrix() - target.matrix()).norm()
}

/// `∂/∂R̂ ‖R̂ − R*‖_F` with `R̂` treated as an unconstrained matrix.
pub fn frobenius_rotation_grad(pred: &Mat3, target: &Rotation3) -> (f64, Mat3) {
    let diff = pred - target.matrix();
    (diff.norm(), frobenius_unit_or_zero(&diff))
}

/// `β₁‖R̂ − R*‖_F + β₂‖t̂ − t*‖₂`.
pub fn mse_action_loss(pred: &RigidTransform, target: &RigidTransform, cfg: &LossConfig) -> f64 {
    mse_action_loss_grad(pred, target, cfg).0
}

pub fn mse_action_loss_grad(
    pred: &RigidTransform,
    target: &RigidTransform,
    cfg: &LossConfig,
) -> (f64, TransformGrad) {
    let (rot_err, rot_grad) = frobenius_rotation_grad(pred.rot.matrix(), &target.rot);
    let dt = pred.trans - target.trans;
    (
        cfg.beta1 * rot_err + cfg.beta2 * dt.norm(),
        TransformGrad {
            rot: cfg.beta1 * rot_grad,
            trans: cfg.beta2 * unit_or_zero(&dt),
        },
    )
}

/// Mean distance between the tool points moved by the predicted and by the
/// target transform.
pub fn point_matching_loss(points: &[Vec3], pred: &RigidTransform, target: &RigidTransform) -> Result<f64> {
    point_matching_loss_grad(points, pred, target).map(|(l, _)| l)
}

pub fn point_matching_loss_grad(
    points: &[Vec3],
    pred: &RigidTransform,
    target: &RigidTransform,
) -> Result<(f64, TransformGrad)> {
    point_matching_raw(points, pred.rot.matrix(), &pred.trans, target)
}

/// Point matching with the predicted rotation given as a raw matrix (used by
/// gradient checks that perturb individual entries).
pub fn point_matching_raw(
    points: &[Vec3],
    rot: &Mat3,
    trans: &Vec3,
    target: &RigidTransform,
) -> Result<(f64, TransformGrad)> {
    if points.is_empty() {
        return Err(Error::NoToolPoints);
    }
    let inv_n = 1.0 / points.len() as f64;
    let dr = rot - target.rot.matrix();
    let dt = trans - target.trans;
    let mut total = 0.0;
    let mut grad = TransformGrad::zeros();
    for p in points {
        let e = dr * p + dt;
        total += e.norm();
        let u = unit_or_zero(&e) * inv_n;
        grad.rot += u * p.transpose();
        grad.trans += u;
    }
    Ok((total * inv_n, grad))
}

/// Gradients of the consistency loss.
#[derive(Clone, Debug)]
pub struct ConsistencyGrad {
    /// Direct dependence on each predicted flow vector.
    pub flow: Vec<Vec3>,
    /// Dependence on the fitted transform; route it through the alignment
    /// layer to reach the flow.
    pub fitted: TransformGrad,
}

/// Mean distance between predicted flow and the flow induced by the fitted
/// transform. The ground-truth action does not enter.
pub fn consistency_loss(points: &[Vec3], flow: &[Vec3], fitted: &RigidTransform) -> Result<f64> {
    consistency_loss_grad(points, flow, fitted).map(|(l, _)| l)
}

pub fn consistency_loss_grad(
    points: &[Vec3],
    flow: &[Vec3],
    fitted: &RigidTransform,
) -> Result<(f64, ConsistencyGrad)> {
    if points.is_empty() {
        return Err(Error::NoToolPoints);
    }
    if flow.len() != points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} flow vectors for {} tool points",
            flow.len(),
            points.len()
        )));
    }
    let inv_n = 1.0 / points.len() as f64;
    let r = fitted.rot.matrix();
    let mut total = 0.0;
    let mut fitted_grad = TransformGrad::zeros();
    let mut flow_grad = Vec::with_capacity(flow.len());
    for (p, f) in points.iter().zip(flow) {
        let e = r * p + fitted.trans - p - f;
        total += e.norm();
        let u = unit_or_zero(&e) * inv_n;
        fitted_grad.rot += u * p.transpose();
        fitted_grad.trans += u;
        flow_grad.push(-u);
    }
    Ok((
        total * inv_n,
        ConsistencyGrad {
            flow: flow_grad,
            fitted: fitted_grad,
        },
    ))
}

/// Per-term breakdown of the combined loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComboLoss {
    pub total: f64,
    pub point: f64,
    pub consistency: f64,
    /// `λ`, kept so the weighted term can be recovered.
    pub lambda: f64,
}

impl ComboLoss {
    pub fn weighted_consistency(&self) -> f64 {
        self.lambda * self.consistency
    }
}

/// `L_point + λ·L_consistency`.
pub fn combo_loss(
    points: &[Vec3],
    flow: &[Vec3],
    pred: &RigidTransform,
    target: &RigidTransform,
    cfg: &LossConfig,
) -> Result<ComboLoss> {
    let point = point_matching_loss(points, pred, target)?;
    let consistency = consistency_loss(points, flow, pred)?;
    Ok(ComboLoss {
        total: point + cfg.lambda * consistency,
        point,
        consistency,
        lambda: cfg.lambda,
    })
}
