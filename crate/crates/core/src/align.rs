//! Tool flow and the SVD alignment layer.
//!
//! A [`ToolFlow`] assigns a 3D displacement to every tool point of a
//! [`SegPointCloud`]. [`kabsch_align`] turns a flow into the rigid transform
//! that best explains it in the (weighted) least-squares sense, and
//! [`Alignment::backward`] propagates gradients on that transform back onto
//! the flow vectors.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::geom::{svd3, Mat3, RigidTransform, Rotation3, Vec3};

/// Relative threshold on `s₂/s₁` below which the cross-covariance is treated
/// as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Smallest admissible denominator in the SVD differential.
pub const GAP_TOLERANCE: f64 = 1e-6;

/// A segmented point cloud: positions plus one class label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPointCloud {
    positions: Vec<Vec3>,
    classes: Vec<usize>,
    num_classes: usize,
    tool_class: usize,
}

impl SegPointCloud {
    pub fn new(
        positions: Vec<Vec3>,
        classes: Vec<usize>,
        num_classes: usize,
        tool_class: usize,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::ShapeMismatch("point cloud is empty".into()));
        }
        if positions.len() != classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} class labels",
                positions.len(),
                classes.len()
            )));
        }
        if num_classes == 0 || tool_class >= num_classes {
            return Err(Error::ShapeMismatch(format!(
                "tool class {tool_class} out of range for {num_classes} classes"
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "class label {c} out of range for {num_classes} classes"
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::Format("non-finite point position".into()));
        }
        Ok(SegPointCloud {
            positions,
            classes,
            num_classes,
            tool_class,
        })
    }

    /// Builds a cloud from one-hot rows. Each row must contain a single 1.
    pub fn from_one_hot(positions: Vec<Vec3>, one_hot: &[Vec<f64>], tool_class: usize) -> Result<Self> {
        let width = one_hot.first().map_or(0, Vec::len);
        let mut classes = Vec::with_capacity(one_hot.len());
        for row in one_hot {
            if row.len() != width {
                return Err(Error::ShapeMismatch("ragged one-hot rows".into()));
            }
            let ones: Vec<usize> = (0..width).filter(|&j| row[j] == 1.0).collect();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones.len() != 1 || zeros != width - 1 {
                return Err(Error::Format(format!("class row {row:?} is not one-hot")));
            }
            classes.push(ones[0]);
        }
        Self::new(positions, classes, width, tool_class)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Vec3] {
        &mut self.positions
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tool_class(&self) -> usize {
        self.tool_class
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        row[self.classes[i]] = 1.0;
        row
    }

    /// Width of a per-point feature row: position plus one-hot class.
    pub fn feature_width(&self) -> usize {
        3 + self.num_classes
    }

    /// Row-major `N × (3 + k)` feature matrix.
    pub fn features(&self) -> Vec<f64> {
        let w = self.feature_width();
        let mut out = vec![0.0; self.len() * w];
        for (i, (p, &c)) in self.positions.iter().zip(&self.classes).enumerate() {
            let row = &mut out[i * w..(i + 1) * w];
            row[..3].copy_from_slice(p.as_slice());
            row[3 + c] = 1.0;
        }
        out
    }

    /// Indices of the tool points, increasing.
    pub fn tool_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.classes[i] == self.tool_class)
            .collect()
    }

    pub fn num_tool(&self) -> usize {
        self.classes.iter().filter(|&&c| c == self.tool_class).count()
    }

    pub fn tool_positions(&self) -> Vec<Vec3> {
        self.positions
            .iter()
            .zip(&self.classes)
            .filter(|(_, &c)| c == self.tool_class)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Keeps only the listed points, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.positions[i]).collect(),
            indices.iter().map(|&i| self.classes[i]).collect(),
            self.num_classes,
            self.tool_class,
        )
    }
}

/// Per-tool-point displacement vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToolFlow {
    pub vectors: Vec<Vec3>,
    /// Index of each flow vector's point in the parent cloud, increasing.
    pub point_index_map: Vec<usize>,
}

impl ToolFlow {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Pulls the tool rows out of a dense `N`-point output.
    pub fn from_dense(cloud: &SegPointCloud, dense: &[Vec3]) -> Result<Self> {
        if dense.len() != cloud.len() {
            return Err(Error::ShapeMismatch(format!(
                "dense output has {} rows for a {}-point cloud",
                dense.len(),
                cloud.len()
            )));
        }
        let idx = cloud.tool_indices();
        Ok(ToolFlow {
            vectors: idx.iter().map(|&i| dense[i]).collect(),
            point_index_map: idx,
        })
    }
}

/// Non-negative per-point weights for the alignment layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdWeights(Vec<f64>);

impl SvdWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::BadConfig("SVD weights must be finite and non-negative".into()));
        }
        if !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::BadConfig("SVD weights must not all be zero".into()));
        }
        Ok(SvdWeights(w))
    }

    pub fn uniform(n: usize) -> Self {
        SvdWeights(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.0.iter().sum();
        self.0.iter().map(|w| w / total).collect()
    }
}

/// Upstream gradient on a transform: `∂L/∂R` (as an unconstrained 3×3
/// matrix) and `∂L/∂t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformGrad {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl TransformGrad {
    pub fn zeros() -> Self {
        TransformGrad {
            rot: Mat3::zeros(),
            trans: Vec3::zeros(),
        }
    }
}

impl std::ops::Add for TransformGrad {
    type Output = TransformGrad;
    fn add(self, rhs: TransformGrad) -> TransformGrad {
        TransformGrad {
            rot: self.rot + rhs.rot,
            trans: self.trans + rhs.trans,
        }
    }
}

impl std::ops::Mul<f64> for TransformGrad {
    type Output = TransformGrad;
    fn mul(self, k: f64) -> TransformGrad {
        TransformGrad {
            rot: self.rot * k,
            trans: self.trans * k,
        }
    }
}

/// What to do when a denominator of the SVD differential vanishes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GapPolicy {
    #[default]
    Error,
    /// Replace the denominator by ±[`GAP_TOLERANCE`].
    Clamp,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum AlignCache {
    /// Rotation fixed to identity, translation is the weighted mean flow.
    MeanFlow,
    Svd {
        u: Mat3,
        s: [f64; 3],
        v: Mat3,
        d: [f64; 3],
        source_centroid: Vec3,
        centered: Vec<Vec3>,
    },
}

/// Result of the alignment layer, keeping what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub transform: RigidTransform,
    /// Set when fewer than three points carry weight and only the mean flow
    /// could be used.
    pub translation_only: bool,
    weights: Vec<f64>,
    cache: AlignCache,
}

/// `F_gt = T·P_tool − P_tool` over the tool points of `cloud`.
pub fn ground_truth_flow(cloud: &SegPointCloud, action: &RigidTransform) -> Result<ToolFlow> {
    let idx = cloud.tool_indices();
    if idx.is_empty() {
        return Err(Error::NoToolPoints);
    }
    let pos = cloud.positions();
    Ok(ToolFlow {
        vectors: idx.iter().map(|&i| action.apply_point(&pos[i]) - pos[i]).collect(),
        point_index_map: idx,
    })
}

/// Flow induced on the tool points by a transform, `R·p + t − p`.
pub fn induced_flow(cloud: &SegPointCloud, t: &RigidTransform) -> Result<ToolFlow> {
    ground_truth_flow(cloud, t)
}

/// [`induced_flow`] on a bare list of tool points.
pub fn induced_vectors(points: &[Vec3], t: &RigidTransform) -> Result<Vec<Vec3>> {
    if points.is_empty() {
        return Err(Error::NoToolPoints);
    }
    Ok(points.iter().map(|p| t.apply_point(p) - p).collect())
}

fn check_lengths(points: &[Vec3], flow: &[Vec3], weights: Option<&SvdWeights>) -> Result<Vec<f64>> {
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
    match weights {
        Some(w) if w.as_slice().len() != points.len() => Err(Error::ShapeMismatch(format!(
            "{} weights for {} tool points",
            w.as_slice().len(),
            points.len()
        ))),
        Some(w) => Ok(w.normalized()),
        None => Ok(vec![1.0 / points.len() as f64; points.len()]),
    }
}

/// Best rigid transform taking `points` onto `points + flow`.
///
/// Minimises `Σ wᵢ‖T·pᵢ − (pᵢ + fᵢ)‖²`. The rotation comes from the SVD of
/// the weighted cross-covariance of the centred clouds with the reflection
/// folded into the smallest singular direction, and `t = C(P') − R·C(P)`.
/// With fewer than three weighted points only the mean flow is returned and
/// [`Alignment::translation_only`] is set.
pub fn kabsch_align(points: &[Vec3], flow: &[Vec3], weights: Option<&SvdWeights>) -> Result<Alignment> {
    let w = check_lengths(points, flow, weights)?;
    if w.iter().filter(|&&x| x > 0.0).count() < 3 {
        let mut a = mean_flow_align(points, flow, weights)?;
        a.translation_only = true;
        return Ok(a);
    }

    let mut cp = Vec3::zeros();
    let mut cq = Vec3::zeros();
    for ((p, f), wi) in points.iter().zip(flow).zip(&w) {
        cp += *wi * p;
        cq += *wi * (p + f);
    }
    let centered: Vec<Vec3> = points.iter().map(|p| p - cp).collect();
    // Σ wᵢ (qᵢ − c_q) aᵢᵀ; the c_q term vanishes because Σ wᵢ aᵢ = 0.
    let mut m = Mat3::zeros();
    for (((p, f), a), wi) in points.iter().zip(flow).zip(&centered).zip(&w) {
        m += *wi * (p + f - cq) * a.transpose();
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Format("non-finite flow".into()));
    }

    let (u, s, v) = svd3(&m);
    if !(s[1] > RANK_TOLERANCE * s[0]) {
        return Err(Error::RankDeficient { singular_values: s });
    }
    let det = (u * v.transpose()).determinant();
    let d = [1.0, 1.0, if det < 0.0 { -1.0 } else { 1.0 }];
    let r = u * Mat3::from_diagonal(&Vec3::from(d)) * v.transpose();
    let rot = Rotation3::from_matrix_unchecked(r);
    let transform = RigidTransform::new(rot, cq - r * cp);

    Ok(Alignment {
        transform,
        translation_only: false,
        weights: w,
        cache: AlignCache::Svd {
            u,
            s,
            v,
            d,
            source_centroid: cp,
            centered,
        },
    })
}

/// The averaging layer: identity rotation and the weighted mean flow as
/// translation.
pub fn mean_flow_align(points: &[Vec3], flow: &[Vec3], weights: Option<&SvdWeights>) -> Result<Alignment> {
    let w = check_lengths(points, flow, weights)?;
    let mean = flow.iter().zip(&w).fold(Vec3::zeros(), |acc, (f, wi)| acc + *wi * f);
    Ok(Alignment {
        transform: RigidTransform::from_translation(mean),
        translation_only: false,
        weights: w,
        cache: AlignCache::MeanFlow,
    })
}

impl Alignment {
    /// Singular values of the cross-covariance, largest first.
    pub fn singular_values(&self) -> Option<[f64; 3]> {
        match &self.cache {
            AlignCache::Svd { s, .. } => Some(*s),
            AlignCache::MeanFlow => None,
        }
    }

    /// Gradient of the loss with respect to each flow vector.
    ///
    /// Uses the SVD differential: with `P = Uᵀ dM V`, the skew parts of
    /// `Uᵀ dU` and `Vᵀ dV` are `K ∘ (P S + S Pᵀ)` and `K ∘ (S P + Pᵀ S)`
    /// with `Kᵢⱼ = 1/(sⱼ² − sᵢ²)`. Each pair `(i, j)` is evaluated in the
    /// closed form that cancels the common factor, which leaves the
    /// denominator `sᵢ + sⱼ` when the reflection signs agree and `sᵢ − sⱼ`
    /// when they differ; only those denominators are checked against the
    /// gap tolerance.
    pub fn backward(&self, upstream: &TransformGrad, policy: GapPolicy) -> Result<Vec<Vec3>> {
        let (u, s, v, d, cp, centered) = match &self.cache {
            AlignCache::MeanFlow => {
                return Ok(self.weights.iter().map(|wi| *wi * upstream.trans).collect());
            }
            AlignCache::Svd {
                u,
                s,
                v,
                d,
                source_centroid,
                centered,
            } => (u, s, v, d, source_centroid, centered),
        };

        // t = c_q − R·c_p, so R also receives −∂L/∂t · c_pᵀ.
        let g = upstream.rot - upstream.trans * cp.transpose();
        let gh = u.transpose() * g * v;

        let mut q = Mat3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let (denom, c1_sign, c2_sign) = if d[a] == d[b] {
                    (s[a] + s[b], d[a], -d[a])
                } else {
                    (s[a] - s[b], d[a], d[a])
                };
                let denom = if denom.abs() < GAP_TOLERANCE {
                    match policy {
                        GapPolicy::Error => {
                            return Err(Error::NearDegenerateSvd {
                                gap: denom.abs(),
                                tolerance: GAP_TOLERANCE,
                            })
                        }
                        GapPolicy::Clamp => GAP_TOLERANCE.copysign(denom),
                    }
                } else {
                    denom
                };
                q[(a, b)] = (c1_sign * gh[(a, b)] + c2_sign * gh[(b, a)]) / denom;
            }
        }
        let gm = u * q * v.transpose();

        Ok(centered
            .iter()
            .zip(&self.weights)
            .map(|(a, wi)| *wi * (gm * a + upstream.trans))
            .collect())
    }
}

/// Recomputes the alignment and runs its backward pass.
pub fn kabsch_backward(
    points: &[Vec3],
    flow: &[Vec3],
    weights: Option<&SvdWeights>,
    upstream: &TransformGrad,
    policy: GapPolicy,
) -> Result<Vec<Vec3>> {
    kabsch_align(points, flow, weights)?.backward(upstream, policy)
}

/// Greedily composes consecutive actions until each composite translates by
/// at least `min_trans`. The final group may fall short.
///
/// Returns each composite with the range of input indices it covers.
pub fn compose_until_magnitude(
    actions: &[RigidTransform],
    min_trans: f64,
) -> Result<Vec<(RigidTransform, Range<usize>)>> {
    if !(min_trans > 0.0) {
        return Err(Error::BadConfig(format!("min_trans must be positive, got {min_trans}")));
    }
    let mut out = Vec::new();
    let mut acc = RigidTransform::identity();
    let mut start = 0;
    for (i, a) in actions.iter().enumerate() {
        acc = a.compose(&acc);
        if acc.trans.norm() >= min_trans {
            out.push((acc, start..i + 1));
            acc = RigidTransform::identity();
            start = i + 1;
        }
    }
    if start < actions.len() {
        out.push((acc, start..actions.len()));
    }
    Ok(out)
}

/// Multiplies translational quantities by a constant so training targets sit
/// near unit magnitude. Rotations are left alone.
pub trait TargetScaling: Sized {
    fn scaled(&self, s: f64) -> Self;

    fn unscaled(&self, s: f64) -> Self {
        self.scaled(1.0 / s)
    }
}

impl TargetScaling for RigidTransform {
    fn scaled(&self, s: f64) -> Self {
        RigidTransform::new(self.rot, self.trans * s)
    }

    fn unscaled(&self, s: f64) -> Self {
        RigidTransform::new(self.rot, self.trans / s)
    }
}

impl TargetScaling for ToolFlow {
    fn scaled(&self, s: f64) -> Self {
        ToolFlow {
            vectors: self.vectors.iter().map(|f| f * s).collect(),
            point_index_map: self.point_index_map.clone(),
        }
    }

    fn unscaled(&self, s: f64) -> Self {
        ToolFlow {
            vectors: self.vectors.iter().map(|f| f / s).collect(),
            point_index_map: self.point_index_map.clone(),
        }
    }
}
