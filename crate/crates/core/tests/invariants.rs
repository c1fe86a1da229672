use proptest::prelude::*;

use toolflow::align::{kabsch_align, SegPointCloud, SvdWeights};
use toolflow::geom::{axis_angle_to_rotation, RigidTransform, RotationKind, Vec3};
use toolflow::net::{Architecture, PointNetLite};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn motion() -> impl Strategy<Value = RigidTransform> {
    (vec3(2.0), vec3(0.3)).prop_map(|(w, t)| RigidTransform::new(axis_angle_to_rotation(&w), t))
}

/// Random non-degenerate cloud: a jittered tetrahedron plus extra points.
fn cloud() -> impl Strategy<Value = Vec<Vec3>> {
    (prop::collection::vec(vec3(0.01), 4), prop::collection::vec(vec3(0.2), 0..20)).prop_map(|(jitter, extra)| {
        let base = [
            Vec3::new(0.2, 0.0, 0.0),
            Vec3::new(0.0, 0.15, 0.0),
            Vec3::new(0.0, 0.0, 0.1),
            Vec3::new(-0.1, -0.1, -0.1),
        ];
        base.iter().zip(&jitter).map(|(b, j)| b + j).chain(extra).collect()
    })
}

fn net(head_direct: bool, seed: u64) -> PointNetLite {
    let base = Architecture {
        encoder: vec![8],
        global: 8,
        decoder: vec![8],
        input_scale: 10.0,
        ..Architecture::dense(5)
    };
    let arch = if head_direct {
        Architecture {
            head: toolflow::net::Head::Direct(RotationKind::Quat4),
            ..base
        }
    } else {
        base
    };
    let mut net = PointNetLite::new(arch, seed).unwrap();
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i * 7919 % 101) as f64 / 101.0 - 0.5);
    }
    net
}

fn segmented(points: &[Vec3]) -> SegPointCloud {
    let n = points.len();
    let classes = (0..n).map(|i| usize::from(i % 3 == 2)).collect();
    SegPointCloud::new(points.to_vec(), classes, 2, 0).unwrap()
}

proptest! {
    #[test]
    fn rigid_flow_is_recovered(points in cloud(), t in motion()) {
        let flow: Vec<Vec3> = points.iter().map(|p| t.apply_point(p) - p).collect();
        let fit = kabsch_align(&points, &flow, None).unwrap().transform;
        prop_assert!((fit.rot.matrix() - t.rot.matrix()).norm() < 1e-9);
        prop_assert!((fit.trans - t.trans).norm() < 1e-9);
    }

    #[test]
    fn alignment_is_frame_equivariant(points in cloud(), flow_noise in prop::collection::vec(vec3(0.01), 24), t in motion(), g in motion()) {
        // Moving the whole scene by g conjugates the fitted motion by g.
        let flow: Vec<Vec3> = points.iter().zip(&flow_noise).map(|(p, e)| t.apply_point(p) - p + e).collect();
        let fit = kabsch_align(&points, &flow, None).unwrap().transform;
        let moved: Vec<Vec3> = points.iter().map(|p| g.apply_point(p)).collect();
        let moved_flow: Vec<Vec3> = flow.iter().map(|f| g.rot.matrix() * f).collect();
        let fit2 = kabsch_align(&moved, &moved_flow, None).unwrap().transform;
        let expect = g.compose(&fit).compose(&g.inverse());
        prop_assert!((fit2.rot.matrix() - expect.rot.matrix()).norm() < 1e-8);
        prop_assert!((fit2.trans - expect.trans).norm() < 1e-8);
    }

    #[test]
    fn uniform_weights_match_unweighted(points in cloud(), t in motion(), k in 0.1f64..10.0) {
        let flow: Vec<Vec3> = points.iter().map(|p| t.apply_point(p) - p + Vec3::new(0.0, 0.001, 0.0) * p.x).collect();
        let w = SvdWeights::new(vec![k; points.len()]).unwrap();
        let a = kabsch_align(&points, &flow, None).unwrap().transform;
        let b = kabsch_align(&points, &flow, Some(&w)).unwrap().transform;
        prop_assert!((a.rot.matrix() - b.rot.matrix()).norm() < 1e-12);
        prop_assert!((a.trans - b.trans).norm() < 1e-12);
    }

    #[test]
    fn dense_head_is_permutation_equivariant(points in cloud(), seed in 0u64..50, shift in 1usize..7) {
        let net = net(false, seed);
        let cloud = segmented(&points);
        let n = points.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted = SegPointCloud::new(
            perm.iter().map(|&i| points[i]).collect(),
            perm.iter().map(|&i| cloud.classes()[i]).collect(),
            2,
            0,
        )
        .unwrap();
        let (a, _) = net.forward_dense(&cloud).unwrap();
        let (b, _) = net.forward_dense(&permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((a[i] - b[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn direct_head_is_permutation_invariant(points in cloud(), seed in 0u64..50) {
        let net = net(true, seed);
        let cloud = segmented(&points);
        let rev: Vec<usize> = (0..points.len()).rev().collect();
        let reversed = SegPointCloud::new(
            rev.iter().map(|&i| points[i]).collect(),
            rev.iter().map(|&i| cloud.classes()[i]).collect(),
            2,
            0,
        )
        .unwrap();
        let (a, _) = net.forward_direct(&cloud).unwrap();
        let (b, _) = net.forward_direct(&reversed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
