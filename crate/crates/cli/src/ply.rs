//! ASCII PLY export of a point cloud with flow segments.
//!
//! Vertices are the cloud points followed by one segment end per exported
//! flow vector; each edge joins a tool point to its end.

use std::fmt::Write as _;

use toolflow::align::SegPointCloud;
use toolflow::geom::Vec3;

/// Class value written for segment end vertices.
pub const SEGMENT_END: u8 = 255;

/// `flow[k]` belongs to the `k`-th tool point. Every `stride`-th tool point
/// gets a segment, starting with the first.
pub fn flow_ply(cloud: &SegPointCloud, flow: &[Vec3], stride: usize) -> String {
    assert!(stride >= 1, "stride must be positive");
    let tool = cloud.tool_indices();
    assert_eq!(tool.len(), flow.len(), "one flow vector per tool point");
    let kept: Vec<usize> = (0..tool.len()).step_by(stride).collect();
    let n = cloud.len();

    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\ncomment toolflow tool flow\n");
    writeln!(out, "element vertex {}", n + kept.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\nproperty uchar class\n");
    writeln!(out, "element edge {}", kept.len()).unwrap();
    out.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
    for (p, &c) in cloud.positions().iter().zip(cloud.classes()) {
        writeln!(out, "{:e} {:e} {:e} {}", p.x, p.y, p.z, c.min(254)).unwrap();
    }
    for &k in &kept {
        let end = cloud.positions()[tool[k]] + flow[k];
        writeln!(out, "{:e} {:e} {:e} {SEGMENT_END}", end.x, end.y, end.z).unwrap();
    }
    for (j, &k) in kept.iter().enumerate() {
        writeln!(out, "{} {}", tool[k], n + j).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n_tool: usize) -> SegPointCloud {
        let positions = (0..n_tool + 2).map(|i| Vec3::new(i as f64, 0.5, -1.0)).collect();
        let classes = (0..n_tool + 2).map(|i| usize::from(i >= n_tool)).collect();
        SegPointCloud::new(positions, classes, 2, 0).unwrap()
    }

    fn count(ply: &str, element: &str) -> usize {
        ply.lines()
            .find_map(|l| l.strip_prefix(&format!("element {element} ")))
            .unwrap()
            .parse()
            .unwrap()
    }

    #[test]
    fn segment_counts() {
        let c = cloud(25);
        let flow = vec![Vec3::new(0.1, 0.0, 0.0); 25];
        assert_eq!(count(&flow_ply(&c, &flow, 1), "edge"), 25);
        assert_eq!(count(&flow_ply(&c, &flow, 10), "edge"), 3);
        assert_eq!(count(&flow_ply(&c, &flow, 25), "edge"), 1);
        assert_eq!(count(&flow_ply(&c, &flow, 10), "vertex"), 27 + 3);
    }

    #[test]
    fn body_lines_match_header() {
        let c = cloud(4);
        let ply = flow_ply(&c, &[Vec3::zeros(); 4], 2);
        let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), count(&ply, "vertex") + count(&ply, "edge"));
        // Zero flow: each segment end coincides with its start.
        assert_eq!(body[6], "0e0 5e-1 -1e0 255");
        assert_eq!(body[0], "0e0 5e-1 -1e0 0");
        assert_eq!(body[8], "0 6");
        assert_eq!(body[9], "2 7");
    }
}
