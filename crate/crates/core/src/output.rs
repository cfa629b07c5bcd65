//! Result sinks: newline-delimited JSON cluster records and per-scan ASCII
//! PLY clouds. Latency CSV lives on [`crate::pipeline::LatencyReport`].

use std::collections::HashMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::cluster::{Aabb, InitialCluster};
use crate::geometry::GroundLabel;
use crate::pipeline::ScanResult;

/// One emitted cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub scan_id: u32,
    pub cluster_id: u32,
    pub point_count: usize,
    pub centroid: [f64; 3],
    pub bbox: Aabb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 3]>>,
}

impl ClusterRecord {
    pub fn new(scan_id: u32, cluster: &InitialCluster, with_points: bool) -> Self {
        Self {
            scan_id,
            cluster_id: cluster.id,
            point_count: cluster.len(),
            centroid: cluster.centroid(),
            bbox: cluster.bbox,
            points: with_points.then(|| cluster.points.iter().map(|p| p.position()).collect()),
        }
    }
}

/// Records of a scan's clusters (noise excluded), by cluster id.
pub fn cluster_records(result: &ScanResult, with_points: bool) -> Vec<ClusterRecord> {
    let mut records: Vec<ClusterRecord> =
        result.clusters.iter().map(|c| ClusterRecord::new(result.scan_id, c, with_points)).collect();
    records.sort_by_key(|r| r.cluster_id);
    records
}

pub fn write_ndjson<'a>(mut out: impl Write, records: impl IntoIterator<Item = &'a ClusterRecord>) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub const GROUND_COLOR: [u8; 3] = [40, 160, 60];
pub const NOISE_COLOR: [u8; 3] = [128, 128, 128];
/// Cluster colors, chosen by id. None of them is the ground color.
pub const CLUSTER_PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [255, 225, 25],
    [128, 0, 0],
    [0, 0, 128],
    [170, 110, 40],
    [250, 190, 212],
    [255, 255, 255],
];

pub fn cluster_color(id: u32) -> [u8; 3] {
    CLUSTER_PALETTE[id as usize % CLUSTER_PALETTE.len()]
}

/// Value of the `cluster` vertex property for ground points.
pub const PLY_GROUND: i64 = -1;
/// Value of the `cluster` vertex property for obstacle points outside any
/// emitted cluster.
pub const PLY_NOISE: i64 = -2;

/// Writes the valid points of a scan as an ASCII PLY with per-vertex color
/// and cluster id. Needs a result produced with kept points.
pub fn write_ply(mut out: impl Write, result: &ScanResult) -> io::Result<()> {
    let points = result
        .points
        .as_ref()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "scan result was produced without points"))?;
    let owner: HashMap<(u32, u16), u32> =
        result.clusters.iter().flat_map(|c| c.points.iter().map(move |p| ((p.col, p.row), c.id))).collect();
    let valid: Vec<_> = points.iter().filter(|p| p.is_valid()).collect();
    write!(
        out,
        "ply\nformat ascii 1.0\ncomment scan {}\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property int cluster\nend_header\n",
        result.scan_id,
        valid.len()
    )?;
    for p in valid {
        let (color, cluster) = match (p.label, owner.get(&(p.col, p.row))) {
            (GroundLabel::Ground, _) => (GROUND_COLOR, PLY_GROUND),
            (_, Some(&id)) => (cluster_color(id), i64::from(id)),
            _ => (NOISE_COLOR, PLY_NOISE),
        };
        writeln!(
            out,
            "{:.4} {:.4} {:.4} {} {} {} {}",
            p.x, p.y, p.z, color[0], color[1], color[2], cluster
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterPoint;
    use crate::geometry::SphericalPoint;

    fn cluster(id: u32, pts: &[(f64, f64, f64, u32)]) -> InitialCluster {
        let points: Vec<ClusterPoint> =
            pts.iter().map(|&(x, y, z, col)| ClusterPoint { x, y, z, row: 0, col }).collect();
        InitialCluster::from_points(id, &points)
    }

    fn result() -> ScanResult {
        let mut points = Vec::new();
        for col in 0..6u32 {
            let mut p = SphericalPoint::new(5.0, -5.0, col as f64 * 0.2, 0, col);
            p.label = if col < 2 { GroundLabel::Ground } else { GroundLabel::Obstacle };
            points.push(p);
        }
        points.push(SphericalPoint::no_return(-5.0, 1.4, 0, 7));
        let xyz = |col: u32| {
            let p = &points[col as usize];
            (p.x, p.y, p.z, col)
        };
        let clusters = vec![cluster(9, &[xyz(3), xyz(4), xyz(5)])];
        let noise = vec![cluster(4, &[xyz(2)])];
        ScanResult {
            scan_id: 3,
            clusters,
            noise,
            ground_points: 2,
            obstacle_points: 3,
            noise_points: 1,
            invalid_points: 1,
            points: Some(points),
        }
    }

    #[test]
    fn ndjson_records_round_trip() {
        let r = result();
        let records = cluster_records(&r, true);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].point_count, 3);
        let mut bytes = Vec::new();
        write_ndjson(&mut bytes, &records).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: ClusterRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, records[0]);
        let bare = serde_json::to_string(&cluster_records(&r, false)[0]).unwrap();
        assert!(!bare.contains("points\""));
        assert!(bare.contains("\"scan_id\":3") && bare.contains("\"cluster_id\":9"));
    }

    #[test]
    fn ply_colors() {
        let mut bytes = Vec::new();
        write_ply(&mut bytes, &result()).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let (header, body) = text.split_once("end_header\n").unwrap();
        assert!(header.contains("element vertex 6"));
        let rows: Vec<Vec<&str>> = body.lines().map(|l| l.split(' ').collect()).collect();
        assert_eq!(rows.len(), 6);
        let cluster: Vec<&str> = rows.iter().map(|r| r[6]).collect();
        assert_eq!(cluster, ["-1", "-1", "-2", "9", "9", "9"]);
        let rgb = |r: &Vec<&str>| [r[3].parse::<u8>().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap()];
        assert_eq!(rgb(&rows[0]), GROUND_COLOR);
        assert_eq!(rgb(&rows[3]), cluster_color(9));
        assert!(CLUSTER_PALETTE.iter().all(|&c| c != GROUND_COLOR && c != NOISE_COLOR));
    }

    #[test]
    fn ply_needs_points() {
        let mut r = result();
        r.points = None;
        assert!(write_ply(Vec::new(), &r).is_err());
    }
}
