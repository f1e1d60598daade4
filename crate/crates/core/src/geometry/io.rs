//! Poses, points, and PLY text formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{CameraPose, Point3};
use crate::error::{Result, SfmError};
use crate::trackstore::io::fmt_f64;

/// Write poses, one camera per line: `cam_id qw qx qy qz tx ty tz`.
pub fn write_poses(path: &Path, poses: &[(usize, CameraPose)]) -> Result<()> {
    let mut out = String::new();
    for (cam, pose) in poses {
        let q = pose.quaternion();
        let t = pose.translation();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            cam,
            fmt_f64(q[0]),
            fmt_f64(q[1]),
            fmt_f64(q[2]),
            fmt_f64(q[3]),
            fmt_f64(t.x),
            fmt_f64(t.y),
            fmt_f64(t.z),
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a poses file written by [`write_poses`].
pub fn read_poses(path: &Path) -> Result<Vec<(usize, CameraPose)>> {
    let text = fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(SfmError::Parse { line, msg: format!("expected 8 fields, got {}", toks.len()) });
        }
        let cam: usize = toks[0]
            .parse()
            .map_err(|_| SfmError::Parse { line, msg: "invalid camera id".into() })?;
        let mut vals = [0.0f64; 7];
        for (k, tok) in toks[1..].iter().enumerate() {
            vals[k] = tok
                .parse()
                .map_err(|_| SfmError::Parse { line, msg: format!("invalid float `{tok}`") })?;
        }
        let pose = CameraPose::new(
            [vals[0], vals[1], vals[2], vals[3]],
            Vector3::new(vals[4], vals[5], vals[6]),
        )?;
        poses.push((cam, pose));
    }
    Ok(poses)
}

/// Write 3D points, one per line: `x y z`.
pub fn write_points(path: &Path, points: &[Point3]) -> Result<()> {
    let mut out = String::new();
    for p in points {
        writeln!(out, "{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z)).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<Point3>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(SfmError::Parse { line, msg: format!("expected 3 fields, got {}", toks.len()) });
        }
        let mut v = [0.0f64; 3];
        for (k, tok) in toks.iter().enumerate() {
            v[k] = tok
                .parse()
                .map_err(|_| SfmError::Parse { line, msg: format!("invalid float `{tok}`") })?;
        }
        points.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(points)
}

/// Export an ASCII PLY 1.0 point cloud: scene points in white, camera
/// centers in red.
pub fn write_ply(path: &Path, points: &[Point3], camera_centers: &[Point3]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "ply").unwrap();
    writeln!(out, "format ascii 1.0").unwrap();
    writeln!(out, "element vertex {}", points.len() + camera_centers.len()).unwrap();
    writeln!(out, "property float x").unwrap();
    writeln!(out, "property float y").unwrap();
    writeln!(out, "property float z").unwrap();
    writeln!(out, "property uchar red").unwrap();
    writeln!(out, "property uchar green").unwrap();
    writeln!(out, "property uchar blue").unwrap();
    writeln!(out, "end_header").unwrap();
    for p in points {
        writeln!(out, "{} {} {} 255 255 255", p.x, p.y, p.z).unwrap();
    }
    for c in camera_centers {
        writeln!(out, "{} {} {} 255 0 0", c.x, c.y, c.z).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poses_roundtrip_byte_identical() {
        let poses: Vec<(usize, CameraPose)> = (0..4)
            .map(|i| {
                let angle = 0.3 * i as f64 + 0.1;
                (
                    i * 2,
                    CameraPose::new(
                        [angle.cos(), 0.2, angle.sin(), -0.1],
                        Vector3::new(0.25 * i as f64, -1.5, 2.0 + i as f64),
                    )
                    .unwrap(),
                )
            })
            .collect();
        let dir = std::env::temp_dir().join("sfm_core_poses_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.poses");
        let p2 = dir.join("b.poses");
        write_poses(&p1, &poses).unwrap();
        let read = read_poses(&p1).unwrap();
        assert_eq!(read, poses);
        write_poses(&p2, &read).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn points_roundtrip() {
        let points = vec![Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, -3.5)];
        let dir = std::env::temp_dir().join("sfm_core_points_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.points");
        write_points(&p, &points).unwrap();
        assert_eq!(read_points(&p).unwrap(), points);
    }

    #[test]
    fn ply_header_conforms() {
        let dir = std::env::temp_dir().join("sfm_core_ply_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("cloud.ply");
        write_ply(&p, &[Vector3::new(0.0, 0.0, 1.0)], &[Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains("element vertex 2"));
        assert!(text.contains("end_header"));
        assert!(text.trim_end().ends_with("1 0 0 255 0 0"));
    }
}
