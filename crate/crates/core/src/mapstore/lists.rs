//! Plain-text pose and camera lists.
//!
//! Poses: `image_id qw qx qy qz tx ty tz` (world-to-camera).
//! Cameras: `image_id PINHOLE w h fx fy cx cy [k1]`.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::MapError;
use crate::geometry::{Camera, Pose};

fn read_text(path: &Path) -> Result<String, MapError> {
    fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), MapError> {
    fs::write(path, text).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn parse_f64(path: &str, line: usize, s: &str) -> Result<f64, MapError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| MapError::Parse {
            path: path.into(),
            line,
            msg: format!("invalid number '{s}'"),
        })
}

/// Parses a pose list, preserving file order.
pub fn parse_poses(text: &str, path: &str) -> Result<Vec<(String, Pose)>, MapError> {
    let mut out = Vec::new();
    for (line, f) in records(text) {
        if f.len() != 8 {
            return Err(MapError::Parse {
                path: path.into(),
                line,
                msg: format!("expected 8 fields, got {}", f.len()),
            });
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| parse_f64(path, line, s))
            .collect::<Result<_, _>>()?;
        let qn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if qn < 1e-12 {
            return Err(MapError::Parse {
                path: path.into(),
                line,
                msg: "zero quaternion".into(),
            });
        }
        out.push((
            f[0].to_string(),
            Pose::from_wxyz([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]]),
        ));
    }
    Ok(out)
}

pub fn parse_cameras(text: &str, path: &str) -> Result<Vec<(String, Camera)>, MapError> {
    let mut out = Vec::new();
    for (line, f) in records(text) {
        let err = |msg: String| MapError::Parse {
            path: path.into(),
            line,
            msg,
        };
        if !(f.len() == 8 || f.len() == 9) {
            return Err(err(format!("expected 8 or 9 fields, got {}", f.len())));
        }
        if f[1] != "PINHOLE" {
            return Err(err(format!("unsupported camera model '{}'", f[1])));
        }
        let w: u32 = f[2].parse().map_err(|_| err(format!("invalid width '{}'", f[2])))?;
        let h: u32 = f[3].parse().map_err(|_| err(format!("invalid height '{}'", f[3])))?;
        let v: Vec<f64> = f[4..]
            .iter()
            .map(|s| parse_f64(path, line, s))
            .collect::<Result<_, _>>()?;
        let cam = Camera::new(w, h, v[0], v[1], v[2], v[3], v.get(4).copied()).map_err(|e| err(e.to_string()))?;
        out.push((f[0].to_string(), cam));
    }
    Ok(out)
}

pub fn format_pose(id: &str, pose: &Pose) -> String {
    let q = pose.wxyz();
    let t = pose.translation;
    format!(
        "{id} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
        q[0], q[1], q[2], q[3], t.x, t.y, t.z
    )
}

pub fn format_camera(id: &str, c: &Camera) -> String {
    let mut s = format!(
        "{id} PINHOLE {} {} {:?} {:?} {:?} {:?}",
        c.width, c.height, c.fx, c.fy, c.cx, c.cy
    );
    if let Some(k1) = c.k1 {
        let _ = write!(s, " {k1:?}");
    }
    s
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<(String, Pose)>, MapError> {
    let path = path.as_ref();
    parse_poses(&read_text(path)?, &path.display().to_string())
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<(String, Camera)>, MapError> {
    let path = path.as_ref();
    parse_cameras(&read_text(path)?, &path.display().to_string())
}

pub fn write_poses<'a>(
    path: impl AsRef<Path>,
    poses: impl IntoIterator<Item = (&'a str, &'a Pose)>,
) -> Result<(), MapError> {
    let mut s = String::from("# image_id qw qx qy qz tx ty tz (world-to-camera)\n");
    for (id, p) in poses {
        s.push_str(&format_pose(id, p));
        s.push('\n');
    }
    write_text(path.as_ref(), &s)
}

pub fn write_cameras<'a>(
    path: impl AsRef<Path>,
    cameras: impl IntoIterator<Item = (&'a str, &'a Camera)>,
) -> Result<(), MapError> {
    let mut s = String::from("# image_id PINHOLE w h fx fy cx cy [k1]\n");
    for (id, c) in cameras {
        s.push_str(&format_camera(id, c));
        s.push('\n');
    }
    write_text(path.as_ref(), &s)
}

/// Turns a list into a map, rejecting duplicate ids.
pub fn into_map<T>(items: Vec<(String, T)>, what: &str) -> Result<HashMap<String, T>, MapError> {
    let mut m = HashMap::with_capacity(items.len());
    for (id, v) in items {
        if m.insert(id.clone(), v).is_some() {
            return Err(MapError::Integrity(format!("duplicate {what} entry for '{id}'")));
        }
    }
    Ok(m)
}
