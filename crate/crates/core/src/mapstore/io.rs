//! Binary map file (`.hfnm`).
//!
//! ```text
//! magic "HFNM" | version u32 | section count u32
//! section table: count x (tag [u8; 4], offset u64, length u64)
//! section payloads
//! CRC32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Sections: `META`, `IMGS`, `PNTS`, `COVI`, and `PCA ` when a retrieval
//! model is attached. All values little-endian; floats are stored with their
//! exact bit patterns.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector3};

use super::{DbImage, MapError, MapMeta, Observation, Point3D, SparseMap};
use crate::features::{Keypoint, LocalFeatureSet};
use crate::geometry::{Camera, Pose};
use crate::retrieval::PcaModel;
use crate::wire::{Reader, Truncated, Writer};

pub const MAP_MAGIC: &[u8; 4] = b"HFNM";
pub const MAP_VERSION: u32 = 1;

const NO_POINT: u32 = u32::MAX;

impl From<Truncated> for MapError {
    fn from(t: Truncated) -> Self {
        MapError::CorruptFile(t.to_string())
    }
}

fn corrupt(msg: impl Into<String>) -> MapError {
    MapError::CorruptFile(msg.into())
}

fn write_pose(w: &mut Writer, p: &Pose) {
    let q = p.rotation.quaternion();
    for v in [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z] {
        w.f64(v);
    }
}

fn read_pose(r: &mut Reader) -> Result<Pose, MapError> {
    let (qw, qx, qy, qz) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    Ok(Pose::new(
        UnitQuaternion::new_unchecked(Quaternion::new(qw, qx, qy, qz)),
        t,
    ))
}

fn write_camera(w: &mut Writer, c: &Camera) {
    w.u32(c.width);
    w.u32(c.height);
    for v in [c.fx, c.fy, c.cx, c.cy] {
        w.f64(v);
    }
    match c.k1 {
        Some(k) => {
            w.u8(1);
            w.f64(k);
        }
        None => w.u8(0),
    }
}

fn read_camera(r: &mut Reader) -> Result<Camera, MapError> {
    let (width, height) = (r.u32()?, r.u32()?);
    let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let k1 = match r.u8()? {
        0 => None,
        1 => Some(r.f64()?),
        f => return Err(corrupt(format!("bad distortion flag {f}"))),
    };
    Ok(Camera {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
        k1,
    })
}

fn encode_images(map: &SparseMap) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(map.images.len() as u32);
    for img in &map.images {
        w.str(&img.image_id);
        write_camera(&mut w, &img.camera);
        write_pose(&mut w, &img.pose);
        let f = &img.features;
        w.u32(f.len() as u32);
        for kp in &f.keypoints {
            w.f64(kp.x);
            w.f64(kp.y);
            w.f64(kp.score);
        }
        w.u32(f.descriptor_dim() as u32);
        for row in f.descriptors.row_iter() {
            w.f32s(row.iter().copied());
        }
        w.u32(f.global.len() as u32);
        w.f32s(f.global.iter().copied());
        for o in &img.observations {
            w.u32(o.unwrap_or(NO_POINT));
        }
    }
    w.buf
}

fn decode_images(bytes: &[u8]) -> Result<Vec<DbImage>, MapError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let image_id = r.string()?.map_err(|_| corrupt("image id is not UTF-8"))?;
        let camera = read_camera(&mut r)?;
        let pose = read_pose(&mut r)?;
        let nk = r.u32()? as usize;
        if nk > r.remaining() / 24 {
            return Err(corrupt("keypoint count exceeds section"));
        }
        let mut keypoints = Vec::with_capacity(nk);
        for _ in 0..nk {
            keypoints.push(Keypoint::new(r.f64()?, r.f64()?, r.f64()?));
        }
        let d = r.u32()? as usize;
        let desc = r.f32s(nk.checked_mul(d).ok_or_else(|| corrupt("descriptor size overflow"))?)?;
        let g = r.u32()? as usize;
        let global = r.f32s(g)?;
        let mut observations = Vec::with_capacity(nk);
        for _ in 0..nk {
            let v = r.u32()?;
            observations.push((v != NO_POINT).then_some(v));
        }
        let features = LocalFeatureSet::new(
            image_id.clone(),
            keypoints,
            DMatrix::from_row_slice(nk, d, &desc),
            global,
        )
        .map_err(|e| corrupt(e.to_string()))?;
        out.push(DbImage {
            image_id,
            camera,
            pose,
            features,
            observations,
        });
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes in image section"));
    }
    Ok(out)
}

fn encode_points(map: &SparseMap) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(map.points.len() as u32);
    for p in &map.points {
        w.u32(p.id);
        for v in p.position.iter() {
            w.f64(*v);
        }
        w.u32(p.track.len() as u32);
        for o in &p.track {
            w.u32(o.image);
            w.u32(o.keypoint);
        }
        w.u32(p.descriptor.len() as u32);
        w.f32s(p.descriptor.iter().copied());
    }
    w.buf
}

fn decode_points(bytes: &[u8]) -> Result<Vec<Point3D>, MapError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let id = r.u32()?;
        let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let len = r.u32()? as usize;
        if len > r.remaining() / 8 {
            return Err(corrupt("track length exceeds section"));
        }
        let mut track = Vec::with_capacity(len);
        for _ in 0..len {
            track.push(Observation {
                image: r.u32()?,
                keypoint: r.u32()?,
            });
        }
        let d = r.u32()? as usize;
        let descriptor = r.f32s(d)?;
        out.push(Point3D {
            id,
            position,
            track,
            descriptor,
        });
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes in point section"));
    }
    Ok(out)
}

fn encode_covisibility(map: &SparseMap) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(map.covisibility.len() as u32);
    for c in &map.covisibility {
        w.u32(c.len() as u32);
        for p in c {
            w.u32(*p);
        }
    }
    w.buf
}

fn decode_covisibility(bytes: &[u8]) -> Result<Vec<Vec<u32>>, MapError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let len = r.u32()? as usize;
        if len > r.remaining() / 4 {
            return Err(corrupt("covisibility list exceeds section"));
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(r.u32()?);
        }
        out.push(v);
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes in covisibility section"));
    }
    Ok(out)
}

fn encode_pca(p: &PcaModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(p.output_dim() as u32);
    w.u32(p.input_dim() as u32);
    for v in p.mean.iter() {
        w.f64(*v);
    }
    for r in 0..p.basis.nrows() {
        for c in 0..p.basis.ncols() {
            w.f64(p.basis[(r, c)]);
        }
    }
    for v in &p.variances {
        w.f64(*v);
    }
    w.u32(p.truncated_from.map_or(0, |k| k as u32));
    w.buf
}

fn decode_pca(bytes: &[u8]) -> Result<PcaModel, MapError> {
    let mut r = Reader::new(bytes);
    let k = r.u32()? as usize;
    let g = r.u32()? as usize;
    let needed = k
        .checked_mul(g)
        .and_then(|kg| kg.checked_add(g + k))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| corrupt("pca size overflow"))?;
    if needed > r.remaining() {
        return Err(corrupt("pca dimensions exceed section"));
    }
    let mean = DVector::from_fn(g, |_, _| r.f64().unwrap_or(f64::NAN));
    let mut basis = DMatrix::zeros(k, g);
    for row in 0..k {
        for col in 0..g {
            basis[(row, col)] = r.f64()?;
        }
    }
    let variances = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let t = r.u32()?;
    if !r.is_empty() {
        return Err(corrupt("trailing bytes in pca section"));
    }
    Ok(PcaModel {
        mean,
        basis,
        variances,
        truncated_from: (t != 0).then_some(t as usize),
    })
}

fn encode_meta(m: &MapMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&m.frame);
    w.f64(m.scale);
    w.buf
}

fn decode_meta(bytes: &[u8]) -> Result<MapMeta, MapError> {
    let mut r = Reader::new(bytes);
    let frame = r.string()?.map_err(|_| corrupt("frame name is not UTF-8"))?;
    let scale = r.f64()?;
    Ok(MapMeta { frame, scale })
}

pub fn encode(map: &SparseMap) -> Vec<u8> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (b"META", encode_meta(&map.meta)),
        (b"IMGS", encode_images(map)),
        (b"PNTS", encode_points(map)),
        (b"COVI", encode_covisibility(map)),
    ];
    if let Some(p) = &map.pca {
        sections.push((b"PCA ", encode_pca(p)));
    }
    let mut w = Writer::new();
    w.bytes(MAP_MAGIC);
    w.u32(MAP_VERSION);
    w.u32(sections.len() as u32);
    let mut offset = (12 + sections.len() * 20) as u64;
    for (tag, body) in &sections {
        w.bytes(*tag);
        w.u64(offset);
        w.u64(body.len() as u64);
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        w.bytes(body);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<SparseMap, MapError> {
    if bytes.len() < 16 {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MAP_VERSION {
        return Err(MapError::VersionMismatch {
            found: version,
            expected: MAP_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }

    let mut r = Reader::new(&body[8..]);
    let count = r.u32()? as usize;
    let mut meta = None;
    let mut images = None;
    let mut points = None;
    let mut covis = None;
    let mut pca = None;
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        let end = offset
            .checked_add(len)
            .ok_or_else(|| corrupt("section bounds overflow"))?;
        if end > body.len() {
            return Err(corrupt(format!(
                "section {} out of bounds",
                String::from_utf8_lossy(&tag)
            )));
        }
        let data = &body[offset..end];
        match &tag {
            b"META" => meta = Some(decode_meta(data)?),
            b"IMGS" => images = Some(decode_images(data)?),
            b"PNTS" => points = Some(decode_points(data)?),
            b"COVI" => covis = Some(decode_covisibility(data)?),
            b"PCA " => pca = Some(decode_pca(data)?),
            _ => {}
        }
    }
    let images = images.ok_or_else(|| corrupt("missing image section"))?;
    let points = points.ok_or_else(|| corrupt("missing point section"))?;
    let covis = covis.ok_or_else(|| corrupt("missing covisibility section"))?;
    let map = SparseMap::new(images, points, pca, meta.unwrap_or_default()).map_err(|e| match e {
        MapError::Integrity(m) => corrupt(m),
        other => other,
    })?;
    if map.covisibility != covis {
        return Err(corrupt("covisibility section disagrees with tracks"));
    }
    Ok(map)
}

pub fn save(map: &SparseMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    let path = path.as_ref();
    fs::write(path, encode(map)).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<SparseMap, MapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
