//! Binary feature file (`.hfnf`).
//!
//! Little-endian layout:
//!
//! ```text
//! magic "HFNF" | version u32 | id_len u32 | id bytes (UTF-8)
//! N u32 | N x (x f32, y f32, score f32)
//! D u32 | N*D f32 descriptors, row-major
//! G u32 | G f32 global descriptor
//! [dense flag u8 | stride u32 | Hc u32 | Wc u32 | Hc*Wc*D f32]
//! ```
//!
//! The dense section is optional; a missing flag byte reads as "absent".

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use super::{DenseDescriptorMap, Keypoint, LocalFeatureSet};
use crate::wire::{Reader, Truncated, Writer};

pub const FEATURE_MAGIC: &[u8; 4] = b"HFNF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_EXTENSION: &str = "hfnf";

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated feature file: {0}")]
    Truncated(#[from] Truncated),
    #[error("invalid feature file: {0}")]
    Invalid(String),
}

pub fn encode(set: &LocalFeatureSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.str(&set.image_id);
    w.u32(set.keypoints.len() as u32);
    for kp in &set.keypoints {
        w.f32(kp.x as f32);
        w.f32(kp.y as f32);
        w.f32(kp.score as f32);
    }
    let d = set.descriptor_dim();
    w.u32(d as u32);
    for row in set.descriptors.row_iter() {
        w.f32s(row.iter().copied());
    }
    w.u32(set.global.len() as u32);
    w.f32s(set.global.iter().copied());
    match &set.dense {
        Some(map) => {
            w.u8(1);
            w.u32(map.stride);
            w.u32(map.rows as u32);
            w.u32(map.cols as u32);
            w.f32s(map.data.iter().copied());
        }
        None => w.u8(0),
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<LocalFeatureSet, FeatureIoError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(FeatureIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(FeatureIoError::UnsupportedVersion(version));
    }
    let image_id = r
        .string()?
        .map_err(|_| FeatureIoError::Invalid("image id is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let raw = r.f32s(
        n.checked_mul(3)
            .ok_or(FeatureIoError::Invalid("keypoint count overflow".into()))?,
    )?;
    let keypoints: Vec<Keypoint> = raw
        .chunks_exact(3)
        .map(|c| Keypoint::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    let d = r.u32()? as usize;
    let desc = r.f32s(
        n.checked_mul(d)
            .ok_or(FeatureIoError::Invalid("descriptor size overflow".into()))?,
    )?;
    let descriptors = DMatrix::from_row_slice(n, d, &desc);
    let g = r.u32()? as usize;
    let global = r.f32s(g)?;

    let mut set = LocalFeatureSet::new(image_id, keypoints, descriptors, global)
        .map_err(|e| FeatureIoError::Invalid(e.to_string()))?;
    if !r.is_empty() && r.u8()? == 1 {
        let stride = r.u32()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(d))
            .ok_or(FeatureIoError::Invalid("dense map size overflow".into()))?;
        let data = r.f32s(len)?;
        set.dense = Some(
            DenseDescriptorMap::new(stride, rows, cols, d, data).map_err(|e| FeatureIoError::Invalid(e.to_string()))?,
        );
    }
    if !r.is_empty() {
        return Err(FeatureIoError::Invalid(format!("{} trailing bytes", r.remaining())));
    }
    Ok(set)
}

pub fn write(path: impl AsRef<Path>, set: &LocalFeatureSet) -> Result<(), FeatureIoError> {
    let path = path.as_ref();
    fs::write(path, encode(set)).map_err(|source| FeatureIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<LocalFeatureSet, FeatureIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// `<dir>/<image_id>.hfnf`
pub fn path_for(dir: impl AsRef<Path>, image_id: &str) -> std::path::PathBuf {
    dir.as_ref().join(format!("{image_id}.{FEATURE_EXTENSION}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> LocalFeatureSet {
        let kps = vec![Keypoint::new(1.5, 2.25, 0.5), Keypoint::new(100.0, 7.0, 1.0)];
        let desc = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.8]);
        LocalFeatureSet::new("db/img_001", kps, desc, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&fixture());
        assert_eq!(&bytes[0..4], b"HFNF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        assert_eq!(&bytes[12..22], b"db/img_001");
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[26..30].try_into().unwrap()), 1.5);
        // 4 + 4 + 4 + 10 + 4 + 2*12 + 4 + 6*4 + 4 + 2*4 + 1
        assert_eq!(bytes.len(), 91);
    }

    #[test]
    fn dense_section_and_missing_flag() {
        let mut set = fixture();
        set.dense = Some(DenseDescriptorMap::new(8, 1, 2, 3, vec![0.5; 6]).unwrap());
        assert_eq!(decode(&encode(&set)).unwrap(), set);

        let mut bytes = encode(&fixture());
        bytes.pop();
        assert_eq!(decode(&bytes).unwrap(), fixture());
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = encode(&fixture());
        assert!(matches!(decode(&bytes[..30]), Err(FeatureIoError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FeatureIoError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(FeatureIoError::UnsupportedVersion(9))));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode(&bad), Err(FeatureIoError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn round_trip(
            n in 0usize..20, d in 0usize..8, g in 0usize..6,
            seed in any::<u32>(), id in "[a-z0-9_/]{0,12}",
        ) {
            let f = |i: usize| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32;
            let kps = (0..n).map(|i| Keypoint::new((f(i) * 100.0) as f64, f(i + 1) as f64, f(i + 2) as f64)).collect();
            let desc = DMatrix::from_fn(n, d, |r, c| f(r * 31 + c));
            let set = LocalFeatureSet::new(id, kps, desc, (0..g).map(f).collect()).unwrap();
            prop_assert_eq!(decode(&encode(&set)).unwrap(), set);
        }
    }
}
