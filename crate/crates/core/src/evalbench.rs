//! Metric suites: keypoint repeatability and localization error, descriptor
//! matching score and mAP, homography and relative-pose recall, and
//! localization recall with cumulative error curves.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Keypoint, LocalFeatureSet};
use crate::geometry::{rotation_angle_deg, Camera, Homography, Pose};
use crate::matching;
use crate::par;
use crate::pose::{pnp_ransac, Correspondence2d3d, RansacConfig};
use crate::wire::{Reader, Writer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no keypoint is visible in the other image")]
    NoVisibleKeypoints,
    #[error("no ground-truth pose for '{0}'")]
    MissingGroundTruth(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("depth map {path}: {msg}")]
    DepthMap { path: String, msg: String },
    #[error(transparent)]
    Matching(#[from] matching::MatchError),
}

/// Per-pixel z-depth in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

pub const DEPTH_MAGIC: &[u8; 4] = b"HFND";

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self, EvalError> {
        if data.len() != width as usize * height as usize {
            return Err(EvalError::InvalidGroundTruth(format!(
                "{width}x{height} depth map needs {} values, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Depth of the pixel containing `p`, or `None` outside the map or where invalid.
    pub fn at(&self, p: &Vector2<f64>) -> Option<f64> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (x, y) = (p.x.floor() as usize, p.y.floor() as usize);
        if x >= self.width as usize || y >= self.height as usize {
            return None;
        }
        let d = self.data[y * self.width as usize + x] as f64;
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DEPTH_MAGIC);
        w.u32(self.width);
        w.u32(self.height);
        w.f32s(self.data.iter().copied());
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|e| e.to_string())? != DEPTH_MAGIC {
            return Err("bad magic".into());
        }
        let w = r.u32().map_err(|e| e.to_string())?;
        let h = r.u32().map_err(|e| e.to_string())?;
        let n = (w as usize).checked_mul(h as usize).ok_or("size overflow")?;
        let data = r.f32s(n).map_err(|e| e.to_string())?;
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let err = |msg: String| EvalError::DepthMap {
            path: path.display().to_string(),
            msg,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        Self::decode(&bytes).map_err(err)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| EvalError::DepthMap {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Relative agreement required between a reprojected depth and the target depth map.
pub const DEPTH_CONSISTENCY: f64 = 0.05;

/// How keypoints of one image map into the other.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    /// Planar scene: `homography` maps image A pixels to image B pixels.
    Homography {
        homography: Homography,
        size_a: (u32, u32),
        size_b: (u32, u32),
    },
    /// Depth of A (and optionally B) plus the relative pose A to B.
    Depth {
        depth_a: DepthMap,
        depth_b: Option<DepthMap>,
        relative: Pose,
        camera_a: Camera,
        camera_b: Camera,
    },
}

fn inside(p: &Vector2<f64>, size: (u32, u32)) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < size.0 as f64 && p.y < size.1 as f64
}

impl GroundTruth {
    /// The same ground truth seen from image B.
    pub fn inverted(&self) -> Result<GroundTruth, EvalError> {
        Ok(match self {
            GroundTruth::Homography {
                homography,
                size_a,
                size_b,
            } => GroundTruth::Homography {
                homography: homography
                    .inverse()
                    .map_err(|e| EvalError::InvalidGroundTruth(e.to_string()))?,
                size_a: *size_b,
                size_b: *size_a,
            },
            GroundTruth::Depth {
                depth_a,
                depth_b,
                relative,
                camera_a,
                camera_b,
            } => GroundTruth::Depth {
                depth_a: depth_b.clone().ok_or_else(|| {
                    EvalError::InvalidGroundTruth("inverting depth ground truth needs both depth maps".into())
                })?,
                depth_b: Some(depth_a.clone()),
                relative: relative.inverse(),
                camera_a: *camera_b,
                camera_b: *camera_a,
            },
        })
    }

    /// Reprojects an A pixel into B; `None` when it is not visible there.
    pub fn warp(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        match self {
            GroundTruth::Homography { homography, size_b, .. } => {
                homography.apply(p).ok().filter(|q| inside(q, *size_b))
            }
            GroundTruth::Depth {
                depth_a,
                depth_b,
                relative,
                camera_a,
                camera_b,
            } => {
                let z = depth_a.at(p)?;
                let n = camera_a.pixel_to_normalized(p);
                let pb = relative.transform(&Vector3::new(n.x * z, n.y * z, z));
                if pb.z <= 1e-9 {
                    return None;
                }
                let q = camera_b.normalized_to_pixel(&Vector2::new(pb.x / pb.z, pb.y / pb.z));
                if !camera_b.contains(&q) {
                    return None;
                }
                if let Some(db) = depth_b {
                    let zb = db.at(&q)?;
                    if (pb.z - zb).abs() > DEPTH_CONSISTENCY * zb {
                        return None;
                    }
                }
                Some(q)
            }
        }
    }

    /// Warps from B to A.
    pub fn warp_back(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        match self {
            GroundTruth::Homography { homography, size_a, .. } => {
                homography.inverse().ok()?.apply(p).ok().filter(|q| inside(q, *size_a))
            }
            GroundTruth::Depth { .. } => self.inverted().ok()?.warp(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeypointMetrics {
    pub repeatability: f64,
    /// Mean localization error over correct keypoints; `None` when none is correct.
    pub mle: Option<f64>,
    pub visible: usize,
    pub correct: usize,
}

fn nearest_distance(p: &Vector2<f64>, kps: &[Keypoint]) -> Option<f64> {
    kps.iter().map(|k| (k.pt() - p).norm()).min_by(f64::total_cmp)
}

fn one_way_keypoints(
    src: &[Keypoint],
    dst: &[Keypoint],
    warp: impl Fn(&Vector2<f64>) -> Option<Vector2<f64>>,
    eps: f64,
) -> (usize, usize, f64) {
    let (mut visible, mut correct, mut err) = (0, 0, 0.0);
    for k in src {
        let Some(w) = warp(&k.pt()) else {
            continue;
        };
        visible += 1;
        if let Some(d) = nearest_distance(&w, dst) {
            if d <= eps {
                correct += 1;
                err += d;
            }
        }
    }
    (visible, correct, err)
}

/// Repeatability and mean localization error of two keypoint sets. Each
/// source keypoint is judged on its own, so several may share a target.
pub fn keypoint_metrics(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    gt: &GroundTruth,
    eps: f64,
) -> Result<KeypointMetrics, EvalError> {
    let (va, ca, ea) = one_way_keypoints(kps_a, kps_b, |p| gt.warp(p), eps);
    let (vb, cb, eb) = one_way_keypoints(kps_b, kps_a, |p| gt.warp_back(p), eps);
    if va + vb == 0 {
        return Err(EvalError::NoVisibleKeypoints);
    }
    let correct = ca + cb;
    Ok(KeypointMetrics {
        repeatability: correct as f64 / (va + vb) as f64,
        mle: (correct > 0).then(|| (ea + eb) / correct as f64),
        visible: va + vb,
        correct,
    })
}

/// Average precision with the all-points interpolated precision envelope.
/// `ranked` holds `(distance, correct)`; it is sorted by ascending distance.
pub fn average_precision(ranked: &mut [(f64, bool)]) -> f64 {
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = ranked.iter().filter(|r| r.1).count();
    if total == 0 {
        return 0.0;
    }
    let mut precision: Vec<f64> = Vec::with_capacity(ranked.len());
    let mut hits = 0;
    for (k, r) in ranked.iter().enumerate() {
        hits += r.1 as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    ranked
        .iter()
        .zip(&precision)
        .filter(|(r, _)| r.1)
        .map(|(_, p)| p)
        .sum::<f64>()
        / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescriptorMetrics {
    pub matching_score: f64,
    pub map: f64,
}

fn descriptor_distance(a: &LocalFeatureSet, i: usize, b: &LocalFeatureSet, j: usize) -> f64 {
    a.descriptors
        .row(i)
        .iter()
        .zip(b.descriptors.row(j).iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Nearest-neighbor matches from the visible keypoints of `src`:
/// `(distance, correct)` per match plus the visible count.
fn one_way_matches(
    src: &LocalFeatureSet,
    dst: &LocalFeatureSet,
    warp: impl Fn(&Vector2<f64>) -> Option<Vector2<f64>>,
    eps: f64,
) -> Result<(Vec<(f64, bool)>, usize), EvalError> {
    let visible: Vec<(usize, Vector2<f64>)> = src
        .keypoints
        .iter()
        .enumerate()
        .filter_map(|(i, k)| warp(&k.pt()).map(|w| (i, w)))
        .collect();
    if visible.is_empty() || dst.is_empty() {
        return Ok((Vec::new(), visible.len()));
    }
    let q = src.select(&visible.iter().map(|v| v.0).collect::<Vec<_>>());
    let nn = matching::nearest_two(&q.descriptors, &dst.descriptors)?;
    let mut out = Vec::with_capacity(visible.len());
    for (r, (i, w)) in visible.iter().enumerate() {
        if let Some(m) = &nn[r] {
            let correct = (dst.keypoints[m.nn1].pt() - w).norm() <= eps;
            out.push((descriptor_distance(src, *i, dst, m.nn1), correct));
        }
    }
    Ok((out, visible.len()))
}

/// Matching score and mAP of nearest-neighbor descriptor matches, averaged
/// over both matching directions.
pub fn descriptor_metrics(
    fa: &LocalFeatureSet,
    fb: &LocalFeatureSet,
    gt: &GroundTruth,
    eps: f64,
) -> Result<DescriptorMetrics, EvalError> {
    let (mut ab, va) = one_way_matches(fa, fb, |p| gt.warp(p), eps)?;
    let (mut ba, vb) = one_way_matches(fb, fa, |p| gt.warp_back(p), eps)?;
    let mut ms = Vec::new();
    let mut ap = Vec::new();
    for (m, v) in [(&mut ab, va), (&mut ba, vb)] {
        if v > 0 {
            ms.push(m.iter().filter(|x| x.1).count() as f64 / v as f64);
            ap.push(average_precision(m));
        }
    }
    if ms.is_empty() {
        return Err(EvalError::NoVisibleKeypoints);
    }
    Ok(DescriptorMetrics {
        matching_score: ms.iter().sum::<f64>() / ms.len() as f64,
        map: ap.iter().sum::<f64>() / ap.len() as f64,
    })
}

fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().sum::<Vector2<f64>>() / n;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 1e-12 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply3(m: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(v.x / v.z, v.y / v.z)
}

/// Normalized DLT homography mapping `src` onto `dst` (at least 4 pairs).
pub fn homography_dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Homography> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ta = normalizing_transform(src);
    let tb = normalizing_transform(dst);
    let mut ata = DMatrix::<f64>::zeros(9, 9);
    for (a, b) in src.iter().zip(dst) {
        let a = apply3(&ta, a);
        let b = apply3(&tb, b);
        let rows = [
            [-a.x, -a.y, -1.0, 0.0, 0.0, 0.0, b.x * a.x, b.x * a.y, b.x],
            [0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y],
        ];
        for r in rows {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let k = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(k);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let m = tb.try_inverse()? * hn * ta;
    Homography::new(m).ok()
}

fn transfer_error(h: &Homography, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    h.apply(a).map_or(f64::INFINITY, |p| (p - b).norm())
}

/// Seeded 4-point RANSAC around [`homography_dlt`], refit on the best inlier set.
pub fn homography_ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
    seed: u64,
    max_iters: usize,
) -> Option<Homography> {
    let n = matches.len();
    if n < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, usize)> = None;
    let mut bound = max_iters;
    let mut it = 0;
    while it < bound {
        it += 1;
        let s = rand::seq::index::sample(&mut rng, n, 4);
        let src: Vec<_> = s.iter().map(|i| matches[i].0).collect();
        let dst: Vec<_> = s.iter().map(|i| matches[i].1).collect();
        let Some(h) = homography_dlt(&src, &dst) else {
            continue;
        };
        let count = matches
            .iter()
            .filter(|(a, b)| transfer_error(&h, a, b) <= threshold)
            .count();
        if best.as_ref().is_none_or(|b| count > b.1) {
            let w = count as f64 / n as f64;
            bound = if w >= 1.0 {
                1
            } else {
                let p = w.powi(4);
                let m = ((1.0 - 0.999f64).ln() / (1.0 - p).ln()).ceil();
                if m.is_finite() {
                    (m as usize).clamp(1, max_iters)
                } else {
                    max_iters
                }
            };
            best = Some((h, count));
        }
    }
    let (h, _) = best?;
    let inl: Vec<_> = matches
        .iter()
        .filter(|(a, b)| transfer_error(&h, a, b) <= threshold)
        .collect();
    if inl.len() >= 4 {
        let src: Vec<_> = inl.iter().map(|m| m.0).collect();
        let dst: Vec<_> = inl.iter().map(|m| m.1).collect();
        if let Some(r) = homography_dlt(&src, &dst) {
            let cnt = matches
                .iter()
                .filter(|(a, b)| transfer_error(&r, a, b) <= threshold)
                .count();
            if cnt >= inl.len() {
                return Some(r);
            }
        }
    }
    Some(h)
}

/// Image corners used for the homography transfer error.
pub fn corners(size: (u32, u32)) -> [Vector2<f64>; 4] {
    let (w, h) = (size.0 as f64, size.1 as f64);
    [
        Vector2::new(0.0, 0.0),
        Vector2::new(w, 0.0),
        Vector2::new(0.0, h),
        Vector2::new(w, h),
    ]
}

/// Mean distance between the corners of A mapped by the two homographies.
pub fn corner_error(est: &Homography, gt: &Homography, size_a: (u32, u32)) -> f64 {
    corners(size_a)
        .iter()
        .map(|c| match (est.apply(c), gt.apply(c)) {
            (Ok(a), Ok(b)) => (a - b).norm(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyPair {
    pub matches: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub gt: Homography,
    pub size_a: (u32, u32),
}

pub const HOMOGRAPHY_INLIER_PX: f64 = 3.0;
const HOMOGRAPHY_MAX_ITERS: usize = 5000;

/// Whether the pair's estimated homography moves the image corners less
/// than `threshold` pixels away from the ground truth on average.
pub fn homography_pair_correct(pair: &HomographyPair, threshold: f64, seed: u64) -> bool {
    homography_ransac(&pair.matches, HOMOGRAPHY_INLIER_PX, seed, HOMOGRAPHY_MAX_ITERS)
        .is_some_and(|h| corner_error(&h, &pair.gt, pair.size_a) < threshold)
}

/// Fraction of pairs whose homography is correct. Pair `i` uses seed `seed + i`.
pub fn homography_recall(pairs: &[HomographyPair], threshold: f64, seed: u64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let ok = par::map(&idx, |&i| {
        homography_pair_correct(&pairs[i], threshold, seed.wrapping_add(i as u64))
    });
    ok.iter().filter(|b| **b).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelPosePair {
    /// Pixels in image B paired with points in the frame of camera A.
    pub correspondences: Vec<Correspondence2d3d>,
    pub camera_b: Camera,
    /// Ground-truth transform from camera A to camera B.
    pub gt: Pose,
}

/// Lifts matched A keypoints with A's depth into A's camera frame, pairing
/// them with the B pixels. Matches without valid depth are dropped.
pub fn lift_matches(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    depth_a: &DepthMap,
    camera_a: &Camera,
) -> Vec<Correspondence2d3d> {
    matches
        .iter()
        .filter_map(|(a, b)| {
            let z = depth_a.at(a)?;
            let n = camera_a.pixel_to_normalized(a);
            Some((*b, Vector3::new(n.x * z, n.y * z, z)))
        })
        .collect()
}

pub const RELPOSE_MAX_DISTANCE: f64 = 3.0;
pub const RELPOSE_MAX_ANGLE_DEG: f64 = 1.0;

/// Defaults for relative-pose estimation in the local-feature benchmark.
pub fn relpose_ransac_config(seed: u64) -> RansacConfig {
    RansacConfig {
        reproj_px: 8.0,
        min_inliers: 4,
        max_iters: 5000,
        confidence: 0.999,
        seed,
    }
}

pub fn relpose_pair_correct(pair: &RelPosePair, max_dist: f64, max_deg: f64, cfg: &RansacConfig) -> bool {
    let Ok(est) = pnp_ransac(&pair.camera_b, &pair.correspondences, cfg) else {
        return false;
    };
    est.success
        && (est.pose.center() - pair.gt.center()).norm() < max_dist
        && rotation_angle_deg(&est.pose.rotation, &pair.gt.rotation) < max_deg
}

/// Fraction of pairs whose relative pose lands within both thresholds.
/// Pair `i` uses RANSAC seed `seed + i`.
pub fn relpose_recall(pairs: &[RelPosePair], max_dist: f64, max_deg: f64, seed: u64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let ok = par::map(&idx, |&i| {
        relpose_pair_correct(
            &pairs[i],
            max_dist,
            max_deg,
            &relpose_ransac_config(seed.wrapping_add(i as u64)),
        )
    });
    ok.iter().filter(|b| **b).count() as f64 / pairs.len() as f64
}

/// Three ascending (distance m, orientation deg) tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdTriple(pub [(f64, f64); 3]);

impl ThresholdTriple {
    pub fn new(tiers: [(f64, f64); 3]) -> Result<Self, EvalError> {
        for w in tiers.windows(2) {
            if !(w[0].0 < w[1].0 && w[0].1 < w[1].1) {
                return Err(EvalError::InvalidThresholds(format!(
                    "tiers must strictly increase in both distance and angle: {tiers:?}"
                )));
            }
        }
        if tiers
            .iter()
            .any(|t| !(t.0 > 0.0 && t.1 > 0.0) || !t.0.is_finite() || !t.1.is_finite())
        {
            return Err(EvalError::InvalidThresholds(format!(
                "thresholds must be positive: {tiers:?}"
            )));
        }
        Ok(Self(tiers))
    }

    pub fn tiers(&self) -> &[(f64, f64); 3] {
        &self.0
    }
}

impl Default for ThresholdTriple {
    fn default() -> Self {
        Self([(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)])
    }
}

impl FromStr for ThresholdTriple {
    type Err = EvalError;
    /// Parses `d1:a1,d2:a2,d3:a3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::InvalidThresholds(format!("expected 'm:deg,m:deg,m:deg', got '{s}'"));
        let parts: Vec<(f64, f64)> = s
            .split(',')
            .map(|p| {
                let (d, a) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok((d.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?))
            })
            .collect::<Result<_, EvalError>>()?;
        let tiers: [(f64, f64); 3] = parts.try_into().map_err(|_| bad())?;
        Self::new(tiers)
    }
}

/// The part of a localization result the benchmark needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutcome {
    pub image_id: String,
    pub success: bool,
    pub pose: Pose,
}

impl From<&crate::localizer::LocalizationResult> for PoseOutcome {
    fn from(r: &crate::localizer::LocalizationResult) -> Self {
        Self {
            image_id: r.image_id.clone(),
            success: r.success(),
            pose: r.estimate.pose,
        }
    }
}

/// Position and orientation error of each outcome; failures get infinity.
pub fn pose_errors(results: &[PoseOutcome], gt: &HashMap<String, Pose>) -> Result<Vec<(f64, f64)>, EvalError> {
    results
        .iter()
        .map(|r| {
            let truth = gt
                .get(&r.image_id)
                .ok_or_else(|| EvalError::MissingGroundTruth(r.image_id.clone()))?;
            Ok(if r.success {
                (
                    (r.pose.center() - truth.center()).norm(),
                    rotation_angle_deg(&r.pose.rotation, &truth.rotation),
                )
            } else {
                (f64::INFINITY, f64::INFINITY)
            })
        })
        .collect()
}

/// Percentage of queries within each tier.
pub fn localization_recall(
    results: &[PoseOutcome],
    gt: &HashMap<String, Pose>,
    tiers: &ThresholdTriple,
) -> Result<[f64; 3], EvalError> {
    let errs = pose_errors(results, gt)?;
    let mut out = [0.0; 3];
    if errs.is_empty() {
        return Ok(out);
    }
    for (o, (d, a)) in out.iter_mut().zip(tiers.0) {
        let n = errs.iter().filter(|(pe, re)| *pe <= d && *re <= a).count();
        *o = 100.0 * n as f64 / errs.len() as f64;
    }
    Ok(out)
}

/// Empirical distribution of position errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    /// Ascending; failures are `+inf`.
    pub errors: Vec<f64>,
}

impl CumulativeCurve {
    /// Fraction of queries with error at most `threshold`.
    pub fn fraction_at(&self, threshold: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        let n = self.errors.partition_point(|e| *e <= threshold);
        n as f64 / self.errors.len() as f64
    }

    /// `steps + 1` evenly spaced samples over `[0, max_distance]`.
    pub fn sample(&self, max_distance: f64, steps: usize) -> Vec<(f64, f64)> {
        let steps = steps.max(1);
        (0..=steps)
            .map(|i| {
                let t = max_distance * i as f64 / steps as f64;
                (t, self.fraction_at(t))
            })
            .collect()
    }

    pub fn to_csv(&self, max_distance: f64, steps: usize) -> String {
        let mut s = String::from("threshold_m,fraction\n");
        for (t, f) in self.sample(max_distance, steps) {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }
}

pub fn cumulative_curve(results: &[PoseOutcome], gt: &HashMap<String, Pose>) -> Result<CumulativeCurve, EvalError> {
    let mut errors: Vec<f64> = pose_errors(results, gt)?.into_iter().map(|e| e.0).collect();
    errors.sort_by(f64::total_cmp);
    Ok(CumulativeCurve { errors })
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub image_a: String,
    pub image_b: String,
    /// Row-major homography A to B.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_a: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_b: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_b: Option<String>,
    /// `qw qx qy qz tx ty tz` from camera A to camera B.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_pose: Option<[f64; 7]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_a: Option<Camera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_b: Option<Camera>,
}

impl PairRecord {
    /// Resolves the record into ground truth; depth paths are relative to `base`.
    pub fn ground_truth(&self, base: &Path) -> Result<GroundTruth, EvalError> {
        let missing = |f: &str| EvalError::InvalidGroundTruth(format!("pair '{}' lacks {f}", self.id));
        match (&self.homography, &self.depth_a) {
            (Some(h), None) => Ok(GroundTruth::Homography {
                homography: Homography::from_row_slice(h).map_err(|e| EvalError::InvalidGroundTruth(e.to_string()))?,
                size_a: self.size_a.map(|s| (s[0], s[1])).ok_or_else(|| missing("size_a"))?,
                size_b: self
                    .size_b
                    .or(self.size_a)
                    .map(|s| (s[0], s[1]))
                    .ok_or_else(|| missing("size_b"))?,
            }),
            (None, Some(da)) => {
                let p = self.relative_pose.ok_or_else(|| missing("relative_pose"))?;
                let camera_a = self.camera_a.ok_or_else(|| missing("camera_a"))?;
                let camera_b = self.camera_b.ok_or_else(|| missing("camera_b"))?;
                let depth_a = DepthMap::read(base.join(da))?;
                let depth_b = self
                    .depth_b
                    .as_ref()
                    .map(|d| DepthMap::read(base.join(d)))
                    .transpose()?;
                Ok(GroundTruth::Depth {
                    depth_a,
                    depth_b,
                    relative: Pose::from_wxyz([p[0], p[1], p[2], p[3]], [p[4], p[5], p[6]]),
                    camera_a,
                    camera_b,
                })
            }
            _ => Err(EvalError::InvalidGroundTruth(format!(
                "pair '{}' must carry exactly one of homography or depth_a",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalEvalConfig {
    pub eps_keypoint: f64,
    pub eps_descriptor: f64,
    /// Corner error threshold for homography correctness, pixels.
    pub corner_threshold: f64,
    pub max_distance: f64,
    pub max_angle_deg: f64,
    pub seed: u64,
}

impl LocalEvalConfig {
    pub fn homography() -> Self {
        Self {
            eps_keypoint: 3.0,
            eps_descriptor: 3.0,
            corner_threshold: 3.0,
            max_distance: RELPOSE_MAX_DISTANCE,
            max_angle_deg: RELPOSE_MAX_ANGLE_DEG,
            seed: 0,
        }
    }

    pub fn sfm() -> Self {
        Self {
            eps_keypoint: 3.0,
            eps_descriptor: 5.0,
            ..Self::homography()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub id: String,
    pub keypoints: Option<KeypointMetrics>,
    pub descriptors: Option<DescriptorMetrics>,
    /// Homography or relative-pose correctness.
    pub pose_correct: bool,
    pub num_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub config: LocalEvalConfig,
    pub pairs: Vec<PairReport>,
    /// Pairs without visible keypoints, left out of the means.
    pub skipped: usize,
    pub repeatability: f64,
    pub mle: f64,
    pub matching_score: f64,
    pub map: f64,
    /// Homography recall or relative-pose recall, over all pairs.
    pub pose_recall: f64,
    /// Repeatability lets several source keypoints share one target keypoint.
    pub many_to_one: bool,
}

/// Mutual nearest-neighbor matches as pixel pairs.
pub fn mutual_matches(
    fa: &LocalFeatureSet,
    fb: &LocalFeatureSet,
) -> Result<Vec<(Vector2<f64>, Vector2<f64>)>, EvalError> {
    if fa.is_empty() || fb.is_empty() {
        return Ok(Vec::new());
    }
    Ok(matching::match_mutual_ratio(&fa.descriptors, &fb.descriptors, 1.0)?
        .into_iter()
        .map(|(i, j, _)| (fa.keypoints[i].pt(), fb.keypoints[j].pt()))
        .collect())
}

/// Evaluates one pair; `index` offsets the RANSAC seed.
pub fn evaluate_pair(
    id: &str,
    fa: &LocalFeatureSet,
    fb: &LocalFeatureSet,
    gt: &GroundTruth,
    cfg: &LocalEvalConfig,
    index: usize,
) -> Result<PairReport, EvalError> {
    let keypoints = match keypoint_metrics(&fa.keypoints, &fb.keypoints, gt, cfg.eps_keypoint) {
        Ok(m) => Some(m),
        Err(EvalError::NoVisibleKeypoints) => None,
        Err(e) => return Err(e),
    };
    let descriptors = match descriptor_metrics(fa, fb, gt, cfg.eps_descriptor) {
        Ok(m) => Some(m),
        Err(EvalError::NoVisibleKeypoints) => None,
        Err(e) => return Err(e),
    };
    let matches = mutual_matches(fa, fb)?;
    let seed = cfg.seed.wrapping_add(index as u64);
    let pose_correct = match gt {
        GroundTruth::Homography { homography, size_a, .. } => homography_pair_correct(
            &HomographyPair {
                matches: matches.clone(),
                gt: *homography,
                size_a: *size_a,
            },
            cfg.corner_threshold,
            seed,
        ),
        GroundTruth::Depth {
            depth_a,
            relative,
            camera_a,
            camera_b,
            ..
        } => relpose_pair_correct(
            &RelPosePair {
                correspondences: lift_matches(&matches, depth_a, camera_a),
                camera_b: *camera_b,
                gt: *relative,
            },
            cfg.max_distance,
            cfg.max_angle_deg,
            &relpose_ransac_config(seed),
        ),
    };
    Ok(PairReport {
        id: id.to_string(),
        keypoints,
        descriptors,
        pose_correct,
        num_matches: matches.len(),
    })
}

/// Aggregates pair reports in input order.
pub fn summarize(mode: &str, cfg: LocalEvalConfig, pairs: Vec<PairReport>) -> EvalReport {
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let kp: Vec<&KeypointMetrics> = pairs.iter().filter_map(|p| p.keypoints.as_ref()).collect();
    let de: Vec<&DescriptorMetrics> = pairs.iter().filter_map(|p| p.descriptors.as_ref()).collect();
    EvalReport {
        mode: mode.to_string(),
        config: cfg,
        skipped: pairs.iter().filter(|p| p.keypoints.is_none()).count(),
        repeatability: mean(kp.iter().map(|k| k.repeatability).collect()),
        mle: mean(kp.iter().filter_map(|k| k.mle).collect()),
        matching_score: mean(de.iter().map(|d| d.matching_score).collect()),
        map: mean(de.iter().map(|d| d.map).collect()),
        pose_recall: if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().filter(|p| p.pose_correct).count() as f64 / pairs.len() as f64
        },
        many_to_one: true,
        pairs,
    }
}
