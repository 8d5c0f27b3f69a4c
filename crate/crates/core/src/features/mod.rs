//! Post-processing of precomputed local features: non-maximum suppression,
//! top-k selection, bilinear descriptor sampling and normalization.

pub mod io;

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::{DMatrix, Vector2};
use thiserror::Error;

/// Default stride of dense descriptor maps, pixels per cell.
pub const DEFAULT_STRIDE: u32 = 8;
/// Default NMS radius applied to query keypoints, pixels.
pub const DEFAULT_NMS_RADIUS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }

    pub fn pt(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Dense descriptor grid, `rows x cols x dim` row-major, one cell per
/// `stride x stride` pixel block.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptorMap {
    pub stride: u32,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DenseDescriptorMap {
    pub fn new(stride: u32, rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if stride == 0 {
            return Err(FeatureError::Inconsistent("stride must be >= 1".into()));
        }
        if rows == 0 || cols == 0 || data.len() != rows * cols * dim {
            return Err(FeatureError::Inconsistent(format!(
                "dense map of {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                data.len()
            )));
        }
        Ok(Self {
            stride,
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Keypoints, local descriptors (one row per keypoint) and the global
/// descriptor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DMatrix<f32>,
    pub global: Vec<f32>,
    pub dense: Option<DenseDescriptorMap>,
}

impl LocalFeatureSet {
    pub fn new(
        image_id: impl Into<String>,
        keypoints: Vec<Keypoint>,
        descriptors: DMatrix<f32>,
        global: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if descriptors.nrows() != keypoints.len() {
            return Err(FeatureError::Inconsistent(format!(
                "{} keypoints but {} descriptor rows",
                keypoints.len(),
                descriptors.nrows()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            keypoints,
            descriptors,
            global,
            dense: None,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// Normalizes every descriptor row and the global descriptor to unit
    /// length. Zero rows are left untouched.
    pub fn normalize(&mut self) {
        normalize_rows(&mut self.descriptors);
        let n = self.global.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-12 {
            self.global.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }

    /// Keeps only the keypoints at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LocalFeatureSet {
        let d = self.descriptor_dim();
        let descriptors = DMatrix::from_fn(indices.len(), d, |r, c| self.descriptors[(indices[r], c)]);
        LocalFeatureSet {
            image_id: self.image_id.clone(),
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            descriptors,
            global: self.global.clone(),
            dense: self.dense.clone(),
        }
    }
}

pub fn normalize_rows(m: &mut DMatrix<f32>) {
    for mut row in m.row_iter_mut() {
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, FeatureError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(FeatureError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Strict total order used for NMS: higher score first, then smaller `y`,
/// then smaller `x`.
pub fn keypoint_priority(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

/// Greedy non-maximum suppression with a Euclidean radius, keeping at most
/// `k` keypoints. Returns indices into `keypoints` in selection order.
///
/// A keypoint is suppressed when it lies within `radius` (inclusive) of an
/// already kept keypoint.
pub fn nms_topk(keypoints: &[Keypoint], radius: f64, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keypoints.len()).collect();
    order.sort_by(|&a, &b| keypoint_priority(&keypoints[a], &keypoints[b]).then(a.cmp(&b)));

    let cell = radius.max(1.0);
    let key = |kp: &Keypoint| ((kp.x / cell).floor() as i64, (kp.y / cell).floor() as i64);
    let r2 = radius * radius;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept = Vec::with_capacity(k.min(keypoints.len()));

    for i in order {
        if kept.len() >= k {
            break;
        }
        let kp = &keypoints[i];
        let (cx, cy) = key(kp);
        let suppressed = (-1..=1).any(|dx| {
            (-1..=1).any(|dy| {
                grid.get(&(cx + dx, cy + dy)).is_some_and(|cell| {
                    cell.iter().any(|&j| {
                        let o = &keypoints[j];
                        (o.x - kp.x).powi(2) + (o.y - kp.y).powi(2) <= r2
                    })
                })
            })
        });
        if !suppressed {
            grid.entry((cx, cy)).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

/// Samples one descriptor per keypoint from a dense map by bilinear
/// interpolation, then L2-normalizes each row.
///
/// Pixel `(x, y)` maps to grid coordinate `((x - (s-1)/2) / s, (y - (s-1)/2) / s)`,
/// so cell centers sit at `s*i + (s-1)/2`. Coordinates outside the grid are
/// clamped to the border cells.
pub fn sample_descriptors_bilinear(map: &DenseDescriptorMap, keypoints: &[Keypoint]) -> DMatrix<f32> {
    let s = map.stride as f64;
    let off = (s - 1.0) / 2.0;
    let mut out = DMatrix::<f32>::zeros(keypoints.len(), map.dim);
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let g = ((v - off) / s).clamp(0.0, (n - 1) as f64);
        let i0 = (g.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        let w = if i1 == i0 { 0.0 } else { g - i0 as f64 };
        (i0, i1, w)
    };
    let mut acc = vec![0.0f64; map.dim];
    for (r, kp) in keypoints.iter().enumerate() {
        let (x0, x1, wx) = axis(kp.x, map.cols);
        let (y0, y1, wy) = axis(kp.y, map.rows);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (row, col, w) in [
            (y0, x0, (1.0 - wx) * (1.0 - wy)),
            (y0, x1, wx * (1.0 - wy)),
            (y1, x0, (1.0 - wx) * wy),
            (y1, x1, wx * wy),
        ] {
            if w == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(map.cell(row, col)) {
                *a += w * *v as f64;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if n > 1e-12 { 1.0 / n } else { 1.0 };
        for (c, v) in acc.iter().enumerate() {
            out[(r, c)] = (v * scale) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_nms(kps: &[Keypoint], radius: f64, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..kps.len()).collect();
        order.sort_by(|&a, &b| keypoint_priority(&kps[a], &kps[b]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for i in order {
            if kept.len() == k {
                break;
            }
            let close = kept.iter().any(|&j| {
                let dx = kps[i].x - kps[j].x;
                let dy = kps[i].y - kps[j].y;
                (dx * dx + dy * dy).sqrt() <= radius
            });
            if !close {
                kept.push(i);
            }
        }
        kept
    }

    fn random_keypoints(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<Keypoint> {
        (0..n)
            .map(|_| Keypoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random()))
            .collect()
    }

    #[test]
    fn nms_suppresses_close_pair() {
        let kps = [Keypoint::new(10.0, 10.0, 0.9), Keypoint::new(13.0, 10.0, 0.8)];
        assert_eq!(nms_topk(&kps, 4.0, 10), vec![0]);
    }

    #[test]
    fn nms_keeps_far_pair() {
        let kps = [Keypoint::new(10.0, 10.0, 0.9), Keypoint::new(15.0, 10.0, 0.8)];
        assert_eq!(nms_topk(&kps, 4.0, 2), vec![0, 1]);
        assert_eq!(nms_topk(&kps, 4.0, 1), vec![0]);
        assert!(nms_topk(&[], 4.0, 3).is_empty());
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let kps = random_keypoints(&mut rng, 1000, 320.0, 240.0);
            let k = if trial % 2 == 0 { 1000 } else { 150 };
            assert_eq!(nms_topk(&kps, 4.0, k), brute_force_nms(&kps, 4.0, k));
        }
    }

    #[test]
    fn nms_tie_break_is_lexicographic() {
        let kps = [
            Keypoint::new(12.0, 5.0, 0.5),
            Keypoint::new(10.0, 5.0, 0.5),
            Keypoint::new(40.0, 1.0, 0.5),
        ];
        // (y, x): (1, 40) first, then (5, 10) which suppresses (5, 12).
        assert_eq!(nms_topk(&kps, 4.0, 10), vec![2, 1]);
    }

    #[test]
    fn nms_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut kps = random_keypoints(&mut rng, 600, 100.0, 100.0);
        // quantized scores to exercise ties
        kps.iter_mut().for_each(|k| k.score = (k.score * 10.0).round() / 10.0);
        let kept = nms_topk(&kps, 4.0, usize::MAX);
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!((kps[i].pt() - kps[j].pt()).norm() > 4.0);
            }
        }
        for i in 0..kps.len() {
            if kept.contains(&i) {
                continue;
            }
            assert!(kept
                .iter()
                .any(|&j| (kps[i].pt() - kps[j].pt()).norm() <= 4.0 && kps[j].score >= kps[i].score));
        }

        let mut perm: Vec<usize> = (0..kps.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Keypoint> = perm.iter().map(|&i| kps[i]).collect();
        let kept2: Vec<usize> = nms_topk(&shuffled, 4.0, usize::MAX).iter().map(|&i| perm[i]).collect();
        assert_eq!(kept, kept2);
    }

    #[test]
    fn l2_normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(FeatureError::ZeroVector));
    }

    #[test]
    fn sample_constant_map() {
        let v = [1.0f32, 2.0, 2.0];
        let data: Vec<f32> = (0..4 * 5).flat_map(|_| v).collect();
        let map = DenseDescriptorMap::new(8, 4, 5, 3, data).unwrap();
        let kps = [
            Keypoint::new(0.0, 0.0, 1.0),
            Keypoint::new(17.3, 20.9, 1.0),
            Keypoint::new(39.9, 31.9, 1.0),
        ];
        let d = sample_descriptors_bilinear(&map, &kps);
        for r in 0..3 {
            assert!((d[(r, 0)] - 1.0 / 3.0).abs() < 1e-7);
            assert!((d[(r, 1)] - 2.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sample_ramp_midpoint() {
        // Two channels, value depends linearly on the column.
        let (rows, cols, s) = (2usize, 4usize, 8u32);
        let data: Vec<f32> = (0..rows)
            .flat_map(|_| (0..cols).flat_map(|c| [1.0f32, c as f32]))
            .collect();
        let map = DenseDescriptorMap::new(s, rows, cols, 2, data).unwrap();
        // Centers of columns 1 and 2 sit at x = 11.5 and 19.5.
        let kp = Keypoint::new(15.5, 3.5, 1.0);
        let d = sample_descriptors_bilinear(&map, &[kp]);
        let avg = [1.0f64, 1.5];
        let n = (avg[0] * avg[0] + avg[1] * avg[1]).sqrt();
        assert!((d[(0, 0)] as f64 - avg[0] / n).abs() < 1e-7);
        assert!((d[(0, 1)] as f64 - avg[1] / n).abs() < 1e-7);
    }

    #[test]
    fn sample_cell_centers_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rows, cols, dim, s) = (6usize, 9usize, 5usize, 8u32);
        let data: Vec<f32> = (0..rows * cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = DenseDescriptorMap::new(s, rows, cols, dim, data).unwrap();

        // Exact cell centers reproduce the (normalized) cell vector.
        for r in 0..rows {
            for c in 0..cols {
                let kp = Keypoint::new(c as f64 * 8.0 + 3.5, r as f64 * 8.0 + 3.5, 1.0);
                let d = sample_descriptors_bilinear(&map, &[kp]);
                let cell = map.cell(r, c);
                let n = cell.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                for k in 0..dim {
                    assert!((d[(0, k)] as f64 - cell[k] as f64 / n).abs() < 1e-7);
                }
            }
        }

        // Per-channel scalar interpolation oracle.
        let kps = random_keypoints(&mut rng, 50, cols as f64 * 8.0, rows as f64 * 8.0);
        let d = sample_descriptors_bilinear(&map, &kps);
        for (i, kp) in kps.iter().enumerate() {
            let gx = ((kp.x - 3.5) / 8.0).clamp(0.0, (cols - 1) as f64);
            let gy = ((kp.y - 3.5) / 8.0).clamp(0.0, (rows - 1) as f64);
            let mut v = vec![0.0f64; dim];
            for (k, out) in v.iter_mut().enumerate() {
                let f = |r: usize, c: usize| map.data[(r * cols + c) * dim + k] as f64;
                let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
                let (c1, r1) = ((c0 + 1).min(cols - 1), (r0 + 1).min(rows - 1));
                let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
                let top = f(r0, c0) * (1.0 - tx) + f(r0, c1) * tx;
                let bottom = f(r1, c0) * (1.0 - tx) + f(r1, c1) * tx;
                *out = top * (1.0 - ty) + bottom * ty;
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..dim {
                assert!((d[(i, k)] as f64 - v[k] / n).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn nms_never_keeps_close_pairs(
            pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..1.0), 0..200),
            radius in 0.0f64..8.0,
        ) {
            let kps: Vec<Keypoint> = pts.iter().map(|&(x, y, s)| Keypoint::new(x, y, s)).collect();
            let kept = nms_topk(&kps, radius, usize::MAX);
            prop_assert_eq!(&kept, &brute_force_nms(&kps, radius, usize::MAX));
        }
    }
}
