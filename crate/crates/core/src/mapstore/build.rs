//! Map construction against known reference poses.
//!
//! For every image pair: mutual nearest-neighbor matches passing the ratio
//! test, filtered by their symmetric epipolar distance under the pair's
//! reference geometry. Surviving matches are merged into tracks with a
//! union-find over `(image, keypoint)` nodes, in pair order, and every track
//! spanning at least two images is triangulated and checked.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::{DbImage, MapError, MapMeta, Observation, Point3D, SparseMap};
use crate::features::LocalFeatureSet;
use crate::geometry::{self, Camera, Pose};
use crate::matching;
use crate::par;
use crate::retrieval::{self, PcaModel};

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    /// Ratio-test threshold for pairwise matching.
    pub ratio: f64,
    /// Maximum symmetric epipolar distance of a match and maximum
    /// reprojection error of a triangulated point, pixels.
    pub epipolar_px: f64,
    pub min_angle_deg: f64,
    /// Target PCA dimension for the global index; `None` skips fitting.
    pub pca_dim: Option<usize>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            ratio: matching::DEFAULT_RATIO,
            epipolar_px: 4.0,
            min_angle_deg: geometry::DEFAULT_MIN_TRIANGULATION_ANGLE_DEG,
            pca_dim: Some(retrieval::DEFAULT_PCA_DIM),
        }
    }
}

/// Counters reported alongside a built map.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct BuildSummary {
    pub pairs: usize,
    pub raw_matches: usize,
    pub geometric_matches: usize,
    pub tracks: usize,
    pub points: usize,
    /// Keypoints dropped from a track because another keypoint of the same
    /// image fit the point better.
    pub conflicts_resolved: usize,
    pub dropped_tracks: usize,
}

/// All unordered pairs of `ids`, in lexicographic index order.
pub fn exhaustive_pairs(ids: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            out.push((a.clone(), b.clone()));
        }
    }
    out
}

fn fundamental(pose_a: &Pose, pose_b: &Pose, cam_a: &Camera, cam_b: &Camera) -> Matrix3<f64> {
    let rel = pose_a.relative_to(pose_b);
    let t = rel.translation;
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let e = tx * rel.rotation_matrix();
    let ka_inv = cam_a.calibration().try_inverse().unwrap_or_else(Matrix3::identity);
    let kb_inv = cam_b.calibration().try_inverse().unwrap_or_else(Matrix3::identity);
    kb_inv.transpose() * e * ka_inv
}

/// Larger of the two point-to-epipolar-line distances, on undistorted pixels.
fn symmetric_epipolar_distance(f: &Matrix3<f64>, ua: &Vector2<f64>, ub: &Vector2<f64>) -> f64 {
    let xa = Vector3::new(ua.x, ua.y, 1.0);
    let xb = Vector3::new(ub.x, ub.y, 1.0);
    let lb = f * xa;
    let la = f.transpose() * xb;
    let num = xb.dot(&lb).abs();
    let db = num / lb.x.hypot(lb.y).max(1e-15);
    let da = num / la.x.hypot(la.y).max(1e-15);
    da.max(db)
}

fn undistort(cam: &Camera, p: &Vector2<f64>) -> Vector2<f64> {
    let n = cam.pixel_to_normalized(p);
    Vector2::new(cam.fx * n.x + cam.cx, cam.fy * n.y + cam.cy)
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb) as usize] = ra.min(rb);
        }
    }
}

struct TrackInput<'a> {
    images: &'a [DbImage],
    threshold: f64,
    min_angle_deg: f64,
}

struct Triangulated {
    position: Vector3<f64>,
    track: Vec<Observation>,
    conflicts: usize,
}

impl TrackInput<'_> {
    fn pixel(&self, o: &Observation) -> Vector2<f64> {
        self.images[o.image as usize].features.keypoints[o.keypoint as usize].pt()
    }

    fn residual(&self, point: &Vector3<f64>, o: &Observation) -> Option<f64> {
        let img = &self.images[o.image as usize];
        geometry::project(&img.pose, &img.camera, point)
            .ok()
            .map(|p| (p - self.pixel(o)).norm())
    }

    /// Best keypoint per image for `point`, keeping those within threshold.
    fn assign(&self, point: &Vector3<f64>, by_image: &BTreeMap<u32, Vec<u32>>) -> (Vec<Observation>, f64) {
        let mut kept = Vec::new();
        let mut total = 0.0;
        for (&image, kps) in by_image {
            let best = kps
                .iter()
                .filter_map(|&keypoint| {
                    let o = Observation { image, keypoint };
                    self.residual(point, &o).map(|r| (r, o))
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((r, o)) = best {
                if r <= self.threshold {
                    kept.push(o);
                    total += r;
                }
            }
        }
        (kept, total)
    }

    fn triangulate(&self, nodes: &[Observation]) -> Option<Triangulated> {
        let mut by_image: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for o in nodes {
            by_image.entry(o.image).or_default().push(o.keypoint);
        }
        if by_image.len() < 2 {
            return None;
        }
        let images: Vec<u32> = by_image.keys().copied().collect();

        // Seed: the two-view solution explaining the most images. The search
        // stops at the first seed that explains all of them; the refit below
        // sets the final position.
        let mut best: Option<(usize, f64, Vector3<f64>)> = None;
        'seeds: for (i, &ia) in images.iter().enumerate() {
            for &ib in &images[i + 1..] {
                for &ka in &by_image[&ia] {
                    for &kb in &by_image[&ib] {
                        let (a, b) = (&self.images[ia as usize], &self.images[ib as usize]);
                        let oa = Observation {
                            image: ia,
                            keypoint: ka,
                        };
                        let ob = Observation {
                            image: ib,
                            keypoint: kb,
                        };
                        let Ok(t) = geometry::triangulate_two_view(
                            &a.pose,
                            &b.pose,
                            &a.camera,
                            &b.camera,
                            &self.pixel(&oa),
                            &self.pixel(&ob),
                            self.min_angle_deg,
                        ) else {
                            continue;
                        };
                        let (kept, total) = self.assign(&t.point, &by_image);
                        let better = match &best {
                            None => true,
                            Some((n, r, _)) => kept.len() > *n || (kept.len() == *n && total < *r),
                        };
                        if better {
                            best = Some((kept.len(), total, t.point));
                            if kept.len() == images.len() {
                                break 'seeds;
                            }
                        }
                    }
                }
            }
        }
        let (_, _, seed) = best?;
        let (kept, _) = self.assign(&seed, &by_image);
        if kept.len() < 2 {
            return None;
        }

        // Linear re-triangulation on the consistent observations.
        let views: Vec<(&Pose, &Camera, Vector2<f64>)> = kept
            .iter()
            .map(|o| {
                let img = &self.images[o.image as usize];
                (&img.pose, &img.camera, self.pixel(o))
            })
            .collect();
        let refined = geometry::triangulate_views(&views, self.min_angle_deg).ok()?;
        let (position, track) = if refined.residuals.iter().all(|r| *r <= self.threshold) {
            (refined.point, kept)
        } else {
            let (again, _) = self.assign(&refined.point, &by_image);
            if again.len() == kept.len() {
                (refined.point, again)
            } else {
                (seed, kept)
            }
        };
        if track.len() < 2 {
            return None;
        }
        // Final checks on the stored position.
        if track
            .iter()
            .any(|o| self.residual(&position, o).is_none_or(|r| r > self.threshold))
        {
            return None;
        }
        let views: Vec<_> = track
            .iter()
            .map(|o| {
                let img = &self.images[o.image as usize];
                (&img.pose, &img.camera, self.pixel(o))
            })
            .collect();
        geometry::triangulate_views(&views, self.min_angle_deg).ok()?;

        let conflicts = nodes.len() - by_image.len();
        Some(Triangulated {
            position,
            track,
            conflicts,
        })
    }
}

fn mean_descriptor(images: &[DbImage], track: &[Observation]) -> Vec<f32> {
    let dim = images[track[0].image as usize].features.descriptor_dim();
    let mut acc = vec![0.0f64; dim];
    for o in track {
        let row = images[o.image as usize].features.descriptors.row(o.keypoint as usize);
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += *v as f64;
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = if n > 1e-12 { 1.0 / n } else { 0.0 };
    acc.iter().map(|v| (v * s) as f32).collect()
}

/// Fits PCA on the global descriptors of `images`, clipping the dimension
/// to what the data supports. Returns `None` with fewer than two usable
/// descriptors.
pub fn fit_global_pca(images: &[DbImage], dim: usize) -> Result<Option<PcaModel>, MapError> {
    let rows: Vec<&Vec<f32>> = images
        .iter()
        .map(|i| &i.features.global)
        .filter(|g| !g.is_empty())
        .collect();
    if rows.len() < 2 || rows.len() != images.len() {
        return Ok(None);
    }
    let g = rows[0].len();
    if rows.iter().any(|r| r.len() != g) {
        return Err(MapError::Integrity("global descriptors differ in dimension".into()));
    }
    let data = DMatrix::from_fn(rows.len(), g, |r, c| rows[r][c] as f64);
    let k = dim.min(rows.len() - 1).min(g);
    if k == 0 {
        return Ok(None);
    }
    Ok(Some(retrieval::fit_pca(&data, k)?))
}

/// Builds a sparse map from per-image features, reference poses and
/// cameras. Images enter the map in the order of `features`.
pub fn build_map(
    features: Vec<LocalFeatureSet>,
    poses: &HashMap<String, Pose>,
    cameras: &HashMap<String, Camera>,
    pairs: &[(String, String)],
    cfg: &BuildConfig,
) -> Result<(SparseMap, BuildSummary), MapError> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut images = Vec::with_capacity(features.len());
    for f in features {
        let pose = *poses
            .get(&f.image_id)
            .ok_or_else(|| MapError::MissingPose(f.image_id.clone()))?;
        let camera = *cameras
            .get(&f.image_id)
            .ok_or_else(|| MapError::MissingCamera(f.image_id.clone()))?;
        index.insert(f.image_id.clone(), images.len());
        images.push(DbImage {
            image_id: f.image_id.clone(),
            camera,
            pose,
            observations: vec![None; f.len()],
            features: f,
        });
    }
    let pair_idx: Vec<(usize, usize)> = pairs
        .iter()
        .map(|(a, b)| {
            let ia = *index.get(a).ok_or_else(|| MapError::MissingFeatures(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| MapError::MissingFeatures(b.clone()))?;
            Ok((ia, ib))
        })
        .collect::<Result<_, MapError>>()?;

    // Pairwise matching and geometric verification, in parallel per pair.
    let verified: Vec<Result<(usize, Vec<(u32, u32)>), MapError>> = par::map(&pair_idx, |&(ia, ib)| {
        if ia == ib {
            return Ok((0, Vec::new()));
        }
        let (a, b) = (&images[ia], &images[ib]);
        let raw = matching::match_mutual_ratio(&a.features.descriptors, &b.features.descriptors, cfg.ratio)?;
        let f = fundamental(&a.pose, &b.pose, &a.camera, &b.camera);
        let kept = raw
            .iter()
            .filter(|(i, j, _)| {
                let ua = undistort(&a.camera, &a.features.keypoints[*i].pt());
                let ub = undistort(&b.camera, &b.features.keypoints[*j].pt());
                symmetric_epipolar_distance(&f, &ua, &ub) <= cfg.epipolar_px
            })
            .map(|&(i, j, _)| (i as u32, j as u32))
            .collect();
        Ok((raw.len(), kept))
    });

    let mut offsets = Vec::with_capacity(images.len() + 1);
    offsets.push(0u32);
    for img in &images {
        offsets.push(offsets.last().unwrap() + img.features.len() as u32);
    }
    let total_nodes = *offsets.last().unwrap() as usize;
    let mut uf = UnionFind::new(total_nodes);
    let mut summary = BuildSummary {
        pairs: pair_idx.len(),
        ..Default::default()
    };
    let mut touched = vec![false; total_nodes];
    for (res, &(ia, ib)) in verified.into_iter().zip(&pair_idx) {
        let (raw, kept) = res?;
        summary.raw_matches += raw;
        summary.geometric_matches += kept.len();
        for (i, j) in kept {
            let (na, nb) = (offsets[ia] + i, offsets[ib] + j);
            touched[na as usize] = true;
            touched[nb as usize] = true;
            uf.union(na, nb);
        }
    }

    // Components ordered by their smallest node.
    let mut components: BTreeMap<u32, Vec<Observation>> = BTreeMap::new();
    for node in 0..total_nodes as u32 {
        if !touched[node as usize] {
            continue;
        }
        let image = offsets.partition_point(|&o| o <= node) - 1;
        components.entry(uf.find(node)).or_default().push(Observation {
            image: image as u32,
            keypoint: node - offsets[image],
        });
    }
    let components: Vec<Vec<Observation>> = components.into_values().filter(|c| c.len() >= 2).collect();
    summary.tracks = components.len();

    let input = TrackInput {
        images: &images,
        threshold: cfg.epipolar_px,
        min_angle_deg: cfg.min_angle_deg,
    };
    let triangulated = par::map(&components, |nodes| input.triangulate(nodes));

    let mut points = Vec::new();
    for t in triangulated {
        let Some(t) = t else {
            summary.dropped_tracks += 1;
            continue;
        };
        summary.conflicts_resolved += t.conflicts;
        let id = points.len() as u32;
        points.push(Point3D {
            id,
            position: t.position,
            descriptor: mean_descriptor(&images, &t.track),
            track: t.track,
        });
    }
    for p in &points {
        for o in &p.track {
            images[o.image as usize].observations[o.keypoint as usize] = Some(p.id);
        }
    }
    summary.points = points.len();

    let pca = match cfg.pca_dim {
        Some(dim) => fit_global_pca(&images, dim)?,
        None => None,
    };
    Ok((SparseMap::new(images, points, pca, MapMeta::default())?, summary))
}
