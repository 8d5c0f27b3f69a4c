//! Synthetic scenes: a random point cloud seen from a ring of cameras, with
//! rendered keypoints, descriptors, global descriptors and ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{io as fio, Keypoint, LocalFeatureSet};
use crate::geometry::{project, Camera, Pose};
use crate::mapstore::lists;
use crate::par;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("no scene point is visible from view '{0}'")]
    NoVisiblePoints(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

fn default_camera() -> Camera {
    Camera {
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        k1: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_points: usize,
    /// Edge length of the cube holding the points, meters.
    pub extent: f64,
    pub num_db: usize,
    pub num_query: usize,
    pub camera: Camera,
    /// Gaussian pixel noise on keypoint positions.
    pub pixel_noise: f64,
    /// Fraction of rendered keypoints replaced by random position and descriptor.
    pub outlier_fraction: f64,
    pub descriptor_dim: usize,
    pub global_dim: usize,
    pub seed: u64,
    /// Ring radius; defaults to 2.5 x extent when unset.
    pub ring_radius: Option<f64>,
    /// Uniform jitter of camera centers and look-at targets, meters.
    pub jitter: f64,
    /// Per-coordinate Gaussian noise added to keypoint descriptors.
    pub descriptor_noise: f64,
    /// Per-coordinate Gaussian noise added to pooled global descriptors.
    pub global_noise: f64,
    /// Depth scale of the pooling weight `exp(-(z - z_min) / scale)`; defaults to extent / 4.
    pub pooling_scale: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 2000,
            extent: 10.0,
            num_db: 20,
            num_query: 10,
            camera: default_camera(),
            pixel_noise: 0.0,
            outlier_fraction: 0.0,
            descriptor_dim: 64,
            global_dim: 64,
            seed: 0,
            ring_radius: None,
            jitter: 0.5,
            descriptor_noise: 0.02,
            global_noise: 0.01,
            pooling_scale: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier fraction {} outside [0, 1]", self.outlier_fraction));
        }
        if !(self.pixel_noise >= 0.0 && self.descriptor_noise >= 0.0 && self.global_noise >= 0.0 && self.jitter >= 0.0)
        {
            return bad("noise levels and jitter must be non-negative".into());
        }
        if !(self.extent > 0.0) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        if self.descriptor_dim == 0 || self.global_dim == 0 {
            return bad("descriptor dimensions must be positive".into());
        }
        if self.num_points == 0 || self.num_points > u32::MAX as usize {
            return bad(format!("invalid point count {}", self.num_points));
        }
        if self.ring_radius.is_some_and(|r| !(r > 0.0)) || self.pooling_scale.is_some_and(|s| !(s > 0.0)) {
            return bad("ring radius and pooling scale must be positive".into());
        }
        self.camera
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    pub fn radius(&self) -> f64 {
        self.ring_radius.unwrap_or(2.5 * self.extent)
    }

    fn pooling(&self) -> f64 {
        self.pooling_scale.unwrap_or(self.extent / 4.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub points: Vec<Vector3<f64>>,
    /// Unit local descriptor per point.
    pub descriptors: Vec<Vec<f32>>,
    /// Unit global-pooling code per point.
    pub codes: Vec<Vec<f32>>,
    pub db_poses: Vec<(String, Pose)>,
    pub query_poses: Vec<(String, Pose)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub features: LocalFeatureSet,
    /// True point id per keypoint; `None` for outliers.
    pub observations: Vec<Option<u32>>,
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// World-to-camera pose of a camera at `center` looking at `target`, image y pointing down.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let f = (target - center).normalize();
    let mut down = Vector3::new(0.0, -1.0, 0.0);
    if down.cross(&f).norm() < 1e-6 {
        down = Vector3::new(0.0, 0.0, 1.0);
    }
    let r = down.cross(&f).normalize();
    let d = f.cross(&r);
    let m = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    Pose::new(rot, -(rot * center))
}

fn ring_pose(rng: &mut impl Rng, radius: f64, angle: f64, jitter: f64) -> Pose {
    let mut j = || {
        if jitter > 0.0 {
            Vector3::new(
                rng.random_range(-jitter..jitter),
                rng.random_range(-jitter..jitter),
                rng.random_range(-jitter..jitter),
            )
        } else {
            Vector3::zeros()
        }
    };
    let center = Vector3::new(radius * angle.cos(), 0.0, radius * angle.sin()) + j();
    look_at(&center, &j())
}

pub fn db_id(i: usize) -> String {
    format!("db{i:04}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

/// Points uniform in `[-extent/2, extent/2]^3`, db cameras evenly spaced on
/// a horizontal ring, queries spread around it halfway between db angles.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.extent / 2.0;
    let points: Vec<Vector3<f64>> = (0..spec.num_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-h..=h),
                rng.random_range(-h..=h),
                rng.random_range(-h..=h),
            )
        })
        .collect();
    let descriptors = (0..spec.num_points)
        .map(|_| unit_gaussian(&mut rng, spec.descriptor_dim))
        .collect();
    let codes = (0..spec.num_points)
        .map(|_| unit_gaussian(&mut rng, spec.global_dim))
        .collect();
    let radius = spec.radius();
    let tau = std::f64::consts::TAU;
    let db_poses = (0..spec.num_db)
        .map(|i| {
            let a = tau * i as f64 / spec.num_db as f64;
            (db_id(i), ring_pose(&mut rng, radius, a, spec.jitter))
        })
        .collect();
    let query_poses = (0..spec.num_query)
        .map(|i| {
            let a = if spec.num_db == 0 {
                tau * (i as f64 + 0.5) / spec.num_query as f64
            } else {
                let stride = spec.num_db as f64 / spec.num_query as f64;
                tau * ((i as f64 * stride).floor() + 0.5) / spec.num_db as f64
            };
            (query_id(i), ring_pose(&mut rng, radius, a, spec.jitter))
        })
        .collect();
    Ok(Scene {
        spec: spec.clone(),
        points,
        descriptors,
        codes,
        db_poses,
        query_poses,
    })
}

/// 64-bit finalizer used to derive independent stream seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pose_seed(seed: u64, pose: &Pose) -> u64 {
    let q = pose.wxyz();
    let t = pose.translation;
    [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
        .iter()
        .fold(mix_seed(seed), |acc, v| mix_seed(acc ^ v.to_bits()))
}

/// Global descriptor of a view: depth-weighted sum of the codes of the
/// visible points plus noise seeded by the pose, normalized.
fn global_descriptor(scene: &Scene, pose: &Pose, visible: &[(u32, f64)]) -> Vec<f32> {
    let spec = &scene.spec;
    let zmin = visible.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let tau = spec.pooling();
    let mut g = vec![0.0f64; spec.global_dim];
    for &(pid, z) in visible {
        let w = (-(z - zmin) / tau).exp();
        for (a, c) in g.iter_mut().zip(&scene.codes[pid as usize]) {
            *a += w * *c as f64;
        }
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    g.iter_mut().for_each(|v| *v /= n);
    if spec.global_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(spec.seed, pose));
        let noise = Normal::new(0.0, spec.global_noise).unwrap();
        g.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    g.iter().map(|v| (v / n) as f32).collect()
}

/// Renders the keypoints a camera at `pose` would detect.
///
/// Keypoint noise, outliers and ordering come from `view_seed`; the global
/// descriptor depends only on the pose, so identical poses pool identically.
pub fn render_view(
    scene: &Scene,
    image_id: &str,
    pose: &Pose,
    camera: &Camera,
    view_seed: u64,
) -> Result<RenderedView, SynthError> {
    let spec = &scene.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
    let mut visible: Vec<(u32, f64, Vector2<f64>)> = Vec::new();
    for (i, p) in scene.points.iter().enumerate() {
        let Ok(px) = project(pose, camera, p) else {
            continue;
        };
        if camera.contains(&px) {
            visible.push((i as u32, pose.transform(p).z, px));
        }
    }
    if visible.is_empty() {
        return Err(SynthError::NoVisiblePoints(image_id.to_string()));
    }
    let global = global_descriptor(scene, pose, &visible.iter().map(|v| (v.0, v.1)).collect::<Vec<_>>());

    let d = spec.descriptor_dim;
    let pix_noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).unwrap();
    let desc_noise = Normal::new(0.0, spec.descriptor_noise.max(0.0)).unwrap();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut rows: Vec<(Keypoint, Vec<f32>, Option<u32>)> = visible
        .iter()
        .map(|&(pid, _, px)| {
            let mut p = px;
            if spec.pixel_noise > 0.0 {
                p.x = (p.x + pix_noise.sample(&mut rng)).clamp(0.0, w - 1e-6);
                p.y = (p.y + pix_noise.sample(&mut rng)).clamp(0.0, h - 1e-6);
            }
            let mut desc: Vec<f64> = scene.descriptors[pid as usize].iter().map(|&v| v as f64).collect();
            if spec.descriptor_noise > 0.0 {
                desc.iter_mut().for_each(|v| *v += desc_noise.sample(&mut rng));
            }
            let n = desc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let score = rng.random_range(0.5..1.0);
            (
                Keypoint::new(p.x, p.y, score),
                desc.iter().map(|v| (v / n) as f32).collect(),
                Some(pid),
            )
        })
        .collect();

    let n_out = (spec.outlier_fraction * rows.len() as f64).round() as usize;
    if n_out > 0 {
        for i in rand::seq::index::sample(&mut rng, rows.len(), n_out.min(rows.len())) {
            let score = rows[i].0.score;
            rows[i] = (
                Keypoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h), score),
                unit_gaussian(&mut rng, d),
                None,
            );
        }
    }
    rows.shuffle(&mut rng);

    let n = rows.len();
    let mut flat = Vec::with_capacity(n * d);
    let mut keypoints = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    for (kp, desc, obs) in rows {
        keypoints.push(kp);
        flat.extend(desc);
        observations.push(obs);
    }
    let features = LocalFeatureSet::new(image_id, keypoints, DMatrix::from_row_slice(n, d, &flat), global)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(RenderedView { features, observations })
}

/// Scene plus every rendered database and query view.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: Scene,
    pub db_views: Vec<RenderedView>,
    pub query_views: Vec<RenderedView>,
}

impl Dataset {
    pub fn camera(&self) -> &Camera {
        &self.scene.spec.camera
    }
}

/// Generates the scene and renders all views; view `i` of each kind uses an
/// independent stream derived from the spec seed.
pub fn generate_dataset(spec: &SceneSpec) -> Result<Dataset, SynthError> {
    let scene = generate_scene(spec)?;
    let cam = spec.camera;
    let render = |kind: u64, list: &[(String, Pose)]| -> Result<Vec<RenderedView>, SynthError> {
        let idx: Vec<usize> = (0..list.len()).collect();
        par::map(&idx, |&i| {
            let (id, pose) = &list[i];
            render_view(&scene, id, pose, &cam, mix_seed(mix_seed(spec.seed ^ kind) ^ i as u64))
        })
        .into_iter()
        .collect()
    };
    let db_views = render(0x_d8, &scene.db_poses)?;
    let query_views = render(0x_9e, &scene.query_poses)?;
    Ok(Dataset {
        scene,
        db_views,
        query_views,
    })
}

/// File names inside a dataset directory.
pub mod layout {
    pub const FEATURES: &str = "features";
    pub const CAMERAS: &str = "cameras.txt";
    pub const DB_POSES: &str = "db_poses.txt";
    pub const QUERY_POSES: &str = "query_poses.txt";
    pub const QUERIES: &str = "queries.txt";
    pub const GT_OBSERVATIONS: &str = "gt_observations.json";
    pub const SPEC: &str = "spec.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObservations {
    /// Point id observed by each keypoint, `null` for outliers.
    pub images: BTreeMap<String, Vec<Option<u32>>>,
    pub points: Vec<[f64; 3]>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Writes feature files, camera and pose lists, the query list and ground truth.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    let feat_dir: PathBuf = dir.join(layout::FEATURES);
    fs::create_dir_all(&feat_dir).map_err(|e| io_err(&feat_dir, e))?;
    for v in ds.db_views.iter().chain(&ds.query_views) {
        let p = fio::path_for(&feat_dir, &v.features.image_id);
        fio::write(&p, &v.features).map_err(|e| io_err(&p, e))?;
    }
    let cam = ds.camera();
    let all: Vec<&(String, Pose)> = ds.scene.db_poses.iter().chain(&ds.scene.query_poses).collect();
    let p = dir.join(layout::CAMERAS);
    lists::write_cameras(&p, all.iter().map(|(id, _)| (id.as_str(), cam))).map_err(|e| io_err(&p, e))?;
    let p = dir.join(layout::DB_POSES);
    lists::write_poses(&p, ds.scene.db_poses.iter().map(|(id, pose)| (id.as_str(), pose)))
        .map_err(|e| io_err(&p, e))?;
    let p = dir.join(layout::QUERY_POSES);
    lists::write_poses(&p, ds.scene.query_poses.iter().map(|(id, pose)| (id.as_str(), pose)))
        .map_err(|e| io_err(&p, e))?;
    let p = dir.join(layout::QUERIES);
    let q: String = ds.scene.query_poses.iter().map(|(id, _)| format!("{id}\n")).collect();
    fs::write(&p, q).map_err(|e| io_err(&p, e))?;
    let gt = GroundTruthObservations {
        images: ds
            .db_views
            .iter()
            .chain(&ds.query_views)
            .map(|v| (v.features.image_id.clone(), v.observations.clone()))
            .collect(),
        points: ds.scene.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
    };
    let p = dir.join(layout::GT_OBSERVATIONS);
    fs::write(&p, serde_json::to_vec(&gt).map_err(|e| io_err(&p, e))?).map_err(|e| io_err(&p, e))?;
    let p = dir.join(layout::SPEC);
    fs::write(
        &p,
        serde_json::to_vec_pretty(&ds.scene.spec).map_err(|e| io_err(&p, e))?,
    )
    .map_err(|e| io_err(&p, e))?;
    Ok(())
}
