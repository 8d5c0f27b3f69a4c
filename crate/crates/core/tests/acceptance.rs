//! Acceptance suite. All criteria run from one test so their timings do not
//! compete with each other; each prints one PASS/FAIL line and the test
//! fails if any criterion does.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::Write as _;
use std::time::Instant;

use hfloc_core::distill::{
    gradient_check, loss_components, multitask_loss_grad, random_batch, BatchShape, TaskWeights,
};
use hfloc_core::evalbench::{
    descriptor_metrics, keypoint_metrics, localization_recall, GroundTruth, PoseOutcome, ThresholdTriple,
};
use hfloc_core::features::{normalize_rows, Keypoint, LocalFeatureSet};
use hfloc_core::geometry::{project, Camera, Homography, Pose};
use hfloc_core::mapstore::{
    self, build_map, covisibility_places, exhaustive_pairs, map_stats, BuildConfig, DbImage, MapMeta, Observation,
    Point3D, SparseMap,
};
use hfloc_core::matching::{match_ratio, nearest_two};
use hfloc_core::pose::{pnp_ransac, pose_error, Correspondence2d3d, PoseEstimate, RansacConfig};
use hfloc_core::retrieval::fit_pca;
use hfloc_core::synth::{generate_dataset, write_dataset, SceneSpec};
use hfloc_core::{features, Localizer, LocalizerConfig};
use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Runs `f` on one worker thread.
fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Features, poses, cameras and pairs for building a map of the database views.
type DbInputs = (
    Vec<LocalFeatureSet>,
    HashMap<String, Pose>,
    HashMap<String, Camera>,
    Vec<(String, String)>,
);

type Criterion = (&'static str, fn() -> Outcome);

fn db_inputs(ds: &hfloc_core::synth::Dataset) -> DbInputs {
    let ids: Vec<String> = ds.scene.db_poses.iter().map(|(id, _)| id.clone()).collect();
    let poses = ds.scene.db_poses.iter().cloned().collect();
    let cams = ids.iter().map(|id| (id.clone(), *ds.camera())).collect();
    let feats = ds.db_views.iter().map(|v| v.features.clone()).collect();
    (feats, poses, cams, exhaustive_pairs(&ids))
}

fn pipeline_closure() -> Outcome {
    let spec = SceneSpec {
        num_points: 2000,
        num_db: 20,
        num_query: 10,
        pixel_noise: 0.0,
        outlier_fraction: 0.0,
        seed: 1,
        ..Default::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let feat_dir = dir.path().join("features");
    let map_path = dir.path().join("map.hfnm");

    let (elapsed, results) = single_threaded(|| {
        let start = Instant::now();
        let ids: Vec<String> = ds.scene.db_poses.iter().map(|(id, _)| id.clone()).collect();
        let feats: Vec<LocalFeatureSet> = ids
            .iter()
            .map(|id| features::io::read(features::io::path_for(&feat_dir, id)).unwrap())
            .collect();
        let poses: HashMap<String, Pose> = ds.scene.db_poses.iter().cloned().collect();
        let cams: HashMap<String, Camera> = ids.iter().map(|id| (id.clone(), *ds.camera())).collect();
        let (map, _) = build_map(feats, &poses, &cams, &exhaustive_pairs(&ids), &BuildConfig::default()).unwrap();
        mapstore::io::save(&map, &map_path).unwrap();

        let map = mapstore::io::load(&map_path).unwrap();
        let loc = Localizer::new(map, LocalizerConfig::default()).unwrap();
        let queries: Vec<(LocalFeatureSet, Camera)> = ds
            .scene
            .query_poses
            .iter()
            .map(|(id, _)| {
                (
                    features::io::read(features::io::path_for(&feat_dir, id)).unwrap(),
                    *ds.camera(),
                )
            })
            .collect();
        let results: Vec<_> = loc.localize_batch(&queries).into_iter().map(Result::unwrap).collect();
        (start.elapsed().as_secs_f64(), results)
    });

    let mut ok = 0;
    let (mut worst_pos, mut worst_rot) = (0.0f64, 0.0f64);
    for (r, (_, truth)) in results.iter().zip(&ds.scene.query_poses) {
        if !r.success() {
            continue;
        }
        let (pos, rot) = pose_error(r.pose(), truth);
        worst_pos = worst_pos.max(pos);
        worst_rot = worst_rot.max(rot);
        if pos < 1e-4 && rot < 0.01 {
            ok += 1;
        }
    }
    outcome(
        ok == 10 && elapsed < 10.0,
        format!("{ok}/10 localized, worst {worst_pos:.2e} m / {worst_rot:.2e} deg, {elapsed:.2} s single-threaded"),
    )
}

fn robust_regime() -> Outcome {
    let cfg = LocalizerConfig {
        ransac: RansacConfig {
            reproj_px: 5.0,
            min_inliers: 12,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut total = 0;
    let mut worst_seed = usize::MAX;
    for seed in 0..20u64 {
        let spec = SceneSpec {
            pixel_noise: 1.0,
            outlier_fraction: 0.3,
            seed,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let (feats, poses, cams, pairs) = db_inputs(&ds);
        let (map, _) = build_map(feats, &poses, &cams, &pairs, &BuildConfig::default()).unwrap();
        let loc = Localizer::new(map, cfg).unwrap();
        let queries: Vec<(LocalFeatureSet, Camera)> = ds
            .query_views
            .iter()
            .map(|v| (v.features.clone(), *ds.camera()))
            .collect();
        let ok = loc
            .localize_batch(&queries)
            .into_iter()
            .zip(&ds.scene.query_poses)
            .filter(|(r, (_, truth))| {
                let r = r.as_ref().unwrap();
                r.success() && pose_error(r.pose(), truth).0 < 0.05
            })
            .count();
        total += ok;
        worst_seed = worst_seed.min(ok);
    }
    outcome(
        worst_seed >= 9 && total >= 190,
        format!("{total}/200 trials within 0.05 m, worst seed {worst_seed}/10"),
    )
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> DMatrix<f32> {
    let mut m = DMatrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0f32..1.0));
    normalize_rows(&mut m);
    m
}

/// Double-loop ratio test. With `ids`, a runner-up on the same point as the
/// best target never rejects the match.
fn ratio_oracle(q: &DMatrix<f32>, t: &DMatrix<f32>, ids: Option<&[u32]>, ratio: f64) -> Vec<(usize, usize)> {
    let dist = |i: usize, j: usize| -> f64 {
        (0..q.ncols())
            .map(|k| {
                let d = q[(i, k)] as f64 - t[(j, k)] as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Vec::new();
    for i in 0..q.nrows() {
        let mut all: Vec<(f64, usize)> = (0..t.nrows()).map(|j| (dist(i, j), j)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some(&(d1, j1)) = all.first() else { continue };
        let accept = match all.get(1) {
            None => true,
            Some(&(d2, j2)) => ids.is_some_and(|ids| ids[j1] == ids[j2]) || d1 / d2 < ratio,
        };
        if accept {
            out.push((i, j1));
        }
    }
    out
}

fn modified_ratio_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let (mut plain_total, mut modified_total) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..80);
        let dim = rng.random_range(2..24);
        let ratio = rng.random_range(0.5..1.0);
        let q = unit_rows(&mut rng, n, dim);
        let t = unit_rows(&mut rng, m, dim);
        let points = rng.random_range(1..=m as u32);
        let ids: Vec<u32> = (0..m).map(|_| rng.random_range(0..points)).collect();
        let pairs = |s: hfloc_core::matching::MatchSet| -> Vec<(usize, usize)> {
            s.matches.iter().map(|x| (x.query, x.target)).collect()
        };
        let plain = pairs(match_ratio(&q, &t, None, ratio).unwrap());
        let modified = pairs(match_ratio(&q, &t, Some(&ids), ratio).unwrap());
        plain_total += plain.len();
        modified_total += modified.len();
        let superset = plain.iter().all(|p| modified.contains(p));
        if !superset
            || plain != ratio_oracle(&q, &t, None, ratio)
            || modified != ratio_oracle(&q, &t, Some(&ids), ratio)
        {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{failures} failing instances of 1000; {plain_total} plain vs {modified_total} modified matches"),
    )
}

fn feature_set(id: &str, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> LocalFeatureSet {
    let kps = (0..n)
        .map(|_| {
            Keypoint::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    let desc = unit_rows(rng, n, dim);
    let global = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    LocalFeatureSet::new(id, kps, desc, global).unwrap()
}

fn camera() -> Camera {
    Camera::new(640, 480, 500.0, 500.0, 320.0, 240.0, None).unwrap()
}

/// A map over `n_images` images whose points carry the given tracks of
/// (image, keypoint) pairs.
fn map_from_tracks(mut images: Vec<DbImage>, tracks: &[Vec<(u32, u32)>]) -> SparseMap {
    let mut points = Vec::new();
    for (pid, track) in tracks.iter().enumerate() {
        for &(im, kp) in track {
            images[im as usize].observations[kp as usize] = Some(pid as u32);
        }
        points.push(Point3D {
            id: pid as u32,
            position: Vector3::new(pid as f64, 0.5, 2.0),
            track: track
                .iter()
                .map(|&(image, keypoint)| Observation { image, keypoint })
                .collect(),
            descriptor: vec![1.0, 0.0, 0.0, 0.0],
        });
    }
    SparseMap::new(images, points, None, MapMeta::default()).unwrap()
}

fn db_image(id: &str, n: usize, rng: &mut ChaCha8Rng) -> DbImage {
    DbImage {
        image_id: id.into(),
        camera: camera(),
        pose: Pose::identity(),
        features: feature_set(id, n, 4, rng),
        observations: vec![None; n],
    }
}

/// Random bipartite image-point graph; each point is seen by a random subset
/// of at least two images through a fresh keypoint.
fn random_graph(rng: &mut ChaCha8Rng) -> SparseMap {
    let n_images = rng.random_range(2..14);
    let n_points = rng.random_range(0..30);
    let mut tracks = Vec::new();
    let mut used = vec![0u32; n_images];
    let p_obs = rng.random_range(0.05..0.4);
    for _ in 0..n_points {
        let mut seen: Vec<u32> = (0..n_images as u32).filter(|_| rng.random_bool(p_obs)).collect();
        if seen.len() < 2 {
            let a = rng.random_range(0..n_images as u32);
            let b = (a + rng.random_range(1..n_images as u32)) % n_images as u32;
            seen = vec![a.min(b), a.max(b)];
        }
        tracks.push(
            seen.iter()
                .map(|&im| {
                    used[im as usize] += 1;
                    (im, used[im as usize] - 1)
                })
                .collect::<Vec<_>>(),
        );
    }
    let images = (0..n_images)
        .map(|i| db_image(&format!("im{i:02}"), used[i] as usize + 1, rng))
        .collect();
    map_from_tracks(images, &tracks)
}

/// Connected components of the "shares a point" relation, by breadth-first search.
fn bfs_partition(map: &SparseMap, frames: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let seen_by: Vec<BTreeSet<u32>> = frames
        .iter()
        .map(|&f| {
            map.points()
                .iter()
                .filter(|p| p.track.iter().any(|o| o.image as usize == f))
                .map(|p| p.id)
                .collect()
        })
        .collect();
    let mut visited = vec![false; frames.len()];
    let mut out = BTreeSet::new();
    for s in 0..frames.len() {
        if visited[s] {
            continue;
        }
        visited[s] = true;
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            comp.insert(frames[u]);
            for v in 0..frames.len() {
                if !visited[v] && !seen_by[u].is_disjoint(&seen_by[v]) {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for _ in 0..500 {
        let map = random_graph(&mut rng);
        let n = map.images().len();
        let frames: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        let priors: Vec<(String, f64)> = frames
            .iter()
            .map(|&f| (map.images()[f].image_id.clone(), rng.random_range(0.0..1.0)))
            .collect();
        let places = covisibility_places(&map, &priors, 1).unwrap();
        let got: BTreeSet<BTreeSet<usize>> = places.iter().map(|p| p.images.iter().copied().collect()).collect();
        if got != bfs_partition(&map, &frames) || places.iter().map(|p| p.images.len()).sum::<usize>() != frames.len() {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} mismatching partitions of 500"))
}

fn gradient_check_criterion() -> Outcome {
    let report = gradient_check(5, 100, BatchShape::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_stationary = 0.0f64;
    for _ in 0..100 {
        let b = random_batch(&mut rng, BatchShape::default());
        let c = loss_components(&b).unwrap();
        let w = TaskWeights::new(
            c.r_global.ln(),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        worst_stationary = worst_stationary.max(multitask_loss_grad(&b, &w).unwrap().w1.abs());
    }
    outcome(
        report.max_relative_error < 1e-5 && worst_stationary <= 1e-8,
        format!(
            "max relative error {:.2e} over {} batches ({} components); |dL/dw1| at ln r_g up to {:.2e}",
            report.max_relative_error, report.trials, report.components, worst_stationary
        ),
    )
}

/// Outcome with the given position error (m) and rotation (deg) about z.
fn recall_row(id: &str, pos_err: f64, rot_deg: f64, success: bool) -> (PoseOutcome, (String, Pose)) {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rot_deg.to_radians());
    let est = Pose::new(rot, -(rot * Vector3::new(pos_err, 0.0, 0.0)));
    (
        PoseOutcome {
            image_id: id.into(),
            success,
            pose: est,
        },
        (id.into(), Pose::identity()),
    )
}

/// Exhaustive AP: every distance is tried as a threshold, and each correct
/// match contributes the best precision at any threshold covering it.
fn ap_oracle(m: &[(f64, bool)]) -> f64 {
    let total = m.iter().filter(|x| x.1).count();
    if total == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (d, c) in m {
        if !c {
            continue;
        }
        let mut best: f64 = 0.0;
        for (t, _) in m {
            if t < d {
                continue;
            }
            let kept: Vec<_> = m.iter().filter(|x| x.0 <= *t).collect();
            best = best.max(kept.iter().filter(|x| x.1).count() as f64 / kept.len() as f64);
        }
        s += best;
    }
    s / total as f64
}

/// Nearest neighbors of the visible source keypoints by a double loop, as
/// `(distance, correct)`.
fn nn_oracle(
    src: &LocalFeatureSet,
    dst: &LocalFeatureSet,
    warp: impl Fn(&Vector2<f64>) -> Option<Vector2<f64>>,
    eps: f64,
) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for (i, k) in src.keypoints.iter().enumerate() {
        let Some(w) = warp(&k.pt()) else { continue };
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..dst.len() {
            let d = (0..src.descriptor_dim())
                .map(|c| (src.descriptors[(i, c)] as f64 - dst.descriptors[(j, c)] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if d < best.0 {
                best = (d, j);
            }
        }
        if best.1 != usize::MAX {
            out.push((best.0, (dst.keypoints[best.1].pt() - w).norm() <= eps));
        }
    }
    out
}

fn metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let identity = GroundTruth::Homography {
        homography: Homography::identity(),
        size_a: (640, 480),
        size_b: (640, 480),
    };
    let kps = feature_set("a", 200, 4, &mut rng).keypoints;
    let km = keypoint_metrics(&kps, &kps, &identity, 3.0).unwrap();
    let identity_ok = km.repeatability == 1.0 && km.mle == Some(0.0);

    let rows = [
        recall_row("a", 0.1, 1.0, true),
        recall_row("b", 0.4, 4.0, true),
        recall_row("c", 2.0, 8.0, true),
        recall_row("d", 0.0, 0.0, false),
    ];
    let results: Vec<PoseOutcome> = rows.iter().map(|r| r.0.clone()).collect();
    let gt: HashMap<String, Pose> = rows.iter().map(|r| r.1.clone()).collect();
    let recall = localization_recall(&results, &gt, &ThresholdTriple::default()).unwrap();
    let recall_ok = recall == [25.0, 50.0, 75.0];

    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut worst_map = 0.0f64;
    for _ in 0..100 {
        let m = Matrix3::new(
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-20.0..20.0),
            rng.random_range(-0.1..0.1),
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(-20.0..20.0),
            rng.random_range(-1e-4..1e-4),
            rng.random_range(-1e-4..1e-4),
            1.0,
        );
        let h = Homography::new(m).unwrap();
        let n = rng.random_range(20..120);
        let fa = feature_set("a", n, 16, &mut rng);
        let kps_b = fa
            .keypoints
            .iter()
            .map(|k| {
                let p = h.apply(&k.pt()).unwrap();
                Keypoint::new(
                    p.x + rng.random_range(-2.0..2.0),
                    p.y + rng.random_range(-2.0..2.0),
                    k.score,
                )
            })
            .collect();
        let mut db = fa.descriptors.map(|v| v + noise.sample(&mut rng) as f32);
        normalize_rows(&mut db);
        let fb = LocalFeatureSet::new("b", kps_b, db, vec![]).unwrap();
        let gt = GroundTruth::Homography {
            homography: h,
            size_a: (640, 480),
            size_b: (640, 480),
        };
        let got = descriptor_metrics(&fa, &fb, &gt, 1.5).unwrap().map;
        let hinv = h.inverse().unwrap();
        let inside = |p: Vector2<f64>| (p.x >= 0.0 && p.y >= 0.0 && p.x < 640.0 && p.y < 480.0).then_some(p);
        let ab = nn_oracle(&fa, &fb, |p| h.apply(p).ok().and_then(inside), 1.5);
        let ba = nn_oracle(&fb, &fa, |p| hinv.apply(p).ok().and_then(inside), 1.5);
        let want = match (ab.is_empty(), ba.is_empty()) {
            (false, false) => (ap_oracle(&ab) + ap_oracle(&ba)) / 2.0,
            (false, true) => ap_oracle(&ab),
            (true, false) => ap_oracle(&ba),
            (true, true) => 0.0,
        };
        worst_map = worst_map.max((got - want).abs());
    }
    outcome(
        identity_ok && recall_ok && worst_map < 1e-6,
        format!(
            "identity repeatability {} / MLE {:?}; recall {:?}; max mAP deviation {worst_map:.1e} over 100 pairs",
            km.repeatability, km.mle, recall
        ),
    )
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let rot = UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI));
    Pose::new(
        rot,
        Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
    )
}

/// `n` points in front of the camera with their projections.
fn visible_points(rng: &mut ChaCha8Rng, pose: &Pose, cam: &Camera, n: usize) -> Vec<Correspondence2d3d> {
    let inv = pose.inverse();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(2.0..10.0),
        );
        let w = inv.transform(&c);
        if let Ok(px) = project(pose, cam, &w) {
            if cam.contains(&px) {
                out.push((px, w));
            }
        }
    }
    out
}

fn same_bits(a: &PoseEstimate, b: &PoseEstimate) -> bool {
    let bits = |e: &PoseEstimate| -> Vec<u64> {
        e.pose
            .wxyz()
            .iter()
            .chain(e.pose.translation.iter())
            .chain([e.mean_residual].iter())
            .map(|v| v.to_bits())
            .collect()
    };
    bits(a) == bits(b)
        && a.inliers == b.inliers
        && a.num_inliers == b.num_inliers
        && a.success == b.success
        && a.iterations == b.iterations
}

fn ransac_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cam = camera();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut deterministic = true;
    for seed in 0..50 {
        let pose = random_pose(&mut rng);
        let mut corr = visible_points(&mut rng, &pose, &cam, 100);
        for (i, c) in corr.iter_mut().enumerate() {
            if i % 3 == 0 {
                c.0 = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            } else {
                c.0 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        let cfg = RansacConfig {
            reproj_px: 5.0,
            seed,
            ..Default::default()
        };
        deterministic &= same_bits(
            &pnp_ransac(&cam, &corr, &cfg).unwrap(),
            &pnp_ransac(&cam, &corr, &cfg).unwrap(),
        );
    }
    let mut exact = 0;
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let pose = random_pose(&mut rng);
        let corr = visible_points(&mut rng, &pose, &cam, 100);
        let est = pnp_ransac(
            &cam,
            &corr,
            &RansacConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let (pos, rot) = pose_error(&est.pose, &pose);
        let err = (est.pose.translation - pose.translation)
            .norm()
            .max(pos)
            .max(rot.to_radians());
        worst = worst.max(err);
        if est.success && err < 1e-6 {
            exact += 1;
        }
    }
    outcome(
        deterministic && exact == 1000,
        format!(
            "repeat runs bit-identical: {deterministic}; {exact}/1000 noiseless trials within 1e-6 (worst {worst:.1e})"
        ),
    )
}

fn map_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tracks = [vec![(0, 0), (1, 0)], vec![(0, 1), (1, 2)], vec![(0, 3), (1, 4)]];
    let fixture = map_from_tracks(vec![db_image("a", 5, &mut rng), db_image("b", 5, &mut rng)], &tracks);
    let s = map_stats(&fixture).unwrap();
    let exact =
        s.num_points == 3 && s.keypoints_per_image == 5.0 && s.matched_keypoint_ratio == 0.6 && s.track_length == 2.0;
    let grown = map_from_tracks(vec![db_image("a", 6, &mut rng), db_image("b", 5, &mut rng)], &tracks);
    let after = map_stats(&grown).unwrap().matched_keypoint_ratio;
    outcome(
        exact && after < s.matched_keypoint_ratio,
        format!(
            "({}, {}, {}, {}); one more unmatched keypoint: ratio {} -> {after:.4}",
            s.num_points, s.keypoints_per_image, s.matched_keypoint_ratio, s.track_length, s.matched_keypoint_ratio
        ),
    )
}

fn performance_smoke() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = unit_rows(&mut rng, 2000, 256);
    let t = unit_rows(&mut rng, 100_000, 256);
    let (secs, found) = single_threaded(|| {
        let start = Instant::now();
        let nn = nearest_two(&q, &t).unwrap();
        (start.elapsed().as_secs_f64(), nn.iter().filter(|n| n.is_some()).count())
    });

    let spec = SceneSpec {
        num_points: 500,
        num_db: 8,
        num_query: 5,
        seed: 2,
        ..Default::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let (feats, poses, cams, pairs) = db_inputs(&ds);
    let (map, _) = build_map(feats, &poses, &cams, &pairs, &BuildConfig::default()).unwrap();
    let loc = Localizer::new(map, LocalizerConfig::default()).unwrap();
    let mut worst_gap = 0.0f64;
    for v in &ds.query_views {
        let r = loc.localize(&v.features, ds.camera()).unwrap();
        worst_gap = worst_gap.max((r.timings.total - r.timings.stage_sum()).abs());
    }
    outcome(
        secs < 2.0 && found == 2000 && worst_gap <= 1.0,
        format!("2000 x 100000 (D=256) in {secs:.3} s single-threaded; stage sum within {worst_gap:.3} ms of total"),
    )
}

fn random_map(rng: &mut ChaCha8Rng) -> SparseMap {
    let mut map = random_graph(rng);
    let images: Vec<DbImage> = map
        .images()
        .iter()
        .map(|img| {
            let mut img = img.clone();
            img.pose = random_pose(rng);
            let (w, h) = (rng.random_range(100..2000), rng.random_range(100..2000));
            img.camera = Camera::new(
                w,
                h,
                rng.random_range(100.0..1000.0),
                rng.random_range(100.0..1000.0),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_bool(0.5).then(|| rng.random_range(-0.2..0.2)),
            )
            .unwrap();
            img
        })
        .collect();
    let points: Vec<Point3D> = map
        .points()
        .iter()
        .map(|p| Point3D {
            position: Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ),
            descriptor: (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            ..p.clone()
        })
        .collect();
    let meta = MapMeta {
        frame: format!("frame{}", rng.random_range(0..100)),
        scale: rng.random_range(0.1..10.0),
    };
    map = SparseMap::new(images, points, None, meta).unwrap();
    if rng.random_bool(0.5) {
        let rows = rng.random_range(3..10);
        let data = DMatrix::from_fn(rows, 8, |_, _| rng.random_range(-1.0..1.0));
        let k = rng.random_range(1..rows.min(8));
        map = map.with_pca(Some(fit_pca(&data, k).unwrap()));
    }
    map
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut round_trips, mut rejected, mut corrupted) = (0, 0, 0);
    for _ in 0..1000 {
        let map = random_map(&mut rng);
        let bytes = mapstore::io::encode(&map);
        if let Ok(back) = mapstore::io::decode(&bytes) {
            if back == map && mapstore::io::encode(&back) == bytes {
                round_trips += 1;
            }
        }
        for _ in 0..3 {
            let mut bad = bytes.clone();
            match rng.random_range(0..3) {
                0 => {
                    let i = rng.random_range(0..bad.len());
                    bad[i] ^= 1 << rng.random_range(0..8);
                }
                1 => {
                    let i = rng.random_range(0..bad.len());
                    bad[i] = bad[i].wrapping_add(rng.random_range(1..=255));
                    let j = rng.random_range(0..bad.len());
                    bad[j] ^= 0x80;
                    if bad == bytes {
                        bad[i] ^= 1;
                    }
                }
                _ => bad.truncate(rng.random_range(0..bad.len())),
            }
            corrupted += 1;
            rejected += mapstore::io::decode(&bad).is_err() as usize;
        }
    }
    outcome(
        round_trips == 1000 && rejected == corrupted,
        format!("{round_trips}/1000 bit-exact round trips; {rejected}/{corrupted} corrupted files rejected"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("pipeline closure", pipeline_closure),
        ("robust regime", robust_regime),
        ("modified ratio test", modified_ratio_property),
        ("covisibility clustering", clustering_oracle),
        ("loss gradient check", gradient_check_criterion),
        ("metric suite sanity", metric_sanity),
        ("RANSAC determinism and exactness", ransac_determinism),
        ("map statistics", map_statistics),
        ("performance smoke", performance_smoke),
        ("serialization", serialization),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        // Written to the stderr handle, which the test harness does not
        // capture, so the lines show up without `--nocapture`.
        writeln!(
            std::io::stderr(),
            "{} criterion {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        )
        .unwrap();
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
