//! Sparse 3D map: database images with reference poses, triangulated
//! points with their tracks, and the image-point covisibility graph.

mod build;
pub mod io;
pub mod lists;

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use thiserror::Error;

use crate::features::LocalFeatureSet;
use crate::geometry::{Camera, Pose};
use crate::retrieval::PcaModel;

pub use build::{build_map, exhaustive_pairs, BuildConfig, BuildSummary};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("no reference pose for image '{0}'")]
    MissingPose(String),
    #[error("no features for image '{0}'")]
    MissingFeatures(String),
    #[error("no camera for image '{0}'")]
    MissingCamera(String),
    #[error("image '{0}' is not in the map")]
    UnknownImage(String),
    #[error("map is empty")]
    EmptyMap,
    #[error("map integrity violated: {0}")]
    Integrity(String),
    #[error("unsupported map version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt map file: {0}")]
    CorruptFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Matching(#[from] crate::matching::MatchError),
}

/// One observation of a 3D point: keypoint `keypoint` of image `image`
/// (index into [`SparseMap::images`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub image: u32,
    pub keypoint: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbImage {
    pub image_id: String,
    pub camera: Camera,
    pub pose: Pose,
    pub features: LocalFeatureSet,
    /// Point observed by each keypoint, if any.
    pub observations: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: u32,
    pub position: Vector3<f64>,
    pub track: Vec<Observation>,
    /// Normalized mean of the observing keypoints' descriptors.
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapMeta {
    /// Name of the reference frame the poses are expressed in.
    pub frame: String,
    /// Meters per map unit.
    pub scale: f64,
}

impl Default for MapMeta {
    fn default() -> Self {
        Self {
            frame: "world".into(),
            scale: 1.0,
        }
    }
}

/// Immutable sparse map. Point ids equal their index in [`SparseMap::points`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    images: Vec<DbImage>,
    points: Vec<Point3D>,
    /// Sorted point ids seen by each image.
    covisibility: Vec<Vec<u32>>,
    pca: Option<PcaModel>,
    meta: MapMeta,
    lookup: HashMap<String, u32>,
}

impl SparseMap {
    /// Assembles a map, checking referential integrity in both directions.
    pub fn new(
        images: Vec<DbImage>,
        points: Vec<Point3D>,
        pca: Option<PcaModel>,
        meta: MapMeta,
    ) -> Result<Self, MapError> {
        let mut lookup = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if lookup.insert(img.image_id.clone(), i as u32).is_some() {
                return Err(MapError::Integrity(format!("duplicate image id '{}'", img.image_id)));
            }
            if img.observations.len() != img.features.len() {
                return Err(MapError::Integrity(format!(
                    "image '{}' has {} keypoints but {} observation slots",
                    img.image_id,
                    img.features.len(),
                    img.observations.len()
                )));
            }
        }
        let mut covisibility = vec![Vec::new(); images.len()];
        for (i, p) in points.iter().enumerate() {
            if p.id as usize != i {
                return Err(MapError::Integrity(format!("point at index {i} has id {}", p.id)));
            }
            if p.track.len() < 2 {
                return Err(MapError::Integrity(format!(
                    "point {} has track length {}",
                    p.id,
                    p.track.len()
                )));
            }
            for obs in &p.track {
                let img = images.get(obs.image as usize).ok_or_else(|| {
                    MapError::Integrity(format!("point {} observed by unknown image {}", p.id, obs.image))
                })?;
                if img.observations.get(obs.keypoint as usize).copied().flatten() != Some(p.id) {
                    return Err(MapError::Integrity(format!(
                        "point {} track entry ({}, {}) not mirrored by the image",
                        p.id, img.image_id, obs.keypoint
                    )));
                }
                covisibility[obs.image as usize].push(p.id);
            }
        }
        for (i, img) in images.iter().enumerate() {
            for (k, obs) in img.observations.iter().enumerate() {
                if let Some(pid) = obs {
                    let ok = points.get(*pid as usize).is_some_and(|p| {
                        p.track.contains(&Observation {
                            image: i as u32,
                            keypoint: k as u32,
                        })
                    });
                    if !ok {
                        return Err(MapError::Integrity(format!(
                            "image '{}' keypoint {k} claims point {pid} which does not list it",
                            img.image_id
                        )));
                    }
                }
            }
        }
        for c in &mut covisibility {
            c.sort_unstable();
            c.dedup();
        }
        Ok(Self {
            images,
            points,
            covisibility,
            pca,
            meta,
            lookup,
        })
    }

    pub fn images(&self) -> &[DbImage] {
        &self.images
    }

    pub fn points(&self) -> &[Point3D] {
        &self.points
    }

    pub fn point(&self, id: u32) -> Option<&Point3D> {
        self.points.get(id as usize)
    }

    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.lookup.get(image_id).map(|&i| i as usize)
    }

    /// Sorted ids of the points seen by image `index`.
    pub fn covisible_points(&self, index: usize) -> &[u32] {
        &self.covisibility[index]
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }

    pub fn meta(&self) -> &MapMeta {
        &self.meta
    }

    pub fn with_pca(mut self, pca: Option<PcaModel>) -> Self {
        self.pca = pca;
        self
    }
}

/// A connected group of prior frames and the points they observe.
#[derive(Debug, Clone, PartialEq)]
pub struct Place {
    /// Indices into [`SparseMap::images`], by descending retrieval score.
    pub images: Vec<usize>,
    pub image_ids: Vec<String>,
    /// Sorted, unique point ids.
    pub points: Vec<u32>,
    /// Sum of the members' retrieval scores.
    pub score: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Clusters prior frames into places: connected components of the graph
/// where two frames are adjacent iff they co-observe at least `min_shared`
/// points.
///
/// `priors` pairs each frame with its retrieval score; duplicate frames keep
/// their first score. Places are ordered by descending total score, ties by
/// smallest member image id.
pub fn covisibility_places(
    map: &SparseMap,
    priors: &[(String, f64)],
    min_shared: usize,
) -> Result<Vec<Place>, MapError> {
    let mut frames: Vec<(usize, f64)> = Vec::with_capacity(priors.len());
    for (id, score) in priors {
        let idx = map.image_index(id).ok_or_else(|| MapError::UnknownImage(id.clone()))?;
        if !frames.iter().any(|(i, _)| *i == idx) {
            frames.push((idx, *score));
        }
    }

    let n = frames.len();
    let mut parent: Vec<usize> = (0..n).collect();
    // shared[(a, b)] counts co-observed points between frames a < b.
    let mut by_point: HashMap<u32, Vec<usize>> = HashMap::new();
    for (f, (idx, _)) in frames.iter().enumerate() {
        for &pid in map.covisible_points(*idx) {
            by_point.entry(pid).or_default().push(f);
        }
    }
    let min_shared = min_shared.max(1);
    if min_shared == 1 {
        for observers in by_point.values() {
            for w in observers.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[a.max(b)] = a.min(b);
            }
        }
    } else {
        let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
        for observers in by_point.values() {
            for (i, &a) in observers.iter().enumerate() {
                for &b in &observers[i + 1..] {
                    *shared.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
        }
        let mut edges: Vec<(usize, usize)> = shared
            .into_iter()
            .filter(|(_, c)| *c >= min_shared)
            .map(|(e, _)| e)
            .collect();
        edges.sort_unstable();
        for (a, b) in edges {
            let (a, b) = (find(&mut parent, a), find(&mut parent, b));
            parent[a.max(b)] = a.min(b);
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for f in 0..n {
        let root = find(&mut parent, f);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(f);
    }

    let mut places: Vec<Place> = groups
        .into_iter()
        .map(|mut members| {
            members.sort_by(|&a, &b| {
                frames[b]
                    .1
                    .total_cmp(&frames[a].1)
                    .then_with(|| map.images[frames[a].0].image_id.cmp(&map.images[frames[b].0].image_id))
            });
            let images: Vec<usize> = members.iter().map(|&f| frames[f].0).collect();
            let points: BTreeSet<u32> = images
                .iter()
                .flat_map(|&i| map.covisible_points(i).iter().copied())
                .collect();
            Place {
                image_ids: images.iter().map(|&i| map.images[i].image_id.clone()).collect(),
                score: members.iter().map(|&f| frames[f].1).sum(),
                points: points.into_iter().collect(),
                images,
            }
        })
        .collect();
    places.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_ids.iter().min().cmp(&b.image_ids.iter().min()))
    });
    Ok(places)
}

/// Model-quality statistics of a map.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MapStats {
    pub num_points: usize,
    pub keypoints_per_image: f64,
    pub matched_keypoint_ratio: f64,
    pub track_length: f64,
}

pub fn map_stats(map: &SparseMap) -> Result<MapStats, MapError> {
    let total: usize = map.images.iter().map(|i| i.features.len()).sum();
    if map.images.is_empty() || total == 0 {
        return Err(MapError::EmptyMap);
    }
    let matched: usize = map
        .images
        .iter()
        .map(|i| i.observations.iter().filter(|o| o.is_some()).count())
        .sum();
    let track_total: usize = map.points.iter().map(|p| p.track.len()).sum();
    Ok(MapStats {
        num_points: map.points.len(),
        keypoints_per_image: total as f64 / map.images.len() as f64,
        matched_keypoint_ratio: matched as f64 / total as f64,
        track_length: if map.points.is_empty() {
            0.0
        } else {
            track_total as f64 / map.points.len() as f64
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::Keypoint;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn camera() -> Camera {
        Camera::new(640, 480, 500.0, 500.0, 320.0, 240.0, None).unwrap()
    }

    pub(crate) fn image(id: &str, n: usize) -> DbImage {
        let kps = (0..n).map(|i| Keypoint::new(i as f64 * 10.0, 5.0, 1.0)).collect();
        let desc = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { r as f32 * 0.0 });
        DbImage {
            image_id: id.into(),
            camera: camera(),
            pose: Pose::identity(),
            features: LocalFeatureSet::new(id, kps, desc, vec![1.0, 0.0]).unwrap(),
            observations: vec![None; n],
        }
    }

    /// Builds a consistent map from a list of tracks over `(image, keypoint)`.
    pub(crate) fn map_from_tracks(mut images: Vec<DbImage>, tracks: &[Vec<(u32, u32)>]) -> SparseMap {
        let mut points = Vec::new();
        for (pid, t) in tracks.iter().enumerate() {
            let track: Vec<Observation> = t
                .iter()
                .map(|&(image, keypoint)| Observation { image, keypoint })
                .collect();
            for o in &track {
                images[o.image as usize].observations[o.keypoint as usize] = Some(pid as u32);
            }
            points.push(Point3D {
                id: pid as u32,
                position: Vector3::new(pid as f64, 0.0, 5.0),
                track,
                descriptor: vec![1.0, 0.0],
            });
        }
        SparseMap::new(images, points, None, MapMeta::default()).unwrap()
    }

    /// 2 images x 5 keypoints, 3 points each seen twice.
    pub(crate) fn stats_fixture() -> SparseMap {
        map_from_tracks(
            vec![image("a", 5), image("b", 5)],
            &[vec![(0, 0), (1, 0)], vec![(0, 1), (1, 2)], vec![(0, 3), (1, 4)]],
        )
    }

    #[test]
    fn stats_fixture_values() {
        let s = map_stats(&stats_fixture()).unwrap();
        assert_eq!(s.num_points, 3);
        assert_eq!(s.keypoints_per_image, 5.0);
        assert_eq!(s.matched_keypoint_ratio, 0.6);
        assert_eq!(s.track_length, 2.0);
    }

    #[test]
    fn stats_all_matched_and_empty() {
        let m = map_from_tracks(
            vec![image("a", 2), image("b", 2)],
            &[vec![(0, 0), (1, 1)], vec![(0, 1), (1, 0)]],
        );
        assert_eq!(map_stats(&m).unwrap().matched_keypoint_ratio, 1.0);
        let empty = SparseMap::new(vec![], vec![], None, MapMeta::default()).unwrap();
        assert!(matches!(map_stats(&empty), Err(MapError::EmptyMap)));
    }

    #[test]
    fn matched_ratio_increases_when_unmatched_keypoint_removed() {
        let before = map_stats(&stats_fixture()).unwrap().matched_keypoint_ratio;
        // image b without its unmatched keypoint 3
        let mut b = image("b", 4);
        b.features.keypoints.remove(3);
        b.features.keypoints.push(Keypoint::new(1.0, 1.0, 1.0));
        let m = map_from_tracks(
            vec![image("a", 5), b],
            &[vec![(0, 0), (1, 0)], vec![(0, 1), (1, 2)], vec![(0, 3), (1, 3)]],
        );
        let after = map_stats(&m).unwrap().matched_keypoint_ratio;
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn integrity_violations_rejected() {
        let mut images = vec![image("a", 2), image("b", 2)];
        images[0].observations[0] = Some(0);
        let p = Point3D {
            id: 0,
            position: Vector3::zeros(),
            track: vec![
                Observation { image: 0, keypoint: 0 },
                Observation { image: 1, keypoint: 0 },
            ],
            descriptor: vec![1.0, 0.0],
        };
        // image b does not mirror the observation
        assert!(matches!(
            SparseMap::new(images.clone(), vec![p.clone()], None, MapMeta::default()),
            Err(MapError::Integrity(_))
        ));
        images[1].observations[0] = Some(0);
        assert!(SparseMap::new(images.clone(), vec![p.clone()], None, MapMeta::default()).is_ok());
        let short = Point3D {
            track: vec![Observation { image: 0, keypoint: 0 }],
            ..p
        };
        assert!(SparseMap::new(images, vec![short], None, MapMeta::default()).is_err());
    }

    fn priors(ids: &[&str]) -> Vec<(String, f64)> {
        ids.iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), 1.0 - i as f64 * 0.1))
            .collect()
    }

    #[test]
    fn places_examples() {
        let m = map_from_tracks(
            vec![image("A", 3), image("B", 3), image("C", 3), image("D", 3)],
            &[vec![(0, 0), (1, 0)], vec![(2, 0), (3, 0)]],
        );
        let one = covisibility_places(&m, &priors(&["A"]), 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].image_ids, vec!["A"]);

        let p = covisibility_places(&m, &priors(&["A", "B", "C"]), 1).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].image_ids, vec!["A", "B"]);
        assert_eq!(p[0].points, vec![0]);
        assert_eq!(p[1].image_ids, vec!["C"]);

        assert!(matches!(
            covisibility_places(&m, &priors(&["Z"]), 1),
            Err(MapError::UnknownImage(_))
        ));
    }

    #[test]
    fn places_order_by_score_then_id() {
        let m = map_from_tracks(vec![image("A", 1), image("B", 1), image("C", 1)], &[]);
        let p = covisibility_places(&m, &[("C".into(), 0.5), ("B".into(), 0.5), ("A".into(), 0.9)], 1).unwrap();
        let order: Vec<&str> = p.iter().map(|p| p.image_ids[0].as_str()).collect();
        assert_eq!(order, vec!["A", "B", "C"]);
    }

    #[test]
    fn places_min_shared_threshold() {
        let m = map_from_tracks(
            vec![image("A", 3), image("B", 3)],
            &[vec![(0, 0), (1, 0)], vec![(0, 1), (1, 1)]],
        );
        assert_eq!(covisibility_places(&m, &priors(&["A", "B"]), 2).unwrap().len(), 1);
        assert_eq!(covisibility_places(&m, &priors(&["A", "B"]), 3).unwrap().len(), 2);
    }

    /// Pairwise-intersection adjacency plus BFS.
    pub(crate) fn bfs_partition(map: &SparseMap, frames: &[usize]) -> Vec<BTreeSet<usize>> {
        let sets: Vec<BTreeSet<u32>> = frames
            .iter()
            .map(|&f| map.covisible_points(f).iter().copied().collect())
            .collect();
        let mut seen = vec![false; frames.len()];
        let mut out = Vec::new();
        for s in 0..frames.len() {
            if seen[s] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = std::collections::VecDeque::from([s]);
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                comp.insert(frames[u]);
                for v in 0..frames.len() {
                    if !seen[v] && sets[u].intersection(&sets[v]).next().is_some() {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    pub(crate) fn random_bipartite(rng: &mut ChaCha8Rng, n_images: usize, n_points: usize) -> SparseMap {
        let images: Vec<DbImage> = (0..n_images).map(|i| image(&format!("im{i:02}"), n_points)).collect();
        let tracks: Vec<Vec<(u32, u32)>> = (0..n_points)
            .filter_map(|p| {
                let t: Vec<(u32, u32)> = (0..n_images as u32)
                    .filter(|_| rng.random_bool(0.12))
                    .map(|i| (i, p as u32))
                    .collect();
                (t.len() >= 2).then_some(t)
            })
            .collect();
        map_from_tracks(images, &tracks)
    }

    #[test]
    fn places_match_bfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let m = random_bipartite(&mut rng, 14, 12);
            let frames: Vec<usize> = (0..14).filter(|_| rng.random_bool(0.7)).collect();
            let pri: Vec<(String, f64)> = frames
                .iter()
                .map(|&f| (m.images()[f].image_id.clone(), rng.random()))
                .collect();
            let places = covisibility_places(&m, &pri, 1).unwrap();
            let mut got: Vec<BTreeSet<usize>> = places.iter().map(|p| p.images.iter().copied().collect()).collect();
            let mut want = bfs_partition(&m, &frames);
            got.sort();
            want.sort();
            assert_eq!(got, want);
            assert!(places.windows(2).all(|w| w[0].score >= w[1].score));
            let all: BTreeSet<u32> = places.iter().flat_map(|p| p.points.iter().copied()).collect();
            assert!(all.iter().all(|&p| (p as usize) < m.points().len()));
        }
    }
}
