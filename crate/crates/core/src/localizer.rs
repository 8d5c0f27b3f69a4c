//! Coarse-to-fine localization: global retrieval, covisibility clustering,
//! per-place 2D-3D matching and PnP, stopping at the first valid pose.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::features::{nms_topk, LocalFeatureSet, DEFAULT_NMS_RADIUS};
use crate::geometry::{Camera, Pose};
use crate::mapstore::{covisibility_places, MapError, SparseMap};
use crate::matching::{self, assemble_2d3d, MatchError, TargetMode};
use crate::par;
use crate::pose::{pnp_ransac, PoseError, PoseEstimate, RansacConfig};
use crate::retrieval::{self, knn_retrieve, GlobalIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("map has no database images")]
    EmptyMap,
    #[error("global index is empty")]
    EmptyIndex,
    #[error("query '{id}': global descriptor has dimension {got}, expected {expected}")]
    GlobalDimension { id: String, expected: usize, got: usize },
    #[error("invalid localizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Matching(#[from] MatchError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    /// Prior frames retrieved per query.
    pub k_nn: usize,
    pub ratio: f64,
    pub nms_radius: f64,
    pub max_keypoints: usize,
    /// Minimum co-observed points for two priors to share a place.
    pub min_shared: usize,
    pub match_mode: TargetMode,
    pub ransac: RansacConfig,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            k_nn: retrieval::DEFAULT_KNN,
            ratio: matching::DEFAULT_RATIO,
            nms_radius: DEFAULT_NMS_RADIUS,
            max_keypoints: 2000,
            min_shared: 1,
            match_mode: TargetMode::default(),
            ransac: RansacConfig::default(),
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.k_nn == 0 {
            return Err(LocalizeError::InvalidConfig("k_nn must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(LocalizeError::InvalidConfig(format!(
                "ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if !(self.nms_radius >= 0.0) {
            return Err(LocalizeError::InvalidConfig(format!(
                "nms radius must be >= 0, got {}",
                self.nms_radius
            )));
        }
        if self.max_keypoints == 0 {
            return Err(LocalizeError::InvalidConfig("max keypoints must be positive".into()));
        }
        self.ransac.validate()?;
        Ok(())
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageTimings {
    pub feature_load: f64,
    pub global_search: f64,
    pub clustering: f64,
    pub local_matching: f64,
    pub pnp: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.feature_load + self.global_search + self.clustering + self.local_matching + self.pnp
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub image_id: String,
    pub estimate: PoseEstimate,
    /// Index of the place that produced the estimate.
    pub place_index: Option<usize>,
    /// Retrieved prior frames with similarities, best first.
    pub priors: Vec<(String, f64)>,
    pub num_places: usize,
    /// Places on which matching ran; later places are skipped after a success.
    pub places_matched: usize,
    pub num_correspondences: usize,
    pub timings: StageTimings,
}

impl LocalizationResult {
    pub fn success(&self) -> bool {
        self.estimate.success
    }

    pub fn pose(&self) -> &Pose {
        &self.estimate.pose
    }
}

fn failed_estimate() -> PoseEstimate {
    PoseEstimate {
        pose: Pose::identity(),
        inliers: Vec::new(),
        num_inliers: 0,
        mean_residual: 0.0,
        success: false,
        iterations: 0,
    }
}

/// A map with its global index, ready to localize queries.
#[derive(Debug, Clone)]
pub struct Localizer {
    map: SparseMap,
    index: GlobalIndex,
    cfg: LocalizerConfig,
}

fn unit_f64(v: &[f32]) -> Option<DVector<f64>> {
    let d = DVector::from_iterator(v.len(), v.iter().map(|x| *x as f64));
    let n = d.norm();
    (n > 1e-12).then(|| d / n)
}

impl Localizer {
    /// Indexes the database global descriptors with the map's PCA model, or
    /// by their normalized raw values when the map carries none.
    pub fn new(map: SparseMap, cfg: LocalizerConfig) -> Result<Self, LocalizeError> {
        cfg.validate()?;
        if map.images().is_empty() {
            return Err(LocalizeError::EmptyMap);
        }
        let ids: Vec<String> = map.images().iter().map(|i| i.image_id.clone()).collect();
        let index = match map.pca() {
            Some(pca) => {
                let entries: Vec<(String, Vec<f64>)> = map
                    .images()
                    .iter()
                    .map(|i| {
                        (
                            i.image_id.clone(),
                            i.features.global.iter().map(|v| *v as f64).collect(),
                        )
                    })
                    .collect();
                GlobalIndex::build(pca, &entries)?
            }
            None => {
                let g = map.images()[0].features.global.len();
                let mut rows = DMatrix::zeros(ids.len(), g);
                for (r, img) in map.images().iter().enumerate() {
                    if img.features.global.len() != g {
                        return Err(LocalizeError::GlobalDimension {
                            id: img.image_id.clone(),
                            expected: g,
                            got: img.features.global.len(),
                        });
                    }
                    if let Some(v) = unit_f64(&img.features.global) {
                        rows.set_row(r, &v.transpose());
                    }
                }
                GlobalIndex::from_rows(ids, rows)?
            }
        };
        if index.is_empty() {
            return Err(LocalizeError::EmptyIndex);
        }
        Ok(Self { map, index, cfg })
    }

    pub fn map(&self) -> &SparseMap {
        &self.map
    }

    pub fn index(&self) -> &GlobalIndex {
        &self.index
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: LocalizerConfig) -> Result<(), LocalizeError> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    fn reduce_query(&self, query: &LocalFeatureSet) -> Result<Option<DVector<f64>>, LocalizeError> {
        let expected = self.map.pca().map_or(self.index.dim(), |p| p.input_dim());
        if query.global.len() != expected {
            return Err(LocalizeError::GlobalDimension {
                id: query.image_id.clone(),
                expected,
                got: query.global.len(),
            });
        }
        let raw: Vec<f64> = query.global.iter().map(|v| *v as f64).collect();
        match self.map.pca() {
            Some(pca) => match retrieval::reduce(pca, &raw) {
                Ok(v) => Ok(Some(v)),
                Err(RetrievalError::ZeroVector) => Ok(None),
                Err(e) => Err(e.into()),
            },
            None => Ok(unit_f64(&query.global)),
        }
    }

    /// Localizes one query. A query that cannot be localized yields
    /// `success = false` with the attempt that had the most inliers.
    pub fn localize(&self, query: &LocalFeatureSet, camera: &Camera) -> Result<LocalizationResult, LocalizeError> {
        let start = Instant::now();
        let mut t = StageTimings::default();
        let cfg = &self.cfg;

        let stage = Instant::now();
        let keep = nms_topk(&query.keypoints, cfg.nms_radius, cfg.max_keypoints);
        let local = if keep.len() == query.len() {
            query.clone()
        } else {
            let mut sorted = keep;
            sorted.sort_unstable();
            query.select(&sorted)
        };
        t.feature_load = ms(stage);

        let stage = Instant::now();
        let priors: Vec<(String, f64)> = match self.reduce_query(query)? {
            Some(q) => knn_retrieve(&self.index, &q, cfg.k_nn)?
                .into_iter()
                .map(|n| (n.image_id, n.similarity))
                .collect(),
            None => Vec::new(),
        };
        t.global_search = ms(stage);

        let stage = Instant::now();
        let places = covisibility_places(&self.map, &priors, cfg.min_shared)?;
        t.clustering = ms(stage);

        let mut result = LocalizationResult {
            image_id: query.image_id.clone(),
            estimate: failed_estimate(),
            place_index: None,
            priors,
            num_places: places.len(),
            places_matched: 0,
            num_correspondences: 0,
            timings: t,
        };
        let mut best: Option<(PoseEstimate, usize, usize)> = None;
        for (pi, place) in places.iter().enumerate() {
            if place.points.is_empty() {
                continue;
            }
            let stage = Instant::now();
            let corr = assemble_2d3d(&local, place, &self.map, cfg.ratio, cfg.match_mode)?;
            result.timings.local_matching += ms(stage);
            result.places_matched += 1;
            if corr.len() < 4 {
                continue;
            }
            let stage = Instant::now();
            let pairs: Vec<_> = corr.iter().map(|c| (c.pixel, c.position)).collect();
            let est = pnp_ransac(camera, &pairs, &cfg.ransac)?;
            result.timings.pnp += ms(stage);
            let success = est.success;
            if best.as_ref().is_none_or(|(b, _, _)| est.num_inliers > b.num_inliers) || success {
                best = Some((est, pi, corr.len()));
            }
            if success {
                break;
            }
        }
        if let Some((est, pi, n)) = best {
            result.place_index = est.success.then_some(pi);
            result.estimate = est;
            result.num_correspondences = n;
        }
        result.timings.total = ms(start);
        Ok(result)
    }

    /// Localizes queries concurrently; results keep the input order.
    pub fn localize_batch(
        &self,
        queries: &[(LocalFeatureSet, Camera)],
    ) -> Vec<Result<LocalizationResult, LocalizeError>> {
        par::map(queries, |(q, c)| self.localize(q, c))
    }
}
