//! Local descriptor matching.
//!
//! Similarities between unit descriptors come from one dense matrix product
//! (computed block-wise over the targets). A short candidate list per query
//! is then re-scored with exact L2 distances, `d = |q - t|`, which equals
//! `sqrt(2 - 2 q.t)` on unit rows.
//!
//! The ratio test compares unsquared distances. In 2D-3D mode the test is
//! skipped when the two nearest descriptors observe the same 3D point.

use nalgebra::{DMatrix, Vector2, Vector3};
use thiserror::Error;

use crate::features::LocalFeatureSet;
use crate::mapstore::{Place, SparseMap};
use crate::simtile::{shortlists, Shortlist};

/// Default ratio-test threshold.
pub const DEFAULT_RATIO: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("descriptor dimension mismatch: query {query}, target {target}")]
    DimensionMismatch { query: usize, target: usize },
    #[error("{ids} point ids given for {rows} target rows")]
    PointIdCount { ids: usize, rows: usize },
    #[error("place has no 3D points")]
    EmptyPlace,
    #[error("point {0} is not in the map")]
    UnknownPoint(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query: usize,
    /// Row of the matched target descriptor.
    pub target: usize,
    /// 3D point observed by the target row, in 2D-3D mode.
    pub point: Option<u32>,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// The two nearest targets of one query row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestTwo {
    pub nn1: usize,
    pub d1: f64,
    pub second: Option<(usize, f64)>,
}

fn check_dims(query: &DMatrix<f32>, target: &DMatrix<f32>) -> Result<(), MatchError> {
    if query.ncols() != target.ncols() {
        return Err(MatchError::DimensionMismatch {
            query: query.ncols(),
            target: target.ncols(),
        });
    }
    Ok(())
}

/// Exact distances to the shortlisted targets; the two closest win, ties to
/// the smaller index.
/// Rows of `m` laid out contiguously.
/// Euclidean distance between row `i` of `a` and row `j` of `b`, in f64.
fn l2_rows(a: &DMatrix<f32>, i: usize, b: &DMatrix<f32>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn rescore(lists: &[Shortlist], query: &DMatrix<f32>, target: &DMatrix<f32>) -> Vec<Option<NearestTwo>> {
    lists
        .iter()
        .enumerate()
        .map(|(qi, list)| {
            let mut cand: Vec<(f64, usize)> = list
                .candidates()
                .map(|ti| (l2_rows(query, qi, target, ti), ti))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.first().map(|&(d1, nn1)| NearestTwo {
                nn1,
                d1,
                second: cand.get(1).map(|&(d, i)| (i, d)),
            })
        })
        .collect()
}

pub fn nearest_two(query: &DMatrix<f32>, target: &DMatrix<f32>) -> Result<Vec<Option<NearestTwo>>, MatchError> {
    check_dims(query, target)?;
    if query.nrows() == 0 || target.nrows() == 0 {
        return Ok(vec![None; query.nrows()]);
    }
    let (lists, _) = shortlists(query, target, false);
    Ok(rescore(&lists, query, target))
}

/// [`nearest_two`] in both directions from a single similarity pass:
/// neighbors in `b` of each row of `a`, and in `a` of each row of `b`.
#[allow(clippy::type_complexity)]
pub fn nearest_two_both(
    a: &DMatrix<f32>,
    b: &DMatrix<f32>,
) -> Result<(Vec<Option<NearestTwo>>, Vec<Option<NearestTwo>>), MatchError> {
    check_dims(a, b)?;
    if a.nrows() == 0 || b.nrows() == 0 {
        return Ok((vec![None; a.nrows()], vec![None; b.nrows()]));
    }
    let (la, lb) = shortlists(a, b, true);
    Ok((rescore(&la, a, b), rescore(&lb, b, a)))
}

fn passes_ratio(nn: &NearestTwo, ratio: f64) -> bool {
    match nn.second {
        None => true,
        Some((_, d2)) => d2 > 0.0 && nn.d1 / d2 < ratio,
    }
}

/// Nearest-neighbor matching with the (modified) ratio test.
///
/// With `target_point_ids`, a query whose two nearest targets observe the
/// same point is accepted without the ratio test. A single target row is
/// accepted unconditionally.
pub fn match_ratio(
    query: &DMatrix<f32>,
    target: &DMatrix<f32>,
    target_point_ids: Option<&[u32]>,
    ratio: f64,
) -> Result<MatchSet, MatchError> {
    if let Some(ids) = target_point_ids {
        if ids.len() != target.nrows() {
            return Err(MatchError::PointIdCount {
                ids: ids.len(),
                rows: target.nrows(),
            });
        }
    }
    let nn = nearest_two(query, target)?;
    let matches = nn
        .into_iter()
        .enumerate()
        .filter_map(|(qi, nn)| {
            let nn = nn?;
            let accept = match nn.second {
                None => true,
                Some((nn2, d2)) => {
                    let same_point = target_point_ids.is_some_and(|ids| ids[nn.nn1] == ids[nn2]);
                    same_point || (d2 > 0.0 && nn.d1 / d2 < ratio)
                }
            };
            accept.then(|| Match {
                query: qi,
                target: nn.nn1,
                point: target_point_ids.map(|ids| ids[nn.nn1]),
                distance: nn.d1,
            })
        })
        .collect();
    Ok(MatchSet { matches })
}

/// Mutual nearest neighbors between two images, each direction passing the
/// plain ratio test. Returns `(index in a, index in b, distance)`.
pub fn match_mutual_ratio(
    a: &DMatrix<f32>,
    b: &DMatrix<f32>,
    ratio: f64,
) -> Result<Vec<(usize, usize, f64)>, MatchError> {
    let (forward, backward) = nearest_two_both(a, b)?;
    Ok(forward
        .into_iter()
        .enumerate()
        .filter_map(|(i, nn)| {
            let nn = nn?;
            let back = backward[nn.nn1]?;
            (back.nn1 == i && passes_ratio(&nn, ratio) && passes_ratio(&back, ratio)).then_some((i, nn.nn1, nn.d1))
        })
        .collect())
}

/// Which descriptors represent a 3D point during 2D-3D matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// The normalized mean descriptor stored with each point.
    PointMean,
    /// Every observation of the point, tagged with the point id.
    #[default]
    AllObservations,
}

impl std::str::FromStr for TargetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mean" => Ok(Self::PointMean),
            "all-observations" => Ok(Self::AllObservations),
            _ => Err(format!("unknown match mode '{s}' (point-mean | all-observations)")),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PointMean => "point-mean",
            Self::AllObservations => "all-observations",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query_keypoint: usize,
    pub point_id: u32,
    pub pixel: Vector2<f64>,
    pub position: Vector3<f64>,
}

/// Matches query keypoints against the 3D points of one place.
pub fn assemble_2d3d(
    query: &LocalFeatureSet,
    place: &Place,
    map: &SparseMap,
    ratio: f64,
    mode: TargetMode,
) -> Result<Vec<Correspondence>, MatchError> {
    if place.points.is_empty() {
        return Err(MatchError::EmptyPlace);
    }
    let dim = query.descriptor_dim();
    let mut ids: Vec<u32> = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for &pid in &place.points {
        let point = map.point(pid).ok_or(MatchError::UnknownPoint(pid))?;
        match mode {
            TargetMode::PointMean => {
                if point.descriptor.len() != dim {
                    return Err(MatchError::DimensionMismatch {
                        query: dim,
                        target: point.descriptor.len(),
                    });
                }
                rows.extend_from_slice(&point.descriptor);
                ids.push(pid);
            }
            TargetMode::AllObservations => {
                for obs in &point.track {
                    let desc = &map.images()[obs.image as usize].features.descriptors;
                    if desc.ncols() != dim {
                        return Err(MatchError::DimensionMismatch {
                            query: dim,
                            target: desc.ncols(),
                        });
                    }
                    rows.extend(desc.row(obs.keypoint as usize).iter());
                    ids.push(pid);
                }
            }
        }
    }
    let target = DMatrix::from_row_slice(ids.len(), dim, &rows);
    let set = match_ratio(&query.descriptors, &target, Some(&ids), ratio)?;
    Ok(set
        .matches
        .iter()
        .map(|m| {
            let pid = ids[m.target];
            Correspondence {
                query_keypoint: m.query,
                point_id: pid,
                pixel: query.keypoints[m.query].pt(),
                position: map.points()[pid as usize].position,
            }
        })
        .collect())
}
