//! Global-descriptor retrieval: PCA fitted on the reference images and an
//! exact full-scan nearest-neighbor index.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Default reduced dimension of global descriptors.
pub const DEFAULT_PCA_DIM: usize = 1024;
/// Default number of prior frames retrieved per query.
pub const DEFAULT_KNN: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("need at least 2 samples to fit PCA, got {0}")]
    TooFewSamples(usize),
    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projection has zero norm")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
}

/// Linear projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `k x G`, orthonormal rows sorted by descending explained variance.
    pub basis: DMatrix<f64>,
    /// Eigenvalues of the kept directions.
    pub variances: Vec<f64>,
    /// Set when fewer than the requested number of components carried
    /// positive variance; holds the requested count.
    pub truncated_from: Option<usize>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Fraction of the kept variance carried by each component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.variances.iter().sum();
        self.variances.iter().map(|v| v / total).collect()
    }
}

/// Fits PCA on `descriptors` (one sample per row), keeping `k` components.
///
/// Eigen-decomposes whichever of the covariance (`G x G`) or Gram (`M x M`)
/// matrix is smaller. Components with non-positive variance are dropped and
/// flagged through [`PcaModel::truncated_from`].
pub fn fit_pca(descriptors: &DMatrix<f64>, k: usize) -> Result<PcaModel, RetrievalError> {
    let (m, g) = descriptors.shape();
    if m < 2 {
        return Err(RetrievalError::TooFewSamples(m));
    }
    let max = (m - 1).min(g);
    if k > max || k == 0 {
        return Err(RetrievalError::TooManyComponents { requested: k, max });
    }

    let mean = descriptors.row_mean().transpose();
    let mut centered = descriptors.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (m - 1) as f64;

    let (eigvals, directions): (Vec<f64>, Vec<DVector<f64>>) = if g <= m {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        order
            .into_iter()
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
            .unzip()
    } else {
        // Gram trick: X X^T u = λ u  =>  X^T u / |X^T u| is a covariance eigenvector.
        let gram = &centered * centered.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        order
            .into_iter()
            .map(|i| {
                let v = centered.transpose() * eig.eigenvectors.column(i);
                let n = v.norm();
                (eig.eigenvalues[i], if n > 0.0 { v / n } else { v })
            })
            .unzip()
    };

    let top = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-12 * g.max(m) as f64;
    let positive = eigvals.iter().take_while(|&&v| v > tol && v > 0.0).count();
    let kept = k.min(positive).max(if positive == 0 { 0 } else { 1 });
    let truncated_from = (kept < k).then_some(k);

    let mut basis = DMatrix::zeros(kept, g);
    for (r, dir) in directions.iter().take(kept).enumerate() {
        let mut dir = dir.clone();
        // Sign convention: largest-magnitude coefficient positive.
        let imax = dir.iamax();
        if dir[imax] < 0.0 {
            dir = -dir;
        }
        basis.set_row(r, &dir.transpose());
    }
    Ok(PcaModel {
        mean,
        basis,
        variances: eigvals.into_iter().take(kept).collect(),
        truncated_from,
    })
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Projects a descriptor and re-normalizes the result to unit length.
pub fn reduce(model: &PcaModel, d: &[f64]) -> Result<DVector<f64>, RetrievalError> {
    if d.len() != model.input_dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: model.input_dim(),
            got: d.len(),
        });
    }
    let centered = DVector::from_column_slice(d) - &model.mean;
    let p = &model.basis * centered;
    let n = p.norm();
    if !(n >= 1e-12) {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(p / n)
}

/// Reduced, unit-norm reference descriptors searched by full scan.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalIndex {
    ids: Vec<String>,
    /// `M x k`, one unit row per database image.
    rows: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    /// Row in the index.
    pub index: usize,
    pub image_id: String,
    pub similarity: f64,
}

impl GlobalIndex {
    /// Builds an index from already-unit rows.
    pub fn from_rows(ids: Vec<String>, rows: DMatrix<f64>) -> Result<Self, RetrievalError> {
        if ids.len() != rows.nrows() {
            return Err(RetrievalError::DimensionMismatch {
                expected: rows.nrows(),
                got: ids.len(),
            });
        }
        Ok(Self { ids, rows })
    }

    /// Reduces each raw global descriptor with `model`; descriptors whose
    /// projection vanishes get a zero row and never rank above a real match.
    pub fn build(model: &PcaModel, entries: &[(String, Vec<f64>)]) -> Result<Self, RetrievalError> {
        let k = model.output_dim();
        let mut rows = DMatrix::zeros(entries.len(), k);
        for (r, (_, d)) in entries.iter().enumerate() {
            match reduce(model, d) {
                Ok(v) => rows.set_row(r, &v.transpose()),
                Err(RetrievalError::ZeroVector) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            ids: entries.iter().map(|(id, _)| id.clone()).collect(),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }
}

/// Exact top-`k_nn` neighbors by dot product, descending, ties broken by
/// smaller image id.
pub fn knn_retrieve(index: &GlobalIndex, query: &DVector<f64>, k_nn: usize) -> Result<Vec<Neighbor>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.len() != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    let sims = &index.rows * query;
    let mut order: Vec<usize> = (0..index.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        sims[*b]
            .total_cmp(&sims[*a])
            .then_with(|| index.ids[*a].cmp(&index.ids[*b]))
    };
    let k = k_nn.min(order.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(order
        .into_iter()
        .map(|i| Neighbor {
            index: i,
            image_id: index.ids[i].clone(),
            similarity: sims[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, m: usize, g: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, g, |_, _| rng.sample(StandardNormal))
    }

    fn unit_rows(rng: &mut ChaCha8Rng, m: usize, g: usize) -> DMatrix<f64> {
        let mut x = gaussian(rng, m, g);
        for mut r in x.row_iter_mut() {
            let n = r.norm();
            r /= n;
        }
        x
    }

    #[test]
    fn exact_plane_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = nalgebra::Vector3::new(1.0, 2.0, -1.0).normalize();
        let v = nalgebra::Vector3::new(0.5, 0.0, 0.5).normalize();
        let o = nalgebra::Vector3::new(3.0, -1.0, 2.0);
        let data = DMatrix::from_fn(40, 3, |_, _| 0.0);
        let mut data = data;
        for mut row in data.row_iter_mut() {
            let p = o + u * rng.random_range(-5.0..5.0) + v * rng.random_range(-5.0..5.0);
            row.copy_from(&p.transpose());
        }
        let model = fit_pca(&data, 2).unwrap();
        assert_eq!(model.truncated_from, None);
        for row in data.row_iter() {
            let c = row.transpose() - &model.mean;
            let rec = model.basis.transpose() * (&model.basis * &c);
            assert!((rec - c).norm() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = DMatrix::zeros(10, 4);
        for mut row in data.row_iter_mut() {
            let a: f64 = rng.random_range(-1.0..1.0);
            row.copy_from_slice(&[a, 2.0 * a, 0.0, 1.0]);
        }
        let model = fit_pca(&data, 3).unwrap();
        assert_eq!(model.output_dim(), 1);
        assert_eq!(model.truncated_from, Some(3));
    }

    #[test]
    fn isotropic_variance_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gaussian(&mut rng, 20000, 4);
        let model = fit_pca(&data, 4).unwrap();
        // Each sample variance has relative std sqrt(2/(M-1)) ≈ 0.01.
        for r in model.explained_variance_ratio() {
            assert!((r - 0.25).abs() < 0.02, "{r}");
        }
        let bbt = &model.basis * model.basis.transpose();
        assert!((bbt - DMatrix::identity(4, 4)).norm() < 1e-6);
    }

    #[test]
    fn full_rank_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = gaussian(&mut rng, 30, 5);
        let model = fit_pca(&data, 5).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let a = data.row(i).transpose();
                let b = data.row(j).transpose();
                let pa = &model.basis * (&a - &model.mean);
                let pb = &model.basis * (&b - &model.mean);
                assert!(((pa - pb).norm() - (a - b).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian(&mut rng, 12, 30);
        let wide = fit_pca(&data, 5).unwrap();
        // Same data padded with duplicated rows so the covariance path runs.
        let mut tall = DMatrix::zeros(36, 30);
        for r in 0..36 {
            tall.set_row(r, &data.row(r % 12));
        }
        let tall = fit_pca(&tall, 5).unwrap();
        assert!((&wide.basis - &tall.basis).norm() < 1e-8);
        assert!((&wide.mean - &tall.mean).norm() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        let one = DMatrix::zeros(1, 3);
        assert_eq!(fit_pca(&one, 1), Err(RetrievalError::TooFewSamples(1)));
        let d = DMatrix::zeros(3, 5);
        assert!(matches!(fit_pca(&d, 3), Err(RetrievalError::TooManyComponents { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = gaussian(&mut rng, 50, 6);
        let model = fit_pca(&data, 3).unwrap();

        let d = &model.mean + model.basis.row(0).transpose();
        let e = reduce(&model, d.as_slice()).unwrap();
        assert!((e - DVector::from_column_slice(&[1.0, 0.0, 0.0])).norm() < 1e-9);

        assert_eq!(reduce(&model, model.mean.as_slice()), Err(RetrievalError::ZeroVector));

        for _ in 0..20 {
            let d: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            let got = reduce(&model, &d).unwrap();
            let mut oracle = [0.0; 3];
            for (k, o) in oracle.iter_mut().enumerate() {
                for (g, x) in d.iter().enumerate() {
                    *o += model.basis[(k, g)] * (x - model.mean[g]);
                }
            }
            let n = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                assert!((got[k] - oracle[k] / n).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn retrieve_examples() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let index = GlobalIndex::from_rows(ids, rows).unwrap();
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        let nn = knn_retrieve(&index, &q, 5).unwrap();
        assert_eq!(nn.len(), 2);
        assert_eq!((nn[0].image_id.as_str(), nn[0].similarity), ("a", 1.0));
        assert_eq!((nn[1].image_id.as_str(), nn[1].similarity), ("b", 0.0));

        let empty = GlobalIndex::from_rows(vec![], DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(knn_retrieve(&empty, &q, 1), Err(RetrievalError::EmptyIndex));
    }

    #[test]
    fn retrieve_ties_by_id() {
        let ids = vec!["z".into(), "m".into(), "c".into()];
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let index = GlobalIndex::from_rows(ids, rows).unwrap();
        let nn = knn_retrieve(&index, &DVector::from_column_slice(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(nn[0].image_id, "m");
        assert_eq!(nn[1].image_id, "z");
    }

    #[test]
    fn retrieve_matches_l2_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = unit_rows(&mut rng, 500, 32);
        let ids: Vec<String> = (0..500).map(|i| format!("img{i:04}")).collect();
        let index = GlobalIndex::from_rows(ids, rows.clone()).unwrap();
        let queries = unit_rows(&mut rng, 20, 32);
        for q in queries.row_iter() {
            let q = q.transpose();
            let got: Vec<usize> = knn_retrieve(&index, &q, 25).unwrap().iter().map(|n| n.index).collect();
            let mut oracle: Vec<(f64, usize)> = (0..500)
                .map(|i| {
                    let d: f64 = (0..32).map(|k| (rows[(i, k)] - q[k]).powi(2)).sum::<f64>().sqrt();
                    (d, i)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let oracle: Vec<usize> = oracle.iter().take(25).map(|x| x.1).collect();
            assert_eq!(got, oracle);
        }
    }

    proptest::proptest! {
        #[test]
        fn retrieve_count_and_order(m in 1usize..40, k in 1usize..60, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = unit_rows(&mut rng, m, 8);
            let ids = (0..m).map(|i| format!("{i}")).collect();
            let index = GlobalIndex::from_rows(ids, rows).unwrap();
            let q = unit_rows(&mut rng, 1, 8).row(0).transpose();
            let nn = knn_retrieve(&index, &q, k).unwrap();
            proptest::prop_assert_eq!(nn.len(), k.min(m));
            proptest::prop_assert!(nn.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            let mut seen: Vec<usize> = nn.iter().map(|n| n.index).collect();
            seen.sort();
            seen.dedup();
            proptest::prop_assert_eq!(seen.len(), nn.len());
        }
    }
}
