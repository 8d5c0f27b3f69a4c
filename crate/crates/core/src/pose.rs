//! Absolute pose from 2D-3D correspondences: a minimal three-point solver
//! inside seeded RANSAC, followed by Gauss-Newton refinement on the inliers.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Camera, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewCorrespondences { got: usize, need: usize },
    #[error("degenerate minimal configuration")]
    DegenerateConfiguration,
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier reprojection threshold, pixels.
    pub reproj_px: f64,
    pub min_inliers: usize,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            reproj_px: 10.0,
            min_inliers: 12,
            max_iters: 5000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.reproj_px > 0.0 && self.reproj_px.is_finite()) {
            return Err(PoseError::InvalidConfig(format!(
                "threshold must be positive, got {}",
                self.reproj_px
            )));
        }
        if self.min_inliers < 4 {
            return Err(PoseError::InvalidConfig(format!(
                "min inliers must be >= 4, got {}",
                self.min_inliers
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::InvalidConfig(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.max_iters == 0 {
            return Err(PoseError::InvalidConfig("max iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Ascending correspondence indices.
    pub inliers: Vec<usize>,
    pub num_inliers: usize,
    /// Mean reprojection error over the inliers, pixels (0 when none).
    pub mean_residual: f64,
    pub success: bool,
    pub iterations: usize,
}

/// A 2D pixel observation paired with a world point.
pub type Correspondence2d3d = (Vector2<f64>, Vector3<f64>);

/// Polynomial with ascending coefficients.
type Poly = Vec<f64>;

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, x) in b.iter().enumerate() {
        out[i] += x;
    }
    out
}

fn poly_scale(a: &[f64], s: f64) -> Poly {
    a.iter().map(|x| x * s).collect()
}

fn poly_eval(p: &[f64], x: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut d = 0.0;
    for c in p.iter().rev() {
        d = d * x + v;
        v = v * x + c;
    }
    (v, d)
}

/// Real roots of a polynomial via companion-matrix eigenvalues, polished by Newton.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -p[deg - 1 - i] / lead;
        if i + 1 < deg {
            comp[(i + 1, i)] = 1.0;
        }
    }
    let poly = &p[..=deg];
    let mut roots = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        let mut fx = poly_eval(poly, x).0.abs();
        for _ in 0..8 {
            let (f, df) = poly_eval(poly, x);
            if df == 0.0 || f == 0.0 {
                break;
            }
            let nx = x - f / df;
            let nf = poly_eval(poly, nx).0.abs();
            if nf.is_nan() || nf >= fx {
                break;
            }
            x = nx;
            fx = nf;
        }
        roots.push(x);
    }
    roots
}

/// Rigid transform `(R, t)` minimizing `sum |R p_i + t - x_i|^2`.
fn kabsch(p: &[Vector3<f64>], x: &[Vector3<f64>]) -> Option<Pose> {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vector3<f64>>() / n;
    let xc = x.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(x) {
        h += (a - pc) * (b - xc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    let t = xc - rot * pc;
    Some(Pose::new(rot, t))
}

/// Newton on the three law-of-cosines equations in the depths. The quartic
/// loses precision near double roots; this system keeps it.
fn polish_depths(j: &[Vector3<f64>; 3], world: &[Vector3<f64>; 3], init: [f64; 3]) -> [f64; 3] {
    const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    let residual = |s: &[f64; 3]| {
        Vector3::from_fn(|k, _| {
            let (a, b) = PAIRS[k];
            let d2 = (world[a] - world[b]).norm_squared();
            (s[a] * s[a] + s[b] * s[b] - 2.0 * s[a] * s[b] * j[a].dot(&j[b]) - d2) / d2
        })
    };
    let mut s = init;
    let mut r = residual(&s);
    for _ in 0..20 {
        let mut jac = Matrix3::zeros();
        for (k, &(a, b)) in PAIRS.iter().enumerate() {
            let d2 = (world[a] - world[b]).norm_squared();
            let c = j[a].dot(&j[b]);
            jac[(k, a)] = 2.0 * (s[a] - s[b] * c) / d2;
            jac[(k, b)] = 2.0 * (s[b] - s[a] * c) / d2;
        }
        let Some(step) = jac.lu().solve(&r) else {
            break;
        };
        let next = [s[0] - step[0], s[1] - step[1], s[2] - step[2]];
        let nr = residual(&next);
        if !(nr.norm() < r.norm()) {
            break;
        }
        s = next;
        r = nr;
    }
    s
}

/// Minimal absolute pose from three correspondences; up to four candidates.
///
/// With unit bearings `j_i`, depths `s_i` and ratios `u = s2/s1`, `v = s3/s1`,
/// the law of cosines on the three sides gives a quartic in `v`; `u` follows
/// rationally and the pose is the rigid alignment of world and camera points.
pub fn p3p_minimal(camera: &Camera, corr: &[Correspondence2d3d; 3]) -> Result<Vec<Pose>, PoseError> {
    let [(x1, p1), (x2, p2), (x3, p3)] = corr;
    let area = 0.5 * (p2 - p1).cross(&(p3 - p1)).norm();
    if !(area > 1e-9) {
        return Err(PoseError::DegenerateConfiguration);
    }
    let j = [camera.bearing(x1), camera.bearing(x2), camera.bearing(x3)];
    if (j[0] - j[1]).norm() < 1e-12 || (j[0] - j[2]).norm() < 1e-12 || (j[1] - j[2]).norm() < 1e-12 {
        return Err(PoseError::DegenerateConfiguration);
    }
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);
    let b_len = (p1 - p3).norm();
    // Work with sides relative to b for conditioning.
    let a2 = ((p2 - p3).norm() / b_len).powi(2);
    let c2 = ((p1 - p2).norm() / b_len).powi(2);

    let q = vec![1.0, -2.0 * cos_b, 1.0];
    let n = poly_add(&[1.0, 0.0, -1.0], &poly_scale(&q, a2 - c2));
    let d = vec![2.0 * cos_g, -2.0 * cos_a];
    let rest = vec![1.0 - c2, 2.0 * c2 * cos_b, -c2];
    let quartic = poly_add(
        &poly_add(&poly_mul(&n, &n), &poly_scale(&poly_mul(&n, &d), -2.0 * cos_g)),
        &poly_mul(&rest, &poly_mul(&d, &d)),
    );

    let world = [*p1, *p2, *p3];
    let mut out: Vec<Pose> = Vec::new();
    for v in real_roots(&quartic) {
        let dv = poly_eval(&d, v).0;
        if v <= 0.0 || dv.abs() < 1e-12 {
            continue;
        }
        let u = poly_eval(&n, v).0 / dv;
        let qv = poly_eval(&q, v).0;
        if u <= 0.0 || qv <= 0.0 {
            continue;
        }
        let s1 = b_len / qv.sqrt();
        let depths = polish_depths(&j, &world, [s1, u * s1, v * s1]);
        let cam = [j[0] * depths[0], j[1] * depths[1], j[2] * depths[2]];
        let Some(pose) = kabsch(&world, &cam) else {
            continue;
        };
        let consistent = world.iter().zip(&j).all(|(p, jb)| {
            let pc = pose.transform(p);
            pc.z > 0.0 && (pc.normalize() - jb).norm() < 1e-5
        });
        let duplicate = out.iter().any(|o| {
            (o.translation - pose.translation).norm() < 1e-9 * (1.0 + pose.translation.norm())
                && o.rotation.angle_to(&pose.rotation) < 1e-9
        });
        if consistent && !duplicate {
            out.push(pose);
        }
    }
    Ok(out)
}

/// Pixel reprojection error, or infinity when the point is not in front of the camera.
fn residual(pose: &Pose, camera: &Camera, c: &Correspondence2d3d) -> f64 {
    let pc = pose.transform(&c.1);
    if pc.z <= 1e-9 {
        return f64::INFINITY;
    }
    let px = camera.normalized_to_pixel(&Vector2::new(pc.x / pc.z, pc.y / pc.z));
    let r = (px - c.0).norm();
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

#[derive(Debug, Clone)]
struct Score {
    inliers: Vec<usize>,
    mean: f64,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        self.inliers.len() > other.inliers.len()
            || (self.inliers.len() == other.inliers.len() && self.mean < other.mean)
    }
}

fn score(pose: &Pose, camera: &Camera, corr: &[Correspondence2d3d], thr: f64) -> Score {
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corr.iter().enumerate() {
        let r = residual(pose, camera, c);
        if r <= thr {
            inliers.push(i);
            sum += r;
        }
    }
    let mean = if inliers.is_empty() {
        f64::INFINITY
    } else {
        sum / inliers.len() as f64
    };
    Score { inliers, mean }
}

/// Squared residuals capped at the squared threshold, summed over all correspondences.
fn truncated_cost(pose: &Pose, camera: &Camera, corr: &[Correspondence2d3d], thr: f64) -> f64 {
    corr.iter().map(|c| residual(pose, camera, c).min(thr).powi(2)).sum()
}

/// Refit rounds after the sampling loop.
const LOCAL_ROUNDS: usize = 5;

fn cost(pose: &Pose, camera: &Camera, corr: &[Correspondence2d3d], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| residual(pose, camera, &corr[i]).powi(2)).sum()
}

/// Gauss-Newton on the reprojection error of `idx`, with a left-multiplied
/// SE(3) increment. Steps that do not decrease the cost are rejected.
pub fn refine_pose(pose: &Pose, camera: &Camera, corr: &[Correspondence2d3d], idx: &[usize], max_iters: usize) -> Pose {
    let mut best = *pose;
    let mut best_cost = cost(&best, camera, corr, idx);
    if idx.len() < 3 || !best_cost.is_finite() {
        return best;
    }
    for _ in 0..max_iters {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for &i in idx {
            let (obs, pw) = &corr[i];
            let pc = best.transform(pw);
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let n = Vector2::new(x / z, y / z);
            let r2 = n.norm_squared();
            let (scale, dscale) = match camera.k1 {
                Some(k1) => (1.0 + k1 * r2, 2.0 * k1),
                None => (1.0, 0.0),
            };
            let px = camera.normalized_to_pixel(&n);
            let res = px - obs;
            let dp_dn = nalgebra::Matrix2::new(
                camera.fx * (scale + dscale * n.x * n.x),
                camera.fx * dscale * n.x * n.y,
                camera.fy * dscale * n.x * n.y,
                camera.fy * (scale + dscale * n.y * n.y),
            );
            let dn_dpc = Matrix2x3::new(1.0 / z, 0.0, -x / (z * z), 0.0, 1.0 / z, -y / (z * z));
            let dp_dpc = dp_dn * dn_dpc;
            // d pc / d omega = -[pc]x, d pc / d upsilon = I
            let skew = pc.cross_matrix();
            let jr = -dp_dpc * skew;
            let mut j = nalgebra::Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jr);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dp_dpc);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(chol) = jtj.cholesky() else {
            break;
        };
        let delta = -chol.solve(&jtr);
        if !delta.iter().all(|v| v.is_finite()) {
            break;
        }
        let dr = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
        let cand = Pose::new(
            dr * best.rotation,
            dr * best.translation + Vector3::new(delta[3], delta[4], delta[5]),
        );
        let c = cost(&cand, camera, corr, idx);
        if c < best_cost {
            let converged = best_cost - c <= 1e-15 * best_cost.max(1e-300);
            best = cand;
            best_cost = c;
            if converged {
                break;
            }
        } else {
            break;
        }
    }
    best
}

/// Number of RANSAC iterations needed to reach `confidence` at inlier ratio `w`.
pub fn adaptive_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    if w <= 0.0 {
        return cap;
    }
    let p = w.powi(3);
    if p >= 1.0 {
        return 1;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Seeded RANSAC over minimal three-point samples.
///
/// Failure to reach `cfg.min_inliers` is reported through `success`, not
/// as an error. Sequential and deterministic given the seed.
pub fn pnp_ransac(camera: &Camera, corr: &[Correspondence2d3d], cfg: &RansacConfig) -> Result<PoseEstimate, PoseError> {
    cfg.validate()?;
    if corr.len() < 4 {
        return Err(PoseError::TooFewCorrespondences {
            got: corr.len(),
            need: 4,
        });
    }
    let n = corr.len();
    let thr = cfg.reproj_px;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Pose, Score)> = None;
    let mut bound = cfg.max_iters;
    let mut iters = 0;
    while iters < bound {
        iters += 1;
        let s = rand::seq::index::sample(&mut rng, n, 3);
        let sample = [corr[s.index(0)], corr[s.index(1)], corr[s.index(2)]];
        let Ok(cands) = p3p_minimal(camera, &sample) else {
            continue;
        };
        for pose in cands {
            let sc = score(&pose, camera, corr, thr);
            if best.as_ref().is_none_or(|(_, b)| sc.better_than(b)) {
                bound = adaptive_iterations(sc.inliers.len() as f64 / n as f64, cfg.confidence, cfg.max_iters);
                best = Some((pose, sc));
            }
        }
    }

    let Some((raw_pose, raw_score)) = best else {
        return Ok(PoseEstimate {
            pose: Pose::identity(),
            inliers: Vec::new(),
            num_inliers: 0,
            mean_residual: 0.0,
            success: false,
            iterations: iters,
        });
    };
    // Local optimization: refit on the inliers and rescore until the inlier
    // set settles. A refit is kept when it lowers the truncated squared error.
    let (mut pose, mut sc) = (raw_pose, raw_score);
    let mut cur_cost = truncated_cost(&pose, camera, corr, thr);
    for _ in 0..LOCAL_ROUNDS {
        if sc.inliers.len() < 3 {
            break;
        }
        let refined = refine_pose(&pose, camera, corr, &sc.inliers, 10);
        let c = truncated_cost(&refined, camera, corr, thr);
        if !(c < cur_cost) {
            break;
        }
        let rs = score(&refined, camera, corr, thr);
        let settled = rs.inliers == sc.inliers;
        (pose, sc, cur_cost) = (refined, rs, c);
        if settled {
            break;
        }
    }
    let num = sc.inliers.len();
    Ok(PoseEstimate {
        pose,
        mean_residual: if num == 0 { 0.0 } else { sc.mean },
        num_inliers: num,
        inliers: sc.inliers,
        success: num >= cfg.min_inliers,
        iterations: iters,
    })
}

/// Position error in the units of the map and orientation error in degrees.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    (
        (estimate.center() - truth.center()).norm(),
        crate::geometry::rotation_angle_deg(&estimate.rotation, &truth.rotation),
    )
}
