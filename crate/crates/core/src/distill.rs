//! Multi-task distillation loss with learned uncertainty weights.
//!
//! `L = e^{-w1} r_g + e^{-w2} r_l + 2 e^{-w3} c + w1 + w2 + w3` where `r_g`
//! is the squared global-descriptor residual, `r_l` the squared dense-descriptor
//! residual averaged over locations, and `c` the per-location mean
//! cross-entropy of the student keypoint scores against teacher soft labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("teacher probabilities at location {location} are not a simplex (sum {sum})")]
    NonSimplexTarget { location: usize, sum: f64 },
    #[error("non-finite input")]
    NonFinite,
}

/// Dense `H x W x C` tensor, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, DistillError> {
        if data.len() != h * w * c {
            return Err(DistillError::ShapeMismatch(format!(
                "{h}x{w}x{c} tensor needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn locations(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Channel vector at flat location `i`.
    pub fn at(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub global_student: Vec<f64>,
    pub global_teacher: Vec<f64>,
    pub local_student: Tensor3,
    pub local_teacher: Tensor3,
    /// Student keypoint-score logits (cells plus dustbin per location).
    pub logits_student: Tensor3,
    /// Teacher probabilities, one simplex per location.
    pub probs_teacher: Tensor3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl TaskWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Self {
        Self { w1, w2, w3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub r_global: f64,
    pub r_local: f64,
    pub cross_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub global_student: Vec<f64>,
    pub local_student: Tensor3,
    pub logits_student: Tensor3,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl DistillBatch {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.global_student.len() != self.global_teacher.len() {
            return Err(DistillError::ShapeMismatch(format!(
                "global descriptors {} vs {}",
                self.global_student.len(),
                self.global_teacher.len()
            )));
        }
        if self.local_student.shape() != self.local_teacher.shape() {
            return Err(DistillError::ShapeMismatch(format!(
                "local maps {:?} vs {:?}",
                self.local_student.shape(),
                self.local_teacher.shape()
            )));
        }
        if self.logits_student.shape() != self.probs_teacher.shape() {
            return Err(DistillError::ShapeMismatch(format!(
                "score maps {:?} vs {:?}",
                self.logits_student.shape(),
                self.probs_teacher.shape()
            )));
        }
        let (lh, lw, _) = self.local_student.shape();
        let (sh, sw, sc) = self.logits_student.shape();
        if (lh, lw) != (sh, sw) {
            return Err(DistillError::ShapeMismatch(format!(
                "local map is {lh}x{lw} but score map is {sh}x{sw}"
            )));
        }
        if sc == 0 {
            return Err(DistillError::ShapeMismatch("score maps have no channels".into()));
        }
        let all = [
            &self.global_student[..],
            &self.global_teacher,
            &self.local_student.data,
            &self.local_teacher.data,
            &self.logits_student.data,
            &self.probs_teacher.data,
        ];
        if !all.iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(DistillError::NonFinite);
        }
        for i in 0..self.probs_teacher.locations() {
            let p = self.probs_teacher.at(i);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&v| v < 0.0) {
                return Err(DistillError::NonSimplexTarget { location: i, sum });
            }
        }
        Ok(())
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// The weighted sum given precomputed residuals.
pub fn assemble_loss(r_global: f64, r_local: f64, cross_entropy: f64, w: &TaskWeights) -> f64 {
    (-w.w1).exp() * r_global + (-w.w2).exp() * r_local + 2.0 * (-w.w3).exp() * cross_entropy + w.w1 + w.w2 + w.w3
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn loss_components(batch: &DistillBatch) -> Result<LossComponents, DistillError> {
    batch.validate()?;
    let r_global = squared_distance(&batch.global_student, &batch.global_teacher);
    let locs = batch.local_student.locations().max(1) as f64;
    let r_local = squared_distance(&batch.local_student.data, &batch.local_teacher.data) / locs;
    let n = batch.logits_student.locations();
    let mut ce = 0.0;
    for i in 0..n {
        let ls = log_softmax(batch.logits_student.at(i));
        ce -= batch
            .probs_teacher
            .at(i)
            .iter()
            .zip(&ls)
            .map(|(p, l)| p * l)
            .sum::<f64>();
    }
    Ok(LossComponents {
        r_global,
        r_local,
        cross_entropy: if n == 0 { 0.0 } else { ce / n as f64 },
    })
}

pub fn multitask_loss(batch: &DistillBatch, w: &TaskWeights) -> Result<(f64, LossComponents), DistillError> {
    if ![w.w1, w.w2, w.w3].iter().all(|v| v.is_finite()) {
        return Err(DistillError::NonFinite);
    }
    let c = loss_components(batch)?;
    Ok((assemble_loss(c.r_global, c.r_local, c.cross_entropy, w), c))
}

pub fn multitask_loss_grad(batch: &DistillBatch, w: &TaskWeights) -> Result<LossGradients, DistillError> {
    let (_, c) = multitask_loss(batch, w)?;
    let e1 = (-w.w1).exp();
    let e2 = (-w.w2).exp();
    let e3 = (-w.w3).exp();
    let global_student = batch
        .global_student
        .iter()
        .zip(&batch.global_teacher)
        .map(|(s, t)| 2.0 * e1 * (s - t))
        .collect();
    let (h, wd, d) = batch.local_student.shape();
    let locs = (h * wd).max(1) as f64;
    let local = batch
        .local_student
        .data
        .iter()
        .zip(&batch.local_teacher.data)
        .map(|(s, t)| 2.0 * e2 * (s - t) / locs)
        .collect();
    let (sh, sw, sc) = batch.logits_student.shape();
    let mut logits = Vec::with_capacity(sh * sw * sc);
    for i in 0..batch.logits_student.locations() {
        let ls = log_softmax(batch.logits_student.at(i));
        for (l, p) in ls.iter().zip(batch.probs_teacher.at(i)) {
            logits.push(2.0 * e3 * (l.exp() - p) / locs);
        }
    }
    Ok(LossGradients {
        global_student,
        local_student: Tensor3 {
            h,
            w: wd,
            c: d,
            data: local,
        },
        logits_student: Tensor3 {
            h: sh,
            w: sw,
            c: sc,
            data: logits,
        },
        w1: -e1 * c.r_global + 1.0,
        w2: -e2 * c.r_local + 1.0,
        w3: -2.0 * e3 * c.cross_entropy + 1.0,
    })
}

/// Shapes of a synthetic batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchShape {
    pub global_dim: usize,
    pub h: usize,
    pub w: usize,
    pub local_dim: usize,
    pub cells: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            global_dim: 32,
            h: 3,
            w: 3,
            local_dim: 8,
            cells: 5,
        }
    }
}

/// Gaussian descriptors and logits; teacher probabilities are softmaxes of
/// independent Gaussian logits.
pub fn random_batch(rng: &mut impl Rng, shape: BatchShape) -> DistillBatch {
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let BatchShape {
        global_dim,
        h,
        w,
        local_dim,
        cells,
    } = shape;
    let global_student = normal(global_dim);
    let global_teacher = normal(global_dim);
    let local_student = Tensor3::new(h, w, local_dim, normal(h * w * local_dim)).unwrap();
    let local_teacher = Tensor3::new(h, w, local_dim, normal(h * w * local_dim)).unwrap();
    let logits_student = Tensor3::new(h, w, cells, normal(h * w * cells).iter().map(|v| 2.0 * v).collect()).unwrap();
    let t_logits = normal(h * w * cells);
    let mut probs = Vec::with_capacity(t_logits.len());
    for chunk in t_logits.chunks(cells) {
        probs.extend(log_softmax(chunk).iter().map(|l| l.exp()));
    }
    DistillBatch {
        global_student,
        global_teacher,
        local_student,
        local_teacher,
        logits_student,
        probs_teacher: Tensor3::new(h, w, cells, probs).unwrap(),
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub components: usize,
    pub max_relative_error: f64,
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Compares every analytic gradient component with central finite differences.
pub fn gradient_check_batch(batch: &DistillBatch, w: &TaskWeights) -> Result<(usize, f64), DistillError> {
    let g = multitask_loss_grad(batch, w)?;
    let loss = |b: &DistillBatch, w: &TaskWeights| multitask_loss(b, w).map(|r| r.0).unwrap_or(f64::NAN);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut check = |a: f64, n: f64| {
        worst = worst.max(relative_error(a, n));
        count += 1;
    };

    let b = batch;
    for i in 0..b.global_student.len() {
        let x = b.global_student[i];
        let n = central_difference(
            |v| {
                let mut bb = b.clone();
                bb.global_student[i] = v;
                loss(&bb, w)
            },
            x,
        );
        check(g.global_student[i], n);
    }
    for i in 0..b.local_student.data.len() {
        let x = b.local_student.data[i];
        let n = central_difference(
            |v| {
                let mut bb = b.clone();
                bb.local_student.data[i] = v;
                loss(&bb, w)
            },
            x,
        );
        check(g.local_student.data[i], n);
    }
    for i in 0..b.logits_student.data.len() {
        let x = b.logits_student.data[i];
        let n = central_difference(
            |v| {
                let mut bb = b.clone();
                bb.logits_student.data[i] = v;
                loss(&bb, w)
            },
            x,
        );
        check(g.logits_student.data[i], n);
    }
    let n1 = central_difference(|v| loss(b, &TaskWeights { w1: v, ..*w }), w.w1);
    let n2 = central_difference(|v| loss(b, &TaskWeights { w2: v, ..*w }), w.w2);
    let n3 = central_difference(|v| loss(b, &TaskWeights { w3: v, ..*w }), w.w3);
    check(g.w1, n1);
    check(g.w2, n2);
    check(g.w3, n3);
    Ok((count, worst))
}

/// Runs `trials` seeded random batches with random weights in `[-1, 1]`.
pub fn gradient_check(seed: u64, trials: usize, shape: BatchShape) -> Result<GradCheckReport, DistillError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        trials,
        components: 0,
        max_relative_error: 0.0,
    };
    for _ in 0..trials {
        let batch = random_batch(&mut rng, shape);
        let w = TaskWeights::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let (n, err) = gradient_check_batch(&batch, &w)?;
        report.components += n;
        report.max_relative_error = report.max_relative_error.max(err);
    }
    Ok(report)
}
