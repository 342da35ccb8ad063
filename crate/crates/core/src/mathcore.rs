//! Numerical kernels for prompt scoring and training.
//!
//! Storage is `f32`; every reduction runs in `f64`. The row-slice kernels
//! (`*_rows`) accept prompt matrices of either precision so the trainer can
//! keep its parameters in `f64` between steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MathError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("logit scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("invalid prompts: {0}")]
    InvalidPrompts(String),
    #[error("data has zero variance")]
    DegenerateData,
}

/// Element types the kernels read.
pub trait Scalar: Copy {
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Learnable per-class text embeddings. Row 0 is the non-inappropriate
/// class, row 1 the inappropriate class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEmbeddings {
    class_names: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
}

impl PartialEq for PromptEmbeddings {
    fn eq(&self, other: &Self) -> bool {
        self.class_names == other.class_names
            && self.dim == other.dim
            && self.matrix.len() == other.matrix.len()
            && self
                .matrix
                .iter()
                .zip(&other.matrix)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PromptEmbeddings {
    pub fn new(class_names: Vec<String>, matrix: Vec<f32>, dim: usize) -> Result<Self, MathError> {
        if class_names.len() < 2 {
            return Err(MathError::InvalidPrompts("need at least two classes".into()));
        }
        if dim == 0 || matrix.len() != class_names.len() * dim {
            return Err(MathError::InvalidPrompts(format!(
                "{} values for {} classes of dim {dim}",
                matrix.len(),
                class_names.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MathError::InvalidPrompts("non-finite value".into()));
        }
        Ok(Self {
            class_names,
            matrix,
            dim,
        })
    }

    pub fn from_f64(class_names: Vec<String>, matrix: &[f64], dim: usize) -> Result<Self, MathError> {
        Self::new(class_names, matrix.iter().map(|&v| v as f32).collect(), dim)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.matrix[c * self.dim..(c + 1) * self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.matrix.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Logits and softmax probabilities for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ScoreVector {
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

fn norm<A: Scalar>(a: &[A]) -> f64 {
    a.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

fn check_dim(expected: usize, actual: usize) -> Result<(), MathError> {
    if expected == actual {
        Ok(())
    } else {
        Err(MathError::DimMismatch { expected, actual })
    }
}

fn check_scale(logit_scale: f64) -> Result<(), MathError> {
    if logit_scale > 0.0 && logit_scale.is_finite() {
        Ok(())
    } else {
        Err(MathError::InvalidScale(logit_scale))
    }
}

pub fn cosine_similarity<A: Scalar, B: Scalar>(x: &[A], z: &[B]) -> Result<f64, MathError> {
    check_dim(x.len(), z.len())?;
    let (nx, nz) = (norm(x), norm(z));
    if nx == 0.0 || nz == 0.0 {
        return Err(MathError::ZeroNorm);
    }
    Ok((dot(x, z) / (nx * nz)).clamp(-1.0, 1.0))
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Scores `x` against a row-major prompt matrix with `x.len()` columns.
pub fn score_rows<A: Scalar, B: Scalar>(x: &[A], prompts: &[B], logit_scale: f64) -> Result<ScoreVector, MathError> {
    check_scale(logit_scale)?;
    let dim = x.len();
    if dim == 0 || !prompts.len().is_multiple_of(dim) {
        return Err(MathError::DimMismatch {
            expected: dim,
            actual: prompts.len(),
        });
    }
    let logits = prompts
        .chunks_exact(dim)
        .map(|z| cosine_similarity(x, z).map(|c| logit_scale * c))
        .collect::<Result<Vec<_>, _>>()?;
    let probabilities = softmax(&logits);
    Ok(ScoreVector { logits, probabilities })
}

pub fn score(x: &[f32], prompts: &PromptEmbeddings, logit_scale: f64) -> Result<ScoreVector, MathError> {
    check_dim(prompts.dim(), x.len())?;
    score_rows(x, prompts.matrix(), logit_scale)
}

/// A batch of borrowed embeddings with class-index labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub embeddings: &'a [&'a [f32]],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(embeddings: &'a [&'a [f32]], labels: &'a [usize]) -> Self {
        Self { embeddings, labels }
    }

    fn validate(&self, classes: usize, dim: usize) -> Result<(), MathError> {
        if self.embeddings.is_empty() {
            return Err(MathError::EmptyBatch);
        }
        check_dim(self.embeddings.len(), self.labels.len())?;
        for (x, &label) in self.embeddings.iter().zip(self.labels) {
            check_dim(dim, x.len())?;
            if label >= classes {
                return Err(MathError::InvalidLabel { label, classes });
            }
        }
        Ok(())
    }
}

fn classes_of<B>(prompts: &[B], dim: usize) -> Result<usize, MathError> {
    if dim == 0 || !prompts.len().is_multiple_of(dim) || prompts.len() / dim < 2 {
        return Err(MathError::InvalidPrompts(format!(
            "{} values do not form at least two rows of dim {dim}",
            prompts.len()
        )));
    }
    Ok(prompts.len() / dim)
}

/// Mean cross-entropy of the batch under a row-major prompt matrix of
/// width `dim`.
pub fn batch_loss_rows<B: Scalar>(
    batch: Batch<'_>,
    prompts: &[B],
    dim: usize,
    logit_scale: f64,
) -> Result<f64, MathError> {
    let classes = classes_of(prompts, dim)?;
    batch.validate(classes, dim)?;
    let mut total = 0.0;
    for (x, &label) in batch.embeddings.iter().zip(batch.labels) {
        let s = score_rows(x, prompts, logit_scale)?;
        // log-softmax directly: logit - logsumexp, avoids ln(0) when saturated
        let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - s.logits[label];
    }
    Ok((total / batch.embeddings.len() as f64).max(0.0))
}

pub fn batch_loss(batch: Batch<'_>, prompts: &PromptEmbeddings, logit_scale: f64) -> Result<f64, MathError> {
    batch_loss_rows(batch, prompts.matrix(), prompts.dim(), logit_scale)
}

/// Gradient of the mean cross-entropy with respect to every prompt row,
/// row-major `classes × dim`. Image embeddings are constants.
///
/// With `logit_c = s·cos(x, z_c)` and `p = softmax(logits)`:
/// `∂L/∂z_c = mean_x[(p_c − y_c) · s · (x̂/‖z_c‖ − cos(x, z_c) · z_c/‖z_c‖²)]`.
pub fn loss_gradient_rows<B: Scalar>(
    batch: Batch<'_>,
    prompts: &[B],
    dim: usize,
    logit_scale: f64,
) -> Result<Vec<f64>, MathError> {
    check_scale(logit_scale)?;
    let classes = classes_of(prompts, dim)?;
    batch.validate(classes, dim)?;

    let rows: Vec<&[B]> = prompts.chunks_exact(dim).collect();
    let row_norms: Vec<f64> = rows.iter().map(|z| norm(z)).collect();
    if row_norms.contains(&0.0) {
        return Err(MathError::ZeroNorm);
    }

    let inv_batch = 1.0 / batch.embeddings.len() as f64;
    let mut grad = vec![0.0f64; classes * dim];
    let mut cos = vec![0.0f64; classes];
    let mut logits = vec![0.0f64; classes];
    for (x, &label) in batch.embeddings.iter().zip(batch.labels) {
        let nx = norm(x);
        if nx == 0.0 {
            return Err(MathError::ZeroNorm);
        }
        for c in 0..classes {
            cos[c] = dot(x, rows[c]) / (nx * row_norms[c]);
            logits[c] = logit_scale * cos[c];
        }
        let p = softmax(&logits);
        for c in 0..classes {
            let y = if c == label { 1.0 } else { 0.0 };
            let coeff = (p[c] - y) * logit_scale * inv_batch;
            if coeff == 0.0 {
                continue;
            }
            let nz = row_norms[c];
            let a = coeff / (nx * nz);
            let b = coeff * cos[c] / (nz * nz);
            let g = &mut grad[c * dim..(c + 1) * dim];
            for ((g, &xi), &zi) in g.iter_mut().zip(x.iter()).zip(rows[c].iter()) {
                *g += a * f64::from(xi) - b * zi.to_f64();
            }
        }
    }
    Ok(grad)
}

pub fn loss_gradient(batch: Batch<'_>, prompts: &PromptEmbeddings, logit_scale: f64) -> Result<Vec<f64>, MathError> {
    loss_gradient_rows(batch, prompts.matrix(), prompts.dim(), logit_scale)
}

/// Two-component PCA of a point cloud.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pca2 {
    /// Per-row `(pc1, pc2)` coordinates of the mean-centred data.
    pub projections: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component (covariance eigenvalues, 1/N normalised).
    pub explained_variance: [f64; 2],
    pub mean: Vec<f64>,
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_TOL: f64 = 1e-14;

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let d = dot(v, against);
    v.iter_mut().zip(against).for_each(|(x, &a)| *x -= d * a);
}

/// Flips `v` so its largest-magnitude coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration,
/// optionally constrained orthogonal to `against`.
fn power_iteration(cov: &[f64], dim: usize, against: Option<&[f64]>, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    if let Some(a) = against {
        orthogonalize(&mut v, a);
    }
    if normalize_in_place(&mut v) == 0.0 {
        v = vec![0.0; dim];
        v[0] = 1.0;
    }
    for _ in 0..POWER_MAX_ITERS {
        let mut next = mat_vec(cov, &v);
        if let Some(a) = against {
            orthogonalize(&mut next, a);
        }
        if normalize_in_place(&mut next) == 0.0 {
            // Null space reached: any unit vector orthogonal to `against` is an eigenvector.
            break;
        }
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    if let Some(a) = against {
        orthogonalize(&mut v, a);
        if normalize_in_place(&mut v) == 0.0 {
            v = unit_orthogonal_to(a);
        }
    }
    canonical_sign(&mut v);
    let lambda = dot(&v, &mat_vec(cov, &v));
    (v, lambda.max(0.0))
}

fn unit_orthogonal_to(a: &[f64]) -> Vec<f64> {
    (0..a.len())
        .map(|i| {
            let mut e = vec![0.0; a.len()];
            e[i] = 1.0;
            orthogonalize(&mut e, a);
            e
        })
        .max_by(|x, y| norm(x).total_cmp(&norm(y)))
        .map(|mut e| {
            normalize_in_place(&mut e);
            e
        })
        .unwrap_or_default()
}

/// Projects mean-centred rows onto the top two principal directions, found
/// by power iteration with deflation on the covariance matrix.
pub fn pca2<'a, I>(rows: I, dim: usize) -> Result<Pca2, MathError>
where
    I: IntoIterator<Item = &'a [f32]>,
    I::IntoIter: Clone,
{
    let rows = rows.into_iter();
    let n = rows.clone().count();
    if n < 2 {
        return Err(MathError::DegenerateData);
    }
    let mut mean = vec![0.0f64; dim];
    for r in rows.clone() {
        check_dim(dim, r.len())?;
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; dim * dim];
    let mut centred = vec![0.0f64; dim];
    for r in rows.clone() {
        centred
            .iter_mut()
            .zip(r)
            .zip(&mean)
            .for_each(|((c, &v), m)| *c = f64::from(v) - m);
        for i in 0..dim {
            let ci = centred[i];
            for j in i..dim {
                cov[i * dim + j] += ci * centred[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= f64::EPSILON * mean.iter().map(|m| m * m).sum::<f64>().max(1.0) {
        return Err(MathError::DegenerateData);
    }

    let (v1, l1) = power_iteration(&cov, dim, None, 0x5043_4131);
    let mut deflated = cov.clone();
    for i in 0..dim {
        for j in 0..dim {
            deflated[i * dim + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, _) = power_iteration(&deflated, dim, Some(&v1), 0x5043_4132);
    // Rayleigh quotient on the undeflated matrix.
    let l2 = dot(&v2, &mat_vec(&cov, &v2)).max(0.0);

    let projections = rows
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, comp) in [&v1, &v2].into_iter().enumerate() {
                p[k] = r
                    .iter()
                    .zip(&mean)
                    .zip(comp.iter())
                    .map(|((&v, m), c)| (f64::from(v) - m) * c)
                    .sum();
            }
            p
        })
        .collect();
    Ok(Pca2 {
        projections,
        components: [v1, v2],
        explained_variance: [l1, l2],
        mean,
    })
}
