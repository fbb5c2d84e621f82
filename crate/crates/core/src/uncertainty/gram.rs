//! Hidden-state consistency score: mean log-eigenvalue of the regularized
//! Gram matrix of centered, unit-normalized EOS hidden vectors.
//!
//! For `k` samples with hidden vectors `h_1..h_k`:
//!
//! ```text
//! z_i   = h_i - mean(h)
//! z_i   = z_i / |z_i|          (rows at or below the norm floor stay zero)
//! G     = Z Z^T                (k x k)
//! score = log det(G + alpha I) / k
//! ```
//!
//! The score lies in `[log alpha, log(1 + alpha)]`. The floor is reached when
//! all samples coincide. The ceiling is only approached: centered rows sum to
//! zero, so `G` is always singular and never the identity.

use crate::backend::GenerationSample;
use crate::config::EstimatorKind;

use super::{UncertaintyError, UncertaintyScore};

/// Centered rows with norm at or below `NORM_FLOOR * scale` are treated as
/// zero, where `scale` is the largest input magnitude (at least 1).
pub const NORM_FLOOR: f64 = 1e-12;

/// `k` hidden vectors of a common dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSampleSet {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl HiddenSampleSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, UncertaintyError> {
        if vectors.len() < 2 {
            return Err(UncertaintyError::TooFewSamples {
                needed: 2,
                got: vectors.len(),
            });
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(UncertaintyError::Contract(
                "hidden vectors must have positive dimension".into(),
            ));
        }
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(UncertaintyError::DimensionMismatch {
                    index,
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(UncertaintyError::NonFinite { index });
            }
        }
        Ok(HiddenSampleSet { vectors, dim })
    }

    /// Collects the `eos_hidden` vector of every sample.
    pub fn from_samples(samples: &[GenerationSample]) -> Result<Self, UncertaintyError> {
        let vectors = samples
            .iter()
            .enumerate()
            .map(|(index, s)| {
                s.eos_hidden
                    .clone()
                    .ok_or(UncertaintyError::MissingHidden { index })
            })
            .collect::<Result<Vec<_>, _>>()?;
        HiddenSampleSet::new(vectors)
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Rows after centering and unit normalization.
    pub fn normalized_centered_rows(&self) -> Vec<Vec<f64>> {
        let k = self.k() as f64;
        let mut mean = vec![0.0; self.dim];
        let mut scale: f64 = 1.0;
        for v in &self.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
                scale = scale.max(x.abs());
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);

        let floor = NORM_FLOOR * scale;
        self.vectors
            .iter()
            .map(|v| {
                let mut row: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > floor {
                    row.iter_mut().for_each(|x| *x /= norm);
                } else {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
                row
            })
            .collect()
    }
}

/// Row-major `k x k` matrix of pairwise inner products.
pub fn gram_matrix(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.len();
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            g[i * k + j] = dot;
            g[j * k + i] = dot;
        }
    }
    g
}

/// `log det(A)` of a symmetric positive-definite row-major `n x n` matrix via
/// Cholesky factorization. `None` if a pivot is not strictly positive.
pub fn cholesky_log_det(a: &[f64], n: usize) -> Option<f64> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        log_det += 2.0 * ljj.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(log_det)
}

/// `log det(G + alpha I) / k` for a row-major `k x k` Gram matrix.
pub fn mean_log_det_regularized(gram: &[f64], k: usize, alpha: f64) -> Result<f64, UncertaintyError> {
    if k == 0 || gram.len() != k * k {
        return Err(UncertaintyError::Contract(format!(
            "expected a {k}x{k} matrix, got {} entries",
            gram.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(UncertaintyError::Contract(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut a = gram.to_vec();
    for i in 0..k {
        a[i * k + i] += alpha;
    }
    cholesky_log_det(&a, k)
        .map(|ld| ld / k as f64)
        .ok_or_else(|| UncertaintyError::Numerical("regularized Gram matrix is not positive definite".into()))
}

pub fn gram_logdet(samples: &HiddenSampleSet, alpha: f64) -> Result<UncertaintyScore, UncertaintyError> {
    let rows = samples.normalized_centered_rows();
    let g = gram_matrix(&rows);
    let value = mean_log_det_regularized(&g, samples.k(), alpha)?;
    Ok(UncertaintyScore::new(
        value,
        EstimatorKind::GramLogdet,
        samples.k(),
    ))
}

/// Lowest attainable score: every sample identical.
pub fn score_floor(alpha: f64) -> f64 {
    alpha.ln()
}

/// Upper bound on the score (the value for `G = I`).
pub fn score_ceiling(alpha: f64) -> f64 {
    alpha.ln_1p()
}
