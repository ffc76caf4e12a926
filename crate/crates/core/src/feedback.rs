//! Compression front end: real vectorization, random projection and the
//! pseudo-inverse coarse reconstruction at the base station.
//!
//! Vectorization convention: `[Re(H) column-major ; Im(H) column-major]`, so
//! entry `sc * n_tx + tx` holds `Re H[tx, sc]` and the second half the
//! imaginary parts in the same order.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chansim::{ArrayConfig, CsiSample};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("codeword length {m} must lie in 1..={dim}")]
    InvalidLength { m: usize, dim: usize },
    #[error("projection matrix is numerically rank deficient (seed {seed})")]
    RankDeficient { seed: u64 },
    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, FeedbackError>;

/// Identity of a codec; the matrix is a deterministic function of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecKey {
    pub m: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub s: Vec<f64>,
}

/// Frozen random projection `A` (M x dim) with its cached pseudo-inverse.
#[derive(Debug, Clone)]
pub struct ProjectionCodec {
    key: CodecKey,
    /// Row-major M x dim.
    a: Vec<f64>,
    /// Row-major dim x M.
    a_pinv: Vec<f64>,
    a_pinv_f32: Vec<f32>,
}

impl ProjectionCodec {
    pub fn key(&self) -> CodecKey {
        self.key
    }

    pub fn codeword_len(&self) -> usize {
        self.key.m
    }

    pub fn dim(&self) -> usize {
        self.key.dim
    }

    pub fn a_matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn a_pinv(&self) -> &[f64] {
        &self.a_pinv
    }

    pub fn a_pinv_f32(&self) -> &[f32] {
        &self.a_pinv_f32
    }

    /// `A v` for a real vector of length `dim`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v.len(), self.key.dim)?;
        Ok(self
            .a
            .chunks_exact(self.key.dim)
            .map(|row| dot(row, v))
            .collect())
    }

    /// `A^+ s` for a codeword of length `M`.
    pub fn back_project(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len(s.len(), self.key.m)?;
        Ok(self
            .a_pinv
            .chunks_exact(self.key.m)
            .map(|row| dot(row, s))
            .collect())
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(FeedbackError::Shape { expected, got })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn vec_real(h: &CsiSample) -> Vec<f64> {
    let half = h.n_tx * h.n_sc;
    let mut out = vec![0.0; 2 * half];
    for sc in 0..h.n_sc {
        for tx in 0..h.n_tx {
            let z = h.get(tx, sc);
            out[sc * h.n_tx + tx] = z.re;
            out[half + sc * h.n_tx + tx] = z.im;
        }
    }
    out
}

pub fn devec_real(v: &[f64], n_tx: usize, n_sc: usize) -> Result<CsiSample> {
    let half = n_tx * n_sc;
    check_len(v.len(), 2 * half)?;
    let mut h = CsiSample::zeros(n_tx, n_sc);
    for sc in 0..n_sc {
        for tx in 0..n_tx {
            let k = sc * n_tx + tx;
            h.set(tx, sc, Complex64::new(v[k], v[half + k]));
        }
    }
    Ok(h)
}

/// Draws `A` with i.i.d. N(0, 1/M) entries and caches `A^T (A A^T)^-1`.
pub fn build_codec(m: usize, dim: usize, seed: u64) -> Result<ProjectionCodec> {
    if m == 0 || m > dim {
        return Err(FeedbackError::InvalidLength { m, dim });
    }
    let mut rng = seed::rng(seed::derive(seed, &format!("codec/{m}/{dim}")));
    let std = (1.0 / m as f64).sqrt();
    let a: Vec<f64> = (0..m * dim)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();

    let a_mat = DMatrix::from_row_slice(m, dim, &a);
    let gram = &a_mat * a_mat.transpose();
    let chol = gram
        .cholesky()
        .ok_or(FeedbackError::RankDeficient { seed })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| {
        (lo.min(d), hi.max(d))
    });
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-12 {
        return Err(FeedbackError::RankDeficient { seed });
    }
    // A^+ = A^T G^-1, solved as G X = A, A^+ = X^T.
    let x = chol.solve(&a_mat);
    let pinv = x.transpose();

    let resid = (&a_mat * &pinv * &a_mat - &a_mat).norm() / a_mat.norm();
    if !(resid < 1e-6) {
        return Err(FeedbackError::RankDeficient { seed });
    }

    let mut a_pinv = Vec::with_capacity(dim * m);
    for r in 0..dim {
        for c in 0..m {
            a_pinv.push(pinv[(r, c)]);
        }
    }
    let a_pinv_f32 = a_pinv.iter().map(|&v| v as f32).collect();
    Ok(ProjectionCodec {
        key: CodecKey { m, dim, seed },
        a,
        a_pinv,
        a_pinv_f32,
    })
}

pub fn build_codec_from_key(key: CodecKey) -> Result<ProjectionCodec> {
    build_codec(key.m, key.dim, key.seed)
}

/// `s = A vec(H)`.
pub fn compress(h: &CsiSample, codec: &ProjectionCodec) -> Result<Codeword> {
    Ok(Codeword {
        s: codec.project(&vec_real(h))?,
    })
}

/// `H_in = devec(A^+ s)`.
pub fn coarse_reconstruct(
    s: &Codeword,
    codec: &ProjectionCodec,
    cfg: &ArrayConfig,
) -> Result<CsiSample> {
    check_len(cfg.real_dim(), codec.dim())?;
    devec_real(&codec.back_project(&s.s)?, cfg.n_tx, cfg.n_sc)
}

/// `gamma = 2 n_tx n_sc / M`.
pub fn compression_ratio(codec: &ProjectionCodec, cfg: &ArrayConfig) -> f64 {
    cfg.real_dim() as f64 / codec.codeword_len() as f64
}
