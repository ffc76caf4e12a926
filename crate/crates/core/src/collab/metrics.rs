use num_complex::Complex64;

use super::{CollabError, Result};
use crate::chansim::CsiSample;

/// `|H_hat - H|^2 / |H|^2` over the real representation of one sample.
pub fn nmse(h_true: &[f64], h_hat: &[f64]) -> Result<f64> {
    check_len(h_true.len(), h_hat.len())?;
    let mut err = 0.0;
    let mut pow = 0.0;
    for (&t, &e) in h_true.iter().zip(h_hat) {
        err += (e - t) * (e - t);
        pow += t * t;
    }
    if !(pow > 0.0) {
        return Err(CollabError::ZeroNorm);
    }
    Ok(err / pow)
}

pub fn nmse_samples(h_true: &CsiSample, h_hat: &CsiSample) -> Result<f64> {
    check_dims(h_true, h_hat)?;
    let err: f64 = h_true
        .h
        .iter()
        .zip(&h_hat.h)
        .map(|(t, e)| (e - t).norm_sqr())
        .sum();
    let pow = h_true.frobenius_sq();
    if !(pow > 0.0) {
        return Err(CollabError::ZeroNorm);
    }
    Ok(err / pow)
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Mean NMSE over samples, in dB.
pub fn nmse_db(per_sample: &[f64]) -> f64 {
    to_db(mean(per_sample))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn column_cos(h: &[Complex64], e: &[Complex64]) -> Option<f64> {
    let mut inner = Complex64::new(0.0, 0.0);
    let (mut nh, mut ne) = (0.0, 0.0);
    for (t, p) in h.iter().zip(e) {
        inner += p.conj() * t;
        nh += t.norm_sqr();
        ne += p.norm_sqr();
    }
    (nh > 0.0 && ne > 0.0).then(|| inner.norm() / (nh.sqrt() * ne.sqrt()))
}

/// Generalized cosine similarity: mean over subcarriers of
/// `|h_hat_i^H h_i| / (|h_hat_i| |h_i|)`. Any all-zero column is an error.
pub fn gcs(h_true: &CsiSample, h_hat: &CsiSample) -> Result<f64> {
    check_dims(h_true, h_hat)?;
    let mut total = 0.0;
    for sc in 0..h_true.n_sc {
        total += column_cos(&h_true.column(sc), &h_hat.column(sc))
            .ok_or(CollabError::ZeroColumn { sc })?;
    }
    Ok(total / h_true.n_sc as f64)
}

/// GCS on token rows `[Re h_i; Im h_i]`. A zero column in the estimate
/// contributes 0 instead of failing (the estimate carries no direction);
/// a zero column in the ground truth is still an error.
pub fn gcs_tokens(h_true: &[f64], h_hat: &[f64], n_tx: usize, n_sc: usize) -> Result<f64> {
    check_len(h_true.len(), h_hat.len())?;
    check_len(2 * n_tx * n_sc, h_true.len())?;
    let mut total = 0.0;
    let to_complex = |row: &[f64]| -> Vec<Complex64> {
        (0..n_tx)
            .map(|k| Complex64::new(row[k], row[n_tx + k]))
            .collect()
    };
    for sc in 0..n_sc {
        let t = to_complex(&h_true[sc * 2 * n_tx..][..2 * n_tx]);
        let e = to_complex(&h_hat[sc * 2 * n_tx..][..2 * n_tx]);
        if t.iter().all(|z| z.norm_sqr() == 0.0) {
            return Err(CollabError::ZeroColumn { sc });
        }
        total += column_cos(&t, &e).unwrap_or(0.0);
    }
    Ok(total / n_sc as f64)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CollabError::Shape(format!("{a} vs {b} entries")));
    }
    Ok(())
}

fn check_dims(a: &CsiSample, b: &CsiSample) -> Result<()> {
    if (a.n_tx, a.n_sc) != (b.n_tx, b.n_sc) {
        return Err(CollabError::Shape(format!(
            "{}x{} vs {}x{}",
            a.n_tx, a.n_sc, b.n_tx, b.n_sc
        )));
    }
    Ok(())
}
