use num_complex::Complex64;

use super::{ModelError, Result};
use crate::chansim::CsiSample;
use crate::nncore::{Scalar, Tensor};

/// Token `i` is `[Re h_i; Im h_i]` for subcarrier column `h_i`; the result is
/// `n_sc` rows of `2 n_tx` values, row-major.
pub fn tokens_from_sample(h: &CsiSample) -> Vec<f64> {
    let (n_tx, n_sc) = (h.n_tx, h.n_sc);
    let mut out = vec![0.0; 2 * n_tx * n_sc];
    for sc in 0..n_sc {
        let row = &mut out[sc * 2 * n_tx..][..2 * n_tx];
        for tx in 0..n_tx {
            let z = h.get(tx, sc);
            row[tx] = z.re;
            row[n_tx + tx] = z.im;
        }
    }
    out
}

pub fn sample_from_tokens(tokens: &[f64], n_tx: usize, n_sc: usize) -> Result<CsiSample> {
    if tokens.len() != 2 * n_tx * n_sc {
        return Err(ModelError::InputShape {
            got: vec![tokens.len()],
            seq: n_sc,
            dim: 2 * n_tx,
        });
    }
    let mut h = CsiSample::zeros(n_tx, n_sc);
    for sc in 0..n_sc {
        let row = &tokens[sc * 2 * n_tx..][..2 * n_tx];
        for tx in 0..n_tx {
            h.set(tx, sc, Complex64::new(row[tx], row[n_tx + tx]));
        }
    }
    Ok(h)
}

/// Stacks samples into a `[batch, n_sc, 2 n_tx]` tensor.
pub fn samples_to_tokens<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a CsiSample>,
) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut batch = 0;
    for h in samples {
        match dims {
            None => dims = Some((h.n_tx, h.n_sc)),
            Some(d) if d != (h.n_tx, h.n_sc) => {
                return Err(ModelError::InputShape {
                    got: vec![h.n_sc, 2 * h.n_tx],
                    seq: d.1,
                    dim: 2 * d.0,
                })
            }
            _ => {}
        }
        data.extend(tokens_from_sample(h).into_iter().map(T::from_f64));
        batch += 1;
    }
    let (n_tx, n_sc) = dims.ok_or_else(|| ModelError::InputShape {
        got: vec![0],
        seq: 0,
        dim: 0,
    })?;
    Ok(Tensor::new(vec![batch, n_sc, 2 * n_tx], data)?)
}
