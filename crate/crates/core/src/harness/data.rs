use rand::seq::SliceRandom;

use super::{HarnessError, Result};
use crate::chansim::{ArrayConfig, Dataset, Split};
use crate::collab::nmse;
use crate::feedback::{coarse_reconstruct, compress, CodecKey, ProjectionCodec};
use crate::models::{tokens_from_sample, ReconModel};
use crate::nncore::{Scalar, Tensor};
use crate::seed;

/// One split in token layout: `x` holds the coarse reconstructions `H_in`,
/// `y` the ground truth, each `n` samples of `seq * dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub n: usize,
    pub seq: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl SplitData {
    pub fn sample_len(&self) -> usize {
        self.seq * self.dim
    }

    /// Stacks rows `idx` of `src` (an `n`-sample buffer in this layout).
    pub fn gather<T: Scalar>(&self, src: &[f64], idx: &[usize]) -> Tensor<T> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend(src[i * len..(i + 1) * len].iter().map(|&v| T::from_f64(v)));
        }
        Tensor::new(vec![idx.len(), self.seq, self.dim], data).expect("gather shape")
    }

    pub fn sample<'a>(&self, src: &'a [f64], i: usize) -> &'a [f64] {
        let len = self.sample_len();
        &src[i * len..(i + 1) * len]
    }

    /// Sorted indices of a seeded subset of `count` samples; all indices
    /// when `count == n`.
    pub fn subset_indices(&self, count: usize, seed: u64) -> Result<Vec<usize>> {
        if count == 0 || count > self.n {
            return Err(HarnessError::Config(format!(
                "sample count {count} outside 1..={} available",
                self.n
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        if count < self.n {
            idx.shuffle(&mut seed::rng(seed));
            idx.truncate(count);
            idx.sort_unstable();
        }
        Ok(idx)
    }

    /// Rows `idx` of a buffer in this layout.
    pub fn select_rows(&self, src: &[f64], idx: &[usize]) -> Vec<f64> {
        let len = self.sample_len();
        idx.iter()
            .flat_map(|&i| src[i * len..(i + 1) * len].iter().copied())
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> SplitData {
        SplitData {
            n: idx.len(),
            seq: self.seq,
            dim: self.dim,
            x: self.select_rows(&self.x, idx),
            y: self.select_rows(&self.y, idx),
        }
    }

    /// Seeded subset of `count` samples; the full split when `count == n`.
    pub fn truncate(&self, count: usize, seed: u64) -> Result<SplitData> {
        Ok(self.select(&self.subset_indices(count, seed)?))
    }

    /// Per-sample NMSE of `pred` (same layout as `y`).
    pub fn nmse_of(&self, pred: &[f64]) -> Result<Vec<f64>> {
        if pred.len() != self.y.len() {
            return Err(HarnessError::Mismatch(format!(
                "{} predicted values for {} targets",
                pred.len(),
                self.y.len()
            )));
        }
        (0..self.n)
            .map(|i| Ok(nmse(self.sample(&self.y, i), self.sample(pred, i))?))
            .collect()
    }

    /// Per-sample NMSE of the pseudo-inverse reconstruction itself.
    pub fn pinv_nmse(&self) -> Result<Vec<f64>> {
        self.nmse_of(&self.x)
    }
}

/// An environment (or mixture) prepared for one codec.
#[derive(Debug, Clone)]
pub struct EnvData {
    pub env_id: u32,
    pub env_ids: Vec<u32>,
    pub array: ArrayConfig,
    pub codec: CodecKey,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl EnvData {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Copy with the training split cut to `count` samples.
    pub fn with_train_count(&self, count: usize, seed: u64) -> Result<EnvData> {
        Ok(self.with_train_rows(&self.train.subset_indices(count, seed)?))
    }

    pub fn with_train_rows(&self, idx: &[usize]) -> EnvData {
        EnvData {
            train: self.train.select(idx),
            ..self.clone()
        }
    }
}

fn prepare_split(ds: &Dataset, split: Split, codec: &ProjectionCodec) -> Result<SplitData> {
    let (seq, dim) = (ds.array.n_sc, 2 * ds.array.n_tx);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for h in ds.split_samples(split) {
        let h_in = coarse_reconstruct(&compress(h, codec)?, codec, &ds.array)?;
        x.extend(tokens_from_sample(&h_in));
        y.extend(tokens_from_sample(h));
        n += 1;
    }
    Ok(SplitData { n, seq, dim, x, y })
}

/// Compresses every sample with `codec` and keeps `(H_in, H)` token pairs.
pub fn prepare_env(ds: &Dataset, codec: &ProjectionCodec) -> Result<EnvData> {
    if codec.dim() != ds.array.real_dim() {
        return Err(HarnessError::Mismatch(format!(
            "codec dimension {} vs array dimension {}",
            codec.dim(),
            ds.array.real_dim()
        )));
    }
    if ds.train.is_empty() || ds.val.is_empty() || ds.test.is_empty() {
        return Err(HarnessError::Config("dataset has an empty split".into()));
    }
    Ok(EnvData {
        env_id: ds.primary_env(),
        env_ids: ds.env_ids.clone(),
        array: ds.array,
        codec: codec.key(),
        train: prepare_split(ds, Split::Train, codec)?,
        val: prepare_split(ds, Split::Val, codec)?,
        test: prepare_split(ds, Split::Test, codec)?,
    })
}

const PREDICT_CHUNK: usize = 512;

/// Runs `model` over every input of `split`, returning outputs in the same
/// flat layout.
pub fn predict<T: Scalar>(model: &ReconModel<T>, split: &SplitData) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.y.len());
    let idx: Vec<usize> = (0..split.n).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let y = model.forward(&split.gather::<T>(&split.x, chunk))?;
        out.extend(y.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Outputs of the frozen models on every split of one environment.
#[derive(Debug, Clone)]
pub struct FrozenOutputs {
    pub base: [Vec<f64>; 3],
    pub reference: [Vec<f64>; 3],
}

impl FrozenOutputs {
    pub fn compute<T: Scalar>(
        base: &ReconModel<T>,
        reference: &ReconModel<T>,
        env: &EnvData,
    ) -> Result<Self> {
        let run = |m: &ReconModel<T>| -> Result<[Vec<f64>; 3]> {
            Ok([
                predict(m, &env.train)?,
                predict(m, &env.val)?,
                predict(m, &env.test)?,
            ])
        };
        Ok(Self {
            base: run(base)?,
            reference: run(reference)?,
        })
    }

    /// Like `compute`, leaving the outputs of an absent model empty.
    pub fn compute_partial<T: Scalar>(
        base: Option<&ReconModel<T>>,
        reference: Option<&ReconModel<T>>,
        env: &EnvData,
    ) -> Result<Self> {
        let run = |m: Option<&ReconModel<T>>| -> Result<[Vec<f64>; 3]> {
            match m {
                Some(m) => Ok([
                    predict(m, &env.train)?,
                    predict(m, &env.val)?,
                    predict(m, &env.test)?,
                ]),
                None => Ok(Default::default()),
            }
        };
        Ok(Self {
            base: run(base)?,
            reference: run(reference)?,
        })
    }

    /// Keeps the training rows `idx` (see `SplitData::subset_indices`).
    pub fn with_train_rows(&self, train: &SplitData, idx: &[usize]) -> Self {
        let pick = |v: &[Vec<f64>; 3]| {
            let rows = if v[0].is_empty() {
                Vec::new()
            } else {
                train.select_rows(&v[0], idx)
            };
            [rows, v[1].clone(), v[2].clone()]
        };
        Self {
            base: pick(&self.base),
            reference: pick(&self.reference),
        }
    }

    pub fn split_index(split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}
