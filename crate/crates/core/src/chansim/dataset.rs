use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{synthesize_channel, ArrayConfig, ChanSimError, CsiSample, EnvironmentSpec, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Samples of one environment (or a pooled mixture) with an 8:1:1 split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Source environments; a single entry unless the dataset was mixed.
    pub env_ids: Vec<u32>,
    pub array: ArrayConfig,
    /// Present for single-environment datasets.
    pub environment: Option<EnvironmentSpec>,
    pub samples: Vec<CsiSample>,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &CsiSample> {
        self.split(split)
            .iter()
            .map(move |&i| &self.samples[i as usize])
    }

    /// Identifier used in reports: the env id, or the first id for mixtures.
    pub fn primary_env(&self) -> u32 {
        self.env_ids.first().copied().unwrap_or(0)
    }

    /// Checks split disjointness and coverage.
    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            let i = i as usize;
            if i >= n {
                return Err(ChanSimError::Format(format!(
                    "split index {i} out of range {n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(ChanSimError::Format(format!(
                    "sample {i} appears in two splits"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(ChanSimError::Format(
                "sample not assigned to any split".into(),
            ));
        }
        for s in &self.samples {
            if s.n_tx != self.array.n_tx || s.n_sc != self.array.n_sc {
                return Err(ChanSimError::Format(
                    "sample shape disagrees with array config".into(),
                ));
            }
        }
        Ok(())
    }
}

/// 8:1:1 split sizes; train takes the rounding remainder.
pub(crate) fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

pub fn generate_dataset(
    env: &EnvironmentSpec,
    n_samples: usize,
    cfg: &ArrayConfig,
) -> Result<Dataset> {
    if n_samples < 10 {
        return Err(ChanSimError::TooFewSamples(n_samples));
    }
    cfg.validate()?;
    env.validate()?;

    let mut rng = seed::rng(env.seed);
    let samples: Vec<CsiSample> = (0..n_samples)
        .map(|_| synthesize_channel(env, cfg, &mut rng))
        .collect();

    let mut order: Vec<u32> = (0..n_samples as u32).collect();
    order.shuffle(&mut seed::rng(seed::derive(env.seed, "split")));
    let (n_train, n_val, _) = split_sizes(n_samples);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);

    Ok(Dataset {
        env_ids: vec![env.env_id],
        array: *cfg,
        environment: Some(env.clone()),
        samples,
        train: order,
        val,
        test,
    })
}

/// Generates one dataset per environment, in parallel; output order follows `envs`.
pub fn generate_datasets(
    envs: &[EnvironmentSpec],
    n_samples: usize,
    cfg: &ArrayConfig,
) -> Result<Vec<Dataset>> {
    envs.par_iter()
        .map(|env| generate_dataset(env, n_samples, cfg))
        .collect()
}

/// Pools datasets split-by-split and reshuffles each pool with `seed`.
pub fn mix_datasets(datasets: &[Dataset], seed: u64) -> Result<Dataset> {
    let first = datasets
        .first()
        .ok_or_else(|| ChanSimError::Mix("empty dataset list".into()))?;
    if let Some(other) = datasets.iter().find(|d| d.array != first.array) {
        return Err(ChanSimError::Mix(format!(
            "array config of envs {:?} differs from envs {:?}",
            other.env_ids, first.env_ids
        )));
    }

    let total: usize = datasets.iter().map(|d| d.samples.len()).sum();
    let mut samples = Vec::with_capacity(total);
    let mut env_ids = Vec::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for d in datasets {
        let offset = samples.len() as u32;
        train.extend(d.train.iter().map(|i| i + offset));
        val.extend(d.val.iter().map(|i| i + offset));
        test.extend(d.test.iter().map(|i| i + offset));
        samples.extend(d.samples.iter().cloned());
        env_ids.extend(&d.env_ids);
    }
    train.shuffle(&mut seed::rng(seed::derive(seed, "mix/train")));
    val.shuffle(&mut seed::rng(seed::derive(seed, "mix/val")));
    test.shuffle(&mut seed::rng(seed::derive(seed, "mix/test")));

    Ok(Dataset {
        env_ids,
        array: first.array,
        environment: None,
        samples,
        train,
        val,
        test,
    })
}
