use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{prepare_env, EnvData, FrozenOutputs};
use super::train::{
    adapt, mode_label, pretrain, pretrain_model, AdaptReport, AdaptSetup, PretrainReport,
};
use super::{HarnessError, Result, TrainConfig};
use crate::chansim::{generate_datasets, mix_datasets, sample_environment, ArrayConfig, Dataset};
use crate::collab::{mean, to_db, CollabMode, Variant, DEFAULT_ALPHA};
use crate::feedback::{build_codec, CodecKey, ProjectionCodec};
use crate::models::{
    load_checkpoint_expect, save_checkpoint, Checkpoint, ModelConfig, Preset, ReconModel, Role,
    TrainingMeta,
};
use crate::nncore::NormPlacement;
use crate::seed;

/// Pre-training epochs of the desk suite.
pub const DESK_PRETRAIN_EPOCHS: u64 = 20;

/// Everything that determines a suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub preset: Preset,
    pub array: ArrayConfig,
    pub cell_radius: f64,
    pub samples_per_env: usize,
    pub pretrain_envs: Vec<u32>,
    pub adapt_envs: Vec<u32>,
    pub codeword_lens: Vec<usize>,
    /// Seeds of the repeated adaptation runs.
    pub adapt_seeds: Vec<u64>,
    /// Seed of environments, codecs, initial weights and pre-training order.
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub alphas: Vec<f64>,
    pub sample_counts: Vec<usize>,
    pub sam_d_models: Vec<usize>,
    pub jobs: usize,
}

impl SuiteConfig {
    /// 16 pre-training and 4 adaptation environments (ids 100..=103, even
    /// ids LOS) of 2000 samples, codeword lengths 16 and 32, 3 seeds.
    pub fn desk(pretrain_epochs: u64) -> Self {
        let seed = 2024;
        let mut pre = TrainConfig::pretrain(pretrain_epochs);
        pre.seed = seed;
        Self {
            preset: Preset::Desk,
            array: ArrayConfig::desk(),
            cell_radius: 200.0,
            samples_per_env: 2000,
            pretrain_envs: (0..16).collect(),
            adapt_envs: vec![100, 101, 102, 103],
            codeword_lens: vec![16, 32],
            adapt_seeds: vec![1, 2, 3],
            seed,
            pretrain: pre,
            adapt: TrainConfig::adapt(),
            alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.2, 1.5, 2.0],
            sample_counts: vec![200, 800, 1600],
            sam_d_models: vec![16, 32, 64],
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.array.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if self.pretrain_envs.len() < 2 {
            return bad("pre-training needs at least 2 environments".into());
        }
        if self.adapt_envs.is_empty()
            || self.codeword_lens.is_empty()
            || self.adapt_seeds.is_empty()
        {
            return bad("adapt_envs, codeword_lens and adapt_seeds must be non-empty".into());
        }
        if let Some(id) = self
            .adapt_envs
            .iter()
            .find(|id| self.pretrain_envs.contains(id))
        {
            return bad(format!(
                "environment {id} is used for both pre-training and adaptation"
            ));
        }
        let dim = self.array.real_dim();
        if let Some(m) = self.codeword_lens.iter().find(|&&m| m == 0 || m > dim) {
            return bad(format!("codeword length {m} outside 1..={dim}"));
        }
        if self.samples_per_env < 10 {
            return bad(format!("samples_per_env {} below 10", self.samples_per_env));
        }
        if !(self.cell_radius > 0.0) {
            return bad("cell_radius must be positive".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return bad("alphas must be finite".into());
        }
        for &d in &self.sam_d_models {
            self.sam_config(d).validate()?;
        }
        Ok(())
    }

    pub fn lam_config(&self) -> ModelConfig {
        ModelConfig::lam(&self.array, self.preset)
    }

    /// Reference SAM of the preset, or a depth-2 post-norm SAM of width
    /// `d_model` with `d_ff = 4 d_model` and 16-wide heads (at least 2).
    pub fn sam_config(&self, d_model: usize) -> ModelConfig {
        let preset = ModelConfig::sam(&self.array, self.preset);
        if d_model == preset.d_model {
            return preset;
        }
        let heads = (d_model / 16).max(2);
        ModelConfig::with_dims(
            &self.array,
            2,
            d_model,
            4 * d_model,
            heads,
            NormPlacement::Post,
        )
    }

    pub fn default_d_model(&self) -> usize {
        ModelConfig::sam(&self.array, self.preset).d_model
    }

    fn codec_seed(&self, m: usize) -> u64 {
        seed::derive(self.seed, &format!("codec/{m}"))
    }
}

/// A pre-trained reference SAM of a non-default width.
#[derive(Debug)]
pub struct SizedSam {
    pub model: ReconModel<f32>,
    pub digest: [u8; 32],
    /// Outputs of this SAM on each adaptation environment.
    pub outputs: Vec<FrozenOutputs>,
    pub best_val_nmse: f64,
}

/// Data and frozen models of one codeword length.
#[derive(Debug)]
pub struct Stage {
    pub m: usize,
    pub codec: CodecKey,
    pub mixed: EnvData,
    pub envs: Vec<EnvData>,
    pub lam: ReconModel<f32>,
    pub sam: ReconModel<f32>,
    pub frozen: Vec<FrozenOutputs>,
    /// Present when the stage pre-trained its models in this process.
    pub pretrain: Option<PretrainReport>,
    pub lam_val_nmse: f64,
    pub sam_val_nmse: f64,
    pub pinv_val_nmse: f64,
    lam_digest: [u8; 32],
    sam_digest: [u8; 32],
    sized: Mutex<BTreeMap<usize, Arc<SizedSam>>>,
}

impl Stage {
    pub fn env_index(&self, env_id: u32) -> Result<usize> {
        self.envs
            .iter()
            .position(|e| e.env_id == env_id)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "environment {env_id} is not an adaptation environment"
                ))
            })
    }
}

/// One adaptation run of a suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub m: usize,
    pub env_id: u32,
    pub mode: CollabMode,
    pub seed: u64,
    /// Training samples; `None` keeps the full split.
    pub n_train: Option<usize>,
    /// Width of reference and proxy; `None` uses the preset SAM.
    pub d_model: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RunId {
    m: usize,
    env_id: u32,
    label: String,
    seed: u64,
}

/// Pre-trained stages plus a cache of adaptation runs shared by all
/// experiments, so that e.g. the alpha sweep feeds the mode comparison.
pub struct Lab {
    pub config: SuiteConfig,
    pub stages: Vec<Stage>,
    store: Option<PathBuf>,
    cache: Mutex<HashMap<RunId, AdaptReport>>,
    frozen_checks: AtomicUsize,
    pool: rayon::ThreadPool,
}

/// File name of the pre-trained LAM for codeword length `m`.
pub fn lam_ckpt_name(m: usize) -> String {
    format!("lam-m{m}.ckpt")
}

/// File name of the pre-trained reference SAM of width `d`.
pub fn sam_ckpt_name(m: usize, d: usize) -> String {
    format!("sam-m{m}-d{d}.ckpt")
}

/// Per-environment datasets of the suite, generated deterministically.
pub fn suite_datasets(cfg: &SuiteConfig) -> Result<(Dataset, Vec<Dataset>)> {
    let specs = |ids: &[u32]| -> Vec<_> {
        ids.iter()
            .map(|&id| sample_environment(id, cfg.cell_radius, cfg.seed))
            .collect()
    };
    let pre = generate_datasets(&specs(&cfg.pretrain_envs), cfg.samples_per_env, &cfg.array)?;
    let mixed = mix_datasets(&pre, seed::derive(cfg.seed, "mix"))?;
    let adapt = generate_datasets(&specs(&cfg.adapt_envs), cfg.samples_per_env, &cfg.array)?;
    Ok((mixed, adapt))
}

/// Dataset of one environment of the suite.
pub fn suite_env_dataset(cfg: &SuiteConfig, env_id: u32) -> Result<Dataset> {
    let spec = sample_environment(env_id, cfg.cell_radius, cfg.seed);
    Ok(crate::chansim::generate_dataset(
        &spec,
        cfg.samples_per_env,
        &cfg.array,
    )?)
}

pub fn suite_codec(cfg: &SuiteConfig, m: usize) -> Result<ProjectionCodec> {
    Ok(build_codec(m, cfg.array.real_dim(), cfg.codec_seed(m))?)
}

impl Lab {
    /// Builds every stage. Pre-trained models are read from `store` when
    /// present there; otherwise they are trained if `allow_pretrain` is set
    /// (and then written to `store`), or the call fails.
    pub fn prepare(config: SuiteConfig, store: Option<&Path>, allow_pretrain: bool) -> Result<Lab> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        let (mixed_ds, adapt_ds) = suite_datasets(&config)?;
        let mut stages = Vec::new();
        for &m in &config.codeword_lens {
            let codec = suite_codec(&config, m)?;
            let mixed = prepare_env(&mixed_ds, &codec)?;
            let envs = adapt_ds
                .iter()
                .map(|d| prepare_env(d, &codec))
                .collect::<Result<Vec<_>>>()?;
            stages.push(build_stage(&config, m, mixed, envs, store, allow_pretrain)?);
        }
        Ok(Lab {
            config,
            stages,
            store: store.map(Path::to_path_buf),
            cache: Mutex::new(HashMap::new()),
            frozen_checks: AtomicUsize::new(0),
            pool,
        })
    }

    pub fn stage(&self, m: usize) -> Result<&Stage> {
        self.stages.iter().find(|s| s.m == m).ok_or_else(|| {
            HarnessError::Config(format!("codeword length {m} is not part of the suite"))
        })
    }

    /// Number of post-run frozen-model hash checks performed (all passed;
    /// a failure aborts the run).
    pub fn frozen_checks(&self) -> usize {
        self.frozen_checks.load(Ordering::Relaxed)
    }

    /// Reference SAM of width `d_model` for stage `m`, pre-training it on
    /// first use.
    pub fn sized_sam(&self, m: usize, d_model: usize) -> Result<Arc<SizedSam>> {
        let stage = self.stage(m)?;
        if let Some(s) = stage.sized.lock().expect("poisoned").get(&d_model) {
            return Ok(s.clone());
        }
        let cfg = &self.config;
        let sam_cfg = cfg.sam_config(d_model);
        let path = self
            .store
            .as_ref()
            .map(|d| d.join(sam_ckpt_name(m, d_model)));
        let (model, best_val) = match path.as_deref().filter(|p| p.exists()) {
            Some(p) => {
                let ck = load_pretrained(p, cfg, stage.codec, &sam_cfg)?;
                (ck.model, ck.meta.best_val_nmse.unwrap_or(f64::NAN))
            }
            None => {
                let init = ReconModel::new(
                    sam_cfg,
                    Role::Reference,
                    seed::derive(cfg.seed, &format!("sam/d{d_model}")),
                )?;
                let (model, trace) = pretrain_model(
                    &init,
                    &stage.mixed,
                    &cfg.pretrain,
                    "reference SAM pre-training",
                )?;
                let ck = Checkpoint {
                    model: model.with_role(Role::Reference),
                    codec: Some(stage.codec),
                    meta: meta(
                        cfg,
                        &trace.best_epoch,
                        trace.epochs_run,
                        trace.best_val_nmse,
                    ),
                };
                if let Some(p) = &path {
                    save_checkpoint(&ck, p)?;
                }
                (ck.model, trace.best_val_nmse)
            }
        };
        let mut model = model;
        model.freeze();
        let outputs = stage
            .envs
            .iter()
            .map(|e| FrozenOutputs::compute_partial(None, Some(&model), e))
            .collect::<Result<Vec<_>>>()?;
        let sized = Arc::new(SizedSam {
            digest: model.digest(),
            model,
            outputs,
            best_val_nmse: best_val,
        });
        stage
            .sized
            .lock()
            .expect("poisoned")
            .insert(d_model, sized.clone());
        Ok(sized)
    }

    fn label(&self, spec: &RunSpec) -> Result<String> {
        let stage = self.stage(spec.m)?;
        let env = &stage.envs[stage.env_index(spec.env_id)?];
        let mut label = mode_label(&spec.mode);
        if let Some(n) = spec.n_train.filter(|&n| n != env.train.n) {
            label.push_str(&format!("-n{n}"));
        }
        if let Some(d) = spec.d_model.filter(|&d| d != self.config.default_d_model()) {
            label.push_str(&format!("-d{d}"));
        }
        Ok(label)
    }

    fn run_id(&self, spec: &RunSpec) -> Result<RunId> {
        Ok(RunId {
            m: spec.m,
            env_id: spec.env_id,
            label: self.label(spec)?,
            seed: spec.seed,
        })
    }

    fn execute(&self, spec: &RunSpec) -> Result<AdaptReport> {
        let cfg = &self.config;
        let stage = self.stage(spec.m)?;
        let e = stage.env_index(spec.env_id)?;
        let full = &stage.envs[e];
        let key = format!("{}/{}", spec.env_id, spec.m);
        let (env, mut frozen) = match spec.n_train.filter(|&n| n != full.train.n) {
            Some(n) => {
                let idx = full
                    .train
                    .subset_indices(n, seed::derive(spec.seed, &format!("subset/{key}/{n}")))?;
                (
                    full.with_train_rows(&idx),
                    stage.frozen[e].with_train_rows(&full.train, &idx),
                )
            }
            None => (full.clone(), stage.frozen[e].clone()),
        };
        let d = spec.d_model.unwrap_or(cfg.default_d_model());
        let sized = (d != cfg.default_d_model())
            .then(|| self.sized_sam(spec.m, d))
            .transpose()?;
        let reference = match &sized {
            Some(s) => {
                let mut outs = s.outputs[e].clone();
                if let Some(n) = spec.n_train.filter(|&n| n != full.train.n) {
                    let idx = full
                        .train
                        .subset_indices(n, seed::derive(spec.seed, &format!("subset/{key}/{n}")))?;
                    outs = outs.with_train_rows(&full.train, &idx);
                }
                frozen.reference = outs.reference;
                &s.model
            }
            None => &stage.sam,
        };
        let setup = AdaptSetup {
            env: &env,
            base: Some(&stage.lam),
            reference: Some(reference),
            frozen: Some(&frozen),
            sam_config: cfg.sam_config(d),
        };
        let mut tc = cfg.adapt;
        tc.seed = spec.seed;
        let (mut report, _) = adapt(&spec.mode, &setup, &tc, &format!("adapt/{key}"))?;
        report.label = self.label(spec)?;

        let check = |what: &str, model: &ReconModel<f32>, digest: &[u8; 32]| {
            if model.digest() != *digest {
                return Err(HarnessError::Mismatch(format!(
                    "{what} parameters changed during adaptation"
                )));
            }
            Ok(())
        };
        check("base LAM", &stage.lam, &stage.lam_digest)?;
        check("reference SAM", &stage.sam, &stage.sam_digest)?;
        if let Some(s) = &sized {
            check("reference SAM", &s.model, &s.digest)?;
        }
        self.frozen_checks.fetch_add(1, Ordering::Relaxed);
        Ok(report)
    }

    /// Runs (or fetches from the cache) every spec; results follow `specs`.
    pub fn run(&self, specs: &[RunSpec]) -> Result<Vec<AdaptReport>> {
        let ids = specs
            .iter()
            .map(|s| self.run_id(s))
            .collect::<Result<Vec<_>>>()?;
        let mut todo: Vec<(RunId, RunSpec)> = Vec::new();
        {
            let cache = self.cache.lock().expect("poisoned");
            for (id, spec) in ids.iter().zip(specs) {
                if !cache.contains_key(id) && !todo.iter().any(|(t, _)| t == id) {
                    todo.push((id.clone(), *spec));
                }
            }
        }
        // Sized SAMs are pre-trained up front so parallel runs share them.
        for (_, spec) in &todo {
            if let Some(d) = spec.d_model.filter(|&d| d != self.config.default_d_model()) {
                self.sized_sam(spec.m, d)?;
            }
        }
        let done: Vec<Result<(RunId, AdaptReport)>> = self.pool.install(|| {
            todo.par_iter()
                .map(|(id, spec)| Ok((id.clone(), self.execute(spec)?)))
                .collect()
        });
        let mut cache = self.cache.lock().expect("poisoned");
        for r in done {
            let (id, report) = r?;
            cache.insert(id, report);
        }
        Ok(ids.iter().map(|id| cache[id].clone()).collect())
    }

    /// Every cached run in a stable order.
    pub fn all_runs(&self) -> Vec<AdaptReport> {
        let cache = self.cache.lock().expect("poisoned");
        let mut runs: Vec<AdaptReport> = cache.values().cloned().collect();
        runs.sort_by(|a, b| {
            (a.codeword_len, &a.label, a.env_id, a.seed).cmp(&(
                b.codeword_len,
                &b.label,
                b.env_id,
                b.seed,
            ))
        });
        runs
    }

    fn grid(
        &self,
        m: usize,
        modes: &[CollabMode],
        n_train: Option<usize>,
        d_model: Option<usize>,
    ) -> Vec<RunSpec> {
        let mut specs = Vec::new();
        for mode in modes {
            for &env_id in &self.config.adapt_envs {
                for &seed in &self.config.adapt_seeds {
                    specs.push(RunSpec {
                        m,
                        env_id,
                        mode: *mode,
                        seed,
                        n_train,
                        d_model,
                    });
                }
            }
        }
        specs
    }
}

fn meta(cfg: &SuiteConfig, best_epoch: &u64, epochs: u64, best_val: f64) -> TrainingMeta {
    TrainingMeta {
        epochs,
        best_epoch: *best_epoch,
        seed: cfg.seed,
        dataset_ids: cfg.pretrain_envs.clone(),
        best_val_nmse: Some(best_val),
        alpha: None,
    }
}

fn load_pretrained(
    path: &Path,
    cfg: &SuiteConfig,
    codec: CodecKey,
    model: &ModelConfig,
) -> Result<Checkpoint> {
    let ck = load_checkpoint_expect(path, &cfg.array, Some(&codec))?;
    if ck.model.config != *model {
        return Err(HarnessError::Mismatch(format!(
            "{} holds {:?}, the suite expects {:?}",
            path.display(),
            ck.model.config,
            model
        )));
    }
    if ck.meta.dataset_ids != cfg.pretrain_envs || ck.meta.seed != cfg.seed {
        return Err(HarnessError::Mismatch(format!(
            "{} was pre-trained on environments {:?} with seed {}, the suite uses {:?} with seed {}",
            path.display(),
            ck.meta.dataset_ids,
            ck.meta.seed,
            cfg.pretrain_envs,
            cfg.seed
        )));
    }
    Ok(ck)
}

fn build_stage(
    cfg: &SuiteConfig,
    m: usize,
    mixed: EnvData,
    envs: Vec<EnvData>,
    store: Option<&Path>,
    allow_pretrain: bool,
) -> Result<Stage> {
    let d = cfg.default_d_model();
    let lam_path = store.map(|s| s.join(lam_ckpt_name(m)));
    let sam_path = store.map(|s| s.join(sam_ckpt_name(m, d)));
    let have = |p: &Option<PathBuf>| p.as_ref().is_some_and(|p| p.exists());
    let pinv_val_nmse = mean(&mixed.val.pinv_nmse()?);
    let (lam_ck, sam_ck, report) = if have(&lam_path) && have(&sam_path) {
        let lam = load_pretrained(
            lam_path.as_deref().expect("checked"),
            cfg,
            mixed.codec,
            &cfg.lam_config(),
        )?;
        let sam = load_pretrained(
            sam_path.as_deref().expect("checked"),
            cfg,
            mixed.codec,
            &cfg.sam_config(d),
        )?;
        (lam, sam, None)
    } else if allow_pretrain {
        let lam = ReconModel::new(cfg.lam_config(), Role::Base, seed::derive(cfg.seed, "lam"))?;
        let sam = ReconModel::new(
            cfg.sam_config(d),
            Role::Reference,
            seed::derive(cfg.seed, &format!("sam/d{d}")),
        )?;
        let mut pc = cfg.pretrain;
        pc.seed = cfg.seed;
        let (lam_ck, sam_ck, report) = pretrain(&lam, &sam, &mixed, &pc)?;
        if let (Some(lp), Some(sp)) = (&lam_path, &sam_path) {
            save_checkpoint(&lam_ck, lp)?;
            save_checkpoint(&sam_ck, sp)?;
        }
        (lam_ck, sam_ck, Some(report))
    } else {
        return Err(HarnessError::Missing(format!(
            "pre-trained checkpoints {} and {} not found; run `pretrain` first or pass --pretrain-first",
            lam_ckpt_name(m),
            sam_ckpt_name(m, d)
        )));
    };
    let (mut lam, mut sam) = (lam_ck.model, sam_ck.model);
    lam.freeze();
    sam.freeze();
    let frozen = envs
        .iter()
        .map(|e| FrozenOutputs::compute(&lam, &sam, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage {
        m,
        codec: mixed.codec,
        lam_val_nmse: lam_ck.meta.best_val_nmse.unwrap_or(f64::NAN),
        sam_val_nmse: sam_ck.meta.best_val_nmse.unwrap_or(f64::NAN),
        pinv_val_nmse,
        mixed,
        envs,
        lam_digest: lam.digest(),
        sam_digest: sam.digest(),
        lam,
        sam,
        frozen,
        pretrain: report,
        sized: Mutex::new(BTreeMap::new()),
    })
}

/// Seed-averaged value per environment: `10 log10` of the mean over seeds
/// of a linear metric.
fn per_env_db(runs: &[AdaptReport], envs: &[u32], f: impl Fn(&AdaptReport) -> f64) -> Vec<f64> {
    envs.iter()
        .map(|&id| {
            let xs: Vec<f64> = runs.iter().filter(|r| r.env_id == id).map(&f).collect();
            to_db(mean(&xs))
        })
        .collect()
}

fn per_env_mean(runs: &[AdaptReport], envs: &[u32], f: impl Fn(&AdaptReport) -> f64) -> Vec<f64> {
    envs.iter()
        .map(|&id| {
            let xs: Vec<f64> = runs.iter().filter(|r| r.env_id == id).map(&f).collect();
            mean(&xs)
        })
        .collect()
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Seed-averaged results of one mode over the adaptation environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub label: String,
    pub mode: Variant,
    pub env_ids: Vec<u32>,
    pub per_env_db: Vec<f64>,
    pub per_env_gcs: Vec<f64>,
    /// Mean of `per_env_db`.
    pub mean_db: f64,
    pub mean_gcs: f64,
}

impl ModeRow {
    fn from_runs(label: String, mode: Variant, env_ids: &[u32], runs: &[AdaptReport]) -> Self {
        let per_env_db = per_env_db(runs, env_ids, |r| r.test_nmse);
        let per_env_gcs = per_env_mean(runs, env_ids, |r| r.test_gcs);
        Self {
            label,
            mode,
            env_ids: env_ids.to_vec(),
            mean_db: mean(&per_env_db),
            mean_gcs: mean(&per_env_gcs),
            per_env_db,
            per_env_gcs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub m: usize,
    pub alphas: Vec<f64>,
    pub env_ids: Vec<u32>,
    /// `[env][alpha]` seed-averaged test NMSE in dB.
    pub per_env_db: Vec<Vec<f64>>,
    /// Mean over environments, per alpha.
    pub mean_db: Vec<f64>,
    /// Mean over environments of the seed-averaged best validation NMSE.
    pub val_mean_db: Vec<f64>,
    /// Minimizer of `mean_db`.
    pub best_alpha: f64,
    /// Minimizer of `per_env_db[e]` for each environment.
    pub per_env_best_alpha: Vec<f64>,
    /// `[env][alpha]` seed-averaged best validation NMSE in dB.
    pub per_env_val_db: Vec<Vec<f64>>,
    /// Minimizer of `val_mean_db`; the alpha other experiments use.
    pub tuned_alpha: f64,
    /// Minimizer of `per_env_val_db[e]` for each environment.
    pub per_env_tuned_alpha: Vec<f64>,
    #[serde(skip)]
    pub runs: Vec<AdaptReport>,
}

/// One LASCO adaptation per (environment, alpha, seed) at codeword length `m`.
pub fn alpha_sweep(lab: &Lab, m: usize, alphas: &[f64]) -> Result<AlphaSweep> {
    if alphas.is_empty() {
        return Err(HarnessError::Config("empty alpha grid".into()));
    }
    let env_ids = lab.config.adapt_envs.clone();
    let modes: Vec<CollabMode> = alphas.iter().map(|&a| CollabMode::lasco(a)).collect();
    let runs = lab.run(&lab.grid(m, &modes, None, None))?;
    let per = runs.len() / alphas.len();
    let chunks: Vec<&[AdaptReport]> = runs.chunks(per).collect();
    let by_alpha: Vec<Vec<f64>> = chunks
        .iter()
        .map(|c| per_env_db(c, &env_ids, |r| r.test_nmse))
        .collect();
    let mean_db: Vec<f64> = by_alpha.iter().map(|v| mean(v)).collect();
    let val_by_alpha: Vec<Vec<f64>> = chunks
        .iter()
        .map(|c| per_env_db(c, &env_ids, |r| r.best_val_nmse))
        .collect();
    let val_mean_db: Vec<f64> = val_by_alpha.iter().map(|v| mean(v)).collect();
    let transpose = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..env_ids.len())
            .map(|e| m.iter().map(|v| v[e]).collect())
            .collect()
    };
    let per_env_db = transpose(&by_alpha);
    let per_env_val_db = transpose(&val_by_alpha);
    Ok(AlphaSweep {
        m,
        alphas: alphas.to_vec(),
        best_alpha: alphas[argmin(&mean_db)],
        per_env_best_alpha: per_env_db.iter().map(|v| alphas[argmin(v)]).collect(),
        tuned_alpha: alphas[argmin(&val_mean_db)],
        per_env_tuned_alpha: per_env_val_db.iter().map(|v| alphas[argmin(v)]).collect(),
        env_ids,
        per_env_val_db,
        per_env_db,
        mean_db,
        val_mean_db,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTable {
    pub m: usize,
    /// Alpha of the LASCO row, tuned on validation NMSE over the sweep grid.
    pub tuned_alpha: f64,
    pub rows: Vec<ModeRow>,
    /// LASCO with each environment at its own validation-tuned alpha.
    pub per_env_alpha: Vec<f64>,
    pub lasco_per_env: ModeRow,
    /// LASCO at the default alpha.
    pub lasco_default: ModeRow,
    #[serde(skip)]
    pub runs: Vec<AdaptReport>,
}

impl ModeTable {
    pub fn row(&self, mode: Variant) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Every collaboration mode at codeword length `m`; LASCO uses the alpha
/// tuned by `alpha_sweep` over the suite grid.
pub fn mode_comparison(lab: &Lab, m: usize) -> Result<ModeTable> {
    let sweep = alpha_sweep(lab, m, &lab.config.alphas)?;
    let modes: Vec<CollabMode> = Variant::ALL
        .iter()
        .map(|&v| match v {
            Variant::Lasco => Ok(CollabMode::lasco(sweep.tuned_alpha)),
            v => CollabMode::new(v),
        })
        .collect::<std::result::Result<_, _>>()?;
    let runs = lab.run(&lab.grid(m, &modes, None, None))?;
    let per = runs.len() / modes.len();
    let rows = modes
        .iter()
        .zip(runs.chunks(per))
        .map(|(mode, c)| {
            ModeRow::from_runs(mode_label(mode), mode.variant, &lab.config.adapt_envs, c)
        })
        .collect();
    let env_ids = &lab.config.adapt_envs;
    let per_env_runs: Vec<AdaptReport> = env_ids
        .iter()
        .zip(&sweep.per_env_tuned_alpha)
        .flat_map(|(&env, &a)| {
            let label = mode_label(&CollabMode::lasco(a));
            sweep
                .runs
                .iter()
                .filter(move |r| r.env_id == env && r.label == label)
                .cloned()
        })
        .collect();
    let lasco_per_env = ModeRow::from_runs(
        "lasco-per-env".into(),
        Variant::Lasco,
        env_ids,
        &per_env_runs,
    );
    let default_mode = CollabMode::lasco(DEFAULT_ALPHA);
    let default_runs = lab.run(&lab.grid(m, &[default_mode], None, None))?;
    let lasco_default = ModeRow::from_runs(
        mode_label(&default_mode),
        Variant::Lasco,
        env_ids,
        &default_runs,
    );
    Ok(ModeTable {
        m,
        tuned_alpha: sweep.tuned_alpha,
        rows,
        per_env_alpha: sweep.per_env_tuned_alpha,
        lasco_per_env,
        lasco_default,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub label: String,
    pub mode: Variant,
    /// Mean over environments of seed-averaged test dB, per count.
    pub mean_db: Vec<f64>,
    /// `mean_db` at the smallest count minus `mean_db` at the largest.
    pub degradation_db: f64,
}

/// Whether Baseline A beat the pseudo-inverse on one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFlag {
    pub count: usize,
    pub env_id: u32,
    /// Seed-averaged best validation NMSE.
    pub best_val_nmse: f64,
    pub pinv_val_nmse: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub m: usize,
    pub counts: Vec<usize>,
    pub rows: Vec<SampleRow>,
    pub baseline_a: Vec<ConvergenceFlag>,
    #[serde(skip)]
    pub runs: Vec<AdaptReport>,
}

impl SampleTable {
    pub fn row(&self, mode: Variant) -> Option<&SampleRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// LASCO (fixed `alpha`), the fine-tuned SAM and Baseline A trained on
/// seeded subsets of each size in `counts`; validation and test splits
/// are unchanged.
pub fn sample_efficiency(lab: &Lab, m: usize, counts: &[usize], alpha: f64) -> Result<SampleTable> {
    if counts.is_empty() {
        return Err(HarnessError::Config("empty sample-count grid".into()));
    }
    let stage = lab.stage(m)?;
    let available = stage.envs.iter().map(|e| e.train.n).min().unwrap_or(0);
    if let Some(c) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(HarnessError::Config(format!(
            "sample count {c} outside 1..={available} available"
        )));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let modes = [
        CollabMode::lasco(alpha),
        CollabMode::new(Variant::FinetunedSam)?,
        CollabMode::new(Variant::BaselineA)?,
    ];
    let env_ids = lab.config.adapt_envs.clone();
    let mut all = Vec::new();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for mode in &modes {
        let mut mean_db = Vec::new();
        for &c in &sorted {
            let runs = lab.run(&lab.grid(m, &[*mode], Some(c), None))?;
            mean_db.push(mean(&per_env_db(&runs, &env_ids, |r| r.test_nmse)));
            if mode.variant == Variant::BaselineA {
                let best = per_env_mean(&runs, &env_ids, |r| r.best_val_nmse);
                let pinv = per_env_mean(&runs, &env_ids, |r| r.pinv_val_nmse);
                for (i, &env_id) in env_ids.iter().enumerate() {
                    flags.push(ConvergenceFlag {
                        count: c,
                        env_id,
                        best_val_nmse: best[i],
                        pinv_val_nmse: pinv[i],
                        converged: best[i] < pinv[i],
                    });
                }
            }
            all.extend(runs);
        }
        rows.push(SampleRow {
            label: mode_label(mode),
            mode: mode.variant,
            degradation_db: mean_db[0] - mean_db[mean_db.len() - 1],
            mean_db,
        });
    }
    Ok(SampleTable {
        m,
        counts: sorted,
        rows,
        baseline_a: flags,
        runs: all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub label: String,
    pub n_runs: usize,
    pub n_censored: usize,
    /// Convergence epochs in ascending order; censored runs appear as
    /// `max_epochs + 1`.
    pub epochs: Vec<u64>,
    pub censored: Vec<bool>,
    /// `(epoch, fraction of runs converged by then)` at each distinct epoch.
    pub points: Vec<(u64, f64)>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub rows: Vec<CdfRow>,
}

impl CdfTable {
    pub fn row(&self, label: &str) -> Option<&CdfRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Empirical CDF of epochs-to-converge per run label.
pub fn convergence_cdf(reports: &[AdaptReport]) -> Result<CdfTable> {
    let mut groups: BTreeMap<&str, Vec<&AdaptReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.mode.is_trained()) {
        groups.entry(&r.label).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (label, runs) in groups {
        if runs.len() < 2 {
            return Err(HarnessError::Config(format!(
                "convergence CDF needs at least 2 runs of {label}, got {}",
                runs.len()
            )));
        }
        let mut pairs: Vec<(u64, bool)> = runs
            .iter()
            .map(|r| {
                if r.censored {
                    (r.max_epochs + 1, true)
                } else {
                    (r.epochs_to_converge, false)
                }
            })
            .collect();
        pairs.sort_unstable();
        let n = pairs.len();
        let mut points: Vec<(u64, f64)> = Vec::new();
        for (i, &(e, _)) in pairs.iter().enumerate() {
            let frac = (i + 1) as f64 / n as f64;
            match points.last_mut() {
                Some(last) if last.0 == e => last.1 = frac,
                _ => points.push((e, frac)),
            }
        }
        let epochs: Vec<u64> = pairs.iter().map(|p| p.0).collect();
        let as_f: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();
        rows.push(CdfRow {
            label: label.to_string(),
            n_runs: n,
            n_censored: pairs.iter().filter(|p| p.1).count(),
            censored: pairs.iter().map(|p| p.1).collect(),
            median: median(&as_f),
            epochs,
            points,
        });
    }
    Ok(CdfTable { rows })
}

/// LASCO against the reference-free variant on one (M, env, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub m: usize,
    pub env_id: u32,
    pub seed: u64,
    pub lasco_nmse: f64,
    pub variant_nmse: f64,
    pub lasco_epochs: u64,
    pub variant_epochs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// `(M, alpha)` used for LASCO at each codeword length.
    pub alphas: Vec<(usize, f64)>,
    pub pairs: Vec<AblationPair>,
    /// `[M][env]` seed-averaged test dB of LASCO and of the variant.
    pub lasco_db: Vec<Vec<f64>>,
    pub variant_db: Vec<Vec<f64>>,
    /// CDF over all codeword lengths, rows labelled `lasco` and `variant-lasco`.
    pub cdf: CdfTable,
    #[serde(skip)]
    pub runs: Vec<AdaptReport>,
}

/// Reference-SAM ablation over every codeword length of the suite, with
/// LASCO at the validation-tuned alpha of each length.
pub fn reference_ablation(lab: &Lab) -> Result<AblationTable> {
    let env_ids = lab.config.adapt_envs.clone();
    let mut table = AblationTable {
        alphas: Vec::new(),
        pairs: Vec::new(),
        lasco_db: Vec::new(),
        variant_db: Vec::new(),
        cdf: CdfTable { rows: Vec::new() },
        runs: Vec::new(),
    };
    let mut pooled = Vec::new();
    for &m in &lab.config.codeword_lens {
        let alpha = alpha_sweep(lab, m, &lab.config.alphas)?.tuned_alpha;
        let lasco = lab.run(&lab.grid(m, &[CollabMode::lasco(alpha)], None, None))?;
        let variant =
            lab.run(&lab.grid(m, &[CollabMode::new(Variant::VariantLasco)?], None, None))?;
        for (a, b) in lasco.iter().zip(&variant) {
            table.pairs.push(AblationPair {
                m,
                env_id: a.env_id,
                seed: a.seed,
                lasco_nmse: a.test_nmse,
                variant_nmse: b.test_nmse,
                lasco_epochs: a.epochs_to_converge,
                variant_epochs: b.epochs_to_converge,
            });
        }
        table
            .lasco_db
            .push(per_env_db(&lasco, &env_ids, |r| r.test_nmse));
        table
            .variant_db
            .push(per_env_db(&variant, &env_ids, |r| r.test_nmse));
        table.alphas.push((m, alpha));
        for r in lasco.iter().chain(&variant) {
            let mut r = r.clone();
            r.label = r.mode.name().to_string();
            pooled.push(r);
        }
        table.runs.extend(lasco);
        table.runs.extend(variant);
    }
    table.cdf = convergence_cdf(&pooled)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sam_params: usize,
    /// Pre-training validation NMSE of the reference SAM.
    pub sam_val_nmse: f64,
    pub per_env_db: Vec<f64>,
    pub mean_db: f64,
    /// Mean final alpha of the E-LASCO runs.
    pub mean_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTable {
    pub m: usize,
    pub lam_params: usize,
    pub rows: Vec<SizeRow>,
    #[serde(skip)]
    pub runs: Vec<AdaptReport>,
}

/// E-LASCO with reference and proxy of each width in `d_models` (each
/// reference pre-trained like the default one); the LAM is shared.
pub fn size_sweep(lab: &Lab, m: usize, d_models: &[usize]) -> Result<SizeTable> {
    let stage = lab.stage(m)?;
    let env_ids = lab.config.adapt_envs.clone();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &d in d_models {
        let sc = lab.config.sam_config(d);
        sc.validate()?;
        let sam_val_nmse = if d == lab.config.default_d_model() {
            stage.sam_val_nmse
        } else {
            lab.sized_sam(m, d)?.best_val_nmse
        };
        let runs = lab.run(&lab.grid(m, &[CollabMode::e_lasco()], None, Some(d)))?;
        let per_env_db = per_env_db(&runs, &env_ids, |r| r.test_nmse);
        let alphas: Vec<f64> = runs.iter().filter_map(|r| r.alpha).collect();
        rows.push(SizeRow {
            d_model: d,
            n_heads: sc.n_heads,
            d_ff: sc.d_ff,
            sam_params: sc.param_count(),
            sam_val_nmse,
            mean_db: mean(&per_env_db),
            per_env_db,
            mean_alpha: mean(&alphas),
        });
        all.extend(runs);
    }
    Ok(SizeTable {
        m,
        lam_params: stage.lam.param_count(),
        rows,
        runs: all,
    })
}
