use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{predict, EnvData, FrozenOutputs, SplitData};
use super::{HarnessError, Precision, Result, TrainConfig};
use crate::chansim::Split;
use crate::collab::{
    self, combine_outputs, gcs_tokens, mean, mode_loss, CollabMode, Outputs, Variant,
};
use crate::models::{Checkpoint, ModelConfig, ReconModel, Role, TrainingMeta};
use crate::nncore::{
    AdamWConfig, AdamWState, Gradients, LrSchedule, ParamId, ParameterSet, Scalar, ScheduleKind,
    Tensor,
};
use crate::seed;

/// Patience rule on a validation metric: an epoch improves when its value
/// is strictly below every earlier one; training stops at the `patience`-th
/// consecutive epoch without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: u64,
    best: f64,
    best_epoch: u64,
    epoch: u64,
}

impl EarlyStopper {
    pub fn new(patience: u64) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's value; true when it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.epoch += 1;
        if value < self.best {
            self.best = value;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch - self.best_epoch >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> u64 {
        self.best_epoch
    }
}

/// Epoch (1-based) at which a run with this validation trace stops.
pub fn stopping_epoch(trace: &[f64], patience: u64, max_epochs: u64) -> u64 {
    let mut s = EarlyStopper::new(patience);
    let limit = (trace.len() as u64).min(max_epochs);
    for &v in &trace[..limit as usize] {
        s.observe(v);
        if s.should_stop() {
            return s.epoch;
        }
    }
    limit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub val_nmse: Vec<f64>,
    pub best_epoch: u64,
    pub best_val_nmse: f64,
    pub epochs_run: u64,
    pub stopped_early: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive_u64(seed, epoch)));
    idx
}

fn schedule(cfg: &TrainConfig, steps_per_epoch: u64) -> Result<LrSchedule> {
    let total = steps_per_epoch * cfg.max_epochs;
    Ok(match cfg.schedule {
        ScheduleKind::Constant => LrSchedule::constant(cfg.lr_peak, total),
        ScheduleKind::WarmupCosine => {
            let warmup = (cfg.warmup_fraction * total as f64).round() as u64;
            LrSchedule::warmup_cosine(cfg.lr_init, cfg.lr_peak, cfg.lr_final, warmup, total)?
        }
    })
}

fn adamw(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

fn diverged(what: &str, epoch: u64) -> HarnessError {
    HarnessError::Diverged {
        what: what.to_string(),
        epoch,
    }
}

fn val_nmse(pred: &[f64], split: &SplitData) -> Result<f64> {
    Ok(mean(&split.nmse_of(pred)?))
}

/// Plain MSE training of one model with best-validation retention.
fn train_standalone<T: Scalar>(
    mut model: ReconModel<T>,
    data: &EnvData,
    cfg: &TrainConfig,
    order_seed: u64,
    what: &str,
) -> Result<(ReconModel<T>, TrainTrace)> {
    let train = &data.train;
    let steps = train.n.div_ceil(cfg.batch_size) as u64;
    let sched = schedule(cfg, steps)?;
    let mut opt = AdamWState::new(&model.params, adamw(cfg));
    let mut grads = Gradients::for_params(&model.params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut trace = TrainTrace {
        train_loss: Vec::new(),
        val_nmse: Vec::new(),
        best_epoch: 0,
        best_val_nmse: f64::INFINITY,
        epochs_run: 0,
        stopped_early: false,
    };
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for chunk in epoch_order(train.n, order_seed, epoch).chunks(cfg.batch_size) {
            let x = train.gather::<T>(&train.x, chunk);
            let y = train.gather::<T>(&train.y, chunk);
            let (out, tape) = model.forward_train(&x)?;
            let lg = collab::loss_mse(&y, &out)?;
            if !lg.loss.is_finite() {
                return Err(diverged(what, epoch));
            }
            loss_sum += lg.loss * chunk.len() as f64;
            grads.zero();
            model.backward(&tape, &lg.d_out, &mut grads)?;
            opt.step(&mut model.params, &grads, sched.lr_at(step)?)
                .map_err(|_| diverged(what, epoch))?;
            step += 1;
        }
        let v = val_nmse(
            &predict(&model, &data.val).map_err(|_| diverged(what, epoch))?,
            &data.val,
        )?;
        if !v.is_finite() {
            return Err(diverged(what, epoch));
        }
        trace.train_loss.push(loss_sum / train.n as f64);
        trace.val_nmse.push(v);
        trace.epochs_run = epoch;
        if stopper.observe(v) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            trace.stopped_early = true;
            break;
        }
    }
    trace.best_epoch = stopper.best_epoch();
    trace.best_val_nmse = stopper.best();
    model.params = best;
    Ok((model, trace))
}

/// Trains one network on `data` with `cfg` (MSE objective), returning the
/// best-validation weights. The data order depends only on `cfg.seed`.
pub fn pretrain_model(
    model: &ReconModel<f32>,
    data: &EnvData,
    cfg: &TrainConfig,
    what: &str,
) -> Result<(ReconModel<f32>, TrainTrace)> {
    cfg.validate()?;
    let order_seed = seed::derive(cfg.seed, "pretrain/order");
    match cfg.precision {
        Precision::F32 => train_standalone(model.clone(), data, cfg, order_seed, what),
        Precision::F64 => {
            let (m, t) = train_standalone(model.cast::<f64>(), data, cfg, order_seed, what)?;
            Ok((m.cast::<f32>(), t))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub codec: crate::feedback::CodecKey,
    pub env_ids: Vec<u32>,
    pub lam_params: usize,
    pub sam_params: usize,
    pub lam: TrainTrace,
    pub sam: TrainTrace,
    pub pinv_val_nmse: f64,
}

/// Step 1: trains the base LAM and the reference SAM independently on the
/// same mixed data in the same order.
pub fn pretrain(
    lam: &ReconModel<f32>,
    sam: &ReconModel<f32>,
    mixed: &EnvData,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Checkpoint, PretrainReport)> {
    if mixed.env_ids.len() < 2 {
        return Err(HarnessError::Config(format!(
            "pre-training needs at least 2 environments, got {:?}",
            mixed.env_ids
        )));
    }
    let (lam_t, lam_trace) = pretrain_model(lam, mixed, cfg, "base LAM pre-training")?;
    let (sam_t, sam_trace) = pretrain_model(sam, mixed, cfg, "reference SAM pre-training")?;
    let meta = |t: &TrainTrace| TrainingMeta {
        epochs: t.epochs_run,
        best_epoch: t.best_epoch,
        seed: cfg.seed,
        dataset_ids: mixed.env_ids.clone(),
        best_val_nmse: Some(t.best_val_nmse),
        alpha: None,
    };
    let report = PretrainReport {
        codec: mixed.codec,
        env_ids: mixed.env_ids.clone(),
        lam_params: lam.param_count(),
        sam_params: sam.param_count(),
        pinv_val_nmse: mean(&mixed.val.pinv_nmse()?),
        lam: lam_trace.clone(),
        sam: sam_trace.clone(),
    };
    let lam_ck = Checkpoint {
        model: lam_t.with_role(Role::Base),
        codec: Some(mixed.codec),
        meta: meta(&lam_trace),
    };
    let sam_ck = Checkpoint {
        model: sam_t.with_role(Role::Reference),
        codec: Some(mixed.codec),
        meta: meta(&sam_trace),
    };
    Ok((lam_ck, sam_ck, report))
}

/// What an adaptation run needs besides its mode and config.
#[derive(Debug, Clone, Copy)]
pub struct AdaptSetup<'a> {
    pub env: &'a EnvData,
    /// Frozen pre-trained LAM.
    pub base: Option<&'a ReconModel<f32>>,
    /// Frozen pre-trained SAM; also the starting point of proxies and of
    /// the fine-tuned SAM.
    pub reference: Option<&'a ReconModel<f32>>,
    /// Precomputed outputs of `base` and `reference` on `env`.
    pub frozen: Option<&'a FrozenOutputs>,
    /// Architecture of a randomly initialized small model (Baseline A).
    pub sam_config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub env_id: u32,
    pub mode: Variant,
    pub label: String,
    pub codeword_len: usize,
    pub seed: u64,
    pub sam_d_model: usize,
    pub n_train: usize,
    pub alpha_init: Option<f64>,
    /// Alpha at the retained (best-validation) epoch.
    pub alpha: Option<f64>,
    pub alpha_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
    pub max_epochs: u64,
    pub epochs_run: u64,
    pub epochs_to_converge: u64,
    /// Ran to `max_epochs` without triggering early exit.
    pub censored: bool,
    pub best_val_nmse: f64,
    pub pinv_val_nmse: f64,
    /// Best validation NMSE beat the pseudo-inverse reconstruction.
    pub converged: bool,
    pub test_nmse: f64,
    pub test_nmse_db: f64,
    pub test_gcs: f64,
    pub pinv_test_nmse: f64,
}

fn outputs_for<T: Scalar>(
    mode: &CollabMode,
    frozen: &FrozenOutputs,
    split: Split,
    data: &SplitData,
    idx: &[usize],
    small: Option<Tensor<T>>,
) -> Outputs<T> {
    let k = FrozenOutputs::split_index(split);
    let v = mode.variant;
    Outputs {
        base: v.needs_base().then(|| data.gather(&frozen.base[k], idx)),
        reference: v
            .needs_reference()
            .then(|| data.gather(&frozen.reference[k], idx)),
        small,
    }
}

const EVAL_CHUNK: usize = 512;

/// Combined predictions of `mode` on a whole split, flat layout.
fn mode_predictions<T: Scalar>(
    mode: &CollabMode,
    small: Option<&ReconModel<T>>,
    frozen: &FrozenOutputs,
    split: Split,
    data: &SplitData,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.y.len());
    let idx: Vec<usize> = (0..data.n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let s = match small {
            Some(m) if mode.variant.needs_small() => {
                Some(m.forward(&data.gather::<T>(&data.x, chunk))?)
            }
            _ => None,
        };
        let h = combine_outputs(mode, &outputs_for(mode, frozen, split, data, chunk, s))?;
        out.extend(h.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

struct TestMetrics {
    nmse: f64,
    gcs: f64,
}

fn test_metrics(pred: &[f64], data: &SplitData, n_tx: usize, n_sc: usize) -> Result<TestMetrics> {
    let nmse = mean(&data.nmse_of(pred)?);
    let g = (0..data.n)
        .map(|i| gcs_tokens(data.sample(&data.y, i), data.sample(pred, i), n_tx, n_sc))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TestMetrics {
        nmse,
        gcs: mean(&g),
    })
}

/// Human-readable run label, e.g. `lasco-a0.70` or `finetuned-sam`.
pub fn mode_label(mode: &CollabMode) -> String {
    match (mode.variant, mode.alpha) {
        (Variant::Lasco, Some(a)) => format!("lasco-a{:.2}", a.value),
        (v, _) => v.name().to_string(),
    }
}

/// Step 2: adapts the small model of `mode` to `setup.env`; non-trained
/// modes are only evaluated. The retained state is the epoch with the best
/// validation NMSE, and test metrics are measured on it.
pub fn adapt(
    mode: &CollabMode,
    setup: &AdaptSetup<'_>,
    cfg: &TrainConfig,
    run_key: &str,
) -> Result<(AdaptReport, Option<Checkpoint>)> {
    cfg.validate()?;
    mode.validate()?;
    match cfg.precision {
        Precision::F32 => adapt_t::<f32>(mode, setup, cfg, run_key, |m| m.clone()),
        Precision::F64 => adapt_t::<f64>(mode, setup, cfg, run_key, |m| m.cast()),
    }
}

fn adapt_t<T: Scalar>(
    mode: &CollabMode,
    setup: &AdaptSetup<'_>,
    cfg: &TrainConfig,
    run_key: &str,
    lift: impl Fn(&ReconModel<f32>) -> ReconModel<T>,
) -> Result<(AdaptReport, Option<Checkpoint>)> {
    let env = setup.env;
    let v = mode.variant;
    let base = setup.base.map(&lift);
    let reference = setup.reference.map(&lift);
    let missing = |what: &str| HarnessError::Missing(format!("{v} needs the pre-trained {what}"));
    if v.needs_base() && base.is_none() {
        return Err(missing("LAM"));
    }
    let needs_ref = v.needs_reference() || (v.needs_small() && v != Variant::BaselineA);
    if needs_ref && reference.is_none() {
        return Err(missing("SAM"));
    }

    let computed;
    let frozen = match setup.frozen {
        Some(f) => f,
        None => {
            computed = FrozenOutputs::compute_partial(setup.base, setup.reference, env)?;
            &computed
        }
    };

    let run_seed = seed::derive(cfg.seed, run_key);
    let mut small: Option<ReconModel<T>> = match v {
        Variant::PretrainedLam => None,
        Variant::BaselineA => Some(ReconModel::new(
            setup.sam_config,
            Role::Proxy,
            seed::derive(run_seed, "baseline-a/init"),
        )?),
        _ => reference.clone().map(|m| {
            let mut m = m.with_role(if v == Variant::PretrainedSam {
                Role::Standalone
            } else {
                Role::Proxy
            });
            m.unfreeze();
            m
        }),
    };
    let mut alpha = mode.alpha;
    let pinv_val = mean(&env.val.pinv_nmse()?);
    let pinv_test = mean(&env.test.pinv_nmse()?);

    let mut val_trace = Vec::new();
    let mut alpha_trace = Vec::new();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_small = small.clone();
    let mut best_alpha = alpha;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    if v.is_trained() {
        let model = small.as_mut().expect("trained modes have a small model");
        let train = &env.train;
        let steps = train.n.div_ceil(cfg.batch_size) as u64;
        let sched = schedule(cfg, steps)?;
        let mut opt = AdamWState::new(&model.params, adamw(cfg));
        let mut grads = Gradients::for_params(&model.params);
        let mut alpha_ps = ParameterSet::<f64>::new();
        alpha_ps.insert(
            "alpha",
            Tensor::new(vec![1], vec![alpha.map_or(0.0, |a| a.value)])?,
        )?;
        let mut alpha_opt = AdamWState::new(
            &alpha_ps,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let mut alpha_grads = Gradients::for_params(&alpha_ps);
        let order_seed = seed::derive(run_seed, "order");
        let mut step = 0u64;
        let what = format!("{} adaptation on env {}", v, env.env_id);

        for epoch in 1..=cfg.max_epochs {
            for chunk in epoch_order(train.n, order_seed, epoch).chunks(cfg.batch_size) {
                let x = train.gather::<T>(&train.x, chunk);
                let y = train.gather::<T>(&train.y, chunk);
                let (out, tape) = model.forward_train(&x)?;
                let outputs = outputs_for(mode, frozen, Split::Train, train, chunk, Some(out));
                let step_mode = CollabMode { alpha, ..*mode };
                let lg = mode_loss(&step_mode, &y, &outputs)?;
                if !lg.loss.is_finite() {
                    return Err(diverged(&what, epoch));
                }
                grads.zero();
                model.backward(&tape, &lg.d_out, &mut grads)?;
                let lr = sched.lr_at(step)?;
                opt.step(&mut model.params, &grads, lr)
                    .map_err(|_| diverged(&what, epoch))?;
                if let (Some(a), Some(g)) = (alpha.as_mut(), lg.d_alpha) {
                    if a.learnable {
                        alpha_grads
                            .slot_mut(ParamId(0))
                            .expect("alpha is trainable")[0] = g;
                        alpha_opt
                            .step(&mut alpha_ps, &alpha_grads, lr)
                            .map_err(|_| diverged(&what, epoch))?;
                        a.value = alpha_ps.get(ParamId(0))[0];
                    }
                }
                step += 1;
            }
            let step_mode = CollabMode { alpha, ..*mode };
            let pred = mode_predictions(&step_mode, Some(&*model), frozen, Split::Val, &env.val)
                .map_err(|_| diverged(&what, epoch))?;
            let val = val_nmse(&pred, &env.val)?;
            if !val.is_finite() {
                return Err(diverged(&what, epoch));
            }
            val_trace.push(val);
            if let Some(a) = alpha {
                alpha_trace.push(a.value);
            }
            epochs_run = epoch;
            if stopper.observe(val) {
                best_small = Some(model.clone());
                best_alpha = alpha;
            }
            if stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
        small = best_small;
        alpha = best_alpha;
    }

    let final_mode = CollabMode { alpha, ..*mode };
    let best_val = if v.is_trained() {
        stopper.best()
    } else {
        val_nmse(
            &mode_predictions(&final_mode, small.as_ref(), frozen, Split::Val, &env.val)?,
            &env.val,
        )?
    };
    let pred = mode_predictions(&final_mode, small.as_ref(), frozen, Split::Test, &env.test)?;
    let tm = test_metrics(&pred, &env.test, env.array.n_tx, env.array.n_sc)?;

    let report = AdaptReport {
        env_id: env.env_id,
        mode: v,
        label: mode_label(mode),
        codeword_len: env.codec.m,
        seed: cfg.seed,
        sam_d_model: small.as_ref().map_or(0, |m| m.config.d_model),
        n_train: env.train.n,
        alpha_init: mode.alpha.map(|a| a.init_value),
        alpha: alpha.map(|a| a.value),
        alpha_trace,
        val_trace,
        max_epochs: cfg.max_epochs,
        epochs_run,
        epochs_to_converge: stopper.best_epoch(),
        censored: v.is_trained() && !stopped_early,
        best_val_nmse: best_val,
        pinv_val_nmse: pinv_val,
        converged: best_val < pinv_val,
        test_nmse: tm.nmse,
        test_nmse_db: collab::to_db(tm.nmse),
        test_gcs: tm.gcs,
        pinv_test_nmse: pinv_test,
    };
    let ckpt = match (v.is_trained(), small) {
        (true, Some(m)) => Some(Checkpoint {
            model: m.cast::<f32>(),
            codec: Some(env.codec),
            meta: TrainingMeta {
                epochs: epochs_run,
                best_epoch: stopper.best_epoch(),
                seed: run_seed,
                dataset_ids: env.env_ids.clone(),
                best_val_nmse: Some(best_val),
                alpha: alpha.map(|a| a.value),
            },
        }),
        _ => None,
    };
    Ok((report, ckpt))
}
