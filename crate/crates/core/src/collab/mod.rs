//! Collaboration algebra between the frozen base model, the frozen
//! reference model and the trainable proxy: combine laws, training
//! objectives, metrics and the forward rule of every comparison mode.
//!
//! All tensors here are network outputs in token layout
//! (`[batch, n_sc, 2 n_tx]`); the squared error is invariant to that
//! permutation of the real representation.

mod metrics;

pub use metrics::{gcs, gcs_tokens, mean, nmse, nmse_db, nmse_samples, to_db};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, ReconModel};
use crate::nncore::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum CollabError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ground truth has zero norm")]
    ZeroNorm,
    #[error("subcarrier column {sc} is all zeros")]
    ZeroColumn { sc: usize },
    #[error("{variant} needs a {slot} model")]
    MissingModel {
        variant: Variant,
        slot: &'static str,
    },
    #[error("{variant} requires the {slot} model to be frozen")]
    NotFrozen {
        variant: Variant,
        slot: &'static str,
    },
    #[error("invalid alpha for {variant}: {reason}")]
    Alpha { variant: Variant, reason: String },
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CollabError>;

/// The collaboration weight; learnable in E-LASCO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParam {
    pub value: f64,
    pub learnable: bool,
    pub init_value: f64,
}

impl AlphaParam {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            learnable: false,
            init_value: value,
        }
    }

    pub fn learnable(init_value: f64) -> Self {
        Self {
            value: init_value,
            learnable: true,
            init_value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PretrainedLam,
    PretrainedSam,
    FinetunedSam,
    BaselineA,
    Lasco,
    ELasco,
    VariantLasco,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::PretrainedLam,
        Variant::PretrainedSam,
        Variant::FinetunedSam,
        Variant::BaselineA,
        Variant::Lasco,
        Variant::ELasco,
        Variant::VariantLasco,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PretrainedLam => "pretrained-lam",
            Variant::PretrainedSam => "pretrained-sam",
            Variant::FinetunedSam => "finetuned-sam",
            Variant::BaselineA => "baseline-a",
            Variant::Lasco => "lasco",
            Variant::ELasco => "e-lasco",
            Variant::VariantLasco => "variant-lasco",
        }
    }

    /// Whether the mode trains a small model on the target environment.
    pub fn is_trained(self) -> bool {
        !matches!(self, Variant::PretrainedLam | Variant::PretrainedSam)
    }

    pub fn needs_base(self) -> bool {
        !matches!(self, Variant::PretrainedSam | Variant::FinetunedSam)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Variant::Lasco | Variant::ELasco)
    }

    pub fn needs_small(self) -> bool {
        self != Variant::PretrainedLam
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CollabError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CollabError::UnknownMode(s.to_string()))
    }
}

/// Which combine law LASCO trains and infers with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LascoLaw {
    /// `pxy + alpha (base - ref)`.
    #[default]
    Modified,
    /// `base + alpha (pxy - ref)`; kept for the ablation that shows why the
    /// scaling belongs on the frozen difference.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollabMode {
    pub variant: Variant,
    pub alpha: Option<AlphaParam>,
    #[serde(default)]
    pub law: LascoLaw,
}

impl CollabMode {
    pub fn new(variant: Variant) -> Result<Self> {
        let alpha = match variant {
            Variant::Lasco => Some(AlphaParam::fixed(DEFAULT_ALPHA)),
            Variant::ELasco => Some(AlphaParam::learnable(1.0)),
            _ => None,
        };
        let mode = Self {
            variant,
            alpha,
            law: LascoLaw::Modified,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn lasco(alpha: f64) -> Self {
        Self {
            variant: Variant::Lasco,
            alpha: Some(AlphaParam::fixed(alpha)),
            law: LascoLaw::Modified,
        }
    }

    pub fn e_lasco() -> Self {
        Self {
            variant: Variant::ELasco,
            alpha: Some(AlphaParam::learnable(1.0)),
            law: LascoLaw::Modified,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(CollabError::Alpha {
                variant: self.variant,
                reason: reason.to_string(),
            })
        };
        match (self.variant, self.alpha) {
            (Variant::Lasco, Some(a)) if a.learnable => bad("alpha is fixed in lasco"),
            (Variant::ELasco, Some(a)) if !a.learnable => bad("alpha is learnable in e-lasco"),
            (Variant::Lasco | Variant::ELasco, Some(a)) if !a.value.is_finite() => {
                bad("alpha must be finite")
            }
            (Variant::Lasco | Variant::ELasco, None) => bad("missing alpha"),
            (v, Some(_)) if !matches!(v, Variant::Lasco | Variant::ELasco) => {
                bad("mode takes no alpha")
            }
            _ => Ok(()),
        }
    }

    pub fn alpha_value(&self) -> Option<f64> {
        self.alpha.map(|a| a.value)
    }
}

/// Documented default for fixed-alpha LASCO.
pub const DEFAULT_ALPHA: f64 = 0.7;

/// Model handles used by a mode. `small` is the proxy in LASCO-style
/// modes and the stand-alone small model otherwise.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a, T> {
    pub base: Option<&'a ReconModel<T>>,
    pub reference: Option<&'a ReconModel<T>>,
    pub small: Option<&'a ReconModel<T>>,
}

impl<T> Default for Models<'_, T> {
    fn default() -> Self {
        Self {
            base: None,
            reference: None,
            small: None,
        }
    }
}

impl<'a, T: Scalar> Models<'a, T> {
    /// Checks presence and frozen flags for `variant`.
    pub fn check(&self, variant: Variant) -> Result<()> {
        let need = |slot: &'static str, m: Option<&ReconModel<T>>| {
            m.map(|_| ())
                .ok_or(CollabError::MissingModel { variant, slot })
        };
        let frozen = |slot: &'static str, m: Option<&ReconModel<T>>| match m {
            Some(m) if !m.is_frozen() => Err(CollabError::NotFrozen { variant, slot }),
            _ => Ok(()),
        };
        if variant.needs_base() {
            need("base", self.base)?;
        }
        if variant.needs_reference() {
            need("reference", self.reference)?;
        }
        if variant.needs_small() {
            need("small", self.small)?;
        }
        if variant.needs_base() && variant.is_trained() {
            frozen("base", self.base)?;
        }
        if variant.needs_reference() {
            frozen("reference", self.reference)?;
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(ts: &[&Tensor<T>]) -> Result<()> {
    let first = ts[0].shape();
    match ts.iter().find(|t| t.shape() != first) {
        Some(t) => Err(CollabError::Shape(format!("{first:?} vs {:?}", t.shape()))),
        None => Ok(()),
    }
}

fn map3<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(&[a, b, c])?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data).expect("shape preserved"))
}

/// `base + pxy - ref`, evaluated as `base + (pxy - ref)`.
pub fn combine_lasco<T: Scalar>(
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
) -> Result<Tensor<T>> {
    map3(base, pxy, reference, |b, p, r| b + (p - r))
}

/// `pxy + alpha (base - ref)`, evaluated as `alpha base + (pxy - alpha ref)`
/// so that `alpha = 1` reproduces [`combine_lasco`] bit for bit and
/// `pxy = ref` with `alpha = 1` returns `base` exactly.
pub fn combine_modified<T: Scalar>(
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let a = T::from_f64(alpha);
    map3(base, pxy, reference, |b, p, r| a * b + (p - a * r))
}

/// `base + alpha (pxy - ref)`.
pub fn combine_scaled<T: Scalar>(
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let a = T::from_f64(alpha);
    map3(base, pxy, reference, |b, p, r| b + a * (p - r))
}

/// Batch-averaged squared error and its gradient with respect to the output
/// of the trainable network.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub d_out: Tensor<T>,
    pub d_alpha: Option<f64>,
}

fn batch_of<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    match t.shape().first() {
        Some(&b) if b > 0 => Ok(b),
        _ => Err(CollabError::Shape(format!(
            "no batch axis in {:?}",
            t.shape()
        ))),
    }
}

/// `r = target - h_hat`, loss `sum(r^2) / B`, `d_out = -2 scale r / B`.
fn residual_loss<T: Scalar>(
    target: &Tensor<T>,
    h_hat: &Tensor<T>,
    scale: f64,
) -> Result<(f64, Tensor<T>, Vec<f64>)> {
    same_shape(&[target, h_hat])?;
    let b = batch_of(target)? as f64;
    let mut loss = 0.0;
    let mut r = Vec::with_capacity(target.len());
    for (&t, &h) in target.data().iter().zip(h_hat.data()) {
        let d = t.as_f64() - h.as_f64();
        loss += d * d;
        r.push(d);
    }
    let g = T::from_f64(-2.0 * scale / b);
    let d_out = r.iter().map(|&d| g * T::from_f64(d)).collect();
    let d_out = Tensor::new(target.shape().to_vec(), d_out).map_err(ModelError::from)?;
    Ok((loss / b, d_out, r))
}

/// Plain MSE against a single network output.
pub fn loss_mse<T: Scalar>(target: &Tensor<T>, out: &Tensor<T>) -> Result<LossGrad<T>> {
    let (loss, d_out, _) = residual_loss(target, out, 1.0)?;
    Ok(LossGrad {
        loss,
        d_out,
        d_alpha: None,
    })
}

/// `|H - (base + small)|^2`, the joint-sum objective of Baseline A and the
/// reference-free variant; gradient to `small` only.
pub fn loss_sum<T: Scalar>(
    target: &Tensor<T>,
    base: &Tensor<T>,
    small: &Tensor<T>,
) -> Result<LossGrad<T>> {
    same_shape(&[base, small])?;
    loss_mse(target, &base.add(small).map_err(ModelError::from)?)
}

/// `|H - (base + pxy - ref)|^2`; gradient to `pxy` only.
pub fn loss_l1<T: Scalar>(
    target: &Tensor<T>,
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
) -> Result<LossGrad<T>> {
    loss_mse(target, &combine_lasco(base, pxy, reference)?)
}

/// `|H - (pxy + alpha (base - ref))|^2`; gradient to `pxy` and, when alpha
/// is learnable, `dL/dalpha = -2 <r, base - ref> / B`.
pub fn loss_adapt<T: Scalar>(
    target: &Tensor<T>,
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
    alpha: &AlphaParam,
) -> Result<LossGrad<T>> {
    let h_hat = combine_modified(base, pxy, reference, alpha.value)?;
    let (loss, d_out, r) = residual_loss(target, &h_hat, 1.0)?;
    let d_alpha = alpha.learnable.then(|| {
        let dot: f64 = r
            .iter()
            .zip(base.data().iter().zip(reference.data()))
            .map(|(&ri, (&b, &rf))| ri * (b.as_f64() - rf.as_f64()))
            .sum();
        -2.0 * dot / target.shape()[0] as f64
    });
    Ok(LossGrad {
        loss,
        d_out,
        d_alpha,
    })
}

/// `|H - (base + alpha (pxy - ref))|^2`; gradient to `pxy` only.
pub fn loss_scaled<T: Scalar>(
    target: &Tensor<T>,
    base: &Tensor<T>,
    pxy: &Tensor<T>,
    reference: &Tensor<T>,
    alpha: f64,
) -> Result<LossGrad<T>> {
    let h_hat = combine_scaled(base, pxy, reference, alpha)?;
    let (loss, d_out, _) = residual_loss(target, &h_hat, alpha)?;
    Ok(LossGrad {
        loss,
        d_out,
        d_alpha: None,
    })
}

/// Outputs of the networks a mode uses, computed once per input batch.
#[derive(Debug, Clone)]
pub struct Outputs<T> {
    pub base: Option<Tensor<T>>,
    pub reference: Option<Tensor<T>>,
    pub small: Option<Tensor<T>>,
}

fn need<'a, T>(
    t: &'a Option<Tensor<T>>,
    variant: Variant,
    slot: &'static str,
) -> Result<&'a Tensor<T>> {
    t.as_ref()
        .ok_or(CollabError::MissingModel { variant, slot })
}

/// Combines precomputed outputs according to `mode`.
pub fn combine_outputs<T: Scalar>(mode: &CollabMode, out: &Outputs<T>) -> Result<Tensor<T>> {
    let v = mode.variant;
    Ok(match v {
        Variant::PretrainedLam => need(&out.base, v, "base")?.clone(),
        Variant::PretrainedSam | Variant::FinetunedSam => need(&out.small, v, "small")?.clone(),
        Variant::BaselineA | Variant::VariantLasco => {
            let (b, s) = (need(&out.base, v, "base")?, need(&out.small, v, "small")?);
            same_shape(&[b, s])?;
            b.add(s).map_err(ModelError::from)?
        }
        Variant::Lasco | Variant::ELasco => {
            let alpha = mode.alpha_value().ok_or(CollabError::Alpha {
                variant: v,
                reason: "missing alpha".into(),
            })?;
            let (b, p, r) = (
                need(&out.base, v, "base")?,
                need(&out.small, v, "small")?,
                need(&out.reference, v, "reference")?,
            );
            match mode.law {
                LascoLaw::Modified => combine_modified(b, p, r, alpha)?,
                LascoLaw::Scaled => combine_scaled(b, p, r, alpha)?,
            }
        }
    })
}

/// Training objective of a trained mode given precomputed outputs.
pub fn mode_loss<T: Scalar>(
    mode: &CollabMode,
    target: &Tensor<T>,
    out: &Outputs<T>,
) -> Result<LossGrad<T>> {
    let v = mode.variant;
    let small = need(&out.small, v, "small")?;
    match v {
        Variant::PretrainedSam | Variant::FinetunedSam => loss_mse(target, small),
        Variant::PretrainedLam => loss_mse(target, need(&out.base, v, "base")?),
        Variant::BaselineA | Variant::VariantLasco => {
            loss_sum(target, need(&out.base, v, "base")?, small)
        }
        Variant::Lasco | Variant::ELasco => {
            let alpha = mode.alpha.ok_or(CollabError::Alpha {
                variant: v,
                reason: "missing alpha".into(),
            })?;
            let (b, r) = (
                need(&out.base, v, "base")?,
                need(&out.reference, v, "reference")?,
            );
            match mode.law {
                LascoLaw::Modified => loss_adapt(target, b, small, r, &alpha),
                LascoLaw::Scaled => loss_scaled(target, b, small, r, alpha.value),
            }
        }
    }
}

/// Runs every network `mode` needs on `h_in`.
pub fn mode_outputs<T: Scalar>(
    mode: &CollabMode,
    models: &Models<'_, T>,
    h_in: &Tensor<T>,
) -> Result<Outputs<T>> {
    let v = mode.variant;
    let run = |m: Option<&ReconModel<T>>, used: bool| -> Result<Option<Tensor<T>>> {
        match (used, m) {
            (true, Some(m)) => Ok(Some(m.forward(h_in)?)),
            _ => Ok(None),
        }
    };
    Ok(Outputs {
        base: run(models.base, v.needs_base())?,
        reference: run(models.reference, v.needs_reference())?,
        small: run(models.small, v.needs_small())?,
    })
}

/// Reconstruction `H_hat` of `mode` for a batch of coarse inputs.
pub fn forward_mode<T: Scalar>(
    mode: &CollabMode,
    models: &Models<'_, T>,
    h_in: &Tensor<T>,
) -> Result<Tensor<T>> {
    mode.validate()?;
    models.check(mode.variant)?;
    combine_outputs(mode, &mode_outputs(mode, models, h_in)?)
}
