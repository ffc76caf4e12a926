//! Transformer reconstruction networks: the large base model, the small
//! reference/proxy models, tokenization of `H_in`, and checkpoints.
//!
//! A network sees one token per subcarrier, `[Re h_i; Im h_i]` of length
//! `2 n_tx`, embeds it linearly, adds a learned positional embedding, runs
//! `depth` transformer blocks and maps every token back to `2 n_tx` values.

mod checkpoint;
mod tokens;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expect, save_checkpoint,
    Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tokens::{sample_from_tokens, samples_to_tokens, tokens_from_sample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chansim::ArrayConfig;
use crate::feedback::CodecKey;
use crate::nncore::{
    BlockCache, Dense, Gradients, NnError, NormPlacement, ParamId, ParameterSet, Scalar, Tensor,
    TransformerBlock,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match [batch, {seq}, {dim}]")]
    InputShape {
        got: Vec<usize>,
        seq: usize,
        dim: usize,
    },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint codec {found:?} does not match requested {expected:?}")]
    CodecMismatch {
        found: Option<CodecKey>,
        expected: CodecKey,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(format!("unknown preset {other:?} (expected paper or desk)")),
        }
    }
}

/// What a network is used for in the collaboration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Reference,
    Proxy,
    Standalone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub norm: NormPlacement,
    pub n_tx: usize,
    pub n_sc: usize,
}

impl ModelConfig {
    pub fn lam(arr: &ArrayConfig, preset: Preset) -> Self {
        let (depth, d_model, d_ff, n_heads) = match preset {
            Preset::Paper => (20, 512, 2048, 8),
            Preset::Desk => (6, 128, 512, 4),
        };
        Self::with_dims(arr, depth, d_model, d_ff, n_heads, NormPlacement::Pre)
    }

    pub fn sam(arr: &ArrayConfig, preset: Preset) -> Self {
        let (depth, d_model, d_ff, n_heads) = match preset {
            Preset::Paper => (2, 64, 256, 4),
            Preset::Desk => (2, 32, 128, 2),
        };
        Self::with_dims(arr, depth, d_model, d_ff, n_heads, NormPlacement::Post)
    }

    pub fn with_dims(
        arr: &ArrayConfig,
        depth: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        norm: NormPlacement,
    ) -> Self {
        Self {
            depth,
            d_model,
            d_ff,
            n_heads,
            norm,
            n_tx: arr.n_tx,
            n_sc: arr.n_sc,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.n_tx
    }

    pub fn seq_len(&self) -> usize {
        self.n_sc
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.d_model < 2 || self.d_ff == 0 || self.n_tx == 0 || self.n_sc == 0 {
            return bad(format!("degenerate dimensions in {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, f, io) = (self.d_model, self.d_ff, self.input_dim());
        let embed = io * d + d;
        let pos = self.seq_len() * d;
        let block = 4 * d * d + 2 * d * f + 9 * d + f;
        let head = d * io + io;
        embed + pos + self.depth * block + head
    }
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Dense,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    head: Dense,
}

impl Layout {
    fn build<T: Scalar>(ps: &mut ParameterSet<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Dense::new(ps, "embed", cfg.input_dim(), d, seed)?;
        let pos = ps.init(
            "pos",
            vec![cfg.seq_len(), d],
            crate::nncore::Init::TruncNormal(0.02),
            seed,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    ps,
                    &format!("block{i}"),
                    d,
                    cfg.d_ff,
                    cfg.n_heads,
                    cfg.norm,
                    seed,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = Dense::new(ps, "head", d, cfg.input_dim(), seed)?;
        Ok(Self {
            embed,
            pos,
            blocks,
            head,
        })
    }
}

/// Intermediate values kept by [`ReconModel::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    x: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    last: Tensor<T>,
}

/// A reconstruction network mapping `[batch, n_sc, 2 n_tx]` tokens of `H_in`
/// to tokens of the estimate.
#[derive(Debug, Clone)]
pub struct ReconModel<T> {
    pub config: ModelConfig,
    pub role: Role,
    pub params: ParameterSet<T>,
    layout: Layout,
}

pub fn build_lam<T: Scalar>(arr: &ArrayConfig, preset: Preset, seed: u64) -> Result<ReconModel<T>> {
    ReconModel::new(ModelConfig::lam(arr, preset), Role::Base, seed)
}

pub fn build_sam<T: Scalar>(arr: &ArrayConfig, preset: Preset, seed: u64) -> Result<ReconModel<T>> {
    ReconModel::new(ModelConfig::sam(arr, preset), Role::Reference, seed)
}

/// Deep copy with independent parameters.
pub fn clone_parameters<T: Scalar>(src: &ReconModel<T>) -> ReconModel<T> {
    src.clone()
}

impl<T: Scalar> ReconModel<T> {
    pub fn new(config: ModelConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let layout = Layout::build(&mut params, &config, seed::derive(seed, "model-init"))?;
        debug_assert_eq!(params.numel(), config.param_count());
        Ok(Self {
            config,
            role,
            params,
            layout,
        })
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    pub fn cast<U: Scalar>(&self) -> ReconModel<U> {
        ReconModel {
            config: self.config,
            role: self.role,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.shape() {
            [b, s, d] if s == self.config.seq_len() && d == self.config.input_dim() && b > 0 => {
                Ok(b)
            }
            _ => Err(ModelError::InputShape {
                got: x.shape().to_vec(),
                seq: self.config.seq_len(),
                dim: self.config.input_dim(),
            }),
        }
    }

    fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.layout.embed.forward(&self.params, x)?;
        let pos = self.params.get(self.layout.pos);
        for chunk in h.data_mut().chunks_exact_mut(pos.len()) {
            for (v, &p) in chunk.iter_mut().zip(pos) {
                *v += p;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Forward pass that also records what [`ReconModel::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut h = self.embed(x)?;
        let mut caches = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let (next, cache) = block.forward(&self.params, &h)?;
            caches.push(cache);
            h = next;
        }
        let y = self.layout.head.forward(&self.params, &h)?;
        Ok((
            y,
            Tape {
                x: x.clone(),
                blocks: caches,
                last: h,
            },
        ))
    }

    /// Accumulates parameter gradients for `dy = dL/dy` into `grads` and
    /// returns `dL/dx`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let ps = &self.params;
        let mut dh = self.layout.head.backward(ps, &tape.last, dy, grads)?;
        for (block, cache) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            dh = block.backward(ps, cache, &dh, grads)?;
        }
        if let Some(gp) = grads.slot_mut(self.layout.pos) {
            let n = gp.len();
            for chunk in dh.data().chunks_exact(n) {
                for (g, &v) in gp.iter_mut().zip(chunk) {
                    *g += v;
                }
            }
        }
        Ok(self.layout.embed.backward(ps, &tape.x, &dh, grads)?)
    }
}
