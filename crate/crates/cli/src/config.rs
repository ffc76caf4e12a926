use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use lasco_core::chansim::ArrayConfig;
use lasco_core::collab::{AlphaParam, CollabMode, LascoLaw, Variant, DEFAULT_ALPHA};
use lasco_core::harness::{Precision, SuiteConfig, DESK_PRETRAIN_EPOCHS};
use lasco_core::models::Preset;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Where pre-trained checkpoints are read from and written to;
    /// defaults to `{out}/ckpt`.
    pub ckpt_dir: Option<PathBuf>,
    pub lam_ckpt: Option<PathBuf>,
    pub ref_ckpt: Option<PathBuf>,
    pub pxy_ckpt: Option<PathBuf>,
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub mode: Variant,
    /// Fixed alpha of `lasco`; must be absent for every other mode.
    pub alpha: Option<f64>,
    pub law: LascoLaw,
    /// Adaptation environment of `adapt`; `eval` uses all when absent.
    pub env: Option<u32>,
    /// Restricts commands to one codeword length.
    pub m: Option<usize>,
    /// Training-sample count of `adapt`.
    pub n_train: Option<usize>,
    pub pretrain_first: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::desk(DESK_PRETRAIN_EPOCHS),
            mode: Variant::Lasco,
            alpha: None,
            law: LascoLaw::Modified,
            env: None,
            m: None,
            n_train: None,
            pretrain_first: false,
            paths: Paths {
                out: PathBuf::from("lasco-out"),
                ckpt_dir: None,
                lam_ckpt: None,
                ref_ckpt: None,
                pxy_ckpt: None,
            },
        }
    }
}

/// Raised for anything wrong with the configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

fn list_u64(s: &str) -> std::result::Result<Vec<u64>, String> {
    parse_list(s)
}
fn list_u32(s: &str) -> std::result::Result<Vec<u32>, String> {
    parse_list(s)
}
fn list_usize(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_list(s)
}
fn list_f64(s: &str) -> std::result::Result<Vec<f64>, String> {
    parse_list(s)
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

// Aliases keep clap from treating the comma-separated lists as repeated flags.
type Ids = Vec<u32>;
type Sizes = Vec<usize>;
type Seeds = Vec<u64>;
type Alphas = Vec<f64>;

/// Options shared by every command except `inspect-ckpt`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suite seed (environments, codecs, initial weights, pre-training order).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent adaptation runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Model and array preset: desk or paper.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub pretrain_epochs: Option<u64>,
    #[arg(long)]
    pub adapt_epochs: Option<u64>,
    /// Early-exit patience of adaptation.
    #[arg(long)]
    pub patience: Option<u64>,
    /// Batch size of pre-training and adaptation.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Forward/backward precision: f32 or f64.
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    #[arg(long)]
    pub samples_per_env: Option<usize>,
    #[arg(long, value_parser = list_u32, value_name = "IDS")]
    pub pretrain_envs: Option<Ids>,
    #[arg(long, value_parser = list_u32, value_name = "IDS")]
    pub adapt_envs: Option<Ids>,
    #[arg(long, value_parser = list_usize, value_name = "LIST")]
    pub codeword_lens: Option<Sizes>,
    /// Seeds of repeated adaptation runs.
    #[arg(long, value_parser = list_u64, value_name = "LIST")]
    pub seeds: Option<Seeds>,
    #[arg(long, value_parser = list_f64, value_name = "LIST")]
    pub alphas: Option<Alphas>,
    #[arg(long, value_parser = list_usize, value_name = "LIST")]
    pub counts: Option<Sizes>,
    #[arg(long, value_parser = list_usize, value_name = "LIST")]
    pub d_models: Option<Sizes>,
    /// Restrict to one codeword length.
    #[arg(long)]
    pub m: Option<usize>,
    /// Directory of pre-trained checkpoints (default `{out}/ckpt`).
    #[arg(long, value_name = "DIR")]
    pub ckpt_dir: Option<PathBuf>,
    /// Pre-train missing checkpoints instead of failing.
    #[arg(long)]
    pub pretrain_first: bool,
}

/// Collaboration-mode options of `adapt` and `eval`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModeArgs {
    /// pretrained-lam, pretrained-sam, finetuned-sam, baseline-a, lasco, e-lasco or variant-lasco.
    #[arg(long, value_parser = parse_variant)]
    pub mode: Option<Variant>,
    /// Fixed alpha of lasco (default 0.7).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Combine law of lasco: modified or scaled.
    #[arg(long, value_parser = ["modified", "scaled"])]
    pub law: Option<String>,
    /// Adaptation environment id.
    #[arg(long)]
    pub env: Option<u32>,
    /// Training samples used for adaptation.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub lam_ckpt: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub ref_ckpt: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub pxy_ckpt: Option<PathBuf>,
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Reads `path` over the defaults. Unknown keys and type errors are
/// reported with the offending key.
pub fn load_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let patch: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return config_err(format!("{}: {e}", path.display())),
    };
    if !patch.is_object() {
        return config_err(format!(
            "{}: top level must be a JSON object",
            path.display()
        ));
    }
    let mut merged = serde_json::to_value(RunConfig::default()).expect("serializable defaults");
    merge(&mut merged, patch);
    serde_json::from_value(merged)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

pub fn resolve(common: &CommonArgs, mode: Option<&ModeArgs>) -> Result<RunConfig> {
    let mut rc = match &common.config {
        Some(p) => load_file(p)?,
        None => RunConfig::default(),
    };
    let s = &mut rc.suite;
    if let Some(p) = common.preset {
        s.preset = p;
        s.array = match p {
            Preset::Desk => ArrayConfig::desk(),
            Preset::Paper => ArrayConfig::paper(),
        };
    }
    if let Some(v) = common.seed {
        s.seed = v;
        s.pretrain.seed = v;
    }
    if let Some(v) = common.jobs {
        s.jobs = v;
    }
    if let Some(v) = common.pretrain_epochs {
        s.pretrain.max_epochs = v;
        s.pretrain.patience = v;
    }
    if let Some(v) = common.adapt_epochs {
        s.adapt.max_epochs = v;
    }
    if let Some(v) = common.patience {
        s.adapt.patience = v;
    }
    if let Some(v) = common.batch_size {
        s.pretrain.batch_size = v;
        s.adapt.batch_size = v;
    }
    if let Some(v) = &common.precision {
        let p = if v == "f64" {
            Precision::F64
        } else {
            Precision::F32
        };
        s.pretrain.precision = p;
        s.adapt.precision = p;
    }
    if let Some(v) = common.samples_per_env {
        s.samples_per_env = v;
    }
    if let Some(v) = &common.pretrain_envs {
        s.pretrain_envs = v.clone();
    }
    if let Some(v) = &common.adapt_envs {
        s.adapt_envs = v.clone();
    }
    if let Some(v) = &common.codeword_lens {
        s.codeword_lens = v.clone();
    }
    if let Some(v) = &common.seeds {
        s.adapt_seeds = v.clone();
    }
    if let Some(v) = &common.alphas {
        s.alphas = v.clone();
    }
    if let Some(v) = &common.counts {
        s.sample_counts = v.clone();
    }
    if let Some(v) = &common.d_models {
        s.sam_d_models = v.clone();
    }
    if common.m.is_some() {
        rc.m = common.m;
    }
    if let Some(v) = &common.out {
        rc.paths.out = v.clone();
    }
    if let Some(v) = &common.ckpt_dir {
        rc.paths.ckpt_dir = Some(v.clone());
    }
    rc.pretrain_first |= common.pretrain_first;
    if let Some(ma) = mode {
        if let Some(v) = ma.mode {
            rc.mode = v;
        }
        if ma.alpha.is_some() {
            rc.alpha = ma.alpha;
        }
        if let Some(l) = &ma.law {
            rc.law = if l == "scaled" {
                LascoLaw::Scaled
            } else {
                LascoLaw::Modified
            };
        }
        if ma.env.is_some() {
            rc.env = ma.env;
        }
        if ma.n_train.is_some() {
            rc.n_train = ma.n_train;
        }
        for (slot, v) in [
            (&mut rc.paths.lam_ckpt, &ma.lam_ckpt),
            (&mut rc.paths.ref_ckpt, &ma.ref_ckpt),
            (&mut rc.paths.pxy_ckpt, &ma.pxy_ckpt),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
    }
    validate(&rc)?;
    Ok(rc)
}

pub fn validate(rc: &RunConfig) -> Result<()> {
    if let Err(e) = rc.suite.validate() {
        return config_err(format!("suite: {e}"));
    }
    if let Some(m) = rc.m {
        if !rc.suite.codeword_lens.contains(&m) {
            return config_err(format!(
                "m: {m} is not one of codeword_lens {:?}",
                rc.suite.codeword_lens
            ));
        }
    }
    if let Some(env) = rc.env {
        if !rc.suite.adapt_envs.contains(&env) {
            return config_err(format!(
                "env: {env} is not one of adapt_envs {:?}",
                rc.suite.adapt_envs
            ));
        }
    }
    match (rc.mode, rc.alpha) {
        (Variant::ELasco, Some(_)) => {
            config_err("alpha: e-lasco learns alpha, so it cannot be set")
        }
        (Variant::Lasco, Some(a)) if !a.is_finite() => config_err("alpha: must be finite"),
        (Variant::Lasco, _) => Ok(()),
        (v, Some(_)) => config_err(format!("alpha: mode {v} takes no alpha")),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// The collaboration mode selected by `mode`, `alpha` and `law`.
    pub fn collab_mode(&self) -> Result<CollabMode> {
        let mut mode = CollabMode::new(self.mode)?;
        if self.mode == Variant::Lasco {
            mode.alpha = Some(AlphaParam::fixed(self.alpha.unwrap_or(DEFAULT_ALPHA)));
        }
        mode.law = self.law;
        Ok(mode)
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.paths
            .ckpt_dir
            .clone()
            .unwrap_or_else(|| self.paths.out.join("ckpt"))
    }

    /// Codeword lengths a command iterates over.
    pub fn lengths(&self) -> Vec<usize> {
        match self.m {
            Some(m) => vec![m],
            None => self.suite.codeword_lens.clone(),
        }
    }
}
