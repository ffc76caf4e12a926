use serde::{Deserialize, Serialize};

use super::data::{predict, EnvData, SplitData};
use super::{HarnessError, Result};
use crate::collab::{combine_outputs, gcs_tokens, mean, to_db, CollabMode, Models, Outputs};
use crate::feedback::CodecKey;
use crate::models::ReconModel;

/// Reference predictors used to check the evaluation plumbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// Returns the ground truth.
    Identity,
    /// Returns all zeros.
    Zero,
    /// Returns the pseudo-inverse reconstruction `H_in`.
    PseudoInverse,
}

#[derive(Debug, Clone, Copy)]
pub enum EvalSubject<'a> {
    Mode {
        mode: CollabMode,
        models: Models<'a, f32>,
    },
    Oracle(Oracle),
}

impl EvalSubject<'_> {
    pub fn label(&self) -> String {
        match self {
            EvalSubject::Mode { mode, .. } => super::train::mode_label(mode),
            EvalSubject::Oracle(o) => format!(
                "oracle-{}",
                serde_json::to_value(o)
                    .expect("enum")
                    .as_str()
                    .expect("str")
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub env_id: u32,
    pub n_test: usize,
    pub nmse: f64,
    pub nmse_db: f64,
    pub gcs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub codeword_len: usize,
    pub envs: Vec<EnvMetrics>,
    /// Mean over environments of the per-environment dB values.
    pub mean_nmse_db: f64,
    pub mean_gcs: f64,
}

impl EvalReport {
    pub fn from_envs(subject: String, codeword_len: usize, envs: Vec<EnvMetrics>) -> Self {
        let db: Vec<f64> = envs.iter().map(|e| e.nmse_db).collect();
        let gcs: Vec<f64> = envs.iter().map(|e| e.gcs).collect();
        Self {
            subject,
            codeword_len,
            mean_nmse_db: mean(&db),
            mean_gcs: mean(&gcs),
            envs,
        }
    }

    /// True when the stored aggregates match a recomputation from the rows.
    pub fn aggregates_consistent(&self, tol: f64) -> bool {
        let again = Self::from_envs(self.subject.clone(), self.codeword_len, self.envs.clone());
        (again.mean_nmse_db - self.mean_nmse_db).abs() <= tol
            && (again.mean_gcs - self.mean_gcs).abs() <= tol
    }
}

/// Metrics of `pred` against the targets of `split`.
pub fn env_metrics(
    env_id: u32,
    split: &SplitData,
    pred: &[f64],
    n_tx: usize,
    n_sc: usize,
) -> Result<EnvMetrics> {
    let nmse = mean(&split.nmse_of(pred)?);
    let g = (0..split.n)
        .map(|i| gcs_tokens(split.sample(&split.y, i), split.sample(pred, i), n_tx, n_sc))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(EnvMetrics {
        env_id,
        n_test: split.n,
        nmse,
        nmse_db: to_db(nmse),
        gcs: mean(&g),
    })
}

/// Builds a report from precomputed test predictions, one per environment.
pub fn evaluate_predictions(
    subject: String,
    envs: &[EnvData],
    preds: &[Vec<f64>],
) -> Result<EvalReport> {
    if envs.len() != preds.len() {
        return Err(HarnessError::Mismatch(format!(
            "{} environments, {} prediction sets",
            envs.len(),
            preds.len()
        )));
    }
    let codeword_len = check_codecs(envs, None)?;
    let rows = envs
        .iter()
        .zip(preds)
        .map(|(e, p)| env_metrics(e.env_id, &e.test, p, e.array.n_tx, e.array.n_sc))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_envs(subject, codeword_len, rows))
}

fn check_codecs(envs: &[EnvData], codec: Option<&CodecKey>) -> Result<usize> {
    let first = envs
        .first()
        .ok_or_else(|| HarnessError::Config("no environments to evaluate".into()))?;
    let want = codec.copied().unwrap_or(first.codec);
    if let Some(e) = envs.iter().find(|e| e.codec != want) {
        return Err(HarnessError::Mismatch(format!(
            "env {} was compressed with {:?}, expected {:?}",
            e.env_id, e.codec, want
        )));
    }
    Ok(want.m)
}

fn check_model(m: &ReconModel<f32>, env: &EnvData) -> Result<()> {
    if (m.config.n_tx, m.config.n_sc) != (env.array.n_tx, env.array.n_sc) {
        return Err(HarnessError::Mismatch(format!(
            "model built for {}x{}, env {} is {}x{}",
            m.config.n_tx, m.config.n_sc, env.env_id, env.array.n_tx, env.array.n_sc
        )));
    }
    Ok(())
}

/// Test-split metrics of `subject` on every environment, all of which must
/// have been compressed with `codec`. Forward passes run in f32, metrics
/// accumulate in f64.
pub fn evaluate(
    subject: &EvalSubject<'_>,
    envs: &[EnvData],
    codec: &CodecKey,
) -> Result<EvalReport> {
    check_codecs(envs, Some(codec))?;
    let preds = envs
        .iter()
        .map(|e| -> Result<Vec<f64>> {
            let t = &e.test;
            Ok(match subject {
                EvalSubject::Oracle(Oracle::Identity) => t.y.clone(),
                EvalSubject::Oracle(Oracle::Zero) => vec![0.0; t.y.len()],
                EvalSubject::Oracle(Oracle::PseudoInverse) => t.x.clone(),
                EvalSubject::Mode { mode, models } => {
                    mode.validate()?;
                    models.check(mode.variant)?;
                    let v = mode.variant;
                    let run =
                        |m: Option<&ReconModel<f32>>, used: bool| -> Result<Option<Vec<f64>>> {
                            match (used, m) {
                                (true, Some(m)) => {
                                    check_model(m, e)?;
                                    Ok(Some(predict(m, t)?))
                                }
                                _ => Ok(None),
                            }
                        };
                    let base = run(models.base, v.needs_base())?;
                    let reference = run(models.reference, v.needs_reference())?;
                    let small = run(models.small, v.needs_small())?;
                    let all: Vec<usize> = (0..t.n).collect();
                    let outputs = Outputs::<f64> {
                        base: base.map(|b| t.gather(&b, &all)),
                        reference: reference.map(|r| t.gather(&r, &all)),
                        small: small.map(|s| t.gather(&s, &all)),
                    };
                    combine_outputs(mode, &outputs)?.data().to_vec()
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(subject.label(), envs, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_dataset, sample_environment, ArrayConfig};
    use crate::feedback::build_codec;
    use crate::harness::prepare_env;

    fn envs() -> Vec<EnvData> {
        let arr = ArrayConfig::desk();
        let codec = build_codec(16, arr.real_dim(), 1).unwrap();
        [100, 101]
            .iter()
            .map(|&id| {
                prepare_env(
                    &generate_dataset(&sample_environment(id, 200.0, 4), 40, &arr).unwrap(),
                    &codec,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn oracles() {
        let e = envs();
        let codec = e[0].codec;
        let id = evaluate(&EvalSubject::Oracle(Oracle::Identity), &e, &codec).unwrap();
        for row in &id.envs {
            assert_eq!(row.nmse, 0.0);
            assert!((row.gcs - 1.0).abs() < 1e-12);
        }
        let zero = evaluate(&EvalSubject::Oracle(Oracle::Zero), &e, &codec).unwrap();
        for row in &zero.envs {
            assert_eq!(row.nmse, 1.0);
            assert_eq!(row.nmse_db, 0.0);
        }
        assert!(zero.aggregates_consistent(1e-12));
        assert_eq!(id.subject, "oracle-identity");
    }

    #[test]
    fn codec_mismatch_is_rejected() {
        let e = envs();
        let mut other = e[0].codec;
        other.seed += 1;
        assert!(matches!(
            evaluate(&EvalSubject::Oracle(Oracle::Zero), &e, &other),
            Err(HarnessError::Mismatch(_))
        ));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let e = envs();
        let arr = ArrayConfig::desk();
        let lam = crate::models::build_lam::<f32>(&arr, crate::models::Preset::Desk, 3).unwrap();
        let subject = EvalSubject::Mode {
            mode: CollabMode::new(crate::collab::Variant::PretrainedLam).unwrap(),
            models: Models {
                base: Some(&lam),
                ..Models::default()
            },
        };
        let a = serde_json::to_vec(&evaluate(&subject, &e, &e[0].codec).unwrap()).unwrap();
        let b = serde_json::to_vec(&evaluate(&subject, &e, &e[0].codec).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
