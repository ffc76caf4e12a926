use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lasco_core::chansim::write_dataset;
use lasco_core::collab::{to_db, Models, Variant};
use lasco_core::feedback::ProjectionCodec;
use lasco_core::fsutil::write_atomic;
use lasco_core::harness::{
    adapt as adapt_run, alpha_sweep, convergence_cdf, evaluate, lam_ckpt_name, mode_comparison,
    prepare_env, reference_ablation, sam_ckpt_name, sample_efficiency, size_sweep, suite_codec,
    suite_env_dataset, write_report_csv, write_run_trace, write_runs_csv, write_summary_json,
    AdaptReport, AdaptSetup, CdfTable, EvalSubject, ExperimentSummary, FrozenOutputs, HarnessError,
    Lab,
};
use lasco_core::models::{
    load_checkpoint, load_checkpoint_expect, save_checkpoint, Checkpoint, ReconModel,
};
use lasco_core::seed;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, CommonArgs, ConfigError, ModeArgs, RunConfig};
use crate::Figure;

/// Resolves the configuration and echoes it to `{out}/resolved-config.json`.
fn setup(common: &CommonArgs, mode: Option<&ModeArgs>) -> Result<RunConfig> {
    let rc = resolve(common, mode)?;
    let mut bytes = serde_json::to_vec_pretty(&rc)?;
    bytes.push(b'\n');
    write_atomic(&rc.paths.out.join("resolved-config.json"), &bytes)
        .with_context(|| format!("writing to {}", rc.paths.out.display()))?;
    Ok(rc)
}

fn open_lab(rc: &RunConfig) -> Result<Lab> {
    let mut suite = rc.suite.clone();
    suite.codeword_lens = rc.lengths();
    eprintln!(
        "preparing suite (codeword lengths {:?})",
        suite.codeword_lens
    );
    Ok(Lab::prepare(
        suite,
        Some(&rc.ckpt_dir()),
        rc.pretrain_first,
    )?)
}

fn save_experiment<T: Serialize>(
    rc: &RunConfig,
    name: &str,
    runs: &[AdaptReport],
    notes: Vec<String>,
    tables: &T,
) -> Result<()> {
    let out = &rc.paths.out;
    for r in runs {
        write_run_trace(out, name, r)?;
    }
    write_runs_csv(&out.join(name).join("runs.csv"), runs)?;
    let summary = ExperimentSummary {
        experiment: name.to_string(),
        seeds: rc.suite.adapt_seeds.clone(),
        codeword_lens: rc.lengths(),
        env_ids: rc.suite.adapt_envs.clone(),
        n_runs: runs.len(),
        notes,
        tables: serde_json::to_value(tables)?,
    };
    write_summary_json(&out.join(name).join("summary.json"), &summary)?;
    eprintln!("wrote {}", out.join(name).display());
    Ok(())
}

pub fn gen_data(common: &CommonArgs) -> Result<()> {
    let rc = setup(common, None)?;
    let dir = rc.paths.out.join("data");
    for &id in rc.suite.pretrain_envs.iter().chain(&rc.suite.adapt_envs) {
        let ds = suite_env_dataset(&rc.suite, id)?;
        let path = dir.join(format!("env{id}.lcds"));
        write_dataset(&ds, &path)?;
        println!(
            "env {id:>4} {} samples -> {}",
            ds.samples.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn pretrain(common: &CommonArgs) -> Result<()> {
    let mut rc = setup(common, None)?;
    rc.pretrain_first = true;
    let lab = open_lab(&rc)?;
    for st in &lab.stages {
        println!(
            "M={:>3}  LAM {:.2} dB  SAM {:.2} dB  pseudo-inverse {:.2} dB (validation)",
            st.m,
            to_db(st.lam_val_nmse),
            to_db(st.sam_val_nmse),
            to_db(st.pinv_val_nmse)
        );
        if let Some(rep) = &st.pretrain {
            write_summary_json(
                &rc.paths
                    .out
                    .join("pretrain")
                    .join(format!("m{}.json", st.m)),
                rep,
            )?;
        }
    }
    println!("checkpoints in {}", rc.ckpt_dir().display());
    Ok(())
}

/// Frozen base LAM and reference SAM for codeword length `m`.
fn frozen_pair(
    rc: &RunConfig,
    m: usize,
    codec: &ProjectionCodec,
) -> Result<(ReconModel<f32>, ReconModel<f32>)> {
    let explicit = rc.paths.lam_ckpt.is_some() || rc.paths.ref_ckpt.is_some();
    if explicit && rc.lengths().len() > 1 {
        return Err(ConfigError(
            "m: --lam-ckpt/--ref-ckpt hold one codec, so pass --m as well".into(),
        )
        .into());
    }
    let dir = rc.ckpt_dir();
    let lam_path = rc
        .paths
        .lam_ckpt
        .clone()
        .unwrap_or_else(|| dir.join(lam_ckpt_name(m)));
    let d = rc.suite.default_d_model();
    let ref_path = rc
        .paths
        .ref_ckpt
        .clone()
        .unwrap_or_else(|| dir.join(sam_ckpt_name(m, d)));
    if !(lam_path.exists() && ref_path.exists()) {
        if rc.pretrain_first && !explicit {
            let mut suite = rc.suite.clone();
            suite.codeword_lens = vec![m];
            Lab::prepare(suite, Some(&dir), true)?;
        } else {
            return Err(HarnessError::Missing(format!(
                "{} or {} not found; run `lasco pretrain` or pass --pretrain-first",
                lam_path.display(),
                ref_path.display()
            ))
            .into());
        }
    }
    let load = |p: &Path| -> Result<ReconModel<f32>> {
        let mut model = load_checkpoint_expect(p, &rc.suite.array, Some(&codec.key()))
            .with_context(|| format!("loading {}", p.display()))?
            .model;
        model.freeze();
        Ok(model)
    };
    Ok((load(&lam_path)?, load(&ref_path)?))
}

fn subset_seed(seed: u64, env_id: u32, m: usize, n: usize) -> u64 {
    seed::derive(seed, &format!("subset/{env_id}/{m}/{n}"))
}

pub fn adapt(common: &CommonArgs, mode_args: &ModeArgs) -> Result<()> {
    let rc = setup(common, Some(mode_args))?;
    let env_id = rc
        .env
        .ok_or_else(|| ConfigError("env: adapt needs --env (one of the adapt_envs)".into()))?;
    let mode = rc.collab_mode()?;
    let mut runs = Vec::new();
    for m in rc.lengths() {
        let codec = suite_codec(&rc.suite, m)?;
        let (lam, reference) = frozen_pair(&rc, m, &codec)?;
        let digests = (lam.digest(), reference.digest());
        let env = prepare_env(&suite_env_dataset(&rc.suite, env_id)?, &codec)?;
        let frozen = FrozenOutputs::compute(&lam, &reference, &env)?;
        for &seed in &rc.suite.adapt_seeds {
            let (env_n, frozen_n) = match rc.n_train.filter(|&n| n != env.train.n) {
                Some(n) => {
                    let idx = env
                        .train
                        .subset_indices(n, subset_seed(seed, env_id, m, n))?;
                    (
                        env.with_train_rows(&idx),
                        frozen.with_train_rows(&env.train, &idx),
                    )
                }
                None => (env.clone(), frozen.clone()),
            };
            let setup = AdaptSetup {
                env: &env_n,
                base: Some(&lam),
                reference: Some(&reference),
                frozen: Some(&frozen_n),
                sam_config: reference.config,
            };
            let mut tc = rc.suite.adapt;
            tc.seed = seed;
            let (mut report, ckpt) = adapt_run(&mode, &setup, &tc, &format!("adapt/{env_id}/{m}"))?;
            if (lam.digest(), reference.digest()) != digests {
                return Err(HarnessError::Mismatch(
                    "frozen parameters changed during adaptation".into(),
                )
                .into());
            }
            if env_n.train.n != env.train.n {
                report.label.push_str(&format!("-n{}", env_n.train.n));
            }
            if let Some(ck) = ckpt {
                let path = rc
                    .paths
                    .out
                    .join("adapt")
                    .join(&report.label)
                    .join(env_id.to_string())
                    .join(m.to_string())
                    .join(format!("{seed}.ckpt"));
                save_checkpoint(&ck, &path)?;
            }
            println!(
                "{} env {env_id} M={m} seed {seed}: test {:.2} dB, GCS {:.4}, best epoch {}{}",
                report.label,
                report.test_nmse_db,
                report.test_gcs,
                report.epochs_to_converge,
                report
                    .alpha
                    .map(|a| format!(", alpha {a:.3}"))
                    .unwrap_or_default()
            );
            runs.push(report);
        }
    }
    save_experiment(&rc, "adapt", &runs, Vec::new(), &())
}

pub fn eval(common: &CommonArgs, mode_args: &ModeArgs) -> Result<()> {
    let rc = setup(common, Some(mode_args))?;
    let mut mode = rc.collab_mode()?;
    let env_ids = rc
        .env
        .map(|e| vec![e])
        .unwrap_or_else(|| rc.suite.adapt_envs.clone());
    for m in rc.lengths() {
        let codec = suite_codec(&rc.suite, m)?;
        let (lam, reference) = frozen_pair(&rc, m, &codec)?;
        let proxy = match mode.variant {
            Variant::PretrainedSam => Some(reference.clone()),
            v if v.needs_small() => {
                let p = rc.paths.pxy_ckpt.as_ref().ok_or_else(|| {
                    HarnessError::Missing(format!(
                        "mode {v} needs an adapted small model; pass --pxy-ckpt"
                    ))
                })?;
                let ck: Checkpoint = load_checkpoint_expect(p, &rc.suite.array, Some(&codec.key()))
                    .with_context(|| format!("loading {}", p.display()))?;
                if mode.variant == Variant::ELasco {
                    let a = ck.meta.alpha.ok_or_else(|| {
                        HarnessError::Missing(format!("{} stores no learned alpha", p.display()))
                    })?;
                    if let Some(alpha) = mode.alpha.as_mut() {
                        alpha.value = a;
                    }
                }
                Some(ck.model)
            }
            _ => None,
        };
        let envs = env_ids
            .iter()
            .map(|&id| Ok(prepare_env(&suite_env_dataset(&rc.suite, id)?, &codec)?))
            .collect::<Result<Vec<_>>>()?;
        let subject = EvalSubject::Mode {
            mode,
            models: Models {
                base: Some(&lam),
                reference: Some(&reference),
                small: proxy.as_ref(),
            },
        };
        let report = evaluate(&subject, &envs, &codec.key())?;
        let stem = rc
            .paths
            .out
            .join("eval")
            .join(format!("{}-m{m}", report.subject));
        write_report_csv(&stem.with_extension("csv"), &report)?;
        write_summary_json(&stem.with_extension("json"), &report)?;
        for e in &report.envs {
            println!(
                "{} M={m} env {}: {:.2} dB, GCS {:.4}",
                report.subject, e.env_id, e.nmse_db, e.gcs
            );
        }
        println!(
            "{} M={m} mean: {:.2} dB, GCS {:.4}",
            report.subject, report.mean_nmse_db, report.mean_gcs
        );
    }
    Ok(())
}

fn run_sweep_alpha(rc: &RunConfig, lab: &Lab, name: &str) -> Result<()> {
    let mut tables = Vec::new();
    let mut runs = Vec::new();
    let mut notes = Vec::new();
    for m in rc.lengths() {
        let t = alpha_sweep(lab, m, &rc.suite.alphas)?;
        println!("M={m} alpha grid {:?}", t.alphas);
        println!("  mean test dB  {:?}", rounded(&t.mean_db));
        for (id, row) in t.env_ids.iter().zip(&t.per_env_db) {
            println!("  env {id:>4}      {:?}", rounded(row));
        }
        notes.push(format!(
            "M={m}: best alpha on mean test NMSE {}, tuned on validation {}, per-environment best {:?}",
            t.best_alpha, t.tuned_alpha, t.per_env_best_alpha
        ));
        runs.extend(t.runs.iter().cloned());
        tables.push(t);
    }
    save_experiment(rc, name, &runs, notes, &tables)
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

pub fn sweep_alpha(common: &CommonArgs) -> Result<()> {
    let rc = setup(common, None)?;
    let lab = open_lab(&rc)?;
    run_sweep_alpha(&rc, &lab, "sweep-alpha")
}

fn run_sweep_samples(rc: &RunConfig, lab: &Lab, alpha: Option<f64>, name: &str) -> Result<()> {
    let mut tables = Vec::new();
    let mut runs = Vec::new();
    let mut notes = Vec::new();
    for m in rc.lengths() {
        let a = match alpha {
            Some(a) => a,
            None => alpha_sweep(lab, m, &rc.suite.alphas)?.tuned_alpha,
        };
        let t = sample_efficiency(lab, m, &rc.suite.sample_counts, a)?;
        println!("M={m} counts {:?}", t.counts);
        for r in &t.rows {
            println!(
                "  {:<16} {:?}  degradation {:.2} dB",
                r.label,
                rounded(&r.mean_db),
                r.degradation_db
            );
        }
        let failed = t
            .baseline_a
            .iter()
            .filter(|f| f.count == t.counts[0] && !f.converged)
            .count();
        notes.push(format!(
            "M={m}: baseline-a with {} samples failed to beat the pseudo-inverse in {failed} of {} environments",
            t.counts[0],
            rc.suite.adapt_envs.len()
        ));
        runs.extend(t.runs.iter().cloned());
        tables.push(t);
    }
    save_experiment(rc, name, &runs, notes, &tables)
}

pub fn sweep_samples(common: &CommonArgs, alpha: Option<f64>) -> Result<()> {
    let rc = setup(common, None)?;
    if alpha.is_some_and(|a| !a.is_finite()) {
        return Err(ConfigError("alpha: must be finite".into()).into());
    }
    let lab = open_lab(&rc)?;
    run_sweep_samples(&rc, &lab, alpha, "sweep-samples")
}

fn run_sweep_size(rc: &RunConfig, lab: &Lab, name: &str) -> Result<()> {
    let mut tables = Vec::new();
    let mut runs = Vec::new();
    for m in rc.lengths() {
        let t = size_sweep(lab, m, &rc.suite.sam_d_models)?;
        for r in &t.rows {
            println!(
                "M={m} d_model {:>3} ({} params): {:.2} dB, mean alpha {:.3}",
                r.d_model, r.sam_params, r.mean_db, r.mean_alpha
            );
        }
        runs.extend(t.runs.iter().cloned());
        tables.push(t);
    }
    save_experiment(rc, name, &runs, Vec::new(), &tables)
}

pub fn sweep_size(common: &CommonArgs) -> Result<()> {
    let rc = setup(common, None)?;
    let lab = open_lab(&rc)?;
    run_sweep_size(&rc, &lab, "sweep-size")
}

/// The runs.csv columns the CDF needs.
#[derive(Debug, Deserialize)]
struct RunRow {
    label: String,
    mode: String,
    env_id: u32,
    codeword_len: usize,
    seed: u64,
    max_epochs: u64,
    epochs_run: u64,
    epochs_to_converge: u64,
    censored: bool,
}

fn read_runs(path: &Path) -> Result<Vec<AdaptReport>> {
    let mut rd =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let r: RunRow = row.with_context(|| format!("parsing {}", path.display()))?;
        let mode: Variant = r.mode.parse()?;
        out.push(AdaptReport {
            env_id: r.env_id,
            mode,
            label: r.label,
            codeword_len: r.codeword_len,
            seed: r.seed,
            sam_d_model: 0,
            n_train: 0,
            alpha_init: None,
            alpha: None,
            alpha_trace: Vec::new(),
            val_trace: Vec::new(),
            max_epochs: r.max_epochs,
            epochs_run: r.epochs_run,
            epochs_to_converge: r.epochs_to_converge,
            censored: r.censored,
            best_val_nmse: f64::NAN,
            pinv_val_nmse: f64::NAN,
            converged: false,
            test_nmse: f64::NAN,
            test_nmse_db: f64::NAN,
            test_gcs: f64::NAN,
            pinv_test_nmse: f64::NAN,
        });
    }
    Ok(out)
}

fn write_cdf_csv(path: &Path, table: &CdfTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "epoch", "fraction", "censored_runs"])?;
    for row in &table.rows {
        for &(e, f) in &row.points {
            let max = row
                .epochs
                .iter()
                .zip(&row.censored)
                .filter(|(_, c)| **c)
                .map(|(e, _)| *e)
                .max();
            let marker = if Some(e) == max {
                row.n_censored.to_string()
            } else {
                "0".to_string()
            };
            w.write_record([row.label.clone(), e.to_string(), f.to_string(), marker])?;
        }
    }
    write_atomic(path, &w.into_inner().map_err(|e| e.into_error())?)?;
    Ok(())
}

fn print_cdf(table: &CdfTable) {
    for r in &table.rows {
        println!(
            "{:<16} runs {:>3}  censored {:>3}  median epochs {:.1}",
            r.label, r.n_runs, r.n_censored, r.median
        );
    }
}

const CDF_NOTE: &str =
    "the CDF pools every (environment, codeword length, seed) run; censored runs are placed at max_epochs + 1";

fn run_ablation(rc: &RunConfig, lab: &Lab, name: &str) -> Result<()> {
    let t = reference_ablation(lab)?;
    print_cdf(&t.cdf);
    for (i, &(m, a)) in t.alphas.iter().enumerate() {
        println!(
            "M={m} (alpha {a}): lasco {:?} dB, variant-lasco {:?} dB",
            rounded(&t.lasco_db[i]),
            rounded(&t.variant_db[i])
        );
    }
    write_cdf_csv(&rc.paths.out.join(name).join("cdf.csv"), &t.cdf)?;
    save_experiment(rc, name, &t.runs, vec![CDF_NOTE.to_string()], &t)
}

pub fn cdf(common: &CommonArgs, files: &[PathBuf]) -> Result<()> {
    let rc = setup(common, None)?;
    if files.is_empty() {
        let lab = open_lab(&rc)?;
        return run_ablation(&rc, &lab, "cdf");
    }
    let mut reports = Vec::new();
    for f in files {
        reports.extend(read_runs(f)?);
    }
    let table = convergence_cdf(&reports)?;
    print_cdf(&table);
    let dir = rc.paths.out.join("cdf");
    write_cdf_csv(&dir.join("cdf.csv"), &table)?;
    write_summary_json(&dir.join("summary.json"), &table)?;
    Ok(())
}

pub fn repro(figure: Figure, common: &CommonArgs) -> Result<()> {
    let rc = setup(common, None)?;
    let lab = open_lab(&rc)?;
    match figure {
        Figure::Fig5 => {
            let mut tables = Vec::new();
            let mut runs = Vec::new();
            for m in rc.lengths() {
                let t = mode_comparison(&lab, m)?;
                println!("M={m} (lasco alpha {})", t.tuned_alpha);
                for r in t.rows.iter().chain([&t.lasco_per_env, &t.lasco_default]) {
                    println!(
                        "  {:<16} {:7.2} dB  GCS {:.4}",
                        r.label, r.mean_db, r.mean_gcs
                    );
                }
                println!("  per-env alphas {:?}", t.per_env_alpha);
                runs.extend(t.runs.iter().cloned());
                tables.push(t);
            }
            save_experiment(&rc, "fig5", &runs, Vec::new(), &tables)
        }
        Figure::Fig6 => run_sweep_alpha(&rc, &lab, "fig6"),
        Figure::Fig7 => run_sweep_samples(&rc, &lab, None, "fig7"),
        Figure::Fig8 => run_ablation(&rc, &lab, "fig8"),
        Figure::Fig9 => run_sweep_size(&rc, &lab, "fig9"),
    }
}

pub fn inspect_ckpt(file: &Path) -> Result<()> {
    let ck = load_checkpoint(file).with_context(|| format!("loading {}", file.display()))?;
    let digest: String = ck
        .model
        .digest()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let info = serde_json::json!({
        "file": file.display().to_string(),
        "role": ck.model.role,
        "config": ck.model.config,
        "codec": ck.codec,
        "meta": ck.meta,
        "parameters": ck.model.param_count(),
        "sha256": digest,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
