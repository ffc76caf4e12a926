use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use super::train::AdaptReport;
use super::Result;
use crate::fsutil::write_atomic;

/// JSON summary written next to the CSV tables of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub codeword_lens: Vec<usize>,
    pub env_ids: Vec<u32>,
    pub n_runs: usize,
    /// Free-form remarks, e.g. how the grid differs from the original one.
    pub notes: Vec<String>,
    pub tables: serde_json::Value,
}

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w)?;
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// `{root}/{experiment}/{label}/{env}/{M}/{seed}.csv`
pub fn run_trace_path(root: &Path, experiment: &str, r: &AdaptReport) -> PathBuf {
    root.join(experiment)
        .join(&r.label)
        .join(r.env_id.to_string())
        .join(r.codeword_len.to_string())
        .join(format!("{}.csv", r.seed))
}

/// Per-epoch validation trace of one adaptation run.
pub fn write_run_trace(root: &Path, experiment: &str, r: &AdaptReport) -> Result<PathBuf> {
    let bytes = csv_bytes(|w| {
        w.write_record(["epoch", "val_nmse", "val_nmse_db", "alpha", "best"])?;
        for (i, v) in r.val_trace.iter().enumerate() {
            let epoch = i as u64 + 1;
            let alpha = r
                .alpha_trace
                .get(i)
                .map(|a| a.to_string())
                .unwrap_or_default();
            w.write_record([
                epoch.to_string(),
                v.to_string(),
                crate::collab::to_db(*v).to_string(),
                alpha,
                u8::from(epoch == r.epochs_to_converge).to_string(),
            ])?;
        }
        Ok(())
    })?;
    let path = run_trace_path(root, experiment, r);
    write_atomic(&path, &bytes)?;
    Ok(path)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per adaptation run.
pub fn write_runs_csv(path: &Path, runs: &[AdaptReport]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record([
            "label",
            "mode",
            "env_id",
            "codeword_len",
            "seed",
            "sam_d_model",
            "n_train",
            "alpha_init",
            "alpha",
            "max_epochs",
            "epochs_run",
            "epochs_to_converge",
            "censored",
            "best_val_nmse",
            "pinv_val_nmse",
            "converged",
            "test_nmse",
            "test_nmse_db",
            "test_gcs",
            "pinv_test_nmse",
        ])?;
        for r in runs {
            w.write_record([
                r.label.clone(),
                r.mode.name().to_string(),
                r.env_id.to_string(),
                r.codeword_len.to_string(),
                r.seed.to_string(),
                r.sam_d_model.to_string(),
                r.n_train.to_string(),
                opt(r.alpha_init),
                opt(r.alpha),
                r.max_epochs.to_string(),
                r.epochs_run.to_string(),
                r.epochs_to_converge.to_string(),
                r.censored.to_string(),
                r.best_val_nmse.to_string(),
                r.pinv_val_nmse.to_string(),
                r.converged.to_string(),
                r.test_nmse.to_string(),
                r.test_nmse_db.to_string(),
                r.test_gcs.to_string(),
                r.pinv_test_nmse.to_string(),
            ])?;
        }
        Ok(())
    })?;
    Ok(write_atomic(path, &bytes)?)
}

/// Per-environment rows of one evaluation plus a final `mean` row.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record([
            "subject",
            "codeword_len",
            "env_id",
            "n_test",
            "nmse",
            "nmse_db",
            "gcs",
        ])?;
        for e in &report.envs {
            w.write_record([
                report.subject.clone(),
                report.codeword_len.to_string(),
                e.env_id.to_string(),
                e.n_test.to_string(),
                e.nmse.to_string(),
                e.nmse_db.to_string(),
                e.gcs.to_string(),
            ])?;
        }
        w.write_record([
            report.subject.clone(),
            report.codeword_len.to_string(),
            "mean".into(),
            String::new(),
            String::new(),
            report.mean_nmse_db.to_string(),
            report.mean_gcs.to_string(),
        ])?;
        Ok(())
    })?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn write_summary_json<S: Serialize>(path: &Path, summary: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(summary)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::Variant;

    fn report() -> AdaptReport {
        AdaptReport {
            env_id: 101,
            mode: Variant::Lasco,
            label: "lasco-a0.70".into(),
            codeword_len: 32,
            seed: 2,
            sam_d_model: 32,
            n_train: 1600,
            alpha_init: Some(0.7),
            alpha: Some(0.7),
            alpha_trace: vec![0.7, 0.7],
            val_trace: vec![0.5, 0.25],
            max_epochs: 100,
            epochs_run: 2,
            epochs_to_converge: 2,
            censored: true,
            best_val_nmse: 0.25,
            pinv_val_nmse: 0.8,
            converged: true,
            test_nmse: 0.3,
            test_nmse_db: -5.2,
            test_gcs: 0.9,
            pinv_test_nmse: 0.8,
        }
    }

    #[test]
    fn trace_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_run_trace(dir.path(), "fig6", &report()).unwrap();
        assert_eq!(p, dir.path().join("fig6/lasco-a0.70/101/32/2.csv"));
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",0.7,1"));
    }

    #[test]
    fn runs_csv_round_trips_through_the_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        write_runs_csv(&path, &[report(), report()]).unwrap();
        let mut rd = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "lasco-a0.70");
        assert_eq!(&rows[0][16], "0.3");
    }
}
