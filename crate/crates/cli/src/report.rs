use std::path::Path;

use treeavg::ensemble::WeightProfile;
use treeavg::simnet::{ReplicateResult, SimConfig, SummaryRow};

use crate::CliError;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn replicates(path: &Path, results: &[ReplicateResult]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["replicate_idx", "estimator", "mse", "mse_ratio"]).map_err(csv_err)?;
    for r in results {
        for (e, m) in &r.mse {
            w.write_record([
                r.replicate_idx.to_string(),
                e.to_string(),
                m.to_string(),
                r.ratio[e].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn decisions(path: &Path, results: &[ReplicateResult]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["replicate_idx", "estimator", "ipw_value"]).map_err(csv_err)?;
    for r in results {
        for (e, v) in &r.decision_values {
            w.write_record([r.replicate_idx.to_string(), e.to_string(), v.to_string()])
                .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn summary(path: &Path, cfg: &SimConfig, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["estimator", "c", "grouping", "mean_ratio", "sd_ratio", "q25", "q50", "q75"])
        .map_err(csv_err)?;
    for s in rows {
        w.write_record([
            s.estimator.to_string(),
            cfg.c.to_string(),
            cfg.grouping.as_str().to_string(),
            s.mean_ratio.to_string(),
            s.sd_ratio.to_string(),
            s.q25.to_string(),
            s.q50.to_string(),
            s.q75.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn weights(path: &Path, profiles: &[WeightProfile]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["x1", "site", "omega"]).map_err(csv_err)?;
    for p in profiles {
        for (k, omega) in p.weights.iter().enumerate() {
            w.write_record([p.query_x[0].to_string(), (k + 1).to_string(), omega.to_string()])
                .map_err(csv_err)?;
        }
    }
    finish(w)
}

/// `lo:hi:n` with `n >= 2` evenly spaced points, or `n = 1` for `lo` alone.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("grid `{spec}`: expected lo:hi:n"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(bad());
    };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}
