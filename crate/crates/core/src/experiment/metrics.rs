use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::agent::TrainMetrics;
use crate::error::{Error, Result};

use super::config::References;
use super::eval::sample_std;

pub const RESULTS_HEADER: [&str; 6] = [
    "experiment",
    "arm",
    "seed",
    "raw_return",
    "return_std",
    "normalized_score",
];
pub const CURVES_HEADER: [&str; 9] = [
    "arm",
    "seed",
    "epoch",
    "critic_loss",
    "policy_obj",
    "mean_kl",
    "beta",
    "buffer_size",
    "eval_return",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub arm: String,
    pub seed: u64,
    pub raw_return: f64,
    pub return_std: f64,
    pub normalized_score: f64,
}

/// Training traces of one (arm, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub arm: String,
    pub seed: u64,
    pub metrics: TrainMetrics,
}

fn sorted<T: Clone, K: Ord>(items: &[T], key: impl Fn(&T) -> K) -> Vec<T> {
    let mut v = items.to_vec();
    v.sort_by_key(key);
    v
}

/// Writes `results.csv`, `learning_curves.csv` and `summary.txt`, ordered
/// by (arm, seed).
pub fn emit_metrics(
    rows: &[ResultRow],
    traces: &[Trace],
    refs: &References,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Input("no result rows to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = sorted(rows, |r| (r.arm.clone(), r.seed));
    let traces = sorted(traces, |t| (t.arm.clone(), t.seed));

    let results = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results)?;
    w.write_record(RESULTS_HEADER)?;
    for r in &rows {
        w.write_record([
            r.experiment.clone(),
            r.arm.clone(),
            r.seed.to_string(),
            r.raw_return.to_string(),
            r.return_std.to_string(),
            r.normalized_score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&results, e))?;

    let curves = out_dir.join("learning_curves.csv");
    let mut w = csv::Writer::from_path(&curves)?;
    w.write_record(CURVES_HEADER)?;
    for t in &traces {
        let m = &t.metrics;
        for e in 0..m.epochs() {
            w.write_record([
                t.arm.clone(),
                t.seed.to_string(),
                e.to_string(),
                m.critic_loss[e].to_string(),
                m.policy_obj[e].to_string(),
                m.mean_kl[e].to_string(),
                m.beta[e].to_string(),
                m.buffer_size[e].to_string(),
                m.eval_return[e].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&curves, e))?;

    let summary = out_dir.join("summary.txt");
    std::fs::write(&summary, summary_text(&rows, refs)).map_err(|e| Error::io(&summary, e))?;
    Ok(vec![results, curves, summary])
}

/// Mean normalized score per arm, in arm order.
pub fn arm_means(rows: &[ResultRow]) -> Vec<(String, f64, f64, usize)> {
    let mut arms: Vec<String> = rows.iter().map(|r| r.arm.clone()).collect();
    arms.sort();
    arms.dedup();
    arms.into_iter()
        .map(|a| {
            let s: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == a)
                .map(|r| r.normalized_score)
                .collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            (a, mean, sample_std(&s), s.len())
        })
        .collect()
}

fn summary_text(rows: &[ResultRow], refs: &References) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", rows[0].experiment);
    let _ = writeln!(s, "random_ref: {}", refs.random_ref);
    let _ = writeln!(s, "expert_ref: {}", refs.expert_ref);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<16} {:>6} {:>12} {:>10}",
        "arm", "seeds", "score", "std"
    );
    for (arm, mean, std, n) in arm_means(rows) {
        let _ = writeln!(s, "{arm:<16} {n:>6} {mean:>12.2} {std:>10.2}");
    }
    s
}
