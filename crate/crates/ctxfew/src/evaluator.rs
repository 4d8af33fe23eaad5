//! Episode-level evaluation: accuracy, 95% confidence intervals, the
//! balanced five-shot protocol, and average-rank aggregation across datasets.

use crate::embedder::EvalBnMode;
use crate::episodes::{sample_episode, sample_fixed_shot_episode, Dataset, SamplerConfig, Split};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::trainer::{episode_accuracy, Model, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Variable ways and shots per the sampling protocol.
    Standard,
    /// Exactly five support images per class; support and query both balanced.
    FiveShot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_episodes: usize,
    pub mode: EvalMode,
    pub bn_mode: EvalBnMode,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_episodes: 600,
            mode: EvalMode::Standard,
            bn_mode: EvalBnMode::SupportStats,
            split: Split::Test,
            seed: 0,
        }
    }
}

/// One (method, dataset) evaluation row. Percentages throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub method: String,
    pub dataset: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    /// (method, average rank), present once ranks are computed.
    pub ranks: Vec<(String, f64)>,
}

/// Mean and 95% confidence interval of per-episode accuracies, in percent.
/// The interval is 1.96 * sample standard deviation / sqrt(n); zero when all
/// accuracies are equal or n < 2.
pub fn summarize(accuracies: &[f64]) -> Result<(f64, f64)> {
    if accuracies.is_empty() {
        return Err(Error::Config("cannot summarize zero episodes".to_string()));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ci = if accuracies.len() < 2 {
        0.0
    } else {
        let var = accuracies.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    };
    Ok((mean * 100.0, ci * 100.0))
}

/// Per-episode accuracies under the requested protocol, in episode order.
pub fn accuracy_series(
    model: &Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    if opts.n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".to_string()));
    }
    let mut rng = derive_rng(opts.seed, "eval");
    let mut accs = Vec::with_capacity(opts.n_episodes);
    for _ in 0..opts.n_episodes {
        let episode = match opts.mode {
            EvalMode::Standard => sample_episode(dataset, opts.split, sampler, &mut rng)?,
            EvalMode::FiveShot => {
                sample_fixed_shot_episode(dataset, opts.split, sampler, 5, &mut rng)?
            }
        };
        accs.push(episode_accuracy(model, cfg, &episode, opts.bn_mode)?);
    }
    Ok(accs)
}

/// Runs the full protocol and produces one report row. A split that cannot
/// reach the configured maximum ways gets a clamp warning, not an error.
pub fn evaluate(
    model: &Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    opts: &EvalOptions,
    method: &str,
    dataset_name: &str,
) -> Result<EvalEntry> {
    let mut warnings = Vec::new();
    let eligible = dataset
        .class_ids_in_split(opts.split)
        .iter()
        .filter(|&&id| dataset.manifest.classes[id].images.len() > sampler.queries_per_class)
        .count();
    if eligible < sampler.ways_max {
        warnings.push(format!(
            "split has {eligible} usable classes; ways clamped below the configured maximum {}",
            sampler.ways_max
        ));
    }
    let accs = accuracy_series(model, cfg, dataset, sampler, opts)?;
    let (mean, ci95) = summarize(&accs)?;
    Ok(EvalEntry {
        method: method.to_string(),
        dataset: dataset_name.to_string(),
        mean,
        ci95,
        n: accs.len(),
        warnings,
    })
}

/// Average rank per method over a complete methods x datasets accuracy table.
/// Rank 1 is best within a dataset; exact ties share the mean of tied ranks.
pub fn average_rank(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = table.first() else {
        return Err(Error::Config("rank table has no methods".to_string()));
    };
    let d = first.len();
    if d == 0 || table.iter().any(|row| row.len() != d) {
        return Err(Error::Config("rank table must be rectangular and nonempty".to_string()));
    }
    let m = table.len();
    let mut totals = vec![0.0; m];
    for col in 0..d {
        for i in 0..m {
            let mine = table[i][col];
            let greater = (0..m).filter(|&j| table[j][col] > mine).count();
            let equal = (0..m).filter(|&j| table[j][col] == mine).count();
            totals[i] += greater as f64 + (equal as f64 + 1.0) / 2.0;
        }
    }
    Ok(totals.into_iter().map(|t| t / d as f64).collect())
}

/// Attaches average ranks to a report, grouping entries by method name in
/// first-appearance order. Every method must cover the same datasets.
pub fn with_ranks(mut report: EvalReport) -> Result<EvalReport> {
    let mut methods: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    for e in &report.entries {
        if !methods.contains(&e.method) {
            methods.push(e.method.clone());
        }
        if !datasets.contains(&e.dataset) {
            datasets.push(e.dataset.clone());
        }
    }
    let mut table = vec![vec![f64::NAN; datasets.len()]; methods.len()];
    for e in &report.entries {
        let i = methods.iter().position(|m| m == &e.method).unwrap();
        let j = datasets.iter().position(|d| d == &e.dataset).unwrap();
        table[i][j] = e.mean;
    }
    if table.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Config("rank table is incomplete: missing (method, dataset) rows".to_string()));
    }
    let ranks = average_rank(&table)?;
    report.ranks = methods.into_iter().zip(ranks).collect();
    Ok(report)
}

/// CSV rows: method, dataset, mean, ci95, n.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,dataset,mean,ci95,n\n");
    for e in &report.entries {
        out.push_str(&format!("{},{},{},{},{}\n", e.method, e.dataset, e.mean, e.ci95, e.n));
    }
    out
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))
}
