use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{unpaired_t_test_with, AccuracyStats, Variance};
use crate::error::{Error, Result};
use crate::train::{AblationResult, RunResult};

/// Rounds to 12 significant digits and prints the shortest decimal that
/// reads back to the rounded value.
pub fn format_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float");
    format!("{rounded}")
}

fn round_sig(v: f64) -> f64 {
    if v.is_finite() {
        format!("{v:.11e}").parse().expect("formatted float")
    } else {
        v
    }
}

/// Marks conditions that differ from a reference condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRule {
    pub reference: String,
    pub symbol: String,
    /// `true`: significant improvement (p < alpha). `false`: deterioration
    /// that is not significant (p > alpha).
    pub improvement: bool,
    /// Restrict to one metric (`original` or `ft`); both when `None`.
    pub metric: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub alpha: f64,
    pub variance: Variance,
    pub markers: Vec<MarkerRule>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        let improve = |reference: &str, symbol: &str| MarkerRule {
            reference: reference.into(),
            symbol: symbol.into(),
            improvement: true,
            metric: None,
        };
        let tie = |reference: &str, symbol: &str| MarkerRule {
            reference: reference.into(),
            symbol: symbol.into(),
            improvement: false,
            metric: Some("ft".into()),
        };
        Self {
            alpha: 0.05,
            variance: Variance::Pooled,
            markers: vec![
                improve("ft", "*"),
                improve("ft_l2", "†"),
                improve("original", "#"),
                tie("ft", "♦"),
                tie("ft_l2", "♥"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub markers: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub config_hash: String,
    pub n: usize,
    pub original: MetricSummary,
    pub ft: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub alpha: f64,
    pub variance: Variance,
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

fn metric_values(r: &RunResult, metric: &str) -> Vec<f64> {
    match metric {
        "original" => r.original_accs(),
        _ => r.ft_accs(),
    }
}

impl Summary {
    pub fn build(results: &[RunResult], opts: &ReportOptions) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::InvalidConfig("no results to report".into()));
        }
        let find = |name: &str| results.iter().find(|r| r.condition == name);
        let mut comparisons = vec![];
        for (i, a) in results.iter().enumerate() {
            for b in &results[i + 1..] {
                for metric in ["original", "ft"] {
                    let (va, vb) = (metric_values(a, metric), metric_values(b, metric));
                    if va.len() < 2 || vb.len() < 2 {
                        continue;
                    }
                    let t = unpaired_t_test_with(&va, &vb, opts.variance)?;
                    let diff = mean(&va) - mean(&vb);
                    comparisons.push(Comparison {
                        a: a.condition.clone(),
                        b: b.condition.clone(),
                        metric: metric.into(),
                        mean_diff: round_sig(diff),
                        t: round_sig(t.t),
                        df: round_sig(t.df),
                        p: round_sig(t.p),
                        significant: t.p < opts.alpha,
                    });
                }
            }
        }
        let mut conditions = vec![];
        for r in results {
            let summarize = |metric: &str| -> Result<MetricSummary> {
                let vals = metric_values(r, metric);
                let stats = AccuracyStats::from_values(&vals)?;
                let mut markers = String::new();
                for rule in &opts.markers {
                    if rule.metric.as_deref().is_some_and(|m| m != metric) || rule.reference == r.condition {
                        continue;
                    }
                    let Some(reference) = find(&rule.reference) else {
                        continue;
                    };
                    let rv = metric_values(reference, metric);
                    if vals.len() < 2 || rv.len() < 2 {
                        continue;
                    }
                    let t = unpaired_t_test_with(&vals, &rv, opts.variance)?;
                    let diff = stats.mean - mean(&rv);
                    let hit = if rule.improvement {
                        diff > 0.0 && t.p < opts.alpha
                    } else {
                        diff < 0.0 && t.p > opts.alpha
                    };
                    if hit {
                        markers.push_str(&rule.symbol);
                    }
                }
                Ok(MetricSummary {
                    mean: round_sig(stats.mean),
                    std: round_sig(stats.std),
                    markers,
                })
            };
            conditions.push(ConditionSummary {
                condition: r.condition.clone(),
                config_hash: r.config_hash.clone(),
                n: r.seeds.len(),
                original: summarize("original")?,
                ft: summarize("ft")?,
            });
        }
        Ok(Self {
            alpha: opts.alpha,
            variance: opts.variance,
            conditions,
            comparisons,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `results.csv` (one row per condition × seed) and `summary.json`
/// into `dir`.
pub fn emit_report(results: &[RunResult], dir: impl AsRef<Path>, opts: &ReportOptions) -> Result<ReportFiles> {
    let summary = Summary::build(results, opts)?;
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["condition", "seed", "original_acc", "ft_acc", "config_hash"])?;
    for r in results {
        for s in &r.seeds {
            w.write_record([
                r.condition.as_str(),
                &s.seed.to_string(),
                &format_sig(s.original_test_acc),
                &format_sig(s.ft_test_acc),
                &r.config_hash,
            ])?;
        }
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let dir = dir.as_ref();
    let files = ReportFiles {
        csv: dir.join("results.csv"),
        summary: dir.join("summary.json"),
    };
    write_all(&files.csv, &csv_bytes)?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_all(&files.summary, &json)?;
    Ok(files)
}

/// Ablation curves: `ablation.csv` has one row per size × condition × seed;
/// `ablation_plot.csv` has per size × condition means, with FT-test accuracy
/// as the solid series and original-test accuracy as the dashed one.
pub fn emit_ablation_report(results: &[AblationResult], dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("no ablation results to report".into()));
    }
    let mut raw = csv::Writer::from_writer(vec![]);
    raw.write_record([
        "size",
        "condition",
        "seed",
        "ft_acc_solid",
        "original_acc_dashed",
        "config_hash",
    ])?;
    let mut plot = csv::Writer::from_writer(vec![]);
    plot.write_record([
        "size",
        "condition",
        "ft_mean_solid",
        "ft_std_solid",
        "original_mean_dashed",
        "original_std_dashed",
    ])?;
    for a in results {
        for r in &a.results {
            for s in &r.seeds {
                raw.write_record([
                    &a.size.to_string(),
                    r.condition.as_str(),
                    &s.seed.to_string(),
                    &format_sig(s.ft_test_acc),
                    &format_sig(s.original_test_acc),
                    &r.config_hash,
                ])?;
            }
            let ft = AccuracyStats::from_values(&r.ft_accs())?;
            let orig = AccuracyStats::from_values(&r.original_accs())?;
            plot.write_record([
                &a.size.to_string(),
                r.condition.as_str(),
                &format_sig(ft.mean),
                &format_sig(ft.std),
                &format_sig(orig.mean),
                &format_sig(orig.std),
            ])?;
        }
    }
    let dir = dir.as_ref();
    let files = ReportFiles {
        csv: dir.join("ablation.csv"),
        summary: dir.join("ablation_plot.csv"),
    };
    write_all(&files.csv, &raw.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    write_all(
        &files.summary,
        &plot.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    Ok(files)
}
