//! Accuracy, significance tests, Pareto frontiers and report files.

mod pareto;
mod report;
mod stats;

pub use pareto::{frontier_dominates, pareto_frontier, ParetoPoint};
pub use report::{
    emit_ablation_report, emit_report, format_sig, Comparison, ConditionSummary, MarkerRule, MetricSummary,
    ReportFiles, ReportOptions, Summary,
};
pub use stats::{
    ln_gamma, regularized_incomplete_beta, t_two_sided_p, unpaired_t_test, unpaired_t_test_with, AccuracyStats, TTest,
    Variance,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Fraction of argmax predictions (ties to the lowest class) equal to gold.
pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("accuracy"));
    }
    let refs: Vec<_> = data.instances.iter().collect();
    let pred = model.predict(&refs)?;
    accuracy_of(&pred, &data.labels())
}

pub fn accuracy_of(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyDataset("accuracy"));
    }
    if predicted.len() != gold.len() {
        return Err(Error::shape("accuracy", &[predicted.len()], &[gold.len()]));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests;
