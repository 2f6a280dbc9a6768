//! Aggregation over seeds and the rounds-to-target measurement.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::federation::MetricsRecord;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub strategy: String,
    pub cycle: usize,
    pub round: usize,
    pub labelled_fraction: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

impl From<&MetricsRecord> for MetricsRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            seed: r.seed,
            strategy: r.strategy.clone(),
            cycle: r.cycle,
            round: r.round,
            labelled_fraction: r.labelled_fraction,
            test_accuracy: r.test_accuracy,
            seconds: r.seconds,
        }
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// First round whose accuracy reaches `target`, from rows sorted by round.
pub fn rounds_to_target(rows: &[MetricsRow], target: f64) -> Option<usize> {
    rows.iter().find(|r| r.test_accuracy >= target).map(|r| r.round)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub labelled_fraction: f64,
    /// Final-round accuracy of the cycle, one per seed in seed order.
    pub finals: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub cycles: Vec<CycleSummary>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per strategy and cycle, the mean and spread of final-round accuracy over seeds.
/// Strategies keep their first-appearance order; seeds are sorted ascending.
pub fn summarize(rows: &[MetricsRow]) -> Vec<StrategySummary> {
    let mut order: Vec<String> = Vec::new();
    // strategy -> cycle -> seed -> (round, accuracy, labelled fraction)
    let mut last: BTreeMap<&str, BTreeMap<usize, BTreeMap<u64, (usize, f64, f64)>>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.strategy) {
            order.push(r.strategy.clone());
        }
        let slot = last
            .entry(&r.strategy)
            .or_default()
            .entry(r.cycle)
            .or_default()
            .entry(r.seed)
            .or_insert((0, f64::NAN, r.labelled_fraction));
        if r.round >= slot.0 {
            *slot = (r.round, r.test_accuracy, r.labelled_fraction);
        }
    }
    order
        .into_iter()
        .map(|strategy| {
            let cycles = last[strategy.as_str()]
                .iter()
                .map(|(&cycle, seeds)| {
                    let finals: Vec<f64> = seeds.values().map(|&(_, acc, _)| acc).collect();
                    let fractions: Vec<f64> = seeds.values().map(|&(_, _, f)| f).collect();
                    let (mean, stddev) = mean_std(&finals);
                    CycleSummary {
                        cycle,
                        labelled_fraction: mean_std(&fractions).0,
                        finals,
                        mean,
                        stddev,
                    }
                })
                .collect();
            StrategySummary { strategy, cycles }
        })
        .collect()
}
