//! Reduction of a run store to mean ± std per (model, strategy, metric).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::RunRecord;
use crate::cascade::BUILTIN_STRATEGIES;
use crate::metrics::Metric;
use crate::stats::{mean, Summary};

/// How entry × run scores are reduced to one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean and std over every scored (entry, run) pair.
    Pooled,
    /// Per-run dataset mean first; mean and std across those run means.
    #[default]
    RunMeans,
}

impl Reduction {
    pub fn describe(self) -> &'static str {
        match self {
            Reduction::Pooled => "mean ± sample std over all scored entry × run responses (pooled)",
            Reduction::RunMeans => "mean ± sample std across runs of each run's dataset mean",
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Pooled => "pooled",
            Reduction::RunMeans => "run-means",
        })
    }
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(Reduction::Pooled),
            "run-means" | "run_means" => Ok(Reduction::RunMeans),
            other => Err(format!("unknown reduction `{other}` (expected pooled or run-means)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub model_name: String,
    pub strategy_name: String,
    pub reduction: Reduction,
    /// `None` marks a cell with no scored values.
    pub eq: Option<Summary>,
    pub regard: Option<Summary>,
    pub perplexity: Option<Summary>,
}

impl AggregateResult {
    pub fn get(&self, metric: Metric) -> Option<&Summary> {
        match metric {
            Metric::Eq => self.eq.as_ref(),
            Metric::Regard => self.regard.as_ref(),
            Metric::Perplexity => self.perplexity.as_ref(),
        }
    }

    fn set(&mut self, metric: Metric, s: Option<Summary>) {
        match metric {
            Metric::Eq => self.eq = s,
            Metric::Regard => self.regard = s,
            Metric::Perplexity => self.perplexity = s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("run store is empty")]
    EmptyStore,
}

/// Built-ins first in their canonical order, then custom strategies by name.
pub fn strategy_order(name: &str) -> (usize, String) {
    let rank = BUILTIN_STRATEGIES
        .iter()
        .position(|s| *s == name)
        .unwrap_or(BUILTIN_STRATEGIES.len());
    (rank, name.to_string())
}

type GroupKey = (String, (usize, String));

/// Scored values per group, per metric, per run index.
fn collect(records: &[RunRecord]) -> BTreeMap<GroupKey, BTreeMap<Metric, BTreeMap<u32, Vec<f64>>>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<Metric, BTreeMap<u32, Vec<f64>>>> = BTreeMap::new();
    for r in records {
        let group = groups
            .entry((r.model_name.clone(), strategy_order(&r.strategy_name)))
            .or_default();
        for metric in Metric::ALL {
            let runs = group.entry(metric).or_default();
            let values = runs.entry(r.run_index).or_default();
            if let Some(v) = r.scores.as_ref().and_then(|s| s.get(metric).value()) {
                values.push(v);
            }
        }
    }
    groups
}

/// Groups records by (model, strategy). Failed, unscored and missing metric
/// values are excluded from that metric only; they never count as zeros.
pub fn aggregate(records: &[RunRecord], reduction: Reduction) -> Result<Vec<AggregateResult>, AggregateError> {
    if records.is_empty() {
        return Err(AggregateError::EmptyStore);
    }
    let mut out = Vec::new();
    for ((model, (_, strategy)), metrics) in collect(records) {
        let mut agg = AggregateResult {
            model_name: model,
            strategy_name: strategy,
            reduction,
            eq: None,
            regard: None,
            perplexity: None,
        };
        for (metric, runs) in metrics {
            let values: Vec<f64> = match reduction {
                Reduction::Pooled => runs.values().flatten().copied().collect(),
                Reduction::RunMeans => runs.values().filter_map(|v| mean(v)).collect(),
            };
            agg.set(metric, Summary::of(&values));
        }
        out.push(agg);
    }
    Ok(out)
}

/// Dataset mean of each metric for one (model, strategy, run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMean {
    pub model_name: String,
    pub strategy_name: String,
    pub run_index: u32,
    pub eq: Option<f64>,
    pub regard: Option<f64>,
    pub perplexity: Option<f64>,
}

pub fn run_means(records: &[RunRecord]) -> Vec<RunMean> {
    let mut out = Vec::new();
    for ((model, (_, strategy)), metrics) in collect(records) {
        let mut by_run: BTreeMap<u32, RunMean> = BTreeMap::new();
        for (metric, runs) in metrics {
            for (run_index, values) in runs {
                let m = by_run.entry(run_index).or_insert_with(|| RunMean {
                    model_name: model.clone(),
                    strategy_name: strategy.clone(),
                    run_index,
                    eq: None,
                    regard: None,
                    perplexity: None,
                });
                let v = mean(&values);
                match metric {
                    Metric::Eq => m.eq = v,
                    Metric::Regard => m.regard = v,
                    Metric::Perplexity => m.perplexity = v,
                }
            }
        }
        out.extend(by_run.into_values());
    }
    out
}
