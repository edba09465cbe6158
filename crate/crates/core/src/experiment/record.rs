use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::bench::Metrics;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub metrics: Metrics,
}

/// Everything one training-and-evaluation run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Row name in tables.
    pub label: String,
    /// Rows of one group share a base row.
    pub group: String,
    pub config: ExperimentConfig,
    /// SHA-256 of the exported training set.
    pub dataset_hash: String,
    pub tasks: Vec<TaskResult>,
    pub loss_curve: Vec<f64>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Success rate averaged over task variants.
    pub fn mean_success(&self) -> f64 {
        self.tasks
            .iter()
            .map(|t| t.metrics.success_rate)
            .sum::<f64>()
            / self.tasks.len().max(1) as f64
    }

    pub fn task(&self, name: &str) -> Option<&Metrics> {
        self.tasks
            .iter()
            .find(|t| t.task == name)
            .map(|t| &t.metrics)
    }
}
