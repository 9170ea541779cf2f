//! Per-round training records and the sink trait the trainers report to.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkit::ParamVector;

/// What happened in one P3SGD round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based round index.
    pub round: usize,
    /// Realized number of sampled patients.
    pub batch_size: usize,
    /// True when no patient was sampled; nothing else happened that round.
    pub skipped: bool,
    pub selected_z: Option<f64>,
    pub selected_index: Option<usize>,
    pub selection_probabilities: Vec<f64>,
    /// Norm of the averaged, clipped update before noise.
    pub update_norm: Option<f64>,
    /// Clipped selection loss of the chosen candidate (absent when the
    /// selection step was bypassed).
    pub clipped_loss: Option<f64>,
    /// Accumulated privacy after this round.
    pub epsilon: f64,
    pub delta: f64,
}

/// One step of the non-private baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdStepLog {
    pub step: usize,
    pub batch_size: usize,
    pub batch_loss: f64,
}

/// Receives records as training progresses. The parameters after the step
/// are passed along so sinks can checkpoint or evaluate.
pub trait MetricsSink {
    fn round(&mut self, log: &RoundLog, theta: &ParamVector) -> Result<()>;

    fn sgd_step(&mut self, _log: &SgdStepLog, _theta: &ParamVector) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
impl MetricsSink for () {
    fn round(&mut self, _log: &RoundLog, _theta: &ParamVector) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub rounds: Vec<RoundLog>,
    pub steps: Vec<SgdStepLog>,
}

impl MetricsSink for MemorySink {
    fn round(&mut self, log: &RoundLog, _theta: &ParamVector) -> Result<()> {
        self.rounds.push(log.clone());
        Ok(())
    }

    fn sgd_step(&mut self, log: &SgdStepLog, _theta: &ParamVector) -> Result<()> {
        self.steps.push(log.clone());
        Ok(())
    }
}
