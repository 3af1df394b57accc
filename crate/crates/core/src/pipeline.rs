//! End-to-end explanation of one input: calibrate, reject-sample,
//! accumulate, finalize, decompose.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attribution::{decompose, finalize, Accumulator, Decomposition, SaliencyMap};
use crate::chunking::ChunkGrid;
use crate::models::Predictor;
use crate::sampler::{
    calibrate_threshold, rejection_sample, AcceptanceStats, AcceptedSample, Engine, SamplerConfig,
    SamplerError, ThresholdW,
};
use crate::tensor::InputTensor;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    /// Explicit `W`; calibrated from `percentile_w` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl ExplainConfig {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self {
            sampler,
            threshold: None,
            workers: 1,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_threshold(mut self, w: f64) -> Self {
        self.threshold = Some(w);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub n: u64,
    pub w: f64,
    pub p_hat: f64,
    pub attempted: u64,
    pub accepted: u64,
    pub calibration_evaluations: usize,
    pub partial: bool,
    pub workers: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub map: SaliencyMap,
    pub decomposition: Decomposition,
    pub threshold: ThresholdW,
    pub acceptance: AcceptanceStats,
    pub calibration_losses: Vec<f64>,
    pub samples: Vec<AcceptedSample>,
    /// Budget ran out before `n_target` acceptances.
    pub partial: bool,
    pub workers: usize,
    pub wall: Duration,
}

impl Explanation {
    pub fn stats(&self) -> RunStats {
        RunStats {
            n: self.map.n,
            w: self.threshold.w,
            p_hat: self.acceptance.p_hat(),
            attempted: self.acceptance.attempted,
            accepted: self.acceptance.accepted,
            calibration_evaluations: self.calibration_losses.len(),
            partial: self.partial,
            workers: self.workers,
            wall_seconds: self.wall.as_secs_f64(),
        }
    }
}

/// Runs the whole attribution pipeline on `x`.
///
/// A run that exhausts its budget after at least one acceptance returns a
/// partial explanation (`partial = true`); with zero acceptances it fails
/// with [`SamplerError::BudgetExhausted`].
pub fn explain(
    predictor: &dyn Predictor,
    x: Arc<InputTensor>,
    grid: Arc<ChunkGrid>,
    config: &ExplainConfig,
) -> Result<Explanation, Error> {
    let started = Instant::now();
    grid.check_tensor(&x)?;
    let engine = Engine::new(config.workers, predictor)?;

    let (threshold, calibration_losses) = match config.threshold {
        Some(w) => (ThresholdW::explicit(w)?, Vec::new()),
        None => {
            let cal = calibrate_threshold(&engine, predictor, &x, &grid, &config.sampler)?;
            (cal.threshold, cal.losses)
        }
    };

    let (outcome, partial) =
        match rejection_sample(&engine, predictor, &x, &grid, threshold, &config.sampler) {
            Ok(o) => (o, false),
            Err(SamplerError::BudgetExhausted(o)) if !o.samples.is_empty() => (*o, true),
            Err(e) => return Err(e.into()),
        };

    let acc = Accumulator::from_samples(x.clone(), grid.clone(), &outcome.samples, Some(engine.pool()))?;
    let map = finalize(&acc, threshold.w, outcome.stats.p_hat())?;
    let decomposition = decompose(&acc)?;

    Ok(Explanation {
        map,
        decomposition,
        threshold,
        acceptance: outcome.stats,
        calibration_losses,
        samples: outcome.samples,
        partial,
        workers: engine.workers(),
        wall: started.elapsed(),
    })
}
