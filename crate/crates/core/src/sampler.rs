//! Threshold calibration and rejection sampling of selection vectors.
//!
//! Sample `i` is a pure function of `(seed, i)`. Losses may be evaluated in
//! any order by any number of workers; acceptance bookkeeping walks indices
//! in ascending order, so the accepted sequence never depends on the worker
//! count.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::{apply_mask, ChunkError, ChunkGrid, SelectionVector};
use crate::distribution::{StratifiedUniform, TooFewChunks};
use crate::models::{LossValue, ModelError, Predictor};
use crate::tensor::InputTensor;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    TooFewChunks(#[from] TooFewChunks),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("invalid threshold {0}: must be >= 0 and not NaN")]
    InvalidThreshold(f64),
    #[error(
        "budget exhausted: {} of {} samples accepted after {} attempts",
        .0.stats.accepted, .0.n_target, .0.stats.attempted
    )]
    BudgetExhausted(Box<RejectionOutcome>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn default_calibration() -> usize {
    256
}
fn default_percentile() -> f64 {
    20.0
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_target: usize,
    #[serde(default = "default_calibration")]
    pub n_calibration: usize,
    #[serde(default = "default_percentile")]
    pub percentile_w: f64,
    /// Cap on rejection-phase evaluations; `100 * n_target` when absent.
    #[serde(default)]
    pub n_total_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_target: 1000,
            n_calibration: default_calibration(),
            percentile_w: default_percentile(),
            n_total_cap: None,
            seed: 0,
            batch_size: default_batch(),
        }
    }
}

impl SamplerConfig {
    pub fn new(n_target: usize, seed: u64) -> Self {
        Self {
            n_target,
            seed,
            ..Self::default()
        }
    }

    pub fn cap(&self) -> usize {
        self.n_total_cap.unwrap_or(self.n_target.saturating_mul(100))
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |msg: String| Err(SamplerError::InvalidConfig(msg));
        if self.n_target < 1 {
            return bad("n_target must be >= 1".into());
        }
        if !(self.percentile_w > 0.0 && self.percentile_w < 100.0) {
            return bad(format!("percentile_w {} must lie in (0, 100)", self.percentile_w));
        }
        if self.cap() < self.n_target {
            return bad(format!("n_total_cap {} < n_target {}", self.cap(), self.n_target));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdProvenance {
    Calibrated { percentile: f64, n_calibration: usize },
    Explicit,
}

/// Acceptance cutoff `W`; a sample is accepted when `μ ≤ W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdW {
    pub w: f64,
    pub provenance: ThresholdProvenance,
}

impl ThresholdW {
    /// User-supplied threshold. `+∞` is allowed and accepts everything.
    pub fn explicit(w: f64) -> Result<Self, SamplerError> {
        if w.is_nan() || w < 0.0 {
            return Err(SamplerError::InvalidThreshold(w));
        }
        Ok(Self {
            w,
            provenance: ThresholdProvenance::Explicit,
        })
    }

    #[inline]
    pub fn accepts(&self, mu: LossValue) -> bool {
        mu.get() <= self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AcceptanceStats {
    /// Rejection-phase evaluations consumed, up to and including the last
    /// acceptance (or the whole budget when exhausted).
    pub attempted: u64,
    pub accepted: u64,
}

impl AcceptanceStats {
    pub fn p_hat(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (percentile / 100.0 * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Parallel evaluator of `μ(X^s)` for ranges of sample indices.
pub struct Engine {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl Engine {
    /// `workers` is clamped to the predictor's declared max concurrency.
    pub fn new(workers: usize, predictor: &dyn Predictor) -> Result<Self, SamplerError> {
        let workers = workers
            .max(1)
            .min(predictor.max_concurrency().unwrap_or(usize::MAX).max(1));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SamplerError::ThreadPool(e.to_string()))?;
        Ok(Self { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn pool(&self) -> &rayon::ThreadPool {
        &self.pool
    }

    /// Masks and evaluates every selection, preserving order.
    pub fn evaluate_selections(
        &self,
        predictor: &dyn Predictor,
        x: &InputTensor,
        grid: &ChunkGrid,
        selections: &[SelectionVector],
        batch_size: usize,
    ) -> Result<Vec<LossValue>, SamplerError> {
        let batches: Vec<Result<Vec<LossValue>, SamplerError>> = self.pool.install(|| {
            selections
                .par_chunks(batch_size.max(1))
                .map(|chunk| {
                    let masked = chunk
                        .iter()
                        .map(|s| apply_mask(x, s, grid))
                        .collect::<Result<Vec<_>, _>>()?;
                    let losses = predictor.evaluate(&masked)?;
                    if losses.len() != masked.len() {
                        return Err(ModelError::BatchSize {
                            expected: masked.len(),
                            actual: losses.len(),
                        }
                        .into());
                    }
                    Ok(losses)
                })
                .collect()
        });
        let mut out = Vec::with_capacity(selections.len());
        for b in batches {
            out.extend(b?);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_range(
        &self,
        predictor: &dyn Predictor,
        x: &InputTensor,
        grid: &ChunkGrid,
        dist: &StratifiedUniform,
        seed: u64,
        indices: Range<u64>,
        batch_size: usize,
    ) -> Result<Vec<(SelectionVector, LossValue)>, SamplerError> {
        let selections: Vec<SelectionVector> = self
            .pool
            .install(|| indices.into_par_iter().map(|i| dist.sample(seed, i)).collect());
        let losses = self.evaluate_selections(predictor, x, grid, &selections, batch_size)?;
        Ok(selections.into_iter().zip(losses).collect())
    }
}

/// Draws a single selection for `(seed, index)` with `m` chunks.
pub fn sample_selection(seed: u64, index: u64, m: usize) -> Result<SelectionVector, SamplerError> {
    Ok(StratifiedUniform::new(m)?.sample(seed, index))
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub threshold: ThresholdW,
    pub losses: Vec<f64>,
}

/// Evaluates sample indices `0..n_calibration` and returns the
/// nearest-rank `percentile_w` of their losses as `W`.
pub fn calibrate_threshold(
    engine: &Engine,
    predictor: &dyn Predictor,
    x: &InputTensor,
    grid: &ChunkGrid,
    config: &SamplerConfig,
) -> Result<Calibration, SamplerError> {
    config.validate()?;
    if config.n_calibration < 20 {
        return Err(SamplerError::InvalidConfig(format!(
            "n_calibration {} must be >= 20",
            config.n_calibration
        )));
    }
    let dist = StratifiedUniform::new(grid.m())?;
    let evaluated = engine.evaluate_range(
        predictor,
        x,
        grid,
        &dist,
        config.seed,
        0..config.n_calibration as u64,
        config.batch_size,
    )?;
    let losses: Vec<f64> = evaluated.iter().map(|(_, mu)| mu.get()).collect();
    let w = nearest_rank(&losses, config.percentile_w).expect("n_calibration >= 20");
    Ok(Calibration {
        threshold: ThresholdW {
            w,
            provenance: ThresholdProvenance::Calibrated {
                percentile: config.percentile_w,
                n_calibration: config.n_calibration,
            },
        },
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedSample {
    pub index: u64,
    pub selection: SelectionVector,
    pub mu: LossValue,
}

impl AcceptedSample {
    pub fn masked(&self, x: &InputTensor, grid: &ChunkGrid) -> Result<InputTensor, ChunkError> {
        apply_mask(x, &self.selection, grid)
    }
}

#[derive(Debug, Clone)]
pub struct RejectionOutcome {
    pub samples: Vec<AcceptedSample>,
    pub stats: AcceptanceStats,
    pub threshold: ThresholdW,
    pub n_target: usize,
}

impl RejectionOutcome {
    pub fn is_complete(&self) -> bool {
        self.samples.len() >= self.n_target
    }
}

/// Index of the first rejection-phase sample.
pub fn rejection_start(config: &SamplerConfig) -> u64 {
    config.n_calibration as u64
}

/// Keeps the first `n_target` samples with `μ ≤ W`, in draw order.
///
/// Fails with [`SamplerError::BudgetExhausted`] (carrying the partial
/// outcome) when the evaluation cap runs out first.
pub fn rejection_sample(
    engine: &Engine,
    predictor: &dyn Predictor,
    x: &InputTensor,
    grid: &ChunkGrid,
    threshold: ThresholdW,
    config: &SamplerConfig,
) -> Result<RejectionOutcome, SamplerError> {
    config.validate()?;
    let dist = StratifiedUniform::new(grid.m())?;
    let cap = config.cap() as u64;
    let start = rejection_start(config);
    let round = (config.batch_size * engine.workers() * 8).max(256) as u64;

    let mut samples = Vec::with_capacity(config.n_target);
    let mut stats = AcceptanceStats::default();
    let mut next = start;
    'rounds: while stats.attempted < cap {
        let end = next + round.min(cap - stats.attempted);
        let evaluated =
            engine.evaluate_range(predictor, x, grid, &dist, config.seed, next..end, config.batch_size)?;
        for (offset, (selection, mu)) in evaluated.into_iter().enumerate() {
            stats.attempted += 1;
            if threshold.accepts(mu) {
                stats.accepted += 1;
                samples.push(AcceptedSample {
                    index: next + offset as u64,
                    selection,
                    mu,
                });
                if samples.len() == config.n_target {
                    break 'rounds;
                }
            }
        }
        next = end;
    }

    let outcome = RejectionOutcome {
        samples,
        stats,
        threshold,
        n_target: config.n_target,
    };
    if outcome.is_complete() {
        Ok(outcome)
    } else {
        Err(SamplerError::BudgetExhausted(Box::new(outcome)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::build_grid;
    use crate::models::{PlantedModel, PlantedModelSpec, SumLoss};

    fn planted(m: usize) -> (InputTensor, ChunkGrid, PlantedModel) {
        let values: Vec<f32> = (0..m * 2).map(|i| 1.0 + (i % 3) as f32).collect();
        let x = InputTensor::new(vec![m * 2], values).unwrap();
        let g = build_grid(&[m * 2], &[2]).unwrap();
        let spec = PlantedModelSpec::new(g.clone(), x.clone(), [0, 1], [], 0.0).unwrap();
        (x, g, PlantedModel::new(spec))
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 20.0), Some(20.0));
        assert_eq!(nearest_rank(&[5.0; 7], 33.0), Some(5.0));
        assert_eq!(nearest_rank(&[0.0, 0.0, 0.0, 10.0], 50.0), Some(0.0));
        assert_eq!(nearest_rank(&[0.0, 0.0, 0.0, 10.0], 90.0), Some(10.0));
        assert_eq!(nearest_rank(&[3.0], 0.1), Some(3.0));
        assert_eq!(nearest_rank(&[], 50.0), None);
    }

    #[test]
    fn sample_selection_rejects_single_chunk() {
        assert!(matches!(
            sample_selection(0, 0, 1),
            Err(SamplerError::TooFewChunks(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(10, 0);
        assert!(c.validate().is_ok());
        c.percentile_w = 100.0;
        assert!(c.validate().is_err());
        c.percentile_w = 20.0;
        c.n_total_cap = Some(5);
        assert!(c.validate().is_err());
        assert!(ThresholdW::explicit(-1.0).is_err());
        assert!(ThresholdW::explicit(f64::INFINITY).is_ok());
    }

    #[test]
    fn calibration_on_constant_losses() {
        let x = InputTensor::new(vec![4], vec![1.0; 4]).unwrap();
        let g = build_grid(&[4], &[1]).unwrap();
        struct Constant(Vec<usize>);
        impl Predictor for Constant {
            fn input_shape(&self) -> &[usize] {
                &self.0
            }
            fn description(&self) -> String {
                "const".into()
            }
            fn evaluate(&self, b: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
                Ok(vec![LossValue::new(5.0)?; b.len()])
            }
        }
        let p = Constant(vec![4]);
        let engine = Engine::new(2, &p).unwrap();
        for pct in [1.0, 20.0, 99.0] {
            let cfg = SamplerConfig {
                percentile_w: pct,
                ..SamplerConfig::new(10, 1)
            };
            let cal = calibrate_threshold(&engine, &p, &x, &g, &cfg).unwrap();
            assert_eq!(cal.threshold.w, 5.0);
            assert_eq!(cal.losses.len(), 256);
        }
    }

    #[test]
    fn calibration_needs_twenty_samples() {
        let (x, g, p) = planted(4);
        let engine = Engine::new(1, &p).unwrap();
        let cfg = SamplerConfig {
            n_calibration: 19,
            ..SamplerConfig::new(10, 1)
        };
        assert!(matches!(
            calibrate_threshold(&engine, &p, &x, &g, &cfg),
            Err(SamplerError::InvalidConfig(_))
        ));
    }

    #[test]
    fn infinite_threshold_accepts_everything() {
        let (x, g, p) = planted(6);
        let engine = Engine::new(1, &p).unwrap();
        let cfg = SamplerConfig::new(50, 3);
        let out = rejection_sample(&engine, &p, &x, &g, ThresholdW::explicit(f64::INFINITY).unwrap(), &cfg)
            .unwrap();
        assert_eq!(out.stats.attempted, 50);
        assert_eq!(out.stats.p_hat(), 1.0);
        let indices: Vec<u64> = out.samples.iter().map(|s| s.index).collect();
        assert_eq!(indices, (256..306).collect::<Vec<_>>());
    }

    #[test]
    fn unreachable_threshold_exhausts_budget() {
        // every admissible mask keeps a unit-valued chunk, so mu >= 1 > W
        let x = InputTensor::new(vec![6], vec![1.0; 6]).unwrap();
        let g = build_grid(&[6], &[1]).unwrap();
        let p = SumLoss::new(vec![6]);
        let engine = Engine::new(1, &p).unwrap();
        let cfg = SamplerConfig {
            n_total_cap: Some(300),
            ..SamplerConfig::new(5, 3)
        };
        match rejection_sample(&engine, &p, &x, &g, ThresholdW::explicit(0.0).unwrap(), &cfg) {
            Err(SamplerError::BudgetExhausted(partial)) => {
                assert_eq!(partial.stats.attempted, 300);
                assert_eq!(partial.stats.accepted, 0);
                assert!(partial.samples.is_empty());
            }
            other => panic!("expected BudgetExhausted, got {other:?}"),
        }
    }

    #[test]
    fn accepted_samples_respect_threshold_and_worker_count() {
        let (x, g, p) = planted(8);
        let cfg = SamplerConfig {
            batch_size: 7,
            ..SamplerConfig::new(400, 9)
        };
        let run = |workers| {
            let engine = Engine::new(workers, &p).unwrap();
            let cal = calibrate_threshold(&engine, &p, &x, &g, &cfg).unwrap();
            rejection_sample(&engine, &p, &x, &g, cal.threshold, &cfg).unwrap()
        };
        let a = run(1);
        let b = run(5);
        assert!(a.samples.iter().all(|s| a.threshold.accepts(s.mu)));
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.stats, b.stats);
        assert!(a.samples.windows(2).all(|w| w[0].index < w[1].index));
    }
}
