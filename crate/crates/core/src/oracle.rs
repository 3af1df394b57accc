//! Exact `χ`, `p_W` and the retention/goodness decomposition by enumerating
//! every admissible selection vector. Exponential in `m`; capped at 20.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::SaliencyMap;
use crate::chunking::{ChunkGrid, SelectionVector};
use crate::distribution::{StratifiedUniform, TooFewChunks};
use crate::models::Predictor;
use crate::sampler::{Engine, SamplerError};
use crate::tensor::InputTensor;

pub const MAX_ORACLE_CHUNKS: usize = 20;
pub const ORACLE_IDENTITY_TOLERANCE: f64 = 1e-12;
/// Slack added to the `k·se` band when counting coverage.
pub const COVERAGE_ROUNDING: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{0} chunks exceed the enumeration limit of {MAX_ORACLE_CHUNKS}")]
    TooManyChunks(usize),
    #[error(transparent)]
    TooFewChunks(#[from] TooFewChunks),
    #[error("no admissible mask has loss <= {0}; acceptance probability is zero")]
    ZeroAcceptance(f64),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("decomposition identity off by {0:e}")]
    IdentityViolation(f64),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    /// Bit `j` retains chunk `j`.
    pub mask: u32,
    pub bits: String,
    pub probability: f64,
    pub mu: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub shape: Vec<usize>,
    pub w: f64,
    pub p_w: f64,
    pub chi: Vec<f64>,
    pub retention: Vec<f64>,
    /// `E[μ' | chunk retained]`; `None` when the chunk is never retained.
    pub goodness: Vec<Option<f64>>,
    pub max_identity_error: f64,
    pub masks: Vec<MaskEntry>,
}

impl OracleResult {
    /// Exact map in saliency form: zero standard error, `n` = number of
    /// accepted masks, `p_hat` = exact `p_W`.
    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap {
            shape: self.shape.clone(),
            chi: self.chi.clone(),
            se: vec![0.0; self.chi.len()],
            n: self.masks.iter().filter(|e| e.accepted).count() as u64,
            w_used: self.w,
            p_hat: self.p_w,
        }
    }

    /// Conditional probability of each accepted mask under `D_W`.
    pub fn conditional(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.masks
            .iter()
            .filter(|e| e.accepted)
            .map(|e| (e.mask, e.probability / self.p_w))
    }
}

/// Enumerates all `2^m − 2` masks with the sampler's base distribution.
pub fn enumerate(
    x: &InputTensor,
    grid: &ChunkGrid,
    predictor: &dyn Predictor,
    w: f64,
    engine: &Engine,
) -> Result<OracleResult, OracleError> {
    let m = grid.m();
    if m > MAX_ORACLE_CHUNKS {
        return Err(OracleError::TooManyChunks(m));
    }
    let dist = StratifiedUniform::new(m)?;
    grid.check_tensor(x).map_err(SamplerError::from)?;
    let full = (1u32 << m) - 1;
    let selections: Vec<SelectionVector> = (1..full)
        .map(|mask| SelectionVector::from_mask(mask as u64, m))
        .collect();
    let losses = engine.evaluate_selections(predictor, x, grid, &selections, 256)?;

    let masks: Vec<MaskEntry> = selections
        .iter()
        .zip(&losses)
        .enumerate()
        .map(|(i, (s, mu))| MaskEntry {
            mask: i as u32 + 1,
            bits: s.to_string(),
            probability: dist.probability(s),
            mu: mu.get(),
            accepted: mu.get() <= w,
        })
        .collect();

    let p_w: f64 = masks.iter().filter(|e| e.accepted).map(|e| e.probability).sum();
    if p_w <= 0.0 {
        return Err(OracleError::ZeroAcceptance(w));
    }

    let xv = x.values();
    let mut chi = vec![0.0f64; xv.len()];
    let mut retained_p = vec![0.0f64; m];
    let mut retained_pw = vec![0.0f64; m];
    for (e, s) in masks.iter().zip(&selections) {
        if !e.accepted {
            continue;
        }
        let q = e.probability / p_w;
        let wq = q / (e.mu + 1.0);
        for j in s.retained() {
            retained_p[j] += q;
            retained_pw[j] += wq;
            for &o in grid.members(j) {
                chi[o] += wq * xv[o] as f64;
            }
        }
    }
    let goodness: Vec<Option<f64>> = retained_p
        .iter()
        .zip(&retained_pw)
        .map(|(&p, &pw)| (p > 0.0).then(|| pw / p))
        .collect();

    let mut max_err = 0.0f64;
    for (o, &c) in chi.iter().enumerate() {
        let j = grid.chunk_of_offset(o);
        let implied = xv[o] as f64 * retained_p[j] * goodness[j].unwrap_or(0.0);
        max_err = max_err.max((c - implied).abs());
    }
    if max_err > ORACLE_IDENTITY_TOLERANCE {
        return Err(OracleError::IdentityViolation(max_err));
    }

    Ok(OracleResult {
        shape: x.shape().to_vec(),
        w,
        p_w,
        chi,
        retention: retained_p,
        goodness,
        max_identity_error: max_err,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub n: u64,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub rmse: f64,
    pub mean_se: f64,
    /// Fraction of coordinates with `|chi_n − chi| ≤ k·se` (plus rounding slack).
    pub coverage: f64,
    pub coverage_k: f64,
}

/// Compares a Monte-Carlo map against the exact one.
pub fn crosscheck(
    oracle: &SaliencyMap,
    mc: &SaliencyMap,
    coverage_k: f64,
) -> Result<CrosscheckReport, OracleError> {
    if oracle.shape != mc.shape {
        return Err(OracleError::ConfigMismatch(format!(
            "shape {:?} vs {:?}",
            oracle.shape, mc.shape
        )));
    }
    if oracle.w_used.to_bits() != mc.w_used.to_bits() {
        return Err(OracleError::ConfigMismatch(format!(
            "threshold W {} vs {}",
            oracle.w_used, mc.w_used
        )));
    }
    let len = oracle.chi.len() as f64;
    let mut max_abs: f64 = 0.0;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    let mut covered = 0usize;
    for ((&exact, &est), &se) in oracle.chi.iter().zip(&mc.chi).zip(&mc.se) {
        let d = (est - exact).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
        sum_sq += d * d;
        // zero-variance coordinates differ only by summation rounding
        if d <= coverage_k * se + COVERAGE_ROUNDING * exact.abs().max(1.0) {
            covered += 1;
        }
    }
    Ok(CrosscheckReport {
        n: mc.n,
        max_abs_error: max_abs,
        mean_abs_error: sum_abs / len,
        rmse: (sum_sq / len).sqrt(),
        mean_se: mc.se.iter().sum::<f64>() / len,
        coverage: covered as f64 / len,
        coverage_k,
    })
}

/// Least-squares slope of `ln rmse` against `ln n`.
pub fn convergence_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::build_grid;
    use crate::models::{LossValue, ModelError, PlantedModel, PlantedModelSpec};
    use itertools::Itertools;

    struct ZeroLoss(Vec<usize>);
    impl Predictor for ZeroLoss {
        fn input_shape(&self) -> &[usize] {
            &self.0
        }
        fn description(&self) -> String {
            "zero".into()
        }
        fn evaluate(&self, b: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
            Ok(vec![LossValue::ZERO; b.len()])
        }
    }

    /// Permutation-invariant: depends only on the multiset of chunk sums.
    struct RetainedCount(Vec<usize>);
    impl Predictor for RetainedCount {
        fn input_shape(&self) -> &[usize] {
            &self.0
        }
        fn description(&self) -> String {
            "count".into()
        }
        fn evaluate(&self, b: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
            b.iter()
                .map(|x| {
                    let nz = x.values().iter().filter(|&&v| v != 0.0).count() as f64;
                    LossValue::new((nz - 2.0).abs())
                })
                .collect()
        }
    }

    #[test]
    fn two_chunk_zero_loss() {
        let (a, b) = (3.0f32, 5.0f32);
        let x = InputTensor::new(vec![2], vec![a, b]).unwrap();
        let g = build_grid(&[2], &[1]).unwrap();
        let p = ZeroLoss(vec![2]);
        let engine = Engine::new(1, &p).unwrap();
        let r = enumerate(&x, &g, &p, 0.0, &engine).unwrap();
        assert_eq!(r.masks.len(), 2);
        assert!(r.masks.iter().all(|e| e.probability == 0.5));
        assert_eq!(r.p_w, 1.0);
        assert_eq!(r.chi, vec![a as f64 / 2.0, b as f64 / 2.0]);
    }

    #[test]
    fn symmetric_input_gives_symmetric_chi() {
        let x = InputTensor::new(vec![12], vec![2.0; 12]).unwrap();
        let g = build_grid(&[12], &[2]).unwrap();
        let p = RetainedCount(vec![12]);
        let engine = Engine::new(1, &p).unwrap();
        let r = enumerate(&x, &g, &p, 3.0, &engine).unwrap();
        let first = r.chi[0];
        assert!(r.chi.iter().all(|&c| (c - first).abs() < 1e-15));
        let total: f64 = r.conditional().map(|(_, q)| q).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guards() {
        let x = InputTensor::new(vec![4], vec![1.0; 4]).unwrap();
        let g = build_grid(&[4], &[1]).unwrap();
        let spec = PlantedModelSpec::new(g.clone(), x.clone(), [0], [1], 0.5).unwrap();
        let p = PlantedModel::new(spec);
        let engine = Engine::new(1, &p).unwrap();
        // the sum loss is >= 1 on every admissible mask
        let sum = crate::models::SumLoss::new(vec![4]);
        assert!(matches!(
            enumerate(&x, &g, &sum, 0.5, &engine),
            Err(OracleError::ZeroAcceptance(_))
        ));
        assert!(enumerate(&x, &g, &p, 0.0, &engine).is_ok());

        let big = InputTensor::new(vec![21], vec![1.0; 21]).unwrap();
        let gb = build_grid(&[21], &[1]).unwrap();
        let sb = crate::models::SumLoss::new(vec![21]);
        assert!(matches!(
            enumerate(&big, &gb, &sb, 1.0, &engine),
            Err(OracleError::TooManyChunks(21))
        ));
    }

    /// Independent path for `W = ∞`: iterate by retained count with
    /// combinations, counting subsets instead of using binomials.
    fn unconditional_chi(x: &InputTensor, grid: &ChunkGrid, p: &dyn Predictor) -> Vec<f64> {
        let m = grid.m();
        let mut chi = vec![0.0; x.len()];
        for k in 1..m {
            let subsets: Vec<Vec<usize>> = (0..m).combinations(k).collect();
            let per_subset = 1.0 / (m - 1) as f64 / subsets.len() as f64;
            for subset in subsets {
                let mut values = vec![0.0f32; x.len()];
                for &j in &subset {
                    for &o in grid.members(j) {
                        values[o] = x.values()[o];
                    }
                }
                let masked = InputTensor::new(x.shape().to_vec(), values).unwrap();
                let mu = crate::models::evaluate_one(p, &masked).unwrap().get();
                for (o, c) in chi.iter_mut().enumerate() {
                    if subset.contains(&grid.chunk_of_offset(o)) {
                        *c += per_subset / (1.0 + mu) * x.values()[o] as f64;
                    }
                }
            }
        }
        chi
    }

    #[test]
    fn infinite_threshold_matches_direct_summation() {
        let values: Vec<f32> = (0..18).map(|i| ((i * 5) % 7) as f32 + 0.25).collect();
        let x = InputTensor::new(vec![3, 6], values).unwrap();
        let g = build_grid(&[3, 6], &[2, 2]).unwrap();
        assert_eq!(g.m(), 6);
        let spec = PlantedModelSpec::new(g.clone(), x.clone(), [1, 4], [0], 0.2).unwrap();
        let p = PlantedModel::new(spec);
        let engine = Engine::new(2, &p).unwrap();
        let r = enumerate(&x, &g, &p, f64::INFINITY, &engine).unwrap();
        assert!((r.p_w - 1.0).abs() < 1e-12);
        let direct = unconditional_chi(&x, &g, &p);
        for (a, b) in r.chi.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn crosscheck_detects_threshold_mismatch() {
        let map = |w| SaliencyMap {
            shape: vec![2],
            chi: vec![1.0, 2.0],
            se: vec![0.1, 0.1],
            n: 10,
            w_used: w,
            p_hat: 0.5,
        };
        assert!(matches!(
            crosscheck(&map(0.5), &map(0.6), 4.0),
            Err(OracleError::ConfigMismatch(_))
        ));
        let r = crosscheck(&map(0.5), &map(0.5), 4.0).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5].iter().map(|&n| (n, 3.0 / f64::sqrt(n))).collect();
        assert!((convergence_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(convergence_slope(&pts[..1]), None);
    }
}
