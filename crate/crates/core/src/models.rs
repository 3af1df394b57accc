//! Frozen predictors: a model, its target and a loss bundled into a single
//! evaluation `μ(X_arg) ≥ 0`.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::BridgeError;
use crate::chunking::{ChunkError, ChunkGrid};
use crate::tensor::InputTensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {actual:?} does not match predictor shape {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("reference has zero energy over the relevant chunks")]
    DegenerateReference,
    #[error("prediction is not a probability vector: {0}")]
    NotAProbability(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid planted spec: {0}")]
    InvalidSpec(String),
    #[error("predictor returned invalid loss {0}")]
    InvalidLoss(f64),
    #[error("predictor returned {actual} losses for a batch of {expected}")]
    BatchSize { expected: usize, actual: usize },
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

/// A finite, nonnegative loss.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossValue(f64);

impl LossValue {
    pub fn new(mu: f64) -> Result<Self, ModelError> {
        if mu.is_finite() && mu >= 0.0 {
            Ok(Self(mu))
        } else {
            Err(ModelError::InvalidLoss(mu))
        }
    }

    pub const ZERO: LossValue = LossValue(0.0);

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `μ` for one frozen model, target and loss.
///
/// Implementations must be deterministic: identical input bytes give
/// bit-identical losses.
pub trait Predictor: Send + Sync {
    fn input_shape(&self) -> &[usize];

    fn description(&self) -> String;

    /// Maximum number of concurrent `evaluate` calls; `None` means unlimited.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError>;
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn input_shape(&self) -> &[usize] {
        (**self).input_shape()
    }
    fn description(&self) -> String {
        (**self).description()
    }
    fn max_concurrency(&self) -> Option<usize> {
        (**self).max_concurrency()
    }
    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        (**self).evaluate(batch)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn input_shape(&self) -> &[usize] {
        (**self).input_shape()
    }
    fn description(&self) -> String {
        (**self).description()
    }
    fn max_concurrency(&self) -> Option<usize> {
        (**self).max_concurrency()
    }
    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        (**self).evaluate(batch)
    }
}

pub(crate) fn check_shape(expected: &[usize], x: &InputTensor) -> Result<(), ModelError> {
    if x.shape() != expected {
        return Err(ModelError::ShapeMismatch {
            expected: expected.to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Evaluates one tensor through the batch interface.
pub fn evaluate_one(p: &dyn Predictor, x: &InputTensor) -> Result<LossValue, ModelError> {
    let out = p.evaluate(std::slice::from_ref(x))?;
    match out.as_slice() {
        [mu] => Ok(*mu),
        _ => Err(ModelError::BatchSize {
            expected: 1,
            actual: out.len(),
        }),
    }
}

/// Ground-truth model: only the relevant chunks `S*` matter, optionally with
/// decoy chunks that cost `ε` each when present.
#[derive(Debug, Clone)]
pub struct PlantedModelSpec {
    grid: ChunkGrid,
    reference: InputTensor,
    relevant: Vec<usize>,
    noise: Vec<usize>,
    epsilon: f64,
    relevant_offsets: Vec<usize>,
    denominator: f64,
}

impl PlantedModelSpec {
    pub fn new(
        grid: ChunkGrid,
        reference: InputTensor,
        relevant: impl IntoIterator<Item = usize>,
        noise: impl IntoIterator<Item = usize>,
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        grid.check_tensor(&reference)?;
        let mut relevant: Vec<usize> = relevant.into_iter().collect();
        relevant.sort_unstable();
        relevant.dedup();
        let mut noise: Vec<usize> = noise.into_iter().collect();
        noise.sort_unstable();
        noise.dedup();
        if relevant.is_empty() {
            return Err(ModelError::InvalidSpec("relevant chunk set is empty".into()));
        }
        if let Some(&j) = relevant.iter().chain(&noise).find(|&&j| j >= grid.m()) {
            return Err(ModelError::InvalidSpec(format!(
                "chunk {j} out of range for {} chunks",
                grid.m()
            )));
        }
        if let Some(j) = relevant.iter().find(|j| noise.binary_search(j).is_ok()) {
            return Err(ModelError::InvalidSpec(format!(
                "chunk {j} is both relevant and noise"
            )));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(ModelError::InvalidSpec(format!("epsilon {epsilon} must be >= 0")));
        }
        let relevant_offsets: Vec<usize> = relevant
            .iter()
            .flat_map(|&j| grid.members(j).iter().copied())
            .collect();
        let values = reference.values();
        let denominator: f64 = relevant_offsets
            .iter()
            .map(|&o| {
                let r = values[o] as f64;
                r * r
            })
            .sum();
        if denominator <= 0.0 {
            return Err(ModelError::DegenerateReference);
        }
        Ok(Self {
            grid,
            reference,
            relevant,
            noise,
            epsilon,
            relevant_offsets,
            denominator,
        })
    }

    pub fn grid(&self) -> &ChunkGrid {
        &self.grid
    }

    pub fn reference(&self) -> &InputTensor {
        &self.reference
    }

    pub fn relevant(&self) -> &[usize] {
        &self.relevant
    }

    pub fn noise(&self) -> &[usize] {
        &self.noise
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Flat offsets covered by the relevant chunks.
    pub fn relevant_offsets(&self) -> &[usize] {
        &self.relevant_offsets
    }
}

/// Normalised squared error on `S*` plus `ε` times the fraction of decoy
/// chunks present. A decoy chunk counts as present when any of its
/// coordinates is nonzero.
pub fn planted_loss(spec: &PlantedModelSpec, x_arg: &InputTensor) -> Result<LossValue, ModelError> {
    check_shape(spec.reference.shape(), x_arg)?;
    let xv = x_arg.values();
    let rv = spec.reference.values();
    let numerator: f64 = spec
        .relevant_offsets
        .iter()
        .map(|&o| {
            let d = xv[o] as f64 - rv[o] as f64;
            d * d
        })
        .sum();
    let mut mu = numerator / spec.denominator;
    if spec.epsilon > 0.0 && !spec.noise.is_empty() {
        let present = spec
            .noise
            .iter()
            .filter(|&&j| spec.grid.members(j).iter().any(|&o| xv[o] != 0.0))
            .count();
        mu += spec.epsilon * present as f64 / spec.noise.len() as f64;
    }
    LossValue::new(mu)
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    spec: Arc<PlantedModelSpec>,
}

impl PlantedModel {
    pub fn new(spec: PlantedModelSpec) -> Self {
        Self { spec: Arc::new(spec) }
    }

    pub fn spec(&self) -> &PlantedModelSpec {
        &self.spec
    }
}

impl Predictor for PlantedModel {
    fn input_shape(&self) -> &[usize] {
        self.spec.reference.shape()
    }

    fn description(&self) -> String {
        format!(
            "planted(relevant={:?}, noise={:?}, epsilon={})",
            self.spec.relevant, self.spec.noise, self.spec.epsilon
        )
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        batch.iter().map(|x| planted_loss(&self.spec, x)).collect()
    }
}

/// On-disk description of a planted model (the `planted:<file>` predictor).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantedSpecFile {
    pub chunk_shape: Vec<usize>,
    pub relevant_chunks: Vec<usize>,
    #[serde(default)]
    pub noise_chunks: Vec<usize>,
    #[serde(default)]
    pub epsilon: f64,
    /// MPXT file the model was planted on; the explained input when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

/// `μ = Σ X_arg`. Matches the bridge adapter's echo mode.
#[derive(Debug, Clone)]
pub struct SumLoss {
    shape: Vec<usize>,
}

impl SumLoss {
    pub fn new(shape: Vec<usize>) -> Self {
        Self { shape }
    }
}

pub fn sum_loss(x: &InputTensor) -> f64 {
    x.values().iter().map(|&v| v as f64).sum()
}

impl Predictor for SumLoss {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn description(&self) -> String {
        "sum".into()
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        batch
            .iter()
            .map(|x| {
                check_shape(&self.shape, x)?;
                LossValue::new(sum_loss(x))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    ZeroOne,
    HeatmapMse,
}

#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a> {
    Class(usize),
    Values(&'a [f64]),
}

pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;
const PROBABILITY_TOLERANCE: f64 = 1e-6;

pub fn mse(prediction: &[f64], target: &[f64]) -> Result<LossValue, ModelError> {
    if prediction.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if prediction.len() != target.len() {
        return Err(ModelError::ShapeMismatch {
            expected: vec![target.len()],
            actual: vec![prediction.len()],
        });
    }
    let s: f64 = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    LossValue::new(s / prediction.len() as f64)
}

/// `-ln p_true`, with `p_true` clamped below at 1e-12.
pub fn cross_entropy(probs: &[f64], class: usize) -> Result<LossValue, ModelError> {
    if probs.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ModelError::NotAProbability("negative or non-finite entry".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(ModelError::NotAProbability(format!("entries sum to {total}")));
    }
    let p = *probs
        .get(class)
        .ok_or_else(|| ModelError::NotAProbability(format!("class {class} out of range")))?;
    LossValue::new(-p.max(CROSS_ENTROPY_FLOOR).ln())
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub fn zero_one(prediction: &[f64], class: usize) -> Result<LossValue, ModelError> {
    let am = argmax(prediction).ok_or(ModelError::EmptyInput)?;
    Ok(if am == class { LossValue::ZERO } else { LossValue(1.0) })
}

/// Isotropic Gaussian bump with unit peak at `center` over a 2-D grid.
pub fn gaussian_heatmap(shape: [usize; 2], center: [f64; 2], sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(shape[0] * shape[1]);
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            let dr = r as f64 - center[0];
            let dc = c as f64 - center[1];
            out.push((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

pub fn standard_loss(
    kind: LossKind,
    prediction: &[f64],
    target: LossTarget<'_>,
) -> Result<LossValue, ModelError> {
    match (kind, target) {
        (LossKind::Mse | LossKind::HeatmapMse, LossTarget::Values(t)) => mse(prediction, t),
        (LossKind::CrossEntropy, LossTarget::Class(c)) => cross_entropy(prediction, c),
        (LossKind::ZeroOne, LossTarget::Class(c)) => zero_one(prediction, c),
        (LossKind::ZeroOne | LossKind::CrossEntropy, LossTarget::Values(t)) => {
            let c = argmax(t).ok_or(ModelError::EmptyInput)?;
            standard_loss(kind, prediction, LossTarget::Class(c))
        }
        (LossKind::Mse | LossKind::HeatmapMse, LossTarget::Class(_)) => Err(
            ModelError::InvalidSpec("regression losses need a value target".into()),
        ),
    }
}

/// Synthetic landmark detector on 2-D inputs.
///
/// The "network" predicts a heatmap equal to the input scaled to unit peak;
/// the loss is the MSE against a Gaussian bump at the true landmark.
#[derive(Debug, Clone)]
pub struct HeatmapLandmarkModel {
    shape: Vec<usize>,
    target: Vec<f64>,
}

impl HeatmapLandmarkModel {
    pub fn new(shape: [usize; 2], landmark: [f64; 2], sigma: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            target: gaussian_heatmap(shape, landmark, sigma),
        }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn predict_heatmap(&self, x: &InputTensor) -> Vec<f64> {
        let peak = x.values().iter().copied().fold(0.0f32, f32::max) as f64;
        if peak <= 0.0 {
            return vec![0.0; x.len()];
        }
        x.values().iter().map(|&v| v as f64 / peak).collect()
    }
}

impl Predictor for HeatmapLandmarkModel {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn description(&self) -> String {
        "landmark-heatmap".into()
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        batch
            .iter()
            .map(|x| {
                check_shape(&self.shape, x)?;
                standard_loss(
                    LossKind::HeatmapMse,
                    &self.predict_heatmap(x),
                    LossTarget::Values(&self.target),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::{apply_mask, build_grid, SelectionVector};

    fn planted_1d(eps: f64, noise: Vec<usize>) -> PlantedModelSpec {
        // 4 chunks of 2, equal energy per chunk
        let x = InputTensor::new(vec![8], vec![1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0]).unwrap();
        let g = build_grid(&[8], &[2]).unwrap();
        PlantedModelSpec::new(g, x, [0, 1], noise, eps).unwrap()
    }

    fn mu(spec: &PlantedModelSpec, s: &SelectionVector) -> f64 {
        let xs = apply_mask(spec.reference(), s, spec.grid()).unwrap();
        planted_loss(spec, &xs).unwrap().get()
    }

    #[test]
    fn planted_examples() {
        let spec = planted_1d(0.0, vec![]);
        assert_eq!(mu(&spec, &SelectionVector::all(4)), 0.0);
        assert_eq!(mu(&spec, &SelectionVector::from_indices(4, [2, 3])), 1.0);
        // equal energy in chunks 0 and 1: dropping one leaves half the residual
        assert_eq!(mu(&spec, &SelectionVector::from_indices(4, [0])), 0.5);
    }

    #[test]
    fn planted_noise_term() {
        let spec = planted_1d(0.25, vec![2, 3]);
        assert_eq!(planted_loss(&spec, spec.reference()).unwrap().get(), 0.25);
        assert_eq!(mu(&spec, &SelectionVector::from_indices(4, [0, 1, 3])), 0.125);
        assert_eq!(mu(&spec, &SelectionVector::from_indices(4, [0, 1])), 0.0);
    }

    #[test]
    fn planted_spec_validation() {
        let x = InputTensor::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let g = build_grid(&[4], &[2]).unwrap();
        assert!(matches!(
            PlantedModelSpec::new(g.clone(), x.clone(), [0], [], 0.0),
            Err(ModelError::DegenerateReference)
        ));
        assert!(matches!(
            PlantedModelSpec::new(g.clone(), x.clone(), [1], [1], 0.1),
            Err(ModelError::InvalidSpec(_))
        ));
        assert!(matches!(
            PlantedModelSpec::new(g.clone(), x.clone(), Vec::<usize>::new(), [], 0.0),
            Err(ModelError::InvalidSpec(_))
        ));
        let spec = PlantedModelSpec::new(g, x, [1], [], 0.0).unwrap();
        let wrong = InputTensor::zeros(vec![5]).unwrap();
        assert!(matches!(
            planted_loss(&spec, &wrong),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn planted_loss_is_monotone_in_relevant_retention() {
        // m = 10 with irregular energies; enumerate all masks
        let values: Vec<f32> = (0..20).map(|i| ((i * 7 + 3) % 11) as f32 + 0.5).collect();
        let x = InputTensor::new(vec![20], values).unwrap();
        let g = build_grid(&[20], &[2]).unwrap();
        let spec = PlantedModelSpec::new(g, x, [1, 4, 7], [0, 9], 0.3).unwrap();
        for mask in 0u64..(1 << 10) {
            let base = mu(&spec, &SelectionVector::from_mask(mask, 10));
            for &j in spec.relevant() {
                let more = mu(&spec, &SelectionVector::from_mask(mask | 1 << j, 10));
                assert!(more <= base, "adding chunk {j} to {mask:b} raised mu");
            }
        }
    }

    #[test]
    fn standard_loss_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap().get(), 0.0);
        let uniform = vec![0.1; 10];
        let ce = cross_entropy(&uniform, 3).unwrap().get();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert_eq!(
            cross_entropy(&[1.0, 0.0], 1).unwrap().get(),
            -(CROSS_ENTROPY_FLOOR.ln())
        );
        assert!(matches!(
            cross_entropy(&[0.5, 0.6], 0),
            Err(ModelError::NotAProbability(_))
        ));
        assert!(matches!(cross_entropy(&[], 0), Err(ModelError::EmptyInput)));
        assert_eq!(zero_one(&[0.1, 0.7, 0.2], 1).unwrap().get(), 0.0);
        assert_eq!(zero_one(&[0.1, 0.7, 0.2], 2).unwrap().get(), 1.0);
        assert_eq!(mse(&[1.0, 3.0], &[1.0, 1.0]).unwrap().get(), 2.0);
        assert!(matches!(mse(&[], &[]), Err(ModelError::EmptyInput)));
        assert_eq!(
            standard_loss(LossKind::ZeroOne, &[0.2, 0.8], LossTarget::Values(&[0.0, 1.0]))
                .unwrap()
                .get(),
            0.0
        );
    }

    #[test]
    fn heatmap_model_prefers_blob() {
        let model = HeatmapLandmarkModel::new([8, 8], [2.0, 2.0], 1.0);
        let blob: Vec<f32> = model.target().iter().map(|&v| v as f32).collect();
        let clean = InputTensor::new(vec![8, 8], blob.clone()).unwrap();
        let mut cluttered = blob;
        cluttered[63] = 1.0;
        let cluttered = InputTensor::new(vec![8, 8], cluttered).unwrap();
        let mu_clean = evaluate_one(&model, &clean).unwrap().get();
        let mu_clutter = evaluate_one(&model, &cluttered).unwrap().get();
        assert!(mu_clean < 1e-12);
        assert!(mu_clutter > mu_clean);
    }

    #[test]
    fn loss_value_rejects_bad_values() {
        assert!(LossValue::new(-1.0).is_err());
        assert!(LossValue::new(f64::NAN).is_err());
        assert!(LossValue::new(f64::INFINITY).is_err());
    }
}
