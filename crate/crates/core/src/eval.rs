//! Desk-scale evaluation: classification metrics on full versus masked
//! inputs, deletion curves, and a synthetic two-class task whose relevant
//! chunks are known by construction.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{chunk_scores, threshold_mask, SaliencyMap};
use crate::chunking::{apply_mask, build_grid, ChunkGrid, SelectionVector};
use crate::distribution::sample_rng;
use crate::models::{check_shape, cross_entropy, argmax, LossValue, ModelError, Predictor};
use crate::pipeline::{explain, ExplainConfig};
use crate::tensor::InputTensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("deletion fractions must be sorted, distinct and in (0, 1]: {0:?}")]
    InvalidFractions(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro-averaged precision and recall, macro and support-weighted F1.
/// Averages run over classes present in the labels or the predictions;
/// an undefined ratio counts as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassStats>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
) -> Result<ClassificationMetrics, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LabelMismatch(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut classes: Vec<usize> = y_true.iter().chain(y_pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();

    let per_class: Vec<ClassStats> = classes
        .iter()
        .map(|&c| {
            let tp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count();
            let predicted = y_pred.iter().filter(|&&p| p == c).count();
            let support = y_true.iter().filter(|&&t| t == c).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassStats {
                class: c,
                support,
                precision,
                recall,
                f1,
            }
        })
        .collect();

    let k = per_class.len() as f64;
    let total = y_true.len() as f64;
    let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(ClassificationMetrics {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        weighted_f1: per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total,
        accuracy: correct as f64 / total,
        per_class,
    })
}

/// A frozen classifier producing class probabilities.
pub trait Classifier: Send + Sync {
    fn n_classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn predict_proba(&self, x: &InputTensor) -> Vec<f64>;

    fn predict(&self, x: &InputTensor) -> usize {
        argmax(&self.predict_proba(x)).unwrap_or(0)
    }
}

/// Cross-entropy of a classifier against a fixed label, as a predictor.
pub struct ClassifierLoss<C: ?Sized> {
    classifier: Arc<C>,
    label: usize,
}

impl<C: Classifier + ?Sized> ClassifierLoss<C> {
    pub fn new(classifier: Arc<C>, label: usize) -> Self {
        Self { classifier, label }
    }
}

impl<C: Classifier + ?Sized> Predictor for ClassifierLoss<C> {
    fn input_shape(&self) -> &[usize] {
        self.classifier.input_shape()
    }

    fn description(&self) -> String {
        format!("classifier-ce(label={})", self.label)
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        batch
            .iter()
            .map(|x| {
                check_shape(self.classifier.input_shape(), x)?;
                cross_entropy(&self.classifier.predict_proba(x), self.label)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub metrics: ClassificationMetrics,
    pub runtime_mean_s: f64,
    pub runtime_sd_s: f64,
}

/// Metrics on full inputs and on masked inputs, side by side.
pub fn masked_task_metrics<C: Classifier + ?Sized>(
    classifier: &C,
    dataset: &[(InputTensor, usize)],
    masks: &[SelectionVector],
    grid: &ChunkGrid,
) -> Result<(ClassificationMetrics, ClassificationMetrics), crate::Error> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset.into());
    }
    if masks.len() != dataset.len() {
        return Err(EvalError::LabelMismatch(format!(
            "{} masks for {} instances",
            masks.len(),
            dataset.len()
        ))
        .into());
    }
    if let Some((_, y)) = dataset.iter().find(|(_, y)| *y >= classifier.n_classes()) {
        return Err(EvalError::LabelMismatch(format!(
            "label {y} outside {} classes",
            classifier.n_classes()
        ))
        .into());
    }
    let y_true: Vec<usize> = dataset.iter().map(|(_, y)| *y).collect();
    let full: Vec<usize> = dataset.iter().map(|(x, _)| classifier.predict(x)).collect();
    let masked = dataset
        .iter()
        .zip(masks)
        .map(|((x, _), s)| Ok(classifier.predict(&apply_mask(x, s, grid)?)))
        .collect::<Result<Vec<_>, crate::Error>>()?;
    Ok((
        classification_metrics(&y_true, &full)?,
        classification_metrics(&y_true, &masked)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionOrder {
    MostSalientFirst,
    LeastSalientFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionPoint {
    pub fraction: f64,
    pub chunks_deleted: usize,
    pub mu: f64,
}

/// Chunks ordered for deletion; ties go to the lower chunk index.
pub fn deletion_ranking(map: &SaliencyMap, grid: &ChunkGrid, order: DeletionOrder) -> Vec<usize> {
    let scores = chunk_scores(map, grid);
    let mut idx: Vec<usize> = (0..grid.m()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = match order {
            DeletionOrder::MostSalientFirst => scores[b].total_cmp(&scores[a]),
            DeletionOrder::LeastSalientFirst => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(a.cmp(&b))
    });
    idx
}

fn check_fractions(fractions: &[f64]) -> Result<(), EvalError> {
    let ok = !fractions.is_empty()
        && fractions.iter().all(|&f| f > 0.0 && f <= 1.0)
        && fractions.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EvalError::InvalidFractions(fractions.to_vec()))
    }
}

/// Zeroes the `ceil(f·m)` highest-ranked chunks for each fraction `f` and
/// records the loss. The curve is reported as is, monotone or not.
pub fn deletion_faithfulness(
    map: &SaliencyMap,
    grid: &ChunkGrid,
    x: &InputTensor,
    predictor: &dyn Predictor,
    fractions: &[f64],
    order: DeletionOrder,
) -> Result<Vec<DeletionPoint>, crate::Error> {
    check_fractions(fractions)?;
    let ranking = deletion_ranking(map, grid, order);
    let m = grid.m();
    fractions
        .iter()
        .map(|&fraction| {
            let k = ((fraction * m as f64).ceil() as usize).clamp(1, m);
            let keep = SelectionVector::all(m);
            let mut bits = keep.bits().to_vec();
            for &j in &ranking[..k] {
                bits[j] = false;
            }
            let masked = apply_mask(x, &SelectionVector::from_bits(bits), grid)?;
            let mu = crate::models::evaluate_one(predictor, &masked)?.get();
            Ok(DeletionPoint {
                fraction,
                chunks_deleted: k,
                mu,
            })
        })
        .collect()
}

/// Share of total saliency mass that falls on the given flat offsets.
pub fn mass_share(map: &SaliencyMap, offsets: &[usize]) -> f64 {
    let total: f64 = map.chi.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    offsets.iter().map(|&o| map.chi[o]).sum::<f64>() / total
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Times `f` over `repeats` runs.
pub fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64, f64) {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        last = Some(f());
        times.push(t.elapsed().as_secs_f64());
    }
    let (mean, sd) = mean_sd(&times);
    (last.expect("at least one repeat"), mean, sd)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoClassEvalConfig {
    pub instances: usize,
    pub dataset_seed: u64,
    pub explain: ExplainConfig,
    /// Chunks whose mean saliency reaches this percentile are kept.
    pub mask_percentile: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub repeats: usize,
    pub mask_percentile: f64,
    pub full: ConditionReport,
    pub masked: ConditionReport,
}

/// Explains every instance against its label, keeps the top chunks and
/// reclassifies. The masked runtime covers explanation plus masking.
pub fn run_two_class_eval(
    task: &Arc<TwoClassTask>,
    config: &TwoClassEvalConfig,
) -> Result<EvalReport, crate::Error> {
    let data = task.dataset(config.dataset_seed, config.instances);
    let grid = Arc::new(task.grid().clone());
    let (masks, masked_mean, masked_sd) = time_repeats(config.repeats, || {
        data.iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let loss = ClassifierLoss::new(task.clone(), *y);
                let mut cfg = config.explain.clone();
                cfg.sampler.seed = cfg.sampler.seed.wrapping_add(i as u64);
                let e = explain(&loss, Arc::new(x.clone()), grid.clone(), &cfg)?;
                Ok(threshold_mask(&e.map, &grid, config.mask_percentile))
            })
            .collect::<Result<Vec<_>, crate::Error>>()
    });
    let masks = masks?;
    let (_, full_mean, full_sd) = time_repeats(config.repeats, || {
        data.iter().map(|(x, _)| task.predict(x)).collect::<Vec<_>>()
    });
    let (full, masked) = masked_task_metrics(task.as_ref(), &data, &masks, &grid)?;
    Ok(EvalReport {
        instances: data.len(),
        repeats: config.repeats.max(1),
        mask_percentile: config.mask_percentile,
        full: ConditionReport {
            condition: "full".into(),
            metrics: full,
            runtime_mean_s: full_mean,
            runtime_sd_s: full_sd,
        },
        masked: ConditionReport {
            condition: format!("masked-p{}", config.mask_percentile),
            metrics: masked,
            runtime_mean_s: masked_mean,
            runtime_sd_s: masked_sd,
        },
    })
}

/// Synthetic two-class task on `side × side` inputs cut into `chunk × chunk`
/// chunks.
///
/// The class is carried by the mean intensity of the relevant chunks. The
/// remaining chunks form two decoy groups whose intensity difference pushes
/// the classifier's logit in a random, class-independent direction, so the
/// classifier misreads some full inputs.
#[derive(Debug, Clone)]
pub struct TwoClassTask {
    shape: Vec<usize>,
    grid: ChunkGrid,
    relevant: Vec<usize>,
    decoy_up: Vec<usize>,
    decoy_down: Vec<usize>,
    relevant_offsets: Vec<usize>,
    pub gain: f64,
    pub distraction: f64,
    pub cut: f64,
}

impl TwoClassTask {
    /// 8×8 inputs, 2×2 chunks, four relevant chunks in the centre.
    pub fn standard() -> Self {
        let grid = build_grid(&[8, 8], &[2, 2]).expect("valid grid");
        let relevant = vec![5, 6, 9, 10];
        let rest: Vec<usize> = (0..grid.m()).filter(|j| !relevant.contains(j)).collect();
        let decoy_up: Vec<usize> = rest.iter().copied().step_by(2).collect();
        let decoy_down: Vec<usize> = rest.iter().copied().skip(1).step_by(2).collect();
        let relevant_offsets = relevant
            .iter()
            .flat_map(|&j| grid.members(j).iter().copied())
            .collect();
        Self {
            shape: vec![8, 8],
            grid,
            relevant,
            decoy_up,
            decoy_down,
            relevant_offsets,
            gain: 10.0,
            distraction: 10.0,
            cut: 0.7,
        }
    }

    pub fn grid(&self) -> &ChunkGrid {
        &self.grid
    }

    pub fn relevant(&self) -> &[usize] {
        &self.relevant
    }

    pub fn relevant_offsets(&self) -> &[usize] {
        &self.relevant_offsets
    }

    fn region_mean(&self, x: &InputTensor, chunks: &[usize]) -> f64 {
        let v = x.values();
        let (sum, count) = chunks.iter().fold((0.0, 0usize), |(s, c), &j| {
            let members = self.grid.members(j);
            (s + members.iter().map(|&o| v[o] as f64).sum::<f64>(), c + members.len())
        });
        sum / count as f64
    }

    pub fn logit(&self, x: &InputTensor) -> f64 {
        self.gain * (self.region_mean(x, &self.relevant) - self.cut)
            + self.distraction
                * (self.region_mean(x, &self.decoy_up) - self.region_mean(x, &self.decoy_down))
    }

    /// One labelled instance, a deterministic function of `(seed, index)`.
    pub fn instance(&self, seed: u64, index: u64) -> (InputTensor, usize) {
        let mut rng = sample_rng(seed ^ 0x7A5C_0DE5_EED5_EED5, index);
        let label = rng.random_range(0..2usize);
        let level = if label == 1 { 1.0 } else { 0.4 };
        let clutter: f64 = rng.random_range(0.0..2.0);
        let mut values = vec![0f32; self.grid.volume()];
        for j in 0..self.grid.m() {
            let chunk_level = if self.relevant.contains(&j) {
                level * rng.random_range(0.8..1.2)
            } else {
                clutter * rng.random::<f64>()
            };
            for &o in self.grid.members(j) {
                values[o] = (chunk_level * rng.random_range(0.9..1.1)) as f32;
            }
        }
        (
            InputTensor::new(self.shape.clone(), values).expect("nonnegative"),
            label,
        )
    }

    pub fn dataset(&self, seed: u64, size: usize) -> Vec<(InputTensor, usize)> {
        (0..size as u64).map(|i| self.instance(seed, i)).collect()
    }
}

impl Classifier for TwoClassTask {
    fn n_classes(&self) -> usize {
        2
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn predict_proba(&self, x: &InputTensor) -> Vec<f64> {
        let p1 = 1.0 / (1.0 + (-self.logit(x)).exp());
        vec![1.0 - p1, p1]
    }
}
