//! One training phase of class-incremental learning and inference.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, BatchView, LossBreakdown, LossInputs, LossWeights, Origin, Phase};
use crate::memory::{l2_normalized, ExemplarMemory};
use crate::model::{FrozenModel, Model};
use crate::optim::{MultiStepLr, Sgd};
use crate::rng::stream_rng;
use crate::stream::{LabeledExample, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Argmax of the classifier logits.
    Linear,
    /// Nearest mean of exemplars in normalized feature space.
    Nme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::milestones")]
    pub lr_decay_milestones: Vec<usize>,
    #[serde(default = "defaults::decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::classifier")]
    pub classifier: ClassifierMode,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ct_detach_q: bool,
}

mod defaults {
    use super::ClassifierMode;
    pub fn epochs() -> usize {
        60
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        0.05
    }
    pub fn milestones() -> Vec<usize> {
        vec![30, 45]
    }
    pub fn decay() -> f64 {
        0.1
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn classifier() -> ClassifierMode {
        ClassifierMode::Linear
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lr_decay_milestones: defaults::milestones(),
            lr_decay_factor: defaults::decay(),
            weight_decay: defaults::weight_decay(),
            momentum: defaults::momentum(),
            seed: 0,
            classifier: defaults::classifier(),
            weights: LossWeights::default(),
            ct_detach_q: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        let m = &self.lr_decay_milestones;
        if m.windows(2).any(|w| w[0] >= w[1]) || m.iter().any(|&e| e >= self.epochs) {
            return Err(Error::config(
                "train.lr_decay_milestones",
                "must be strictly increasing and below epochs",
            ));
        }
        for (field, v) in [
            ("train.lr_decay_factor", self.lr_decay_factor),
            ("train.weight_decay", self.weight_decay),
            ("train.momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        self.weights.validate()
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.learning_rate,
            milestones: self.lr_decay_milestones.clone(),
            factor: self.lr_decay_factor,
        }
    }
}

/// Maps dataset labels to classifier columns in order of arrival.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    order: Vec<usize>,
    column: BTreeMap<usize, usize>,
}

impl LabelMap {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut column = BTreeMap::new();
        for (i, &c) in order.iter().enumerate() {
            if column.insert(c, i).is_some() {
                return Err(Error::ClassCollision(c));
            }
        }
        Ok(Self { order, column })
    }

    pub fn extend(&mut self, classes: &[usize]) -> Result<()> {
        for &c in classes {
            if self.column.contains_key(&c) {
                return Err(Error::ClassCollision(c));
            }
            self.column.insert(c, self.order.len());
            self.order.push(c);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn column(&self, label: usize) -> Option<usize> {
        self.column.get(&label).copied()
    }

    pub fn label(&self, column: usize) -> usize {
        self.order[column]
    }
}

/// Current model and, from the second task on, its frozen predecessor.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub current: Model,
    pub previous: Option<FrozenModel>,
}

/// Loss terms recorded while training one phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub steps: Vec<LossBreakdown>,
    /// Per-epoch mean of each term.
    pub epochs: Vec<LossBreakdown>,
}

/// `D_t = τ_t ∪ M_{t−1}`: the current task's training examples followed by
/// the stored exemplars of earlier tasks.
pub fn training_pool<'a>(
    task: &'a Task,
    memory: &ExemplarMemory,
    exemplars: &BTreeMap<u64, &'a LabeledExample>,
) -> Result<Vec<&'a LabeledExample>> {
    let mut pool: Vec<&LabeledExample> = task.train.iter().collect();
    for id in memory.ids() {
        let ex = exemplars
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("exemplar id {id} not found")))?;
        pool.push(ex);
    }
    Ok(pool)
}

/// Shuffled mini-batches of pool indices for one epoch; the last batch may be short.
pub fn epoch_batches(pool_len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Name of the random stream used to shuffle phase `t`.
pub fn shuffle_stream(task_index: usize) -> String {
    format!("shuffle/task{task_index}")
}

/// Stacks the inputs of selected pool entries into a matrix.
pub fn stack_inputs(pool: &[&LabeledExample], indices: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = indices.iter().map(|&i| pool[i].features.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Trains `pair.current` on `D_t` with the combined objective.
///
/// The classifier must already cover the task's classes. The frozen model,
/// when present, supplies previous-space features and old-class logits.
pub fn train_phase(
    pair: &mut ModelPair,
    task: &Task,
    memory: &ExemplarMemory,
    exemplars: &BTreeMap<u64, &LabeledExample>,
    labels: &LabelMap,
    config: &TrainConfig,
) -> Result<PhaseTrace> {
    config.validate()?;
    if pair.current.num_classes() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "classifier has {} outputs but {} classes are known",
            pair.current.num_classes(),
            labels.len()
        )));
    }
    let phase = if pair.previous.is_some() {
        Phase::Incremental
    } else {
        Phase::FirstTask
    };
    if task.index > 1 && pair.previous.is_none() {
        return Err(Error::MissingPreviousModel);
    }
    let current_classes: BTreeSet<usize> = task.class_set.iter().copied().collect();
    let pool = training_pool(task, memory, exemplars)?;
    let columns: Vec<usize> = pool
        .iter()
        .map(|e| {
            labels.column(e.label).ok_or(Error::LabelOutOfRange {
                label: e.label,
                classes: labels.len(),
            })
        })
        .collect::<Result<_>>()?;

    let schedule = config.schedule();
    let mut rng = stream_rng(config.seed, &shuffle_stream(task.index));
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut trace = PhaseTrace::default();

    for epoch in 0..config.epochs {
        let lr = schedule.rate(epoch);
        let batches = epoch_batches(pool.len(), config.batch_size, &mut rng);
        let mut sums = LossBreakdown::default();
        for (step, batch_idx) in batches.iter().enumerate() {
            let at = |e: Error| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                    term,
                    at: format!(" at task {}, epoch {epoch}, step {step}", task.index),
                },
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    term: op,
                    at: format!(" at task {}, epoch {epoch}, step {step}", task.index),
                },
                other => other,
            };
            let x = stack_inputs(&pool, batch_idx)?;
            let mut tape = Tape::new();
            let bound = pair.current.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let feats = bound.features(&mut tape, xv).map_err(at)?;
            let logits = bound.logits(&mut tape, feats).map_err(at)?;

            let (prev_feats, prev_logits) = match &pair.previous {
                Some(prev) => {
                    let f = prev.features(&x).map_err(at)?;
                    let l = prev.logits(&f).map_err(at)?;
                    (Some(tape.constant(f)), Some(tape.constant(l)))
                }
                None => (None, None),
            };
            let batch = BatchView {
                labels: batch_idx.iter().map(|&i| columns[i]).collect(),
                origin: batch_idx
                    .iter()
                    .map(|&i| {
                        if current_classes.contains(&pool[i].label) {
                            Origin::CurrentTask
                        } else {
                            Origin::Memory
                        }
                    })
                    .collect(),
                current_features: feats,
                previous_features: prev_feats,
            };
            let inputs = LossInputs {
                batch: &batch,
                logits,
                previous_logits: prev_logits,
            };
            let (loss, breakdown) =
                combined_loss(&mut tape, &inputs, &config.weights, phase, config.ct_detach_q).map_err(at)?;
            tape.backward(loss)?;

            let vars = bound.param_vars();
            let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
            opt.step(pair.current.params_mut(), &grads, lr);
            if pair.current.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(at(Error::NonFiniteLoss { term: "parameters", at: String::new() }));
            }

            add_breakdown(&mut sums, &breakdown, 1.0);
            trace.steps.push(breakdown);
        }
        let mut mean = LossBreakdown::default();
        add_breakdown(&mut mean, &sums, 1.0 / batches.len() as f64);
        log::debug!(
            "task {} epoch {epoch}: total {:.5} ce {:.5} kd {:.5} csc {:.5} ct {:.5}",
            task.index,
            mean.total,
            mean.cross_entropy,
            mean.logit_distillation,
            mean.cross_space_clustering,
            mean.controlled_transfer
        );
        trace.epochs.push(mean);
    }
    Ok(trace)
}

fn add_breakdown(acc: &mut LossBreakdown, x: &LossBreakdown, scale: f64) {
    acc.cross_entropy += scale * x.cross_entropy;
    acc.logit_distillation += scale * x.logit_distillation;
    acc.cross_space_clustering += scale * x.cross_space_clustering;
    acc.controlled_transfer += scale * x.controlled_transfer;
    acc.total += scale * x.total;
}

/// Anything that maps an input vector to a dataset label.
pub trait Predictor {
    fn predict(&self, input: &[f64]) -> Result<usize>;
}

/// Inference with a fixed model and, in NME mode, class means computed
/// once from the memory with that model.
pub struct Evaluator<'a> {
    model: &'a Model,
    labels: &'a LabelMap,
    mode: ClassifierMode,
    means: Vec<(usize, Vec<f64>)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        model: &'a Model,
        labels: &'a LabelMap,
        memory: &ExemplarMemory,
        exemplars: &BTreeMap<u64, &LabeledExample>,
        mode: ClassifierMode,
    ) -> Result<Self> {
        let means = match mode {
            ClassifierMode::Linear => Vec::new(),
            ClassifierMode::Nme => {
                for &c in labels.order() {
                    if memory.exemplars(c).is_none_or(<[u64]>::is_empty) {
                        return Err(Error::MissingClass(c));
                    }
                }
                let means = memory.class_means(|id| exemplars.get(&id).and_then(|e| model.feature_vector(&e.features).ok()))?;
                means.into_iter().collect()
            }
        };
        Ok(Self {
            model,
            labels,
            mode,
            means,
        })
    }

    pub fn predict_features(&self, features: &[f64], logits: Option<&[f64]>) -> Result<usize> {
        match self.mode {
            ClassifierMode::Linear => {
                let logits = logits.ok_or_else(|| Error::InvalidArgument("linear mode needs logits".into()))?;
                Ok(self.labels.label(argmax(logits)))
            }
            ClassifierMode::Nme => nearest_mean(features, &self.means),
        }
    }
}

impl Predictor for Evaluator<'_> {
    fn predict(&self, input: &[f64]) -> Result<usize> {
        let x = Tensor::matrix(1, input.len(), input.to_vec())?;
        let f = self.model.features(&x)?;
        match self.mode {
            ClassifierMode::Linear => {
                let l = self.model.logits(&f)?;
                self.predict_features(f.data(), Some(l.data()))
            }
            ClassifierMode::Nme => self.predict_features(f.data(), None),
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Class whose mean is closest to the normalized feature; ties go to the
/// smallest class index.
pub fn nearest_mean(features: &[f64], means: &[(usize, Vec<f64>)]) -> Result<usize> {
    let f = l2_normalized(features);
    let mut best: Option<(f64, usize)> = None;
    for (class, mean) in means {
        let d: f64 = f.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let better = match best {
            None => true,
            Some((bd, bc)) => d < bd || (d == bd && *class < bc),
        };
        if better {
            best = Some((d, *class));
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| Error::InvalidArgument("no class means".into()))
}

/// Predicts the label of one input.
pub fn classify(
    model: &Model,
    labels: &LabelMap,
    memory: &ExemplarMemory,
    exemplars: &BTreeMap<u64, &LabeledExample>,
    input: &[f64],
    mode: ClassifierMode,
) -> Result<usize> {
    Evaluator::new(model, labels, memory, exemplars, mode)?.predict(input)
}
