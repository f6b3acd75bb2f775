//! Training objectives: cross-space clustering, controlled transfer, and
//! the cross-entropy / logit-distillation terms they are added to.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Tape, Tensor, Var, COSINE_EPS};
use crate::error::{Error, Result};

/// Where a batch example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    CurrentTask,
    Memory,
}

/// One mini-batch as seen by the losses.
///
/// `current_features` is `[k×d]` from the model being trained;
/// `previous_features` is `[k×d]` from the frozen snapshot and must be a
/// tape constant.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub labels: Vec<usize>,
    pub origin: Vec<Origin>,
    pub current_features: Var,
    pub previous_features: Option<Var>,
}

impl BatchView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, tape: &Tape) -> Result<()> {
        let k = self.labels.len();
        if k == 0 || self.origin.len() != k {
            return Err(Error::InvalidArgument(format!(
                "batch has {k} labels and {} origin flags",
                self.origin.len()
            )));
        }
        let cur = tape.value(self.current_features).shape();
        if cur.len() != 2 || cur[0] != k {
            return Err(Error::InvalidArgument(format!("current features of shape {cur:?} for batch of {k}")));
        }
        if let Some(prev) = self.previous_features {
            if tape.value(prev).shape() != cur {
                return Err(Error::ShapeMismatch {
                    op: "batch features",
                    lhs: cur.to_vec(),
                    rhs: tape.value(prev).shape().to_vec(),
                });
            }
            if tape.requires_grad(prev) {
                return Err(Error::InvalidArgument("previous-space features must not carry gradient".into()));
            }
        }
        Ok(())
    }

    fn previous(&self) -> Result<Var> {
        self.previous_features.ok_or(Error::MissingPreviousModel)
    }
}

/// Coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Temperature of the similarity distributions in controlled transfer.
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    /// Temperature of the logit-distillation term.
    #[serde(default = "defaults::temperature")]
    pub kd_temperature: f64,
    #[serde(default = "defaults::base_kd_weight")]
    pub base_kd_weight: f64,
}

mod defaults {
    pub fn alpha() -> f64 {
        0.3
    }
    pub fn beta() -> f64 {
        0.3
    }
    pub fn temperature() -> f64 {
        2.0
    }
    pub fn base_kd_weight() -> f64 {
        1.0
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            temperature: defaults::temperature(),
            kd_temperature: defaults::temperature(),
            base_kd_weight: defaults::base_kd_weight(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("base_kd_weight", self.base_kd_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss.{field}"), "must be finite and non-negative"));
            }
        }
        for (field, v) in [("temperature", self.temperature), ("kd_temperature", self.kd_temperature)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("loss.{field}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Cross-space clustering:
/// `(1/k²) Σ_i Σ_j (1 − cos(cur_i, prev_j)) · s_ij` with `s_ij = +1` for
/// same-label pairs and `−1` otherwise, self-pairs included.
pub fn csc_loss(tape: &mut Tape, batch: &BatchView) -> Result<Var> {
    batch.validate(tape)?;
    let prev = batch.previous()?;
    let k = batch.len();
    let cos = cosine_matrix(tape, batch.current_features, prev, COSINE_EPS)?;
    let mut signs = Vec::with_capacity(k * k);
    for &yi in &batch.labels {
        for &yj in &batch.labels {
            signs.push(if yi == yj { 1.0 } else { -1.0 });
        }
    }
    let signs = tape.constant(Tensor::matrix(k, k, signs)?);
    let one = tape.scalar_constant(1.0)?;
    let dist = tape.sub(one, cos)?;
    let signed = tape.mul(dist, signs)?;
    tape.mean(signed)
}

/// `softmax(cos(anchor, ref_j) / T)` over the rows of `references[q×d]`.
pub fn similarity_distribution(tape: &mut Tape, anchor: Var, references: Var, temperature: f64) -> Result<Var> {
    let d = tape.value(anchor).len();
    let q = match tape.value(references).shape() {
        [q, d2] if *d2 == d => *q,
        s => {
            return Err(Error::ShapeMismatch {
                op: "similarity_distribution",
                lhs: vec![d],
                rhs: s.to_vec(),
            })
        }
    };
    let a = tape.reshape(anchor, vec![1, d])?;
    let cos = cosine_matrix(tape, a, references, COSINE_EPS)?;
    let cos = tape.reshape(cos, vec![q])?;
    tape.softmax_rows(cos, temperature)
}

/// Controlled transfer: mean over current-task anchors of
/// `KL(H_current(anchor over Q) ‖ H_previous(anchor over Q))`, where `Q`
/// is the memory part of the batch.
///
/// Returns a constant zero when the batch has no current-task examples or
/// fewer than two memory examples. With `detach_q` the current-space
/// features of `Q` are treated as constants.
pub fn ct_loss(tape: &mut Tape, batch: &BatchView, temperature: f64, detach_q: bool) -> Result<Var> {
    batch.validate(tape)?;
    let prev = batch.previous()?;
    let p_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.origin[i] == Origin::CurrentTask).collect();
    let q_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.origin[i] == Origin::Memory).collect();
    if p_idx.is_empty() {
        log::debug!("controlled transfer: no current-task samples in batch, loss is 0");
        return tape.scalar_constant(0.0);
    }
    if q_idx.len() < 2 {
        log::warn!("controlled transfer: {} memory sample(s) in batch, loss is 0", q_idx.len());
        return tape.scalar_constant(0.0);
    }
    let cur_p = tape.select_rows(batch.current_features, &p_idx)?;
    let mut cur_q = tape.select_rows(batch.current_features, &q_idx)?;
    if detach_q {
        cur_q = tape.detach(cur_q);
    }
    let prev_p = tape.select_rows(prev, &p_idx)?;
    let prev_q = tape.select_rows(prev, &q_idx)?;

    let cos_cur = cosine_matrix(tape, cur_p, cur_q, COSINE_EPS)?;
    let cos_prev = cosine_matrix(tape, prev_p, prev_q, COSINE_EPS)?;
    let log_h_cur = tape.log_softmax_rows(cos_cur, temperature)?;
    let log_h_prev = tape.log_softmax_rows(cos_prev, temperature)?;
    let h_cur = tape.exp(log_h_cur)?;
    let log_ratio = tape.sub(log_h_cur, log_h_prev)?;
    let terms = tape.mul(h_cur, log_ratio)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / p_idx.len() as f64)
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (k, n) = match tape.value(logits).shape() {
        [k, n] if *k == labels.len() => (*k, *n),
        s => {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    let mut onehot = vec![0.0; k * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::LabelOutOfRange { label: y, classes: n });
        }
        onehot[i * n + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::matrix(k, n, onehot)?);
    let log_p = tape.log_softmax_rows(logits, 1.0)?;
    let picked = tape.mul(log_p, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / k as f64)
}

/// `T² · mean_i KL(softmax(prev_i/T) ‖ softmax(cur_i/T))` over old-class logits.
pub fn logit_distillation_loss(tape: &mut Tape, current_old: Var, previous_old: Var, temperature: f64) -> Result<Var> {
    let (cs, ps) = (tape.value(current_old).shape(), tape.value(previous_old).shape());
    if cs != ps || cs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "logit_distillation",
            lhs: cs.to_vec(),
            rhs: ps.to_vec(),
        });
    }
    let k = cs[0];
    let log_cur = tape.log_softmax_rows(current_old, temperature)?;
    let log_prev = tape.log_softmax_rows(previous_old, temperature)?;
    let p_prev = tape.exp(log_prev)?;
    let log_ratio = tape.sub(log_prev, log_cur)?;
    let terms = tape.mul(p_prev, log_ratio)?;
    let total = tape.sum(terms)?;
    tape.scale(total, temperature * temperature / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    FirstTask,
    Incremental,
}

/// Per-term values of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub logit_distillation: f64,
    pub cross_space_clustering: f64,
    pub controlled_transfer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("cross_entropy", self.cross_entropy),
            ("logit_distillation", self.logit_distillation),
            ("cross_space_clustering", self.cross_space_clustering),
            ("controlled_transfer", self.controlled_transfer),
            ("total", self.total),
        ]
    }
}

/// Everything the combined objective reads for one batch.
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    pub batch: &'a BatchView,
    /// `[k × n_seen]` logits of the current model.
    pub logits: Var,
    /// `[k × n_old]` logits of the frozen model.
    pub previous_logits: Option<Var>,
}

/// `CE + w_kd·KD + α·CSC + β·CT` on incremental phases, `CE` alone on the
/// first task.
pub fn combined_loss(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    phase: Phase,
    ct_detach_q: bool,
) -> Result<(Var, LossBreakdown)> {
    let ce = tagged(cross_entropy_loss(tape, inputs.logits, &inputs.batch.labels), "cross_entropy")?;
    let mut breakdown = LossBreakdown {
        cross_entropy: tape.value(ce).item(),
        ..Default::default()
    };
    let total = match phase {
        Phase::FirstTask => ce,
        Phase::Incremental => {
            let (Some(prev_logits), Some(_)) = (inputs.previous_logits, inputs.batch.previous_features) else {
                return Err(Error::MissingPreviousModel);
            };
            let n_old = tape.value(prev_logits).shape()[1];
            let cur_old = tape.slice_cols(inputs.logits, 0, n_old)?;
            let kd = tagged(
                logit_distillation_loss(tape, cur_old, prev_logits, weights.kd_temperature),
                "logit_distillation",
            )?;
            let csc = tagged(csc_loss(tape, inputs.batch), "cross_space_clustering")?;
            let ct = tagged(ct_loss(tape, inputs.batch, weights.temperature, ct_detach_q), "controlled_transfer")?;
            breakdown.logit_distillation = tape.value(kd).item();
            breakdown.cross_space_clustering = tape.value(csc).item();
            breakdown.controlled_transfer = tape.value(ct).item();

            let mut total = ce;
            for (term, w) in [(kd, weights.base_kd_weight), (csc, weights.alpha), (ct, weights.beta)] {
                let weighted = tape.scale(term, w)?;
                total = tagged(tape.add(total, weighted), "total")?;
            }
            total
        }
    };
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

fn tagged<T>(r: Result<T>, term: &'static str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, at: String::new() },
        other => other,
    })
}
