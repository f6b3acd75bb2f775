//! Bounded per-class exemplar store with herding selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{LabeledExample, Task};

pub(crate) fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Greedy herding: at step `j`, choose the unpicked example whose feature,
/// added to the running sum of picks, brings the running mean closest to
/// the class mean. Features are L2-normalized first and ties go to the
/// smallest id, so the result is independent of input order.
pub fn herding_select(class_examples: &[(u64, Vec<f64>)], budget: usize) -> Result<Vec<u64>> {
    if class_examples.is_empty() {
        return Err(Error::EmptySelection);
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("herding budget must be at least 1".into()));
    }
    let dim = class_examples[0].1.len();
    if class_examples.iter().any(|(_, f)| f.len() != dim) {
        return Err(Error::InvalidArgument("herding features differ in length".into()));
    }

    let mut items: Vec<(u64, Vec<f64>)> = class_examples.iter().map(|(id, f)| (*id, l2_normalized(f))).collect();
    items.sort_by_key(|(id, _)| *id);

    let n = items.len() as f64;
    let mut mu = vec![0.0; dim];
    for (_, f) in &items {
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);

    let target = budget.min(items.len());
    let mut picked = vec![false; items.len()];
    let mut running = vec![0.0; dim];
    let mut out = Vec::with_capacity(target);
    for step in 1..=target {
        let mut best: Option<(f64, usize)> = None;
        for (i, (_, f)) in items.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let dist = mu
                .iter()
                .zip(&running)
                .zip(f)
                .map(|((m, r), x)| {
                    let d = m - (r + x) / step as f64;
                    d * d
                })
                .sum::<f64>();
            // Items are in id order, so strict `<` keeps the smallest id on ties.
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.expect("fewer picks than items");
        picked[i] = true;
        for (r, x) in running.iter_mut().zip(&items[i].1) {
            *r += x;
        }
        out.push(items[i].0);
    }
    Ok(out)
}

/// Exemplar memory `M_t`: at most `per_class_budget` ids per class, each
/// list kept in herding order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub per_class_budget: usize,
    store: BTreeMap<usize, Vec<u64>>,
}

impl ExemplarMemory {
    pub fn new(per_class_budget: usize) -> Self {
        Self {
            per_class_budget,
            store: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts(per_class_budget: usize, store: BTreeMap<usize, Vec<u64>>) -> Self {
        Self { per_class_budget, store }
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn exemplars(&self, class: usize) -> Option<&[u64]> {
        self.store.get(&class).map(Vec::as_slice)
    }

    pub fn store(&self) -> &BTreeMap<usize, Vec<u64>> {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.store.values().flatten().copied()
    }

    /// Adds herding lists for every class of `task`, using features from
    /// the model that just finished training on it. Stored classes are
    /// left untouched.
    pub fn update_after_task(
        &mut self,
        task: &Task,
        mut feature_fn: impl FnMut(&LabeledExample) -> Result<Vec<f64>>,
    ) -> Result<()> {
        if let Some(&c) = task.class_set.iter().find(|c| self.store.contains_key(c)) {
            return Err(Error::ClassCollision(c));
        }
        let mut new_lists = BTreeMap::new();
        for &class in &task.class_set {
            let examples: Vec<(u64, Vec<f64>)> = task
                .train
                .iter()
                .filter(|e| e.label == class)
                .map(|e| Ok((e.id, feature_fn(e)?)))
                .collect::<Result<_>>()?;
            if examples.is_empty() {
                log::warn!("class {class} has no training examples; nothing stored");
                continue;
            }
            new_lists.insert(class, herding_select(&examples, self.per_class_budget)?);
        }
        self.store.extend(new_lists);
        Ok(())
    }

    /// Normalized mean of the normalized exemplar features of each class.
    pub fn class_means(
        &self,
        lookup: impl Fn(u64) -> Option<Vec<f64>>,
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        if self.store.is_empty() {
            return Err(Error::InvalidArgument("class means of an empty memory".into()));
        }
        let mut out = BTreeMap::new();
        for (&class, ids) in &self.store {
            let mut mean: Option<Vec<f64>> = None;
            for &id in ids {
                let f = lookup(id).ok_or_else(|| Error::InvalidArgument(format!("exemplar id {id} not found")))?;
                let f = l2_normalized(&f);
                match &mut mean {
                    Some(m) => m.iter_mut().zip(&f).for_each(|(a, b)| *a += b),
                    None => mean = Some(f),
                }
            }
            let Some(mut mean) = mean else {
                return Err(Error::MissingClass(class));
            };
            let n = ids.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateMean(class));
            }
            mean.iter_mut().for_each(|m| *m /= norm);
            out.insert(class, mean);
        }
        Ok(out)
    }
}
