//! Labeled datasets and their split into a sequence of disjoint-class tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Train and test examples over classes `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for ex in self.train.iter().chain(&self.test) {
            if ex.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.label,
                    classes: self.num_classes,
                });
            }
            if ex.features.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "example {} has {} features, expected {}",
                    ex.id,
                    ex.features.len(),
                    self.dim
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "dataset" });
            }
            if !ids.insert(ex.id) {
                return Err(Error::InvalidArgument(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolVariant {
    /// Half of all classes in the first task, `C` in each later one.
    HalfFirst,
    /// `C` classes in every task, including the first.
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamProtocol {
    pub variant: ProtocolVariant,
    pub first_task_classes: usize,
    pub per_task_classes: usize,
}

impl StreamProtocol {
    pub fn half_first(total_classes: usize, per_task_classes: usize) -> Self {
        Self {
            variant: ProtocolVariant::HalfFirst,
            first_task_classes: total_classes / 2,
            per_task_classes,
        }
    }

    pub fn equal(per_task_classes: usize) -> Self {
        Self {
            variant: ProtocolVariant::Equal,
            first_task_classes: per_task_classes,
            per_task_classes,
        }
    }

    pub fn validate(&self, total_classes: usize) -> Result<()> {
        let (b, c) = (self.first_task_classes, self.per_task_classes);
        if b == 0 || c == 0 {
            return Err(Error::Protocol("class counts per task must be positive".into()));
        }
        match self.variant {
            ProtocolVariant::HalfFirst if 2 * b != total_classes => {
                return Err(Error::Protocol(format!(
                    "half_first needs B = {total_classes}/2 with an even class count, got B = {b}"
                )))
            }
            ProtocolVariant::Equal if b != c => {
                return Err(Error::Protocol(format!("equal protocol needs B = C, got B = {b}, C = {c}")))
            }
            _ => {}
        }
        if total_classes < b {
            return Err(Error::Protocol(format!(
                "{total_classes} classes is fewer than the {b} required by the first task"
            )));
        }
        if !(total_classes - b).is_multiple_of(c) {
            return Err(Error::Protocol(format!(
                "{} remaining classes are not divisible into tasks of {c}",
                total_classes - b
            )));
        }
        Ok(())
    }

    pub fn num_tasks(&self, total_classes: usize) -> usize {
        1 + (total_classes - self.first_task_classes) / self.per_task_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    pub class_set: Vec<usize>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Classes in the order they are introduced.
    pub class_order: Vec<usize>,
    pub dim: usize,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Looks up any training example of the stream by id.
    pub fn train_index(&self) -> BTreeMap<u64, &LabeledExample> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter())
            .map(|e| (e.id, e))
            .collect()
    }

    /// Standardizes features with statistics of task 1's training data.
    pub fn standardized(&self) -> (TaskStream, Standardizer) {
        let s = Standardizer::fit(&self.tasks[0].train, self.dim);
        let mut out = self.clone();
        for task in &mut out.tasks {
            for ex in task.train.iter_mut().chain(task.test.iter_mut()) {
                s.apply_in_place(&mut ex.features);
            }
        }
        (out, s)
    }
}

/// Splits a dataset into tasks with a seeded class permutation.
pub fn build_stream(dataset: &Dataset, protocol: &StreamProtocol, class_order_seed: u64) -> Result<TaskStream> {
    protocol.validate(dataset.num_classes)?;
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(&mut stream_rng(class_order_seed, "class_order"));

    let mut bounds = vec![(0, protocol.first_task_classes)];
    let mut start = protocol.first_task_classes;
    while start < dataset.num_classes {
        bounds.push((start, start + protocol.per_task_classes));
        start += protocol.per_task_classes;
    }

    let tasks = bounds
        .into_iter()
        .enumerate()
        .map(|(i, (lo, hi))| {
            let class_set = order[lo..hi].to_vec();
            let members: BTreeSet<usize> = class_set.iter().copied().collect();
            let pick = |xs: &[LabeledExample]| -> Vec<LabeledExample> {
                xs.iter().filter(|e| members.contains(&e.label)).cloned().collect()
            };
            Task {
                index: i + 1,
                class_set,
                train: pick(&dataset.train),
                test: pick(&dataset.test),
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        class_order: order,
        dim: dataset.dim,
    })
}

/// Per-dimension affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Zero-variance dimensions keep a unit scale.
    pub fn fit(examples: &[LabeledExample], dim: usize) -> Self {
        if examples.is_empty() {
            return Self::identity(dim);
        }
        let n = examples.len() as f64;
        let mut mean = vec![0.0; dim];
        for e in examples {
            for (m, x) in mean.iter_mut().zip(&e.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for e in examples {
            for ((v, x), m) in var.iter_mut().zip(&e.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Gaussian class clusters around random means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the ball the class means are drawn from.
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("dim", self.dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("dataset.{field}"), "must be positive"));
            }
        }
        if !(self.class_mean_scale.is_finite() && self.class_mean_scale >= 0.0) {
            return Err(Error::config("dataset.class_mean_scale", "must be finite and non-negative"));
        }
        if !(self.within_class_std.is_finite() && self.within_class_std >= 0.0) {
            return Err(Error::config("dataset.within_class_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Draws a synthetic dataset; train ids come first, then test ids.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "synthetic");
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let radius = spec.class_mean_scale * rng.random::<f64>().powf(1.0 / spec.dim as f64);
            dir.into_iter().map(|x| x / norm * radius).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.within_class_std).map_err(|e| Error::config("dataset.within_class_std", e.to_string()))?;

    let mut next_id = 0u64;
    let mut draw = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut out = Vec::with_capacity(count * spec.num_classes);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..count {
                let features = mean.iter().map(|m| m + noise.sample(rng)).collect();
                out.push(LabeledExample {
                    id: next_id,
                    features,
                    label,
                });
                next_id += 1;
            }
        }
        out
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class, &mut rng);
    Ok(Dataset {
        train,
        test,
        num_classes: spec.num_classes,
        dim: spec.dim,
    })
}

/// Which CSV columns hold the label and the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// `None` means every column other than the label.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub dim: usize,
    /// `(label as written in the file, remapped class index)`.
    pub label_remap: Vec<(i64, usize)>,
}

/// Reads a headered CSV; ids follow file order and labels are remapped
/// to `0..n` in ascending order of their original values.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<CsvDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config("dataset.columns", format!("column '{name}' not found in {}", path.display())))
    };
    let label_idx = find(&schema.label_column)?;
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::config("dataset.feature_columns", "no feature columns"));
    }

    let parse_err = |row: usize, col: usize, message: String| Error::CsvParse {
        path: path.to_path_buf(),
        row,
        column: headers[col].clone(),
        message,
    };

    let mut raw = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |col: usize| record.get(col).map(str::trim).unwrap_or("");
        let label: i64 = field(label_idx)
            .parse()
            .map_err(|_| parse_err(row, label_idx, format!("label '{}' is not an integer", field(label_idx))))?;
        let mut features = Vec::with_capacity(feature_idx.len());
        for &c in &feature_idx {
            let v: f64 = field(c)
                .parse()
                .map_err(|_| parse_err(row, c, format!("'{}' is not a number", field(c))))?;
            if !v.is_finite() {
                return Err(parse_err(row, c, format!("non-finite value {v}")));
            }
            features.push(v);
        }
        raw.push((label, features));
    }

    let distinct: BTreeSet<i64> = raw.iter().map(|(l, _)| *l).collect();
    let label_remap: Vec<(i64, usize)> = distinct.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    let lookup: BTreeMap<i64, usize> = label_remap.iter().copied().collect();
    let examples = raw
        .into_iter()
        .enumerate()
        .map(|(i, (l, features))| LabeledExample {
            id: i as u64,
            features,
            label: lookup[&l],
        })
        .collect();
    Ok(CsvDataset {
        examples,
        num_classes: label_remap.len(),
        dim: feature_idx.len(),
        label_remap,
    })
}

/// Holds out the last `ceil(test_fraction · n_c)` examples of each class
/// (in id order) for testing, keeping at least one training example.
pub fn split_train_test(examples: Vec<LabeledExample>, num_classes: usize, dim: usize, test_fraction: f64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("dataset.test_fraction", "must lie in [0, 1)"));
    }
    let mut by_class: BTreeMap<usize, Vec<LabeledExample>> = BTreeMap::new();
    for e in examples {
        by_class.entry(e.label).or_default().push(e);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut xs) in by_class {
        xs.sort_by_key(|e| e.id);
        let n_test = ((xs.len() as f64) * test_fraction).ceil() as usize;
        let n_test = n_test.min(xs.len() - 1);
        let cut = xs.len() - n_test;
        test.extend(xs.drain(cut..));
        train.extend(xs);
    }
    train.sort_by_key(|e| e.id);
    test.sort_by_key(|e| e.id);
    let ds = Dataset {
        train,
        test,
        num_classes,
        dim,
    };
    ds.validate()?;
    Ok(ds)
}
