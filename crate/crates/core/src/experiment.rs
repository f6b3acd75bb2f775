//! Experiment configuration, the per-seed phase loop and run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::learner::{train_phase, ClassifierMode, Evaluator, LabelMap, ModelPair, PhaseTrace, TrainConfig};
use crate::losses::LossWeights;
use crate::memory::ExemplarMemory;
use crate::metrics::{act, apt, average_incremental_accuracy, embeddings_csv, eval_accuracy, AccuracyMatrix};
use crate::model::{snapshot, Model, ModelConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::stream::{
    build_stream, generate_synthetic, load_csv_dataset, split_train_test, CsvSchema, Dataset, LabeledExample,
    ProtocolVariant, Standardizer, StreamProtocol, SyntheticSpec, TaskStream,
};

pub const SUMMARY_FILE: &str = "summary.json";
pub const OUTPUT_ROOT_ENV: &str = "CSCCT_OUTPUT_ROOT";

/// Which loss terms a run uses. Presets zero out weights; they never
/// raise them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "finetune_replay")]
    FinetuneReplay,
    #[serde(rename = "base_kd")]
    BaseKd,
    #[serde(rename = "base_kd+csc")]
    BaseKdCsc,
    #[serde(rename = "base_kd+ct")]
    BaseKdCt,
    #[serde(rename = "base_kd+cscct")]
    BaseKdCscct,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::FinetuneReplay,
        Preset::BaseKd,
        Preset::BaseKdCsc,
        Preset::BaseKdCt,
        Preset::BaseKdCscct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FinetuneReplay => "finetune_replay",
            Preset::BaseKd => "base_kd",
            Preset::BaseKdCsc => "base_kd+csc",
            Preset::BaseKdCt => "base_kd+ct",
            Preset::BaseKdCscct => "base_kd+cscct",
        }
    }

    pub fn apply(self, mut w: LossWeights) -> LossWeights {
        match self {
            Preset::FinetuneReplay => {
                w.alpha = 0.0;
                w.beta = 0.0;
                w.base_kd_weight = 0.0;
            }
            Preset::BaseKd => {
                w.alpha = 0.0;
                w.beta = 0.0;
            }
            Preset::BaseKdCsc => w.beta = 0.0,
            Preset::BaseKdCt => w.alpha = 0.0,
            Preset::BaseKdCscct => {}
        }
        w
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("preset", format!("unknown preset '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Gaussian clusters; the data seed is derived from each run seed.
    Synthetic {
        num_classes: usize,
        dim: usize,
        #[serde(default = "defaults::train_per_class")]
        train_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::class_mean_scale")]
        class_mean_scale: f64,
        #[serde(default = "defaults::within_class_std")]
        within_class_std: f64,
    },
    /// Headered CSV split per class into train and test.
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        feature_columns: Option<Vec<String>>,
        #[serde(default = "defaults::test_fraction")]
        test_fraction: f64,
    },
}

/// Dataset plus the original-label table for CSV sources.
pub struct LoadedData {
    pub dataset: Dataset,
    pub data_labels: Vec<(i64, usize)>,
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<LoadedData> {
        match self {
            DatasetSource::Synthetic {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                class_mean_scale,
                within_class_std,
            } => {
                let spec = SyntheticSpec {
                    num_classes: *num_classes,
                    dim: *dim,
                    train_per_class: *train_per_class,
                    test_per_class: *test_per_class,
                    class_mean_scale: *class_mean_scale,
                    within_class_std: *within_class_std,
                    seed: derive_seed(seed, "data"),
                };
                Ok(LoadedData {
                    dataset: generate_synthetic(&spec)?,
                    data_labels: Vec::new(),
                })
            }
            DatasetSource::Csv {
                path,
                label_column,
                feature_columns,
                test_fraction,
            } => {
                let schema = CsvSchema {
                    label_column: label_column.clone(),
                    feature_columns: feature_columns.clone(),
                };
                let csv = load_csv_dataset(path, &schema)?;
                Ok(LoadedData {
                    dataset: split_train_test(csv.examples, csv.num_classes, csv.dim, *test_fraction)?,
                    data_labels: csv.label_remap,
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSource::Synthetic {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                class_mean_scale,
                within_class_std,
            } => SyntheticSpec {
                num_classes: *num_classes,
                dim: *dim,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                class_mean_scale: *class_mean_scale,
                within_class_std: *within_class_std,
                seed: 0,
            }
            .validate(),
            DatasetSource::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::config("dataset.test_fraction", "must lie in (0, 1)"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub variant: ProtocolVariant,
    pub per_task_classes: usize,
    /// Only for `half_first`; defaults to half the classes.
    #[serde(default)]
    pub first_task_classes: Option<usize>,
}

impl ProtocolSection {
    pub fn resolve(&self, total_classes: usize) -> Result<StreamProtocol> {
        let p = match self.variant {
            ProtocolVariant::HalfFirst => {
                let mut p = StreamProtocol::half_first(total_classes, self.per_task_classes);
                if let Some(b) = self.first_task_classes {
                    p.first_task_classes = b;
                }
                p
            }
            ProtocolVariant::Equal => {
                if self.first_task_classes.is_some_and(|b| b != self.per_task_classes) {
                    return Err(Error::config(
                        "protocol.first_task_classes",
                        "the equal variant uses per_task_classes for every task",
                    ));
                }
                StreamProtocol::equal(self.per_task_classes)
            }
        };
        p.validate(total_classes)
            .map_err(|e| Error::config("protocol", e.to_string()))?;
        Ok(p)
    }
}

/// Optimization settings; the seed and loss weights come from elsewhere
/// in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
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
    #[serde(default = "defaults::classifier")]
    pub classifier: ClassifierMode,
    #[serde(default)]
    pub ct_detach_q: bool,
    #[serde(default = "defaults::memory_per_class")]
    pub memory_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay_milestones: t.lr_decay_milestones,
            lr_decay_factor: t.lr_decay_factor,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            classifier: t.classifier,
            ct_detach_q: t.ct_detach_q,
            memory_per_class: defaults::memory_per_class(),
        }
    }
}

mod defaults {
    use crate::learner::{ClassifierMode, TrainConfig};

    pub fn name() -> String {
        "experiment".into()
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
    pub fn preset() -> super::Preset {
        super::Preset::BaseKdCscct
    }
    pub fn train_per_class() -> usize {
        50
    }
    pub fn test_per_class() -> usize {
        20
    }
    pub fn class_mean_scale() -> f64 {
        3.0
    }
    pub fn within_class_std() -> f64 {
        1.0
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn epochs() -> usize {
        TrainConfig::default().epochs
    }
    pub fn batch_size() -> usize {
        TrainConfig::default().batch_size
    }
    pub fn learning_rate() -> f64 {
        TrainConfig::default().learning_rate
    }
    pub fn milestones() -> Vec<usize> {
        TrainConfig::default().lr_decay_milestones
    }
    pub fn decay() -> f64 {
        TrainConfig::default().lr_decay_factor
    }
    pub fn weight_decay() -> f64 {
        TrainConfig::default().weight_decay
    }
    pub fn momentum() -> f64 {
        TrainConfig::default().momentum
    }
    pub fn classifier() -> ClassifierMode {
        TrainConfig::default().classifier
    }
    pub fn memory_per_class() -> usize {
        20
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::name")]
    pub name: String,
    #[serde(default = "defaults::preset")]
    pub preset: Preset,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_embeddings: bool,
    pub dataset: DatasetSource,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossWeights,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Parses a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let DatasetSource::Csv { path: data, .. } = &mut c.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("seeds", format!("seed {s} is listed twice")));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be non-empty and contain no path separators"));
        }
        self.dataset.validate()?;
        if let DatasetSource::Synthetic { num_classes, .. } = &self.dataset {
            self.protocol.resolve(*num_classes)?;
        }
        if self.train.memory_per_class == 0 {
            return Err(Error::config("train.memory_per_class", "must be at least 1"));
        }
        if self.model.feature_dim == 0 || self.model.hidden_widths.contains(&0) {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        self.loss.validate()?;
        self.train_config(0).validate()
    }

    /// Loss weights after the preset has zeroed the unused terms.
    pub fn effective_weights(&self) -> LossWeights {
        self.preset.apply(self.loss)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay_milestones: t.lr_decay_milestones.clone(),
            lr_decay_factor: t.lr_decay_factor,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            seed,
            classifier: t.classifier,
            weights: self.effective_weights(),
            ct_detach_q: t.ct_detach_q,
        }
    }

    /// SHA-256 of the canonical JSON of everything that affects results.
    /// Name, output location and the embedding flag are excluded, as are
    /// temperatures of terms whose weight is zero.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.name = String::new();
        c.output_dir = None;
        c.emit_embeddings = false;
        let defaults = LossWeights::default();
        let mut w = self.effective_weights();
        if w.beta == 0.0 {
            w.temperature = defaults.temperature;
            c.train.ct_detach_q = false;
        }
        if w.base_kd_weight == 0.0 {
            w.kd_temperature = defaults.kd_temperature;
        }
        c.loss = w;
        let value = serde_json::to_value(&c).expect("config serializes");
        Sha256::digest(value.to_string().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

/// State visible after each phase of a seed's run.
pub struct PhaseState<'a> {
    pub seed: u64,
    pub phase: usize,
    pub stream: &'a TaskStream,
    pub standardizer: &'a Standardizer,
    pub data_labels: &'a [(i64, usize)],
    pub model: &'a Model,
    pub labels: &'a LabelMap,
    pub memory: &'a ExemplarMemory,
    pub matrix: &'a AccuracyMatrix,
    pub trace: &'a PhaseTrace,
}

impl PhaseState<'_> {
    pub fn checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        Checkpoint {
            config_hash,
            seed: self.seed,
            phase: self.phase as u32,
            standardizer: self.standardizer.clone(),
            data_labels: self.data_labels.to_vec(),
            labels: self.labels.clone(),
            model: self.model.clone(),
            memory: self.memory.clone(),
        }
    }

    /// Test examples of every task seen so far.
    pub fn seen_test(&self) -> Vec<LabeledExample> {
        self.stream.tasks[..self.phase].iter().flat_map(|t| t.test.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub traces: Vec<PhaseTrace>,
    pub average_incremental_accuracy: f64,
    pub apt: Option<f64>,
    pub act: f64,
}

/// Runs every phase for one seed, calling `on_phase` after each phase's
/// evaluation.
pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    on_phase: &mut dyn FnMut(&PhaseState<'_>) -> Result<()>,
) -> Result<SeedOutcome> {
    config.validate()?;
    let data = config.dataset.load(seed)?;
    let protocol = config.protocol.resolve(data.dataset.num_classes)?;
    let (stream, standardizer) = build_stream(&data.dataset, &protocol, seed)?.standardized();
    let exemplars = stream.train_index();
    let train_cfg = config.train_config(seed);

    let mut pair = ModelPair {
        current: Model::new(stream.dim, &config.model, &mut stream_rng(seed, "init"))?,
        previous: None,
    };
    let mut head_rng = stream_rng(seed, "classifier");
    let mut labels = LabelMap::default();
    let mut memory = ExemplarMemory::new(config.train.memory_per_class);
    let mut matrix = AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test.len()).collect());
    let mut traces = Vec::with_capacity(stream.tasks.len());

    for task in &stream.tasks {
        log::info!("seed {seed}: task {}/{} classes {:?}", task.index, stream.tasks.len(), task.class_set);
        if task.index > 1 {
            pair.previous = Some(snapshot(&pair.current));
        }
        pair.current.expand_classifier(task.class_set.len(), &mut head_rng);
        labels.extend(&task.class_set)?;
        let trace = train_phase(&mut pair, task, &memory, &exemplars, &labels, &train_cfg)?;

        let model = &pair.current;
        memory.update_after_task(task, |e| model.feature_vector(&e.features))?;
        let evaluator = Evaluator::new(model, &labels, &memory, &exemplars, train_cfg.classifier)?;
        let row = stream.tasks[..task.index]
            .iter()
            .map(|t| eval_accuracy(&evaluator, &t.test))
            .collect::<Result<Vec<_>>>()?;
        log::info!("seed {seed}: task {} accuracies {row:?}", task.index);
        matrix.push_phase(row)?;

        on_phase(&PhaseState {
            seed,
            phase: task.index,
            stream: &stream,
            standardizer: &standardizer,
            data_labels: &data.data_labels,
            model,
            labels: &labels,
            memory: &memory,
            matrix: &matrix,
            trace: &trace,
        })?;
        traces.push(trace);
    }

    Ok(SeedOutcome {
        seed,
        average_incremental_accuracy: average_incremental_accuracy(&matrix)?,
        apt: if matrix.phases() >= 2 { Some(apt(&matrix)?) } else { None },
        act: act(&matrix)?,
        matrix,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub status: SeedStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub phases_completed: usize,
    pub average_incremental_accuracy: Option<f64>,
    pub apt: Option<f64>,
    pub act: Option<f64>,
    /// Relative to the summary's directory.
    pub accuracy_matrix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub average_incremental_accuracy: Option<Stat>,
    pub apt: Option<Stat>,
    pub act: Option<Stat>,
}

impl Aggregate {
    /// Mean and sample std over the successful seeds.
    pub fn from_records(records: &[SeedRecord]) -> Self {
        let ok: Vec<&SeedRecord> = records.iter().filter(|r| r.status == SeedStatus::Ok).collect();
        let collect = |f: fn(&SeedRecord) -> Option<f64>| -> Option<Stat> {
            let vs: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
            vs.and_then(|vs| Stat::of(&vs))
        };
        Self {
            average_incremental_accuracy: collect(|r| r.average_incremental_accuracy),
            apt: collect(|r| r.apt),
            act: collect(|r| r.act),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolInfo {
    pub variant: ProtocolVariant,
    pub num_classes: usize,
    pub first_task_classes: usize,
    pub per_task_classes: usize,
    pub num_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub name: String,
    pub preset: Preset,
    pub config_hash: String,
    pub protocol: Option<ProtocolInfo>,
    pub weights: LossWeights,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
    /// Every file written under the run directory, relative to it.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub finished_unix_seconds: u64,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.format_version != 1 {
            return Err(Error::Summary(format!("{}: unsupported format {}", path.display(), s.format_version)));
        }
        Ok(s)
    }

    pub fn succeeded(&self) -> bool {
        self.seeds.iter().all(|r| r.status == SeedStatus::Ok)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Used when neither `out_dir` nor the config names a directory.
    pub output_root: Option<PathBuf>,
    pub force: bool,
    /// Worker threads for seeds; 0 or 1 runs them one after another.
    pub parallel: usize,
    pub emit_embeddings: bool,
}

pub fn resolve_output_dir(config: &ExperimentConfig, options: &RunOptions) -> PathBuf {
    if let Some(d) = &options.out_dir {
        return d.clone();
    }
    if let Some(d) = &config.output_dir {
        return d.clone();
    }
    options.output_root.clone().unwrap_or_else(|| PathBuf::from("runs")).join(&config.name)
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        let empty = std::fs::read_dir(dir)?.next().is_none();
        if !empty && !dir.join(SUMMARY_FILE).exists() {
            return Err(Error::Summary(format!(
                "refusing to clear {}: it does not look like a run directory",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn trace_csv(traces: &[(usize, PhaseTrace)], per_step: bool) -> String {
    let mut s = String::from(if per_step { "phase,step" } else { "phase,epoch" });
    s.push_str(",cross_entropy,logit_distillation,cross_space_clustering,controlled_transfer,total\n");
    for (phase, trace) in traces {
        let rows = if per_step { &trace.steps } else { &trace.epochs };
        for (i, b) in rows.iter().enumerate() {
            writeln!(
                s,
                "{phase},{i},{},{},{},{},{}",
                b.cross_entropy, b.logit_distillation, b.cross_space_clustering, b.controlled_transfer, b.total
            )
            .expect("string write");
        }
    }
    s
}

struct SeedWriter<'a> {
    root: &'a Path,
    dir: String,
    hash: [u8; 32],
    emit_embeddings: bool,
    artifacts: Vec<String>,
    traces: Vec<(usize, PhaseTrace)>,
}

impl SeedWriter<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<String> {
        let rel = format!("{}/{name}", self.dir);
        std::fs::write(self.root.join(&rel), bytes)?;
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel.clone());
        }
        Ok(rel)
    }

    fn on_phase(&mut self, state: &PhaseState<'_>) -> Result<()> {
        let t = state.phase;
        self.write("accuracy_matrix.csv", state.matrix.to_csv().as_bytes())?;
        self.traces.push((t, state.trace.clone()));
        self.write("loss_epochs.csv", trace_csv(&self.traces, false).as_bytes())?;
        self.write("loss_steps.csv", trace_csv(&self.traces, true).as_bytes())?;
        self.write(&format!("checkpoint_phase{t}.bin"), &state.checkpoint(self.hash).to_bytes()?)?;
        if self.emit_embeddings {
            let csv = embeddings_csv(state.model, &state.seen_test(), t)?;
            self.write(&format!("embeddings_phase{t}.csv"), csv.as_bytes())?;
        }
        Ok(())
    }
}

fn run_and_record(
    config: &ExperimentConfig,
    seed: u64,
    root: &Path,
    hash: [u8; 32],
    emit_embeddings: bool,
) -> (SeedRecord, Vec<String>) {
    let dir = format!("seed_{seed}");
    let mut writer = SeedWriter {
        root,
        dir: dir.clone(),
        hash,
        emit_embeddings,
        artifacts: Vec::new(),
        traces: Vec::new(),
    };
    let result = std::fs::create_dir_all(root.join(&dir))
        .map_err(Error::from)
        .and_then(|_| run_seed(config, seed, &mut |s| writer.on_phase(s)));
    let phases = writer.traces.len();
    let matrix_path = (phases > 0).then(|| format!("{dir}/accuracy_matrix.csv"));
    let record = match result {
        Ok(o) => SeedRecord {
            seed,
            status: SeedStatus::Ok,
            error: None,
            phases_completed: phases,
            average_incremental_accuracy: Some(o.average_incremental_accuracy),
            apt: o.apt,
            act: Some(o.act),
            accuracy_matrix: matrix_path,
        },
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            SeedRecord {
                seed,
                status: SeedStatus::Failed,
                error: Some(e.to_string()),
                phases_completed: phases,
                average_incremental_accuracy: None,
                apt: None,
                act: None,
                accuracy_matrix: matrix_path,
            }
        }
    };
    (record, writer.artifacts)
}

/// Runs every seed, writes per-seed artifacts and `summary.json`, and
/// returns the summary. Failed seeds are recorded rather than returned as
/// errors; only configuration and output-directory problems abort.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<(PathBuf, RunSummary)> {
    config.validate()?;
    let start = Instant::now();
    let root = resolve_output_dir(config, options);
    prepare_output_dir(&root, options.force)?;
    let hash = config.hash();
    let emit = options.emit_embeddings || config.emit_embeddings;

    let protocol = match config.dataset.load(config.seeds[0]) {
        Ok(d) => Some(d.dataset.num_classes),
        Err(e) => {
            log::warn!("could not load dataset to describe the protocol: {e}");
            None
        }
    }
    .and_then(|n| {
        let p = config.protocol.resolve(n).ok()?;
        Some(ProtocolInfo {
            variant: p.variant,
            num_classes: n,
            first_task_classes: p.first_task_classes,
            per_task_classes: p.per_task_classes,
            num_tasks: p.num_tasks(n),
        })
    });

    let job = |&seed: &u64| run_and_record(config, seed, &root, hash, emit);
    let results: Vec<(SeedRecord, Vec<String>)> = if options.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| config.seeds.par_iter().map(job).collect())
    } else {
        config.seeds.iter().map(job).collect()
    };

    let mut artifacts = vec!["config.toml".to_string()];
    let resolved = toml::to_string(config).map_err(|e| Error::Summary(e.to_string()))?;
    std::fs::write(root.join("config.toml"), resolved)?;
    let mut seeds = Vec::with_capacity(results.len());
    for (record, files) in results {
        artifacts.extend(files);
        seeds.push(record);
    }
    artifacts.push(SUMMARY_FILE.to_string());

    let summary = RunSummary {
        format_version: 1,
        name: config.name.clone(),
        preset: config.preset,
        config_hash: hex(&hash),
        protocol,
        weights: config.effective_weights(),
        aggregate: Aggregate::from_records(&seeds),
        seeds,
        artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        finished_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(root.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((root, summary))
}

/// Mean of each summary metric for every seed of an in-memory run.
pub fn summarize_outcomes(outcomes: &[SeedOutcome]) -> BTreeMap<&'static str, Option<Stat>> {
    let avg: Vec<f64> = outcomes.iter().map(|o| o.average_incremental_accuracy).collect();
    let apts: Option<Vec<f64>> = outcomes.iter().map(|o| o.apt).collect();
    let acts: Vec<f64> = outcomes.iter().map(|o| o.act).collect();
    BTreeMap::from([
        ("average_incremental_accuracy", Stat::of(&avg)),
        ("apt", apts.and_then(|v| Stat::of(&v))),
        ("act", Stat::of(&acts)),
    ])
}
