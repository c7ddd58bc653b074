//! Training pipelines: fine-tuning, single-teacher distillation, multi-task
//! learning, multi-teacher distillation and its annealed variant, plus the
//! task-removal ablation.
//!
//! All pipelines share one loop, so a pipeline whose extra terms vanish
//! (α = 1, a single task) replays its simpler counterpart step for step.
//! Every random choice draws from a stream derived from the run seed and a
//! fixed label, never from a shared global stream.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_examples, fit_ngram_generator, mixup_encoder_level, mixup_permutation,
    mixup_sentence_level, AugmentConfig, AugmentKind, Generator, NgramGenerator};
use crate::corpus::{DatasetSplit, Example, TaskId, TaskSpec};
use crate::encoder::{encode_batch, head_logits, infer_logits, BoundModel, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{kd_loss, kl_kd_loss, mtkd_ta_loss, supervised_loss, AnnealSchedule, DistillConfig};
use crate::numcore::rng::derive_seed;
use crate::numcore::{AdamWConfig, AdamWState, Graph, SeededRng, Tensor, Var};
use crate::tokenizer::{build_vocab, make_batch, Vocab};

/// The task whose validation F1 selects the kept epoch.
pub const MAIN_TASK: TaskId = TaskId::Offense;

pub const EVAL_BATCH: usize = 64;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const MIXUP_STREAM: u64 = 5;
const INTERLEAVE_STREAM: u64 = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedScope {
    /// Supervised terms from every task's batches.
    #[default]
    AllTasks,
    /// Only offense batches carry a supervised term during distillation.
    MainTask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// One optimizer step per batch.
    #[default]
    PerBatch,
    /// One step per round of consecutive batches, one slot per active task.
    PerRound,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// Average of the clean and the mixed loss.
    #[default]
    Supplement,
    /// The mixed loss alone.
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Finetune,
    Kd,
    Mtl,
    Mtkd,
    MtkdTa,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Finetune => "finetune",
            Pipeline::Kd => "kd",
            Pipeline::Mtl => "mtl",
            Pipeline::Mtkd => "mtkd",
            Pipeline::MtkdTa => "mtkd_ta",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Pipeline::Finetune => "Fine-tune",
            Pipeline::Kd => "KD",
            Pipeline::Mtl => "MTL",
            Pipeline::Mtkd => "MTKD",
            Pipeline::MtkdTa => "MTKD-TA",
        }
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    /// Steps until λ reaches 1. When absent, the run's step count minus one,
    /// so the first step is pure distillation and the last pure supervision.
    pub total_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    pub anneal: Option<AnnealConfig>,
    pub augmentations: Vec<AugmentConfig>,
    pub supervised_scope: SupervisedScope,
    pub active_tasks: Vec<TaskId>,
    pub accumulation: Accumulation,
    pub mixup_mode: MixupMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            distill: DistillConfig::default(),
            anneal: None,
            augmentations: Vec::new(),
            supervised_scope: SupervisedScope::AllTasks,
            active_tasks: TaskId::ALL.to_vec(),
            accumulation: Accumulation::PerBatch,
            mixup_mode: MixupMode::Supplement,
        }
    }
}

impl TrainConfig {
    /// Settings for fine-tuning pretrained weights: learning rate 2e-5.
    pub fn pretrained() -> Self {
        Self {
            learning_rate: 2e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(2..=30).contains(&self.epochs) {
            return Err(Error::invalid(format!("epochs must be in [2, 30], got {}", self.epochs)));
        }
        self.distill.validate()?;
        for a in &self.augmentations {
            a.validate()?;
        }
        if let Some(AnnealConfig { total_steps: Some(0) }) = self.anneal {
            return Err(Error::invalid("anneal total_steps must be positive"));
        }
        if !self.active_tasks.contains(&MAIN_TASK) {
            return Err(Error::invalid("active_tasks must include offense"));
        }
        let mut seen = self.active_tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.active_tasks.len() {
            return Err(Error::invalid("active_tasks contains duplicates"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn augmentation(&self, kind: AugmentKind) -> Option<&AugmentConfig> {
        self.augmentations.iter().find(|a| a.kind == kind)
    }
}

/// Frozen single-task teachers. Teachers are shared read-only; the bundle
/// exposes no way to change them.
#[derive(Clone, Debug, Default)]
pub struct TeacherBundle {
    teachers: BTreeMap<TaskId, Arc<ModelParams>>,
    records: BTreeMap<TaskId, RunRecord>,
}

impl TeacherBundle {
    pub fn from_params(teachers: BTreeMap<TaskId, ModelParams>) -> Result<Self> {
        for (task, p) in &teachers {
            if !p.has_head(*task) {
                return Err(Error::invalid(format!("teacher for {task} has no {task} head")));
            }
        }
        Ok(Self {
            teachers: teachers.into_iter().map(|(t, p)| (t, Arc::new(p))).collect(),
            records: BTreeMap::new(),
        })
    }

    pub fn get(&self, task: TaskId) -> Option<&ModelParams> {
        self.teachers.get(&task).map(Arc::as_ref)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.teachers.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn record(&self, task: TaskId) -> Option<&RunRecord> {
        self.records.get(&task)
    }

    /// Checkpoint hash of every teacher.
    pub fn hashes(&self) -> BTreeMap<TaskId, String> {
        self.teachers
            .iter()
            .map(|(t, p)| (*t, p.checkpoint_hash()))
            .collect()
    }

    /// The teachers for `tasks` only, sharing storage with `self`.
    pub fn subset(&self, tasks: &[TaskId]) -> Result<Self> {
        let mut out = Self::default();
        for t in tasks {
            let p = self
                .teachers
                .get(t)
                .ok_or_else(|| Error::invalid(format!("no teacher for task {t}")))?;
            out.teachers.insert(*t, Arc::clone(p));
            if let Some(r) = self.records.get(t) {
                out.records.insert(*t, r.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tasks: Vec<TaskId>,
    pub loss: f64,
    pub supervised: f64,
    pub distill: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch objective for each task.
    pub train_loss: BTreeMap<TaskId, f64>,
    pub validation: BTreeMap<TaskId, MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub pipeline: Pipeline,
    pub tasks: Vec<TaskId>,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub teacher_hashes: BTreeMap<TaskId, String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub total_steps: u64,
    pub steps: Vec<StepRecord>,
    pub test: BTreeMap<TaskId, MetricsReport>,
    pub wall_clock_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// Equality ignoring wall-clock time and checkpoint location.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_seconds: 0.0,
            checkpoint: None,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    /// Test metrics of the main task, or of the only task.
    pub fn main_test(&self) -> Option<&MetricsReport> {
        self.test.get(&MAIN_TASK).or_else(|| self.test.values().next())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad run record: {e}")))
    }
}

/// Vocabulary over the training splits of every given dataset.
pub fn shared_vocab(datasets: &BTreeMap<TaskId, DatasetSplit>) -> Result<Vocab> {
    let corpus: Vec<Example> = datasets.values().flat_map(|d| d.train.iter().cloned()).collect();
    build_vocab(&corpus, 1)
}

enum Objective<'a> {
    Supervised,
    Distill {
        teachers: &'a TeacherBundle,
        alpha: f64,
    },
    Anneal {
        teachers: &'a TeacherBundle,
    },
}

impl Objective<'_> {
    fn teachers(&self) -> Option<&TeacherBundle> {
        match self {
            Objective::Supervised => None,
            Objective::Distill { teachers, .. } | Objective::Anneal { teachers } => Some(teachers),
        }
    }
}

struct Run<'a> {
    pipeline: Pipeline,
    tasks: Vec<TaskSpec>,
    datasets: BTreeMap<TaskId, &'a DatasetSplit>,
    vocab: &'a Vocab,
    model: ModelConfig,
    config: &'a TrainConfig,
    objective: Objective<'a>,
    /// Frozen teachers give the same logits for the same text every epoch.
    teacher_cache: RefCell<HashMap<(TaskId, String), Vec<f64>>>,
}

struct PlannedBatch {
    slot: usize,
    examples: Vec<Example>,
}

/// Orders every task's batches so each task's batches are spread evenly
/// over the epoch: batch `j` of a task with `n` batches sits at `(j + ½)/n`.
/// Ties between tasks follow a seeded per-epoch task order.
pub fn interleave(counts: &[usize], rng: &mut SeededRng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    rng.shuffle(&mut order);
    let mut rank = vec![0; counts.len()];
    for (r, &slot) in order.iter().enumerate() {
        rank[slot] = r;
    }
    let mut entries: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(slot, &n)| (0..n).map(move |j| (slot, j)))
        .collect();
    entries.sort_by(|&(sa, ja), &(sb, jb)| {
        let left = (2 * ja + 1) as u128 * counts[sb] as u128;
        let right = (2 * jb + 1) as u128 * counts[sa] as u128;
        left.cmp(&right).then(rank[sa].cmp(&rank[sb]))
    });
    entries
}

fn hash_config(pipeline: Pipeline, tasks: &[TaskId], model: &ModelConfig, config: &TrainConfig) -> String {
    let snapshot = serde_json::json!({
        "pipeline": pipeline,
        "tasks": tasks,
        "model": model,
        "train": config,
    });
    hex::encode(Sha256::digest(snapshot.to_string().as_bytes()))
}

impl Run<'_> {
    fn plan_epoch(&self, epoch: usize, generators: &[Option<NgramGenerator>]) -> Result<Vec<PlannedBatch>> {
        let seed = self.config.seed;
        let mut per_task: Vec<Vec<Vec<Example>>> = Vec::with_capacity(self.tasks.len());
        for (slot, spec) in self.tasks.iter().enumerate() {
            let task = spec.task_id.index() as u64;
            let train = &self.datasets[&spec.task_id].train;
            let generator = generators[slot].as_ref().map(|g| g as &dyn Generator);
            let mut examples = augment_examples(
                train,
                &self.config.augmentations,
                self.vocab,
                generator,
                derive_seed(seed, &[AUGMENT_STREAM, task]),
                epoch as u64,
                self.model.max_len - 1,
            )?
            .examples;
            SeededRng::derived(seed, &[SHUFFLE_STREAM, task, epoch as u64]).shuffle(&mut examples);
            per_task.push(examples.chunks(self.config.batch_size).map(<[Example]>::to_vec).collect());
        }
        let counts: Vec<usize> = per_task.iter().map(Vec::len).collect();
        let mut rng = SeededRng::derived(seed, &[INTERLEAVE_STREAM, epoch as u64]);
        let mut slots: Vec<std::vec::IntoIter<Vec<Example>>> =
            per_task.into_iter().map(Vec::into_iter).collect();
        Ok(interleave(&counts, &mut rng)
            .into_iter()
            .map(|(slot, _)| PlannedBatch {
                slot,
                examples: slots[slot].next().expect("planned batch exists"),
            })
            .collect())
    }

    fn group(&self, batches: Vec<PlannedBatch>) -> Vec<Vec<PlannedBatch>> {
        let size = match self.config.accumulation {
            Accumulation::PerBatch => 1,
            Accumulation::PerRound => self.tasks.len(),
        };
        let mut groups = Vec::new();
        let mut current = Vec::new();
        for b in batches {
            current.push(b);
            if current.len() == size {
                groups.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            groups.push(current);
        }
        groups
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::invalid("no tasks to train"));
        }
        for spec in &self.tasks {
            let data = self.datasets[&spec.task_id];
            if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
                return Err(Error::Data(format!("task {} has an empty split", spec.task_id)));
            }
        }
        if let Some(teachers) = self.objective.teachers() {
            for spec in &self.tasks {
                let teacher = teachers
                    .get(spec.task_id)
                    .ok_or_else(|| Error::invalid(format!("no teacher for task {}", spec.task_id)))?;
                if teacher.vocab_hash() != self.vocab.hash() {
                    return Err(Error::invalid(format!(
                        "teacher for {} was trained on a different vocabulary",
                        spec.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    fn execute(self) -> Result<(ModelParams, RunRecord)> {
        self.check()?;
        let started = Instant::now();
        let config = self.config;
        let seed = config.seed;
        let task_ids: Vec<TaskId> = self.tasks.iter().map(|t| t.task_id).collect();
        let main = if task_ids.contains(&MAIN_TASK) {
            MAIN_TASK
        } else {
            task_ids[0]
        };

        let mut params = ModelParams::init(
            &self.model,
            &self.tasks,
            self.vocab,
            derive_seed(seed, &[INIT_STREAM]),
        )?;
        let mut optimizer = AdamWState::new(config.adamw())?;

        let wants_generator = config.augmentations.iter().any(|a| a.kind == AugmentKind::Continuation);
        let generators = self
            .tasks
            .iter()
            .map(|spec| {
                wants_generator
                    .then(|| fit_ngram_generator(&self.datasets[&spec.task_id].train, 2))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;

        let plan = (0..config.epochs)
            .map(|e| Ok(self.group(self.plan_epoch(e, &generators)?)))
            .collect::<Result<Vec<_>>>()?;
        let total_steps: u64 = plan.iter().map(|e| e.len() as u64).sum();
        let schedule = match (&self.objective, &config.anneal) {
            (Objective::Anneal { .. }, Some(a)) => Some(AnnealSchedule::new(
                a.total_steps.unwrap_or(total_steps.saturating_sub(1).max(1)),
            )?),
            (Objective::Anneal { .. }, None) => {
                return Err(Error::invalid("annealed distillation needs an anneal schedule"))
            }
            _ => None,
        };

        let mut step: u64 = 0;
        let mut steps = Vec::with_capacity(total_steps as usize);
        let mut epochs = Vec::with_capacity(config.epochs);
        let mut best: Option<(f64, usize, ModelParams)> = None;

        for (epoch, groups) in plan.into_iter().enumerate() {
            let mut loss_sums: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
            for group in groups {
                let lambda = schedule.map(|s| s.lambda(step));
                let (grads, record) = {
                    let mut g = Graph::new();
                    let bound = params.bind(&mut g, true)?;
                    let mut dropout = SeededRng::derived(seed, &[DROPOUT_STREAM, step]);
                    let mut totals = Vec::with_capacity(group.len());
                    let mut supervised = 0.0;
                    let mut distill: Option<f64> = None;
                    let mut tasks = Vec::with_capacity(group.len());
                    for (i, batch) in group.iter().enumerate() {
                        let spec = &self.tasks[batch.slot];
                        let out = self.batch_loss(
                            &mut g,
                            &bound,
                            spec,
                            &batch.examples,
                            &mut dropout,
                            schedule.as_ref(),
                            step,
                            i as u64,
                        )?;
                        let value = g.value(out.loss).item();
                        let entry = loss_sums.entry(spec.task_id).or_insert((0.0, 0));
                        entry.0 += value;
                        entry.1 += 1;
                        supervised += out.supervised;
                        if let Some(d) = out.distill {
                            *distill.get_or_insert(0.0) += d;
                        }
                        totals.push(out.loss);
                        tasks.push(spec.task_id);
                    }
                    let total = totals[1..].iter().try_fold(totals[0], |acc, &v| g.add(acc, v))?;
                    let loss = g.value(total).item();
                    if !loss.is_finite() {
                        return Err(Error::Numerical(format!("loss is {loss} at step {step}")));
                    }
                    let grads = g.backward(total)?.into_params();
                    let record = StepRecord {
                        step,
                        tasks,
                        loss,
                        supervised,
                        distill,
                        lambda,
                    };
                    (grads, record)
                };
                params.adamw_step(&grads, &mut optimizer)?;
                if !params.is_finite() {
                    return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
                }
                steps.push(record);
                step += 1;
            }

            let validation = self
                .tasks
                .iter()
                .map(|spec| {
                    let data = &self.datasets[&spec.task_id].validation;
                    Ok((spec.task_id, evaluate(&params, data, self.vocab, spec, EVAL_BATCH)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let score = validation[&main].weighted_f1;
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, params.clone()));
            }
            epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sums
                    .into_iter()
                    .map(|(t, (sum, n))| (t, sum / n as f64))
                    .collect(),
                validation,
            });
        }

        let (_, best_epoch, params) = best.expect("at least two epochs ran");
        let test = self
            .tasks
            .iter()
            .map(|spec| {
                let data = &self.datasets[&spec.task_id].test;
                Ok((spec.task_id, evaluate(&params, data, self.vocab, spec, EVAL_BATCH)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        let record = RunRecord {
            pipeline: self.pipeline,
            config_hash: hash_config(self.pipeline, &task_ids, &self.model, config),
            tasks: task_ids,
            config: config.clone(),
            model: self.model.clone(),
            vocab_hash: self.vocab.hash(),
            teacher_hashes: self.objective.teachers().map(TeacherBundle::hashes).unwrap_or_default(),
            epochs,
            best_epoch,
            total_steps,
            steps,
            test,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            checkpoint: None,
        };
        Ok((params, record))
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &BoundModel<'_>,
        spec: &TaskSpec,
        examples: &[Example],
        dropout: &mut SeededRng,
        schedule: Option<&AnnealSchedule>,
        step: u64,
        index: u64,
    ) -> Result<BatchLoss> {
        let config = self.config;
        let batch = make_batch(examples, self.vocab, spec, self.model.max_len)?;
        let targets = batch.labels.dense(spec.num_classes());
        let pooled = encode_batch(g, bound, &batch, true, dropout)?;
        let logits = head_logits(g, bound, pooled, spec.task_id)?;
        let clean = supervised_loss(g, logits, &targets, spec.loss_kind)?;

        let encoder_mix = config.augmentation(AugmentKind::MixupEncoder);
        let sentence_mix = config.augmentation(AugmentKind::MixupSentence);
        let supervised = if encoder_mix.is_some() || sentence_mix.is_some() {
            let mut rng = SeededRng::derived(config.seed, &[MIXUP_STREAM, step, index]);
            let perm = mixup_permutation(batch.len(), &mut rng);
            let (mut mixed_logits, mut mixed_targets) = (logits, targets.clone());
            if let Some(a) = encoder_mix {
                let (p, t) = mixup_encoder_level(g, pooled, &targets, &perm, a.mixup_lambda)?;
                mixed_logits = head_logits(g, bound, p, spec.task_id)?;
                mixed_targets = t;
            }
            if let Some(a) = sentence_mix {
                (mixed_logits, mixed_targets) =
                    mixup_sentence_level(g, mixed_logits, &mixed_targets, &perm, a.mixup_lambda)?;
            }
            let mixed = supervised_loss(g, mixed_logits, &mixed_targets, spec.loss_kind)?;
            match config.mixup_mode {
                MixupMode::Supplement => {
                    let both = g.add(clean, mixed)?;
                    g.scale(both, 0.5)?
                }
                MixupMode::Replace => mixed,
            }
        } else {
            clean
        };

        let Some(teachers) = self.objective.teachers() else {
            return Ok(BatchLoss {
                supervised: g.value(supervised).item(),
                loss: supervised,
                distill: None,
            });
        };
        let teacher = teachers.get(spec.task_id).expect("teachers checked before training");
        let teacher_logits = g.constant(self.teacher_logits(teacher, spec, examples)?);
        let temperature = config.distill.temperature_for(spec.task_id);
        let kl = kl_kd_loss(g, teacher_logits, logits, temperature)?;
        let supervised = match config.supervised_scope {
            SupervisedScope::MainTask if spec.task_id != MAIN_TASK => g.constant(Tensor::scalar(0.0)),
            _ => supervised,
        };
        let loss = match self.objective {
            Objective::Distill { alpha, .. } => kd_loss(g, supervised, kl, alpha)?,
            Objective::Anneal { .. } => {
                let schedule = schedule.expect("annealed runs carry a schedule");
                mtkd_ta_loss(g, supervised, kl, schedule, step)?
            }
            Objective::Supervised => unreachable!("handled above"),
        };
        Ok(BatchLoss {
            loss,
            supervised: g.value(supervised).item(),
            distill: Some(g.value(kl).item()),
        })
    }
}

impl Run<'_> {
    fn teacher_logits(&self, teacher: &ModelParams, spec: &TaskSpec, examples: &[Example]) -> Result<Tensor> {
        let mut cache = self.teacher_cache.borrow_mut();
        let mut missing: Vec<Example> = Vec::new();
        for e in examples {
            let key = (spec.task_id, e.text.clone());
            if !cache.contains_key(&key) && !missing.iter().any(|m| m.text == e.text) {
                missing.push(e.clone());
            }
        }
        if !missing.is_empty() {
            let batch = make_batch(&missing, self.vocab, spec, self.model.max_len)?;
            let logits = infer_logits(teacher, &batch)?;
            for (i, e) in missing.into_iter().enumerate() {
                cache.insert((spec.task_id, e.text), logits.row(i).to_vec());
            }
        }
        let rows: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| cache[&(spec.task_id, e.text.clone())].clone())
            .collect();
        Tensor::from_rows(&rows)
    }
}

struct BatchLoss {
    loss: Var,
    supervised: f64,
    distill: Option<f64>,
}

fn datasets_for<'a>(
    tasks: &[TaskSpec],
    datasets: &'a BTreeMap<TaskId, DatasetSplit>,
) -> Result<BTreeMap<TaskId, &'a DatasetSplit>> {
    tasks
        .iter()
        .map(|t| {
            datasets
                .get(&t.task_id)
                .map(|d| (t.task_id, d))
                .ok_or_else(|| Error::Data(format!("no data for task {}", t.task_id)))
        })
        .collect()
}

fn for_vocab(model: &ModelConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    }
}

/// The given specs restricted to `active_tasks`, in task order.
fn active_specs(tasks: &[TaskSpec], config: &TrainConfig) -> Result<Vec<TaskSpec>> {
    let mut specs: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| config.active_tasks.contains(&t.task_id))
        .cloned()
        .collect();
    specs.sort_by_key(|t| t.task_id);
    specs.dedup_by_key(|t| t.task_id);
    if specs.is_empty() {
        return Err(Error::invalid("no active tasks"));
    }
    Ok(specs)
}

/// Supervised training of one task. The model's `vocab_size` is taken from
/// `vocab`.
pub fn fine_tune(
    task: &TaskSpec,
    data: &DatasetSplit,
    vocab: &Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, RunRecord)> {
    Run {
        pipeline: Pipeline::Finetune,
        tasks: vec![task.clone()],
        datasets: BTreeMap::from([(task.task_id, data)]),
        vocab,
        model: for_vocab(model, vocab),
        config,
        objective: Objective::Supervised,
        teacher_cache: RefCell::default(),
    }
    .execute()
}

/// Trains a student on `α·CE + (1 − α)·KL` against a frozen teacher.
pub fn distill(
    teacher: &ModelParams,
    student: &ModelConfig,
    task: &TaskSpec,
    data: &DatasetSplit,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(ModelParams, RunRecord)> {
    let bundle = TeacherBundle::from_params(BTreeMap::from([(task.task_id, teacher.clone())]))?;
    Run {
        pipeline: Pipeline::Kd,
        tasks: vec![task.clone()],
        datasets: BTreeMap::from([(task.task_id, data)]),
        vocab,
        model: for_vocab(student, vocab),
        config,
        objective: Objective::Distill {
            teachers: &bundle,
            alpha: config.distill.alpha,
        },
        teacher_cache: RefCell::default(),
    }
    .execute()
}

/// One shared encoder with a head per active task, summing supervised losses.
pub fn train_mtl(
    tasks: &[TaskSpec],
    datasets: &BTreeMap<TaskId, DatasetSplit>,
    vocab: &Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, RunRecord)> {
    let tasks = active_specs(tasks, config)?;
    Run {
        pipeline: Pipeline::Mtl,
        datasets: datasets_for(&tasks, datasets)?,
        tasks,
        vocab,
        model: for_vocab(model, vocab),
        config,
        objective: Objective::Supervised,
        teacher_cache: RefCell::default(),
    }
    .execute()
}

/// Fine-tunes one teacher per task in `tasks`, all with `config`.
pub fn train_teachers(
    tasks: &[TaskSpec],
    datasets: &BTreeMap<TaskId, DatasetSplit>,
    vocab: &Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TeacherBundle> {
    let mut bundle = TeacherBundle::default();
    for spec in tasks {
        let data = datasets
            .get(&spec.task_id)
            .ok_or_else(|| Error::Data(format!("no data for task {}", spec.task_id)))?;
        let (params, record) = fine_tune(spec, data, vocab, model, config)?;
        bundle.teachers.insert(spec.task_id, Arc::new(params));
        bundle.records.insert(spec.task_id, record);
    }
    Ok(bundle)
}

/// Multi-task student distilled from one teacher per active task.
pub fn train_mtkd(
    teachers: &TeacherBundle,
    student: &ModelConfig,
    tasks: &[TaskSpec],
    datasets: &BTreeMap<TaskId, DatasetSplit>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(ModelParams, RunRecord)> {
    let tasks = active_specs(tasks, config)?;
    Run {
        pipeline: Pipeline::Mtkd,
        datasets: datasets_for(&tasks, datasets)?,
        tasks,
        vocab,
        model: for_vocab(student, vocab),
        config,
        objective: Objective::Distill {
            teachers,
            alpha: config.distill.alpha,
        },
        teacher_cache: RefCell::default(),
    }
    .execute()
}

/// As [`train_mtkd`], weighting supervision by a λ that rises from 0 to 1
/// over the optimizer steps.
pub fn train_mtkd_ta(
    teachers: &TeacherBundle,
    student: &ModelConfig,
    tasks: &[TaskSpec],
    datasets: &BTreeMap<TaskId, DatasetSplit>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(ModelParams, RunRecord)> {
    let tasks = active_specs(tasks, config)?;
    Run {
        pipeline: Pipeline::MtkdTa,
        datasets: datasets_for(&tasks, datasets)?,
        tasks,
        vocab,
        model: for_vocab(student, vocab),
        config,
        objective: Objective::Anneal { teachers },
        teacher_cache: RefCell::default(),
    }
    .execute()
}

/// Row label for a task subset: "Proposed model" for all four tasks, else
/// "w/o" and the removed auxiliary tasks.
pub fn ablation_label(subset: &[TaskId]) -> String {
    let removed: Vec<&str> = [
        (TaskId::Emotion, "emotions"),
        (TaskId::Sentiment, "sentiment"),
        (TaskId::Sexism, "sexist language"),
    ]
    .iter()
    .filter(|(t, _)| !subset.contains(t))
    .map(|(_, name)| *name)
    .collect();
    if removed.is_empty() {
        "Proposed model".to_string()
    } else {
        format!("w/o {}", removed.join(" & "))
    }
}

/// The full task set followed by the seven removals, in table order.
pub fn standard_ablation_subsets() -> Vec<Vec<TaskId>> {
    use TaskId::*;
    vec![
        vec![Offense, Emotion, Sentiment, Sexism],
        vec![Offense],
        vec![Offense, Sexism],
        vec![Offense, Sentiment],
        vec![Offense, Emotion],
        vec![Offense, Sentiment, Sexism],
        vec![Offense, Emotion, Sexism],
        vec![Offense, Emotion, Sentiment],
    ]
}

pub const ABLATION_PIPELINES: [Pipeline; 3] = [Pipeline::Mtl, Pipeline::Mtkd, Pipeline::MtkdTa];

/// Everything an ablation needs besides the subsets.
pub struct AblationSetup<'a> {
    pub tasks: &'a [TaskSpec],
    pub datasets: &'a BTreeMap<TaskId, DatasetSplit>,
    pub vocab: &'a Vocab,
    pub teacher_model: &'a ModelConfig,
    pub student_model: &'a ModelConfig,
    pub teacher_config: &'a TrainConfig,
    pub config: &'a TrainConfig,
    /// Run the cells on the rayon pool.
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub tasks: Vec<TaskId>,
    /// Offense test metrics per pipeline.
    pub cells: BTreeMap<Pipeline, MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub teacher_hashes: BTreeMap<TaskId, String>,
    pub records: Vec<RunRecord>,
}

impl AblationReport {
    /// Weighted-F1 grid in percent, one row per subset.
    pub fn render_grid(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}", "Model");
        for p in ABLATION_PIPELINES {
            out.push_str(&format!("  {:>8}", p.display_name()));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<width$}", row.label));
            for p in ABLATION_PIPELINES {
                let cell = row
                    .cells
                    .get(&p)
                    .map_or_else(|| "-".to_string(), |m| crate::eval::percent(m.weighted_f1));
                out.push_str(&format!("  {cell:>8}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs MTL, MTKD and MTKD-TA on every subset with shared seeds. Teachers
/// are trained once for the union of the subsets and shared by every cell.
/// MTKD-TA uses the configured anneal schedule, or the automatic one.
pub fn run_ablation(setup: &AblationSetup<'_>, subsets: &[Vec<TaskId>]) -> Result<AblationReport> {
    if subsets.is_empty() {
        return Err(Error::invalid("no ablation subsets"));
    }
    for s in subsets {
        if !s.contains(&MAIN_TASK) {
            return Err(Error::invalid(format!("ablation subset {s:?} lacks offense")));
        }
    }
    let mut union: Vec<TaskId> = subsets.iter().flatten().copied().collect();
    union.sort();
    union.dedup();
    let teacher_specs: Vec<TaskSpec> = setup
        .tasks
        .iter()
        .filter(|t| union.contains(&t.task_id))
        .cloned()
        .collect();
    let teachers = train_teachers(
        &teacher_specs,
        setup.datasets,
        setup.vocab,
        setup.teacher_model,
        setup.teacher_config,
    )?;

    let cells: Vec<(usize, Pipeline)> = (0..subsets.len())
        .flat_map(|i| ABLATION_PIPELINES.map(|p| (i, p)))
        .collect();
    let run_cell = |&(i, pipeline): &(usize, Pipeline)| -> Result<RunRecord> {
        let mut config = setup.config.clone();
        config.active_tasks = subsets[i].clone();
        let (_, record) = match pipeline {
            Pipeline::Mtl => train_mtl(setup.tasks, setup.datasets, setup.vocab, setup.student_model, &config)?,
            Pipeline::Mtkd => train_mtkd(
                &teachers.subset(&subsets[i])?,
                setup.student_model,
                setup.tasks,
                setup.datasets,
                setup.vocab,
                &config,
            )?,
            _ => {
                config.anneal.get_or_insert_with(AnnealConfig::default);
                train_mtkd_ta(
                    &teachers.subset(&subsets[i])?,
                    setup.student_model,
                    setup.tasks,
                    setup.datasets,
                    setup.vocab,
                    &config,
                )?
            }
        };
        Ok(record)
    };
    let records: Vec<RunRecord> = if setup.parallel {
        use rayon::prelude::*;
        cells.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<_>>()?
    };

    let rows = subsets
        .iter()
        .enumerate()
        .map(|(i, subset)| {
            let cells = cells
                .iter()
                .zip(&records)
                .filter(|((row, _), _)| *row == i)
                .map(|((_, p), r)| (*p, r.main_test().cloned().expect("offense was trained")))
                .collect();
            AblationRow {
                label: ablation_label(subset),
                tasks: subset.clone(),
                cells,
            }
        })
        .collect();
    Ok(AblationReport {
        rows,
        teacher_hashes: teachers.hashes(),
        records,
    })
}
