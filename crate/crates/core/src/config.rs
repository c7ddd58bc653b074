//! The experiment configuration file (TOML).
//!
//! ```toml
//! pipeline = "mtkd_ta"
//! output_dir = "runs/demo"
//! teacher_epochs = 5
//!
//! [train]
//! epochs = 5
//! seed = 7
//!
//! [train.distill]
//! temperature = 2.0
//! alpha = 0.6
//! per_task_temperature = { emotion = 7.0 }
//!
//! [train.anneal]
//!
//! [[train.augmentations]]
//! kind = "word_drop"
//! noisy_gate_alpha = 0.2
//!
//! [tasks.offense]
//! path = "data/offense.jsonl"
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, split_with_ratios, DatasetSplit, SplitRatios, SyntheticSpec, TaskId, TaskSpec};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::{standard_ablation_subsets, Pipeline, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSource {
    pub path: PathBuf,
    /// Overrides the task's standard split ratios.
    #[serde(default)]
    pub split: Option<SplitRatios>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub examples_per_task: usize,
    pub vocab_size: usize,
    pub keyword_count_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            examples_per_task: 1250,
            vocab_size: 300,
            keyword_count_per_class: 3,
            seed: 0,
        }
    }
}

impl SyntheticSection {
    pub fn spec_for(&self, task: &TaskSpec) -> SyntheticSpec {
        SyntheticSpec {
            examples_per_task: self.examples_per_task,
            vocab_size: self.vocab_size,
            keyword_count_per_class: self.keyword_count_per_class,
            ..SyntheticSpec::default_for(task)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_pipeline")]
    pub pipeline: Pipeline,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    /// Teacher fine-tuning epochs; the student's count when absent.
    #[serde(default)]
    pub teacher_epochs: Option<usize>,
    #[serde(default = "default_teacher")]
    pub teacher_model: ModelConfig,
    #[serde(default = "default_student")]
    pub student_model: ModelConfig,
    #[serde(default)]
    pub tasks: BTreeMap<TaskId, TaskSource>,
    /// Seed of the train/validation/test split.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub synthetic: SyntheticSection,
    #[serde(default = "standard_ablation_subsets")]
    pub ablation_subsets: Vec<Vec<TaskId>>,
}

fn default_pipeline() -> Pipeline {
    Pipeline::Finetune
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_teacher() -> ModelConfig {
    ModelConfig::teacher(0)
}

fn default_student() -> ModelConfig {
    ModelConfig::student(0)
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.output_dir = base_dir.join(&config.output_dir);
        for source in config.tasks.values_mut() {
            source.path = base_dir.join(&source.path);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.teacher_train().validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, m) in [("teacher_model", &self.teacher_model), ("student_model", &self.student_model)] {
            ModelConfig { vocab_size: 1, ..m.clone() }
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        for (task, source) in &self.tasks {
            if let Some(r) = &source.split {
                r.validate().map_err(|e| Error::Config(format!("tasks.{task}.split: {e}")))?;
            }
        }
        for subset in &self.ablation_subsets {
            if !subset.contains(&TaskId::Offense) {
                return Err(Error::Config(format!("ablation subset {subset:?} lacks offense")));
            }
        }
        Ok(())
    }

    /// Training settings for teachers: the student's, with `teacher_epochs`.
    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs.unwrap_or(self.train.epochs),
            ..self.train.clone()
        }
    }

    /// The standard spec of `task` with any configured split override.
    pub fn task_spec(&self, task: TaskId) -> TaskSpec {
        let mut spec = TaskSpec::standard(task);
        if let Some(r) = self.tasks.get(&task).and_then(|s| s.split) {
            spec.split_ratios = r;
        }
        spec
    }

    pub fn task_specs(&self, tasks: &[TaskId]) -> Vec<TaskSpec> {
        tasks.iter().map(|&t| self.task_spec(t)).collect()
    }

    pub fn source(&self, task: TaskId) -> Result<&TaskSource> {
        self.tasks
            .get(&task)
            .ok_or_else(|| Error::Config(format!("no [tasks.{task}] entry")))
    }

    /// Loads and splits the data of each task in `tasks`.
    pub fn load_datasets(&self, tasks: &[TaskId]) -> Result<BTreeMap<TaskId, DatasetSplit>> {
        tasks
            .iter()
            .map(|&task| {
                let source = self.source(task)?;
                if !source.path.exists() {
                    return Err(Error::Config(format!(
                        "data file for {task} does not exist: {}",
                        source.path.display()
                    )));
                }
                let spec = self.task_spec(task);
                let examples = load_dataset(&source.path, &spec)?;
                Ok((task, split_with_ratios(&examples, &spec.split_ratios, self.split_seed)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let c = ExperimentConfig::parse("", Path::new("/base")).unwrap();
        assert_eq!(c.pipeline, Pipeline::Finetune);
        assert_eq!(c.output_dir, Path::new("/base/runs"));
        assert_eq!(c.student_model.n_layers * 2, c.teacher_model.n_layers);
        assert_eq!(c.ablation_subsets.len(), 8);
    }

    #[test]
    fn full_file() {
        let text = r#"
pipeline = "mtkd_ta"
output_dir = "out"
teacher_epochs = 4

[train]
epochs = 3
seed = 9

[train.distill]
temperature = 2.0
alpha = 0.6
per_task_temperature = { emotion = 7.0 }

[train.anneal]

[[train.augmentations]]
kind = "word_drop"
noisy_gate_alpha = 0.25

[student_model]
d_model = 32
n_heads = 2
n_layers = 1
d_ff = 64
max_len = 48
dropout_rate = 0.0

[tasks.offense]
path = "data/offense.jsonl"

[tasks.emotion]
path = "/abs/emotion.jsonl"
split = { train = 0.8, validation = 0.1, test = 0.1 }
"#;
        let c = ExperimentConfig::parse(text, Path::new("cfg")).unwrap();
        assert_eq!(c.pipeline, Pipeline::MtkdTa);
        assert_eq!(c.teacher_train().epochs, 4);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.distill.temperature_for(TaskId::Emotion), 7.0);
        assert!(c.train.anneal.is_some());
        assert_eq!(c.tasks[&TaskId::Offense].path, Path::new("cfg/data/offense.jsonl"));
        assert_eq!(c.tasks[&TaskId::Emotion].path, Path::new("/abs/emotion.jsonl"));
        assert_eq!(c.task_spec(TaskId::Emotion).split_ratios.train, 0.8);
        assert_eq!(c.student_model.d_model, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse("[train]\nepochs = 0\n", Path::new("")).is_err());
        assert!(ExperimentConfig::parse("unknown_key = 1\n", Path::new("")).is_err());
        assert!(ExperimentConfig::parse("ablation_subsets = [[\"emotion\"]]\n", Path::new("")).is_err());
        assert!(ExperimentConfig::parse("[tasks.other]\npath = \"x\"\n", Path::new("")).is_err());
    }

    #[test]
    fn missing_data_file() {
        let c = ExperimentConfig::parse("[tasks.offense]\npath = \"nowhere.jsonl\"\n", Path::new("/nonexistent")).unwrap();
        assert!(matches!(c.load_datasets(&[TaskId::Offense]), Err(Error::Config(_))));
        assert!(c.load_datasets(&[TaskId::Sexism]).is_err());
    }
}
