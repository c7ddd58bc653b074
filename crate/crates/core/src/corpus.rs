//! Tasks, dataset files, deterministic splits and the synthetic corpus
//! generator.
//!
//! Dataset files are UTF-8, one JSON object per line with exactly the keys
//! `"text"` and `"label"`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::SeededRng;

/// The four tasks. Ordering is offense, emotion, sentiment, sexism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Offense,
    Emotion,
    Sentiment,
    Sexism,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::Offense,
        TaskId::Emotion,
        TaskId::Sentiment,
        TaskId::Sexism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Offense => "offense",
            TaskId::Emotion => "emotion",
            TaskId::Sentiment => "sentiment",
            TaskId::Sexism => "sexism",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "offense" => Ok(TaskId::Offense),
            "emotion" => Ok(TaskId::Emotion),
            "sentiment" => Ok(TaskId::Sentiment),
            "sexism" => Ok(TaskId::Sexism),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCe,
    ElementwiseBce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, validation: f64, test: f64) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid(format!("split ratio out of [0, 1]: {self:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub class_names: Vec<String>,
    pub loss_kind: LossKind,
    pub split_ratios: SplitRatios,
}

impl TaskSpec {
    /// The standard definition of a task: its classes, loss and split.
    pub fn standard(task_id: TaskId) -> Self {
        let names: &[&str] = match task_id {
            TaskId::Offense => &["Profanity", "Insult", "Abuse", "Other"],
            TaskId::Emotion => &[
                "Anger", "Fear", "Joy", "Sadness", "Surprise", "Trust", "Neutral",
            ],
            TaskId::Sentiment => &["positive", "negative"],
            TaskId::Sexism => &["sexist", "non-sexist"],
        };
        let (loss_kind, split_ratios) = match task_id {
            TaskId::Emotion => (LossKind::ElementwiseBce, SplitRatios::new(0.75, 0.10, 0.15)),
            _ => (LossKind::CategoricalCe, SplitRatios::new(0.8, 0.1, 0.1)),
        };
        Self {
            task_id,
            class_names: names.iter().map(|s| s.to_string()).collect(),
            loss_kind,
            split_ratios,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: String,
    pub task_id: TaskId,
}

impl Example {
    pub fn new(text: impl Into<String>, label: impl Into<String>, task_id: TaskId) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
            task_id,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    label: String,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    text: &'a str,
    label: &'a str,
}

/// Reads a dataset file, validating every record against `spec`.
pub fn load_dataset(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&content, spec).map_err(|(line, message)| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses dataset text; errors carry the 1-based line number.
pub fn parse_dataset(
    content: &str,
    spec: &TaskSpec,
) -> std::result::Result<Vec<Example>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| (lineno, format!("malformed record: {e}")))?;
        if record.text.trim().is_empty() {
            return Err((lineno, "empty text".into()));
        }
        if spec.class_index(&record.label).is_none() {
            return Err((
                lineno,
                format!(
                    "unknown label \"{}\" for task {}",
                    record.label, spec.task_id
                ),
            ));
        }
        out.push(Example::new(record.text, record.label, spec.task_id));
    }
    if out.is_empty() {
        return Err((0, "empty dataset".into()));
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    for e in examples {
        let line = serde_json::to_string(&RecordRef {
            text: &e.text,
            label: &e.label,
        })
        .expect("records serialize");
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the examples in order, hex encoded.
pub fn fingerprint(examples: &[Example]) -> String {
    let mut hasher = Sha256::new();
    for e in examples {
        hasher.update(e.task_id.as_str().as_bytes());
        hasher.update([0]);
        hasher.update(e.label.as_bytes());
        hasher.update([0]);
        hasher.update(e.text.as_bytes());
        hasher.update(*b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub source_fingerprint: String,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

const SPLIT_STREAM: u64 = 0x5350_4c49;

/// Seeded shuffle, then contiguous cuts of `floor(N·ratio)` for validation and
/// test; whatever remains goes to train.
pub fn split_dataset(examples: &[Example], spec: &TaskSpec, seed: u64) -> Result<DatasetSplit> {
    split_with_ratios(examples, &spec.split_ratios, seed)
}

pub fn split_with_ratios(
    examples: &[Example],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let n = examples.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 examples to split, got {n}"
        )));
    }
    // The small offset keeps products like 100 × 0.15 from flooring to 14.
    let cut = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let n_val = cut(ratios.validation);
    let n_test = cut(ratios.test);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derived(seed, &[SPLIT_STREAM]).shuffle(&mut order);
    let pick = |range: std::ops::Range<usize>| -> Vec<Example> {
        order[range].iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: pick(0..n_train),
        validation: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
        source_fingerprint: fingerprint(examples),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_proportions: BTreeMap<String, f64>,
    pub vocab_size: usize,
    pub examples_per_task: usize,
    pub keyword_count_per_class: usize,
}

impl SyntheticSpec {
    /// Offense uses the RO-Offense class mix; the other tasks are balanced.
    pub fn default_for(task: &TaskSpec) -> Self {
        let class_proportions = match task.task_id {
            TaskId::Offense => [0.13, 0.23, 0.28, 0.36]
                .iter()
                .zip(&task.class_names)
                .map(|(&p, c)| (c.clone(), p))
                .collect(),
            _ => {
                let k = task.num_classes() as f64;
                task.class_names.iter().map(|c| (c.clone(), 1.0 / k)).collect()
            }
        };
        Self {
            class_proportions,
            vocab_size: 300,
            examples_per_task: 1250,
            keyword_count_per_class: 3,
        }
    }

    fn validate(&self, task: &TaskSpec) -> Result<()> {
        let k = task.num_classes();
        if self.vocab_size == 0 || self.examples_per_task == 0 || self.keyword_count_per_class == 0 {
            return Err(Error::invalid("synthetic sizes must be positive"));
        }
        if self.vocab_size <= self.keyword_count_per_class * k {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no filler words after {} keywords",
                self.vocab_size,
                self.keyword_count_per_class * k
            )));
        }
        for class in &task.class_names {
            match self.class_proportions.get(class) {
                Some(p) if *p >= 0.0 => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "missing or negative proportion for class {class}"
                    )))
                }
            }
        }
        if let Some(extra) = self
            .class_proportions
            .keys()
            .find(|c| task.class_index(c).is_none())
        {
            return Err(Error::invalid(format!("proportion for unknown class {extra}")));
        }
        let total: f64 = self.class_proportions.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "class proportions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Per-class counts by largest remainder (ties to the lower class index).
    pub fn class_counts(&self, task: &TaskSpec) -> Vec<usize> {
        let n = self.examples_per_task;
        let exact: Vec<f64> = task
            .class_names
            .iter()
            .map(|c| self.class_proportions[c] * n as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|&x| (x + 1e-9).floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvzhj";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable word for an index. Indices below 80² give two
/// syllables, larger ones three, so the two ranges never collide.
fn synthetic_word(index: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let syllable = |s: usize| {
        let c = CONSONANTS[s / VOWELS.len()] as char;
        let v = VOWELS[s % VOWELS.len()] as char;
        [c, v]
    };
    let mut word = String::new();
    let mut rest = index;
    let count = if index < syllables * syllables { 2 } else { 3 };
    for _ in 0..count {
        word.extend(syllable(rest % syllables));
        rest /= syllables;
    }
    word
}

const KEYWORD_BASE: usize = 10_000;
const KEYWORD_TASK_STRIDE: usize = 1_000;

/// Filler vocabulary shared by every task.
pub fn filler_words(spec: &SyntheticSpec, task: &TaskSpec) -> Vec<String> {
    let fillers = spec.vocab_size - spec.keyword_count_per_class * task.num_classes();
    (0..fillers).map(synthetic_word).collect()
}

/// Keywords planted for each class, indexed by class.
pub fn planted_keywords(spec: &SyntheticSpec, task: &TaskSpec) -> Vec<Vec<String>> {
    let kw = spec.keyword_count_per_class;
    (0..task.num_classes())
        .map(|c| {
            (0..kw)
                .map(|j| {
                    synthetic_word(
                        KEYWORD_BASE + task.task_id.index() * KEYWORD_TASK_STRIDE + c * kw + j,
                    )
                })
                .collect()
        })
        .collect()
}

const SYNTH_STREAM: u64 = 0x5359_4e54;

/// A corpus whose labels are fixed by planted class keywords.
///
/// Each text has 5 to 40 tokens (words plus sentence-final periods), split
/// into one to three sentences, with one to three keywords of its class.
pub fn generate_synthetic(spec: &SyntheticSpec, task: &TaskSpec, seed: u64) -> Result<Vec<Example>> {
    spec.validate(task)?;
    let counts = spec.class_counts(task);
    let fillers = filler_words(spec, task);
    let keywords = planted_keywords(spec, task);

    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = SeededRng::derived(seed, &[SYNTH_STREAM, task.task_id.index() as u64]);
    rng.shuffle(&mut labels);

    let examples = labels
        .into_iter()
        .map(|class| {
            let total_tokens = 5 + rng.below(36);
            let sentences = if total_tokens >= 12 { 1 + rng.below(3) } else { 1 };
            let n_words = total_tokens - sentences;
            let n_keywords = 1 + rng.below(3.min(n_words));
            let mut words: Vec<String> = (0..n_words)
                .map(|_| fillers[rng.below(fillers.len())].clone())
                .collect();
            for pos in rng.sample_indices(n_words, n_keywords) {
                let class_words = &keywords[class];
                words[pos] = class_words[rng.below(class_words.len())].clone();
            }
            let per_sentence = n_words / sentences;
            let mut text = String::new();
            for s in 0..sentences {
                let start = s * per_sentence;
                let end = if s + 1 == sentences { n_words } else { start + per_sentence };
                if s > 0 {
                    text.push(' ');
                }
                let mut chunk = words[start..end].join(" ");
                if let Some(first) = chunk.get_mut(0..1) {
                    first.make_ascii_uppercase();
                }
                chunk.push('.');
                text.push_str(&chunk);
            }
            Example::new(text, task.class_names[class].clone(), task.task_id)
        })
        .collect();
    Ok(examples)
}
