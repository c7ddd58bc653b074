use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mtkd_core::augment::{augment_examples, fit_ngram_generator, MaskedToken};
use mtkd_core::config::ExperimentConfig;
use mtkd_core::corpus::{generate_synthetic, load_dataset, write_dataset, DatasetSplit};
use mtkd_core::eval::{evaluate, render_report, render_table, ReportFormat};
use mtkd_core::tokenizer::build_vocab;
use mtkd_core::trainer::{
    self, run_ablation, shared_vocab, AblationSetup, AnnealConfig, RunRecord, TeacherBundle, EVAL_BATCH,
};
use mtkd_core::{Error, ModelParams, TaskId, TaskSpec, Vocab};
use serde_json::json;

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type Outcome = std::result::Result<(), CliError>;

/// Loads `--config` and applies the command-line overrides.
fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    let train = &mut config.train;
    if let Some(seed) = common.seed {
        train.seed = seed;
        config.synthetic.seed = seed;
    }
    if let Some(alpha) = common.alpha {
        train.distill.alpha = alpha;
    }
    if let Some(t) = common.temperature {
        train.distill.temperature = t;
    }
    if let Some(steps) = common.lambda_steps {
        train.anneal = Some(AnnealConfig {
            total_steps: Some(steps),
        });
    }
    if let Some(tasks) = &common.tasks {
        train.active_tasks = tasks.clone();
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

/// Writes `<dir>/<name>.ckpt`, its vocabulary and `<name>.json`.
fn save_run(
    dir: &Path,
    name: &str,
    params: &ModelParams,
    vocab: &Vocab,
    record: &mut RunRecord,
) -> Result<(), CliError> {
    create_dir(dir)?;
    let ckpt = dir.join(format!("{name}.ckpt"));
    params.save(&ckpt)?;
    vocab.save(vocab_path(&ckpt))?;
    record.checkpoint = Some(ckpt);
    write_text(&dir.join(format!("{name}.json")), &record.to_json())?;
    Ok(())
}

fn print_record(record: &RunRecord) {
    print!("{}", render_report(record, ReportFormat::Table));
}

fn load_split(config: &ExperimentConfig, task: TaskId) -> Result<BTreeMap<TaskId, DatasetSplit>, CliError> {
    Ok(config.load_datasets(&[task])?)
}

fn single_vocab(datasets: &BTreeMap<TaskId, DatasetSplit>) -> Result<Vocab, CliError> {
    Ok(shared_vocab(datasets)?)
}

pub fn train(common: &Common, task: TaskId) -> Outcome {
    let config = load_config(common)?;
    let datasets = load_split(&config, task)?;
    let vocab = single_vocab(&datasets)?;
    let (params, mut record) = trainer::fine_tune(
        &config.task_spec(task),
        &datasets[&task],
        &vocab,
        &config.teacher_model,
        &config.teacher_train(),
    )?;
    save_run(&config.output_dir, &format!("finetune-{task}"), &params, &vocab, &mut record)?;
    print_record(&record);
    Ok(())
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<ModelParams, CliError> {
    let params = ModelParams::load(path)?;
    if params.vocab_hash() != vocab.hash() {
        return Err(Error::Data(format!(
            "{} was trained with a different vocabulary",
            path.display()
        ))
        .into());
    }
    Ok(params)
}

pub fn distill(common: &Common, task: TaskId, teacher: Option<&Path>) -> Outcome {
    let config = load_config(common)?;
    let spec = config.task_spec(task);
    let datasets = load_split(&config, task)?;
    let (teacher, vocab) = match teacher {
        Some(path) => {
            let vocab = Vocab::load(vocab_path(path))?;
            (load_checkpoint(path, &vocab)?, vocab)
        }
        None => {
            let vocab = single_vocab(&datasets)?;
            let (params, mut record) = trainer::fine_tune(
                &spec,
                &datasets[&task],
                &vocab,
                &config.teacher_model,
                &config.teacher_train(),
            )?;
            save_run(&config.output_dir.join("teachers"), task.as_str(), &params, &vocab, &mut record)?;
            print_record(&record);
            (params, vocab)
        }
    };
    let (params, mut record) = trainer::distill(
        &teacher,
        &config.student_model,
        &spec,
        &datasets[&task],
        &vocab,
        &config.train,
    )?;
    save_run(&config.output_dir, &format!("kd-{task}"), &params, &vocab, &mut record)?;
    print_record(&record);
    Ok(())
}

fn multi_task_data(
    config: &ExperimentConfig,
) -> Result<(Vec<TaskSpec>, BTreeMap<TaskId, DatasetSplit>, Vocab), CliError> {
    let tasks = config.train.active_tasks.clone();
    let datasets = config.load_datasets(&tasks)?;
    let vocab = shared_vocab(&datasets)?;
    Ok((config.task_specs(&tasks), datasets, vocab))
}

pub fn mtl(common: &Common) -> Outcome {
    let config = load_config(common)?;
    let (specs, datasets, vocab) = multi_task_data(&config)?;
    let (params, mut record) = trainer::train_mtl(&specs, &datasets, &vocab, &config.student_model, &config.train)?;
    save_run(&config.output_dir, "mtl", &params, &vocab, &mut record)?;
    print_record(&record);
    Ok(())
}

fn teachers_for(
    config: &ExperimentConfig,
    specs: &[TaskSpec],
    datasets: &BTreeMap<TaskId, DatasetSplit>,
    vocab: &Vocab,
    dir: Option<&Path>,
) -> Result<TeacherBundle, CliError> {
    if let Some(dir) = dir {
        let mut teachers = BTreeMap::new();
        for spec in specs {
            let path = dir.join(format!("{}.ckpt", spec.task_id));
            teachers.insert(spec.task_id, load_checkpoint(&path, vocab)?);
        }
        return Ok(TeacherBundle::from_params(teachers)?);
    }
    let bundle = trainer::train_teachers(specs, datasets, vocab, &config.teacher_model, &config.teacher_train())?;
    let out = config.output_dir.join("teachers");
    for spec in specs {
        let task = spec.task_id;
        let mut record = bundle.record(task).cloned().expect("teacher record");
        save_run(&out, task.as_str(), bundle.get(task).expect("teacher"), vocab, &mut record)?;
        print_record(&record);
    }
    Ok(bundle)
}

pub fn mtkd(common: &Common, anneal: bool, teachers: Option<&Path>) -> Outcome {
    let mut config = load_config(common)?;
    if anneal {
        config.train.anneal.get_or_insert_with(AnnealConfig::default);
    }
    let (specs, datasets, vocab) = multi_task_data(&config)?;
    let bundle = teachers_for(&config, &specs, &datasets, &vocab, teachers)?;
    let student = &config.student_model;
    let (params, mut record) = if anneal {
        trainer::train_mtkd_ta(&bundle, student, &specs, &datasets, &vocab, &config.train)?
    } else {
        trainer::train_mtkd(&bundle, student, &specs, &datasets, &vocab, &config.train)?
    };
    let name = if anneal { "mtkd_ta" } else { "mtkd" };
    save_run(&config.output_dir, name, &params, &vocab, &mut record)?;
    print_record(&record);
    Ok(())
}

pub fn augment(common: &Common, task: TaskId, output: &Path, report: Option<&Path>) -> Outcome {
    let config = load_config(common)?;
    let source = config.source(task)?;
    let examples = load_dataset(&source.path, &config.task_spec(task))?;
    let vocab = build_vocab(&examples, 1)?;
    let generator = fit_ngram_generator(&examples, 2)?;
    let set = augment_examples(
        &examples,
        &config.train.augmentations,
        &vocab,
        Some(&generator),
        config.train.seed,
        0,
        config.student_model.max_len.saturating_sub(1),
    )?;
    write_dataset(output, &set.examples)?;
    if let Some(path) = report {
        let samples: Vec<_> = set
            .asda
            .iter()
            .map(|s| {
                json!({
                    "text": s.example.text,
                    "label": s.example.label,
                    "e2_start": s.e2_range.start,
                    "e2_end": s.e2_range.end,
                    "masked": s.masked.iter().collect::<Vec<&MaskedToken>>(),
                })
            })
            .collect();
        let text = serde_json::to_string_pretty(&json!({ "asda": samples })).expect("report serializes");
        write_text(path, &text)?;
    }
    println!(
        "{} examples in, {} out ({} ASDA) -> {}",
        examples.len(),
        set.examples.len(),
        set.asda.len(),
        output.display()
    );
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    task: Option<TaskId>,
    vocab: Option<&Path>,
    format: ReportFormat,
) -> Outcome {
    let vocab = Vocab::load(vocab.map_or_else(|| vocab_path(checkpoint), Path::to_path_buf))?;
    let params = load_checkpoint(checkpoint, &vocab)?;
    let task = match (task, params.heads()) {
        (Some(t), _) => t,
        (None, [only]) => only.task,
        (None, _) => TaskId::Offense,
    };
    let spec = TaskSpec::standard(task);
    let examples = load_dataset(data, &spec)?;
    let metrics = evaluate(&params, &examples, &vocab, &spec, EVAL_BATCH)?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize")),
        ReportFormat::Table => {
            let label = checkpoint
                .file_stem()
                .map_or_else(|| task.to_string(), |s| s.to_string_lossy().into_owned());
            print!("{}", render_table(&[(format!("{label} ({task})"), &metrics)]));
        }
    }
    Ok(())
}

pub fn ablate(common: &Common, parallel: bool) -> Outcome {
    let config = load_config(common)?;
    let mut union: Vec<TaskId> = config.ablation_subsets.iter().flatten().copied().collect();
    union.sort();
    union.dedup();
    let datasets = config.load_datasets(&union)?;
    let vocab = shared_vocab(&datasets)?;
    let specs = config.task_specs(&union);
    let teacher_config = config.teacher_train();
    let setup = AblationSetup {
        tasks: &specs,
        datasets: &datasets,
        vocab: &vocab,
        teacher_model: &config.teacher_model,
        student_model: &config.student_model,
        teacher_config: &teacher_config,
        config: &config.train,
        parallel,
    };
    let report = run_ablation(&setup, &config.ablation_subsets)?;
    create_dir(&config.output_dir)?;
    let grid = report.render_grid();
    write_text(&config.output_dir.join("ablation.txt"), &grid)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&config.output_dir.join("ablation.json"), &json)?;
    print!("{grid}");
    Ok(())
}

pub fn synth(common: &Common) -> Outcome {
    let config = load_config(common)?;
    let tasks: Vec<TaskId> = match &common.tasks {
        Some(t) => t.clone(),
        None => config.tasks.keys().copied().collect(),
    };
    if tasks.is_empty() {
        return Err(Error::Config("no [tasks.<name>] entries to write".into()).into());
    }
    for task in tasks {
        let spec = config.task_spec(task);
        let path = &config.source(task)?.path;
        let examples = generate_synthetic(&config.synthetic.spec_for(&spec), &spec, config.synthetic.seed)?;
        write_dataset(path, &examples)?;
        println!("{task}: {} examples -> {}", examples.len(), path.display());
    }
    Ok(())
}
