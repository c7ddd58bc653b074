use std::fs;

use mtkd_core::config::ExperimentConfig;
use mtkd_core::corpus::{generate_synthetic, load_dataset, write_dataset, SyntheticSpec};
use mtkd_core::tokenizer::build_vocab;
use mtkd_core::trainer::Pipeline;
use mtkd_core::{Error, ModelConfig, ModelParams, TaskId, TaskSpec, Vocab};

fn corpus(task: TaskId, n: usize) -> Vec<mtkd_core::Example> {
    let spec = TaskSpec::standard(task);
    let synth = SyntheticSpec {
        examples_per_task: n,
        ..SyntheticSpec::default_for(&spec)
    };
    generate_synthetic(&synth, &spec, 2).unwrap()
}

#[test]
fn config_resolves_paths_and_loads_data() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path().join("data/offense.jsonl"), &corpus(TaskId::Offense, 50)).unwrap();
    write_dataset(dir.path().join("data/sexism.jsonl"), &corpus(TaskId::Sexism, 40)).unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        "pipeline = \"mtkd\"\nsplit_seed = 4\n\n[tasks.offense]\npath = \"data/offense.jsonl\"\n\n[tasks.sexism]\npath = \"data/sexism.jsonl\"\n",
    )
    .unwrap();
    let config = ExperimentConfig::load(dir.path().join("exp.toml")).unwrap();
    assert_eq!(config.pipeline, Pipeline::Mtkd);
    assert_eq!(config.output_dir, dir.path().join("runs"));
    let data = config.load_datasets(&[TaskId::Offense, TaskId::Sexism]).unwrap();
    assert_eq!(data[&TaskId::Offense].sizes(), (40, 5, 5));
    assert_eq!(data[&TaskId::Sexism].sizes(), (32, 4, 4));
    let again = config.load_datasets(&[TaskId::Offense]).unwrap();
    assert_eq!(again[&TaskId::Offense], data[&TaskId::Offense]);
    assert!(matches!(config.load_datasets(&[TaskId::Emotion]), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::load(dir.path().join("absent.toml")), Err(Error::Io { .. })));
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emotion.jsonl");
    let examples = corpus(TaskId::Emotion, 30);
    write_dataset(&path, &examples).unwrap();
    assert_eq!(load_dataset(&path, &TaskSpec::standard(TaskId::Emotion)).unwrap(), examples);
    // The same file read as another task has unknown labels.
    assert!(load_dataset(&path, &TaskSpec::standard(TaskId::Sexism)).is_err());
}

#[test]
fn checkpoints_and_vocabularies_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let examples = corpus(TaskId::Offense, 30);
    let vocab = build_vocab(&examples, 1).unwrap();
    let spec = TaskSpec::standard(TaskId::Offense);
    let params = ModelParams::init(&ModelConfig::student(vocab.len()), &[spec], &vocab, 9).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    params.save(&ckpt).unwrap();
    vocab.save(dir.path().join("m.vocab")).unwrap();
    let loaded = ModelParams::load(&ckpt).unwrap();
    assert_eq!(loaded.checkpoint_hash(), params.checkpoint_hash());
    assert_eq!(loaded.vocab_hash(), vocab.hash());
    assert_eq!(Vocab::load(dir.path().join("m.vocab")).unwrap(), vocab);

    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    assert!(ModelParams::load(&ckpt).is_err());
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert!(ModelParams::load(&ckpt).is_err());
}
