//! Benchmarks live under `benches/`. This library holds the shared fixtures.

use mtkd_core::corpus::{generate_synthetic, split_dataset, DatasetSplit, SyntheticSpec};
use mtkd_core::tokenizer::{build_vocab, make_batch};
use mtkd_core::{TaskId, TaskSpec, TokenBatch, Vocab};

/// A synthetic offense split with `n` examples and its vocabulary.
pub fn offense_fixture(n: usize) -> (TaskSpec, DatasetSplit, Vocab) {
    let spec = TaskSpec::standard(TaskId::Offense);
    let synth = SyntheticSpec {
        examples_per_task: n,
        ..SyntheticSpec::default_for(&spec)
    };
    let examples = generate_synthetic(&synth, &spec, 0).expect("synthetic corpus");
    let split = split_dataset(&examples, &spec, 0).expect("split");
    let vocab = build_vocab(&split.train, 1).expect("vocab");
    (spec, split, vocab)
}

/// The first `size` training examples as one batch.
pub fn offense_batch(size: usize, max_len: usize) -> (TaskSpec, TokenBatch, Vocab) {
    let (spec, split, vocab) = offense_fixture(size.max(16) * 2);
    let batch = make_batch(&split.train[..size], &vocab, &spec, max_len).expect("batch");
    (spec, batch, vocab)
}
