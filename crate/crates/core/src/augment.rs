//! Text and batch augmentations: noisy-student drops, ASDA templates,
//! n-gram continuation and MixUp.
//!
//! Every function here is a pure function of its inputs and the supplied
//! random stream. [`augment_examples`] derives one stream per
//! (seed, epoch, example, augmentation), so results do not depend on the
//! order in which examples are processed.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::numcore::{Graph, SeededRng, Tensor, Var};
use crate::tokenizer::{split_sentences, tokenize, TokenId, Vocab, SPECIAL_TOKENS};

pub const WORD_DROP_RATE: f64 = 0.30;
pub const WORD_DROP_MIN: usize = 1;
pub const WORD_DROP_MAX: usize = 10;

const MASK_TOKEN: &str = SPECIAL_TOKENS[4];
const SEP_TOKEN: &str = SPECIAL_TOKENS[3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Templated composite of two same-class examples, masked in the second.
    Asda,
    /// Keeps a prefix and lets a generator write the rest.
    Continuation,
    WordDrop,
    SentenceDrop,
    /// MixUp of pooled representations before the head.
    MixupEncoder,
    /// MixUp of head logits.
    MixupSentence,
}

impl AugmentKind {
    pub fn is_batch_level(self) -> bool {
        matches!(self, Self::MixupEncoder | Self::MixupSentence)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Per-example probability that a drop is applied.
    pub noisy_gate_alpha: f64,
    /// Interpolation coefficient for MixUp.
    pub mixup_lambda: f64,
    pub asda_mask_rate: f64,
    pub continuation_keep_fraction: f64,
    /// Per-example probability that ASDA or continuation adds a new example.
    pub supplement_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::WordDrop,
            noisy_gate_alpha: 0.20,
            mixup_lambda: 0.30,
            asda_mask_rate: 0.15,
            continuation_keep_fraction: 0.70,
            supplement_rate: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("noisy_gate_alpha", self.noisy_gate_alpha)?;
        unit("mixup_lambda", self.mixup_lambda)?;
        unit("supplement_rate", self.supplement_rate)?;
        for (name, v) in [
            ("asda_mask_rate", self.asda_mask_rate),
            ("continuation_keep_fraction", self.continuation_keep_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// `(λ·xᵢ + (1 − λ)·xⱼ, λ·yᵢ + (1 − λ)·yⱼ)`.
pub fn mixup_pair(
    a: (&[f64], &[f64]),
    b: (&[f64], &[f64]),
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lambda(lambda)?;
    if a.0.len() != b.0.len() || a.1.len() != b.1.len() {
        return Err(Error::Shape {
            op: "mixup_pair",
            left: vec![a.0.len(), a.1.len()],
            right: vec![b.0.len(), b.1.len()],
        });
    }
    let mix = |u: &[f64], v: &[f64]| -> Vec<f64> {
        u.iter()
            .zip(v)
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect()
    };
    Ok((mix(a.0, b.0), mix(a.1, b.1)))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("mixup lambda must be in [0, 1], got {lambda}")))
    }
}

/// A seeded pairing permutation σ for a batch of `n`.
pub fn mixup_permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    perm
}

/// Mixes row `i` of `rows` with row `perm[i]`, and the label rows likewise.
///
/// A batch of one, λ = 1 and the identity pairing all return the inputs
/// unchanged.
pub fn mixup_rows(
    g: &mut Graph,
    rows: Var,
    labels: &Tensor,
    perm: &[usize],
    lambda: f64,
) -> Result<(Var, Tensor)> {
    check_lambda(lambda)?;
    let n = g.shape(rows)[0];
    if labels.rank() != 2 || labels.rows() != n || perm.len() != n {
        return Err(Error::Shape {
            op: "mixup",
            left: g.shape(rows).to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    if perm.iter().any(|&p| p >= n) {
        return Err(Error::invalid("mixup pairing index out of range"));
    }
    let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
    if n < 2 || lambda == 1.0 || identity {
        return Ok((rows, labels.clone()));
    }
    let partner = g.gather(rows, perm.to_vec())?;
    let a = g.scale(rows, lambda)?;
    let b = g.scale(partner, 1.0 - lambda)?;
    let mixed = g.add(a, b)?;
    let k = labels.cols();
    let mut y = Tensor::zeros(labels.shape());
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..k {
            y.data_mut()[i * k + c] = lambda * labels.get(i, c) + (1.0 - lambda) * labels.get(p, c);
        }
    }
    Ok((mixed, y))
}

/// MixUp on pooled encoder outputs, before the classification head.
pub fn mixup_encoder_level(
    g: &mut Graph,
    pooled: Var,
    labels: &Tensor,
    perm: &[usize],
    lambda: f64,
) -> Result<(Var, Tensor)> {
    mixup_rows(g, pooled, labels, perm, lambda)
}

/// MixUp on head logits, before the softmax.
pub fn mixup_sentence_level(
    g: &mut Graph,
    logits: Var,
    labels: &Tensor,
    perm: &[usize],
    lambda: f64,
) -> Result<(Var, Tensor)> {
    mixup_rows(g, logits, labels, perm, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedToken {
    pub position: usize,
    pub original: String,
}

/// An ASDA composite. Positions index `tokens` (no `[CLS]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AsdaSample {
    pub example: Example,
    pub tokens: Vec<String>,
    pub ids: Vec<TokenId>,
    pub e2_range: Range<usize>,
    pub masked: Vec<MaskedToken>,
}

/// Number of template tokens an ASDA composite adds around E1 and E2.
pub fn asda_overhead(label: &str) -> usize {
    20 + tokenize(label).len()
}

/// Builds "the next two sentences are {label} . [SEP] the first sentence is :
/// {E1} . [SEP] the second sentence is : {E2} ." and masks
/// `⌈mask_rate·|E2|⌉` (at least one) E2 tokens chosen without replacement.
pub fn asda_augment(
    e1: &Example,
    e2: &Example,
    vocab: &Vocab,
    mask_rate: f64,
    rng: &mut SeededRng,
) -> Result<AsdaSample> {
    if e1.label != e2.label || e1.task_id != e2.task_id {
        return Err(Error::invalid(format!(
            "ASDA needs two examples of one class, got {:?} and {:?}",
            e1.label, e2.label
        )));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::invalid(format!("mask rate must be in (0, 1), got {mask_rate}")));
    }
    let second = tokenize(&e2.text);
    if second.is_empty() {
        return Err(Error::invalid("ASDA second example is empty"));
    }
    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();

    let mut tokens = words("the next two sentences are");
    tokens.extend(tokenize(&e1.label));
    tokens.push(".".into());
    tokens.push(SEP_TOKEN.into());
    tokens.extend(words("the first sentence is :"));
    tokens.extend(tokenize(&e1.text));
    tokens.push(".".into());
    tokens.push(SEP_TOKEN.into());
    tokens.extend(words("the second sentence is :"));
    let start = tokens.len();
    tokens.extend(second);
    let e2_range = start..tokens.len();
    tokens.push(".".into());

    let len = e2_range.len();
    let count = ((mask_rate * len as f64 - 1e-9).ceil() as usize).clamp(1, len);
    let mut chosen: Vec<usize> = rng
        .sample_indices(len, count)
        .into_iter()
        .map(|i| start + i)
        .collect();
    chosen.sort_unstable();
    let masked = chosen
        .into_iter()
        .map(|position| {
            let original = std::mem::replace(&mut tokens[position], MASK_TOKEN.to_string());
            MaskedToken { position, original }
        })
        .collect();
    let ids = tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
    Ok(AsdaSample {
        example: Example::new(tokens.join(" "), e1.label.clone(), e1.task_id),
        tokens,
        ids,
        e2_range,
        masked,
    })
}

/// Noisy-student word drop.
///
/// Draw order: inputs under two tokens return unchanged with no draws. One
/// `uniform()` gates the example against `gate_alpha`. Each token then takes
/// one `uniform()` and is marked when it falls below 0.30. With nothing
/// marked, `below(n)` picks one token; with more than ten marked,
/// `sample_indices(marked, 10)` picks the ten to remove. If every token ends
/// up marked, `below(n)` picks one survivor.
pub fn word_drop<T: Clone>(tokens: &[T], gate_alpha: f64, rng: &mut SeededRng) -> Vec<T> {
    let n = tokens.len();
    if n < 2 || rng.uniform() >= gate_alpha {
        return tokens.to_vec();
    }
    let mut marked: Vec<usize> = (0..n).filter(|_| rng.uniform() < WORD_DROP_RATE).collect();
    if marked.len() < WORD_DROP_MIN {
        marked = vec![rng.below(n)];
    } else if marked.len() > WORD_DROP_MAX {
        let keep = rng.sample_indices(marked.len(), WORD_DROP_MAX);
        marked = keep.into_iter().map(|i| marked[i]).collect();
    }
    let mut remove = vec![false; n];
    for &i in &marked {
        remove[i] = true;
    }
    if marked.len() == n {
        remove[rng.below(n)] = false;
    }
    tokens
        .iter()
        .zip(remove)
        .filter(|(_, r)| !r)
        .map(|(t, _)| t.clone())
        .collect()
}

/// Noisy-student sentence drop: with probability `gate_alpha`, removes one
/// uniformly chosen sentence from texts of two or more sentences.
pub fn sentence_drop(text: &str, gate_alpha: f64, rng: &mut SeededRng) -> String {
    let mut sentences = split_sentences(text);
    if sentences.len() < 2 || rng.uniform() >= gate_alpha {
        return text.to_string();
    }
    sentences.remove(rng.below(sentences.len()));
    sentences.join(" ")
}

/// Writes a continuation of at most `max_tokens` tokens after `prefix`.
pub trait Generator {
    fn generate(&self, prefix: &[String], max_tokens: usize, rng: &mut SeededRng) -> Result<Vec<String>>;
}

/// Keeps the first `⌈keep_fraction·L⌉` tokens and lets `generator` replace
/// the rest. Inputs under four tokens, and generator failures, return the
/// example unchanged.
pub fn generative_continuation(
    example: &Example,
    generator: &dyn Generator,
    keep_fraction: f64,
    rng: &mut SeededRng,
) -> Example {
    let tokens = tokenize(&example.text);
    let len = tokens.len();
    if len < 4 {
        return example.clone();
    }
    let keep = ((keep_fraction * len as f64 - 1e-9).ceil() as usize).clamp(1, len - 1);
    let budget = len - keep;
    let mut out = tokens[..keep].to_vec();
    match generator.generate(&out, budget, rng) {
        Ok(tail) if tail.len() <= budget => out.extend(tail),
        Ok(tail) => {
            log::warn!("generator returned {} tokens for a budget of {budget}", tail.len());
            return example.clone();
        }
        Err(e) => {
            log::warn!("generator failed, keeping the example unchanged: {e}");
            return example.clone();
        }
    }
    Example::new(out.join(" "), example.label.clone(), example.task_id)
}

/// Bigram model with add-one smoothing over the observed vocabulary.
/// Tokens never seen as a left context fall back to unigram frequencies.
#[derive(Clone, Debug)]
pub struct NgramGenerator {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unigram: Vec<f64>,
    bigram: BTreeMap<usize, Vec<f64>>,
}

pub fn fit_ngram_generator(corpus: &[Example], order: usize) -> Result<NgramGenerator> {
    if order != 2 {
        return Err(Error::invalid(format!("only order-2 models are supported, got {order}")));
    }
    let sequences: Vec<Vec<String>> = corpus.iter().map(|e| tokenize(&e.text)).collect();
    let mut tokens: Vec<String> = sequences.iter().flatten().cloned().collect();
    tokens.sort();
    tokens.dedup();
    if tokens.is_empty() {
        return Err(Error::invalid("cannot fit a generator on an empty corpus"));
    }
    let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let v = tokens.len();
    let mut unigram = vec![0.0; v];
    let mut bigram: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seq in &sequences {
        let ids: Vec<usize> = seq.iter().map(|t| index[t]).collect();
        for &i in &ids {
            unigram[i] += 1.0;
        }
        for w in ids.windows(2) {
            bigram.entry(w[0]).or_insert_with(|| vec![1.0; v])[w[1]] += 1.0;
        }
    }
    Ok(NgramGenerator {
        tokens,
        index,
        unigram,
        bigram,
    })
}

impl NgramGenerator {
    pub fn vocabulary(&self) -> &[String] {
        &self.tokens
    }

    /// Unnormalised next-token weights, aligned with [`Self::vocabulary`].
    pub fn next_weights(&self, previous: Option<&str>) -> &[f64] {
        previous
            .and_then(|p| self.index.get(p))
            .and_then(|i| self.bigram.get(i))
            .unwrap_or(&self.unigram)
    }

    /// Most likely next token; ties go to the lexicographically first.
    pub fn mode_after(&self, previous: Option<&str>) -> &str {
        let w = self.next_weights(previous);
        let best = w
            .iter()
            .enumerate()
            .fold(0, |b, (i, &x)| if x > w[b] { i } else { b });
        &self.tokens[best]
    }
}

impl Generator for NgramGenerator {
    fn generate(&self, prefix: &[String], max_tokens: usize, rng: &mut SeededRng) -> Result<Vec<String>> {
        let mut out: Vec<String> = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let previous = out.last().or(prefix.last()).map(String::as_str);
            let next = rng.categorical(self.next_weights(previous));
            out.push(self.tokens[next].clone());
        }
        Ok(out)
    }
}

const AUGMENT_STREAM: u64 = 0x4155_4741;
const PARTNER_STREAM: u64 = 0x5041_5254;

/// Text-level augmentation output: the working examples plus any ASDA
/// composites produced along the way.
#[derive(Clone, Debug, Default)]
pub struct AugmentedSet {
    pub examples: Vec<Example>,
    pub asda: Vec<AsdaSample>,
}

/// Applies the text-level entries of `configs` in order. Drops replace each
/// working example; ASDA and continuation append new ones. MixUp entries are
/// batch-level and skipped here.
///
/// ASDA inputs are truncated so the composite fits in `max_tokens`.
pub fn augment_examples(
    examples: &[Example],
    configs: &[AugmentConfig],
    vocab: &Vocab,
    generator: Option<&dyn Generator>,
    seed: u64,
    epoch: u64,
    max_tokens: usize,
) -> Result<AugmentedSet> {
    let mut set = AugmentedSet {
        examples: examples.to_vec(),
        asda: Vec::new(),
    };
    for (slot, config) in configs.iter().enumerate() {
        config.validate()?;
        let stream = |i: usize| SeededRng::derived(seed, &[AUGMENT_STREAM, epoch, i as u64, slot as u64]);
        match config.kind {
            AugmentKind::WordDrop => {
                for (i, e) in set.examples.iter_mut().enumerate() {
                    let tokens = tokenize(&e.text);
                    let kept = word_drop(&tokens, config.noisy_gate_alpha, &mut stream(i));
                    if kept.len() != tokens.len() {
                        e.text = kept.join(" ");
                    }
                }
            }
            AugmentKind::SentenceDrop => {
                for (i, e) in set.examples.iter_mut().enumerate() {
                    e.text = sentence_drop(&e.text, config.noisy_gate_alpha, &mut stream(i));
                }
            }
            AugmentKind::Continuation => {
                let generator = generator
                    .ok_or_else(|| Error::invalid("continuation augmentation needs a generator"))?;
                let mut added = Vec::new();
                for (i, e) in set.examples.iter().enumerate() {
                    let mut rng = stream(i);
                    if rng.uniform() < config.supplement_rate {
                        added.push(generative_continuation(
                            e,
                            generator,
                            config.continuation_keep_fraction,
                            &mut rng,
                        ));
                    }
                }
                set.examples.extend(added);
            }
            AugmentKind::Asda => {
                let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, e) in set.examples.iter().enumerate() {
                    by_label.entry(e.label.as_str()).or_default().push(i);
                }
                let mut added = Vec::new();
                for (i, e) in set.examples.iter().enumerate() {
                    let mut rng = stream(i);
                    if rng.uniform() >= config.supplement_rate {
                        continue;
                    }
                    let peers = &by_label[e.label.as_str()];
                    if peers.len() < 2 {
                        continue;
                    }
                    let mut pick = SeededRng::derived(seed, &[PARTNER_STREAM, epoch, i as u64, slot as u64]);
                    let mut j = peers[pick.below(peers.len() - 1)];
                    if j == i {
                        j = peers[peers.len() - 1];
                    }
                    let side = max_tokens.saturating_sub(asda_overhead(&e.label)) / 2;
                    let first = truncate_example(e, side.max(1));
                    let second = truncate_example(&set.examples[j], side.max(1));
                    if tokenize(&second.text).is_empty() {
                        continue;
                    }
                    added.push(asda_augment(&first, &second, vocab, config.asda_mask_rate, &mut rng)?);
                }
                set.examples.extend(added.iter().map(|s| s.example.clone()));
                set.asda.extend(added);
            }
            AugmentKind::MixupEncoder | AugmentKind::MixupSentence => {}
        }
    }
    Ok(set)
}

fn truncate_example(e: &Example, max_tokens: usize) -> Example {
    let tokens = tokenize(&e.text);
    if tokens.len() <= max_tokens {
        return e.clone();
    }
    Example::new(tokens[..max_tokens].join(" "), e.label.clone(), e.task_id)
}
