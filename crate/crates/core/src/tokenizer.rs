//! Word-level vocabulary, encoding, sentence splitting and batch assembly.
//!
//! Text is lowercased, punctuation characters become tokens of their own and
//! everything else is split on whitespace.
//!
//! The vocabulary file is UTF-8 with one token per line; the line number
//! (from 0) is the id. The five special tokens occupy lines 0 to 4.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{Example, LossKind, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '„' | '”' | '“' | '«' | '»' | '…' | '–' | '—' | '‘' | '’' | '¿' | '¡'
        )
}

/// Splits text into normalized tokens.
///
/// Whitespace-delimited special tokens such as `[MASK]` pass through whole, so
/// augmented composites survive a write/read cycle.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        if SPECIAL_TOKENS.contains(&word) {
            tokens.push(word.to_string());
            continue;
        }
        let mut current = String::new();
        for c in word.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Splits on `.`, `!` or `?` followed by whitespace or the end of the text.
/// Terminators stay with their sentence; empty pieces are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|&(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                let piece = text[start..end].trim();
                if !piece.is_empty() && piece.chars().any(|ch| !matches!(ch, '.' | '!' | '?')) {
                    out.push(piece.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    fn file_content(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the persisted file content, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.file_content().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.file_content()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = content.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(String::from)
        {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with the special tokens",
                path.display()
            )));
        }
        Self::from_tokens(tokens, 1)
    }
}

/// Builds a vocabulary: specials first, then tokens with at least
/// `min_frequency` occurrences by descending count, ties lexicographic.
pub fn build_vocab(corpus: &[Example], min_frequency: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let min_frequency = min_frequency.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in corpus {
        for t in tokenize(&e.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, n)| *n >= min_frequency && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens, min_frequency)
}

/// `[CLS]` followed by token ids, truncated to `max_len` ids in total.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    encode_tokens(&tokenize(text), vocab, max_len)
}

pub fn encode_tokens(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let max_len = max_len.max(2);
    std::iter::once(CLS)
        .chain(tokens.iter().map(|t| vocab.id_or_unk(t)))
        .take(max_len)
        .collect()
}

/// Targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    /// Class index per row (categorical cross-entropy tasks).
    Classes(Vec<usize>),
    /// One-hot row per example (elementwise BCE task).
    OneHot(Tensor),
}

impl BatchLabels {
    pub fn class_indices(&self) -> Vec<usize> {
        match self {
            BatchLabels::Classes(c) => c.clone(),
            BatchLabels::OneHot(t) => t.argmax_rows(),
        }
    }

    /// Dense `N × K` target matrix.
    pub fn dense(&self, num_classes: usize) -> Tensor {
        match self {
            BatchLabels::Classes(c) => one_hot(c, num_classes),
            BatchLabels::OneHot(t) => t.clone(),
        }
    }
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), num_classes]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * num_classes + c] = 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<u8>>,
    pub labels: BatchLabels,
    pub task_id: TaskId,
}

impl TokenBatch {
    /// Pads pre-encoded rows (each starting with `[CLS]`) to the longest row.
    pub fn from_encoded(rows: Vec<Vec<TokenId>>, classes: Vec<usize>, spec: &TaskSpec) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if rows.len() != classes.len() {
            return Err(Error::invalid("rows and labels differ in length"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= spec.num_classes()) {
            return Err(Error::invalid(format!(
                "class {bad} out of range for task {}",
                spec.task_id
            )));
        }
        if rows.iter().any(|r| r.first() != Some(&CLS)) {
            return Err(Error::invalid("every row must start with [CLS]"));
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for mut row in rows {
            let len = row.len();
            row.resize(width, PAD);
            let mut m = vec![1u8; len];
            m.resize(width, 0);
            ids.push(row);
            mask.push(m);
        }
        let labels = match spec.loss_kind {
            LossKind::CategoricalCe => BatchLabels::Classes(classes),
            LossKind::ElementwiseBce => BatchLabels::OneHot(one_hot(&classes, spec.num_classes())),
        };
        Ok(Self {
            ids,
            mask,
            labels,
            task_id: spec.task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// Encodes and pads a batch of examples from one task.
pub fn make_batch(
    examples: &[Example],
    vocab: &Vocab,
    spec: &TaskSpec,
    max_len: usize,
) -> Result<TokenBatch> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(e) = examples.iter().find(|e| e.task_id != spec.task_id) {
        return Err(Error::invalid(format!(
            "batch for task {} contains an example of task {}",
            spec.task_id, e.task_id
        )));
    }
    let mut classes = Vec::with_capacity(examples.len());
    for e in examples {
        classes.push(
            spec.class_index(&e.label)
                .ok_or_else(|| Error::Data(format!("unknown label {:?}", e.label)))?,
        );
    }
    let rows = examples.iter().map(|e| encode(&e.text, vocab, max_len)).collect();
    TokenBatch::from_encoded(rows, classes, spec)
}
