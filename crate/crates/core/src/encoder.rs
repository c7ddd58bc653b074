//! The shared transformer encoder, per-task heads and tempered softmax.
//!
//! The encoder is pre-norm: each layer computes
//! `x ← x + Dropout(Attn(LN(x)))` then `x ← x + Dropout(FFN(LN(x)))`, and a
//! final layer norm follows the stack. The pooled representation of a row is
//! the final hidden state at position 0 (`[CLS]`).
//!
//! Rows are processed one at a time over their unmasked positions only. This
//! is exactly attention with masked keys, since masked positions can never
//! influence a kept position, and it skips the work on padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::numcore::rng::derive_seed;
use crate::numcore::{AdamWState, Graph, SeededRng, Tensor, Var};
use crate::tokenizer::{TokenBatch, Vocab};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the vocabulary by the trainer; may be omitted in files.
    #[serde(default)]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Default teacher: four layers.
    pub fn teacher(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.1,
        }
    }

    /// Default student: half the teacher's depth.
    pub fn student(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            ..Self::teacher(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_len,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid(format!("model sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must be in [0, 1)"));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskId,
    pub num_classes: usize,
}

/// All learnable tensors of an encoder with its task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    heads: Vec<HeadSpec>,
    vocab_hash: String,
    tensors: BTreeMap<String, Tensor>,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layer{layer:02}.{part}")
}

fn head_weight(task: TaskId) -> String {
    format!("head.{task}.weight")
}

fn head_bias(task: TaskId) -> String {
    format!("head.{task}.bias")
}

/// FNV-1a, used to give each tensor its own initialisation stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

const INIT_STREAM: u64 = 0x494e_4954;

enum Init {
    Uniform(f64),
    Xavier,
    Zeros,
    Ones,
}

impl ModelParams {
    /// Fresh parameters with one head per task in `tasks`.
    ///
    /// Each tensor is drawn from its own stream keyed by name, so the encoder
    /// initialisation does not depend on which heads are attached.
    pub fn init(config: &ModelConfig, tasks: &[TaskSpec], vocab: &Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "config vocab_size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        if tasks.is_empty() {
            return Err(Error::invalid("a model needs at least one task head"));
        }
        let mut heads: Vec<HeadSpec> = Vec::new();
        for t in tasks {
            if heads.iter().any(|h| h.task == t.task_id) {
                return Err(Error::invalid(format!("duplicate head for task {}", t.task_id)));
            }
            heads.push(HeadSpec {
                task: t.task_id,
                num_classes: t.num_classes(),
            });
        }

        let d = config.d_model;
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("embed.token".into(), vec![config.vocab_size, d], Init::Uniform(0.05)),
            ("embed.position".into(), vec![config.max_len, d], Init::Uniform(0.05)),
            ("final_ln.gain".into(), vec![d], Init::Ones),
            ("final_ln.bias".into(), vec![d], Init::Zeros),
        ];
        for l in 0..config.n_layers {
            for ln in ["ln1", "ln2"] {
                specs.push((layer_name(l, &format!("{ln}.gain")), vec![d], Init::Ones));
                specs.push((layer_name(l, &format!("{ln}.bias")), vec![d], Init::Zeros));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((layer_name(l, &format!("attn.{w}")), vec![d, d], Init::Xavier));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                specs.push((layer_name(l, &format!("attn.{b}")), vec![d], Init::Zeros));
            }
            specs.push((layer_name(l, "ffn.w1"), vec![d, config.d_ff], Init::Xavier));
            specs.push((layer_name(l, "ffn.b1"), vec![config.d_ff], Init::Zeros));
            specs.push((layer_name(l, "ffn.w2"), vec![config.d_ff, d], Init::Xavier));
            specs.push((layer_name(l, "ffn.b2"), vec![d], Init::Zeros));
        }
        for h in &heads {
            specs.push((head_weight(h.task), vec![d, h.num_classes], Init::Uniform(0.05)));
            specs.push((head_bias(h.task), vec![h.num_classes], Init::Zeros));
        }

        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let mut t = Tensor::zeros(&shape);
                let mut rng = SeededRng::new(derive_seed(seed, &[INIT_STREAM, name_hash(&name)]));
                match init {
                    Init::Uniform(a) => t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-a, a)),
                    Init::Xavier => {
                        let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-a, a));
                    }
                    Init::Zeros => {}
                    Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
                }
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            heads,
            vocab_hash: vocab.hash(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn has_head(&self, task: TaskId) -> bool {
        self.heads.iter().any(|h| h.task == task)
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Direct write access, for tests and tools that edit weights.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// One AdamW update of every tensor.
    pub fn adamw_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        state: &mut AdamWState,
    ) -> Result<()> {
        state.step(&mut self.tensors, grads)
    }

    /// Records every tensor on `g`, as trainable parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel<'_>> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.as_str(), v);
        }
        Ok(BoundModel { params: self, vars })
    }

    // Checkpoint layout: 8-byte magic, u64 LE header length, a JSON header
    // (config, heads, vocabulary hash, tensor manifest), then every tensor's
    // values as f64 LE in manifest order.

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            heads: self.heads.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("bad checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        header.config.validate()?;
        let mut offset = 16 + header_len;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            heads: header.heads,
            vocab_hash: header.vocab_hash,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn checkpoint_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTKDCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    heads: Vec<HeadSpec>,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A parameter set recorded on a graph.
pub struct BoundModel<'p> {
    params: &'p ModelParams,
    vars: BTreeMap<&'p str, Var>,
}

impl<'p> BoundModel<'p> {
    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }
}

struct LayerVars {
    ln1: (Var, Var),
    ln2: (Var, Var),
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl LayerVars {
    fn resolve(model: &BoundModel<'_>, l: usize) -> Result<Self> {
        let v = |part: &str| model.var(&layer_name(l, part));
        Ok(Self {
            ln1: (v("ln1.gain")?, v("ln1.bias")?),
            ln2: (v("ln2.gain")?, v("ln2.bias")?),
            wq: v("attn.wq")?,
            bq: v("attn.bq")?,
            wk: v("attn.wk")?,
            bk: v("attn.bk")?,
            wv: v("attn.wv")?,
            bv: v("attn.bv")?,
            wo: v("attn.wo")?,
            bo: v("attn.bo")?,
            w1: v("ffn.w1")?,
            b1: v("ffn.b1")?,
            w2: v("ffn.w2")?,
            b2: v("ffn.b2")?,
        })
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Inverted dropout: a constant mask scaled by `1 / (1 − p)`.
fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for v in mask.data_mut() {
        *v = if rng.uniform() < rate { 0.0 } else { keep };
    }
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Pooled (`[CLS]`) representations, `batch × d_model`.
///
/// Dropout is active only when `train_mode` is set; in eval mode `rng` is
/// never touched.
pub fn encode_batch(
    g: &mut Graph,
    model: &BoundModel<'_>,
    batch: &TokenBatch,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    let config = &model.params.config;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.width() > config.max_len {
        return Err(Error::invalid(format!(
            "batch width {} exceeds max_len {}",
            batch.width(),
            config.max_len
        )));
    }
    let token_table = model.var("embed.token")?;
    let position_table = model.var("embed.position")?;
    let final_ln = (model.var("final_ln.gain")?, model.var("final_ln.bias")?);
    let layers = (0..config.n_layers)
        .map(|l| LayerVars::resolve(model, l))
        .collect::<Result<Vec<_>>>()?;

    let mut pooled_rows = Vec::with_capacity(batch.len());
    for (row_ids, row_mask) in batch.ids.iter().zip(&batch.mask) {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (pos, (&id, &m)) in row_ids.iter().zip(row_mask).enumerate() {
            if m == 0 {
                continue;
            }
            if id as usize >= config.vocab_size {
                return Err(Error::invalid(format!(
                    "token id {id} out of range for vocabulary of {}",
                    config.vocab_size
                )));
            }
            ids.push(id as usize);
            positions.push(pos);
        }
        if positions.first() != Some(&0) {
            return Err(Error::invalid("position 0 ([CLS]) must be unmasked"));
        }
        let mut rng = if train_mode { Some(&mut *rng) } else { None };
        let tok = g.gather(token_table, ids)?;
        let pos = g.gather(position_table, positions)?;
        let mut x = g.add(tok, pos)?;
        x = dropout(g, x, config.dropout_rate, rng.as_deref_mut())?;

        for (l, lv) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            x = encoder_layer(g, x, lv, config, last, rng.as_deref_mut())?;
        }
        let pooled = g.layer_norm(x, final_ln.0, final_ln.1, LAYER_NORM_EPS)?;
        pooled_rows.push(pooled);
    }
    g.concat_rows(&pooled_rows)
}

/// One pre-norm layer. When `only_first` is set, queries and the
/// feed-forward block are computed for position 0 alone, which is all the
/// pooled output depends on after the final layer.
fn encoder_layer(
    g: &mut Graph,
    x: Var,
    lv: &LayerVars,
    config: &ModelConfig,
    only_first: bool,
    mut rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let h = g.layer_norm(x, lv.ln1.0, lv.ln1.1, LAYER_NORM_EPS)?;
    let (residual, query_in) = if only_first {
        (g.slice_rows(x, 0, 1)?, g.slice_rows(h, 0, 1)?)
    } else {
        (x, h)
    };
    let q = affine(g, query_in, lv.wq, lv.bq)?;
    let k = affine(g, h, lv.wk, lv.bk)?;
    let v = affine(g, h, lv.wv, lv.bv)?;
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let (s, e) = (head * dk, (head + 1) * dk);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let attn = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let attn = affine(g, attn, lv.wo, lv.bo)?;
    let attn = dropout(g, attn, config.dropout_rate, rng.as_deref_mut())?;
    let x = g.add(residual, attn)?;

    let h2 = g.layer_norm(x, lv.ln2.0, lv.ln2.1, LAYER_NORM_EPS)?;
    let f = affine(g, h2, lv.w1, lv.b1)?;
    let f = g.gelu(f)?;
    let f = affine(g, f, lv.w2, lv.b2)?;
    let f = dropout(g, f, config.dropout_rate, rng)?;
    g.add(x, f)
}

/// Affine head for `task`: `pooled · W + b`.
pub fn head_logits(g: &mut Graph, model: &BoundModel<'_>, pooled: Var, task: TaskId) -> Result<Var> {
    if !model.params.has_head(task) {
        return Err(Error::UnknownTask(task.to_string()));
    }
    let w = model.var(&head_weight(task))?;
    let b = model.var(&head_bias(task))?;
    affine(g, pooled, w, b)
}

/// Row-wise `softmax(z / T)` on the tape.
pub fn tempered_softmax(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = g.scale(logits, 1.0 / temperature)?;
    g.softmax(scaled)
}

/// Row-wise `log softmax(z / T)` on the tape.
pub fn tempered_log_softmax(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = g.scale(logits, 1.0 / temperature)?;
    g.log_softmax(scaled)
}

/// Value-level tempered softmax of a logits matrix.
pub fn tempered_softmax_values(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Ok(logits.map(|z| z * (1.0 / temperature)).softmax_rows())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {temperature}")))
    }
}

/// Forward-only logits of a frozen model for one batch.
pub fn infer_logits(params: &ModelParams, batch: &TokenBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, false)?;
    let mut unused = SeededRng::new(0);
    let pooled = encode_batch(&mut g, &model, batch, false, &mut unused)?;
    let logits = head_logits(&mut g, &model, pooled, batch.task_id)?;
    Ok(g.value(logits).clone())
}

/// Forward-only pooled representations of a frozen model.
pub fn infer_pooled(params: &ModelParams, batch: &TokenBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, false)?;
    let mut unused = SeededRng::new(0);
    let pooled = encode_batch(&mut g, &model, batch, false, &mut unused)?;
    Ok(g.value(pooled).clone())
}
