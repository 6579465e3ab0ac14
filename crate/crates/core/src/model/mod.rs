//! The encoder network: five summed embeddings, stacked bidirectional
//! self-attention layers, a tied masked-token head and a logistic classifier
//! over the `CLS` position.
//!
//! Forward passes are recorded on a [`Graph`] so the same code serves
//! training and inference. [`Model`] wraps a frozen set of weights for
//! gradient-free evaluation.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{
    init_classifier, init_weights, sinusoidal_positions, Layer, Linear, Norm, ParamKind, Weights, INIT_STD,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sequencer::{Batch, TokenSequence};
use crate::tensor::{sigmoid, Graph, Tensor, Var};
use crate::vocab::{TokenId, N_SPECIALS};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const DEFAULT_MAX_AGE: usize = 120;
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// The desk preset trains its small synthetic cohorts without dropout.
pub const DESK_DROPOUT: f64 = 0.0;

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 5] = ["paper-all", "paper-no-topic", "paper-no-cpt", "paper-no-topic-cpt", "desk"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub intermediate_size: usize,
    pub max_len: usize,
    #[serde(default = "default_max_age")]
    pub max_age: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Share the code embedding table with the masked-token output layer.
    #[serde(default = "default_tied")]
    pub tied_mlm: bool,
    #[serde(default)]
    pub positional_encoding: PositionalEncoding,
}

fn default_max_age() -> usize {
    DEFAULT_MAX_AGE
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_tied() -> bool {
    true
}

impl ModelConfig {
    /// Architecture preset; `(hidden, layers, heads, intermediate)` per name.
    pub fn preset(name: &str, vocab_size: usize, max_len: usize) -> Result<Self> {
        let (hidden, layers, heads, inter) = match name {
            "paper-all" => (216, 9, 12, 512),
            "paper-no-topic" => (240, 9, 12, 512),
            "paper-no-cpt" => (252, 6, 12, 256),
            "paper-no-topic-cpt" => (264, 6, 12, 256),
            "desk" => (32, 2, 4, 64),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let config = Self {
            preset: name.to_string(),
            vocab_size,
            hidden_size: hidden,
            n_layers: layers,
            n_heads: heads,
            intermediate_size: inter,
            max_len,
            max_age: DEFAULT_MAX_AGE,
            dropout: if name == "desk" { DESK_DROPOUT } else { DEFAULT_DROPOUT },
            tied_mlm: true,
            positional_encoding: PositionalEncoding::Sinusoidal,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_size == 0 || self.n_heads == 0 || self.n_layers == 0 || self.intermediate_size == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.n_heads
            ));
        }
        if self.vocab_size <= N_SPECIALS {
            return bad(format!("vocabulary size {} has no content tokens", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} is too short", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

/// Post-softmax attention for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// One `[heads, len, len]` tensor per layer; row `q` holds query `q`'s
    /// weights over keys.
    pub layers: Vec<Tensor>,
    pub token_ids: Vec<TokenId>,
    /// Decoded tokens, filled in when a vocabulary is at hand.
    pub tokens: Vec<String>,
    /// `true` at real (non-PAD) positions.
    pub real: Vec<bool>,
}

impl AttentionMap {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Weight of `key` in `query`'s row for one layer and head.
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        let n = self.len();
        self.layers[layer].data()[(head * n + query) * n + key]
    }
}

/// Encoder output on the graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[batch * len, hidden]`.
    pub hidden: Var,
    /// Per layer `[batch, heads, len, len]`, before attention dropout.
    pub attention: Vec<Var>,
}

/// Position ids for every flat slot of a batch: `0..len` per row.
fn position_ids(batch: &Batch) -> Vec<usize> {
    (0..batch.size).flat_map(|_| 0..batch.len).collect()
}

/// The five embeddings summed, before normalisation: `[batch * len, hidden]`.
pub fn embedding_sum(g: &mut Graph, w: &Weights<Var>, config: &ModelConfig, batch: &Batch) -> Result<Var> {
    if batch.len > config.max_len {
        return Err(Error::Length {
            len: batch.len,
            max: config.max_len,
        });
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Range {
            id: bad,
            size: config.vocab_size,
        });
    }
    let ages: Vec<usize> = batch.ages.iter().map(|&a| a.clamp(0, config.max_age as i32) as usize).collect();
    let genders: Vec<usize> = batch
        .genders
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, batch.len))
        .collect();
    let code = g.gather(w.code, &batch.tokens)?;
    let pos = g.gather(w.position, &position_ids(batch))?;
    let seg = g.gather(w.segment, &batch.segments)?;
    let age = g.gather(w.age, &ages)?;
    let gender = g.gather(w.gender, &genders)?;
    let mut x = g.add(code, pos)?;
    x = g.add(x, seg)?;
    x = g.add(x, age)?;
    g.add(x, gender)
}

fn maybe_dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => x,
    }
}

/// Embedding sum followed by layer norm and (training only) dropout.
pub fn embed(
    g: &mut Graph,
    w: &Weights<Var>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: &mut Option<&mut Rng>,
) -> Result<Var> {
    let sum = embedding_sum(g, w, config, batch)?;
    let x = g.layer_norm(sum, w.embedding_norm.gain, w.embedding_norm.bias, LAYER_NORM_EPS)?;
    Ok(maybe_dropout(g, x, config.dropout, dropout))
}

fn linear(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add(y, l.bias)
}

/// `[b*n, heads*d]` to `[b, heads, n, d]`.
fn split_heads(g: &mut Graph, x: Var, b: usize, n: usize, heads: usize, d: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, n, heads, d])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// Stacked self-attention layers. `keep` marks real keys, one flag per slot.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    w: &Weights<Var>,
    config: &ModelConfig,
    hidden: Var,
    keep: &[bool],
    batch_size: usize,
    len: usize,
    dropout: &mut Option<&mut Rng>,
) -> Result<Encoded> {
    let h = config.hidden_size;
    if g.shape(hidden) != [batch_size * len, h] {
        return Err(Error::shape("encode", g.shape(hidden), &[batch_size * len, h]));
    }
    if keep.len() != batch_size * len {
        return Err(Error::shape("encode mask", &[keep.len()], &[batch_size * len]));
    }
    let heads = config.n_heads;
    let d = config.head_size();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut x = hidden;
    let mut attention = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let q = linear(g, x, &layer.query)?;
        let k = linear(g, x, &layer.key)?;
        let v = linear(g, x, &layer.value)?;
        let q = split_heads(g, q, batch_size, len, heads, d)?;
        let k = split_heads(g, k, batch_size, len, heads, d)?;
        let v = split_heads(g, v, batch_size, len, heads, d)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt_d);
        let scores = g.mask_keys(scores, keep)?;
        let probs = g.softmax(scores)?;
        attention.push(probs);
        let probs = maybe_dropout(g, probs, config.dropout, dropout);
        let ctx = g.matmul(probs, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch_size * len, h])?;
        let out = linear(g, ctx, &layer.attention_out)?;
        let out = maybe_dropout(g, out, config.dropout, dropout);
        let res = g.add(x, out)?;
        x = g.layer_norm(res, layer.attention_norm.gain, layer.attention_norm.bias, LAYER_NORM_EPS)?;

        let inner = linear(g, x, &layer.ffn_in)?;
        let inner = g.gelu(inner);
        let out = linear(g, inner, &layer.ffn_out)?;
        let out = maybe_dropout(g, out, config.dropout, dropout);
        let res = g.add(x, out)?;
        x = g.layer_norm(res, layer.ffn_norm.gain, layer.ffn_norm.bias, LAYER_NORM_EPS)?;
    }
    Ok(Encoded { hidden: x, attention })
}

/// Embedding plus encoder for a whole batch.
pub fn forward(
    g: &mut Graph,
    w: &Weights<Var>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: &mut Option<&mut Rng>,
) -> Result<Encoded> {
    let x = embed(g, w, config, batch, dropout)?;
    encode(g, w, config, x, &batch.pad_mask, batch.size, batch.len, dropout)
}

/// Vocabulary logits `[rows, vocab]` for the selected hidden rows.
pub fn mlm_logits(g: &mut Graph, w: &Weights<Var>, hidden: Var, rows: &[usize]) -> Result<Var> {
    let selected = g.gather(hidden, rows)?;
    let decoder = w.mlm_decoder.unwrap_or(w.code);
    let dt = g.transpose(decoder)?;
    let logits = g.matmul(selected, dt)?;
    g.add(logits, w.mlm_bias)
}

/// Classifier logits `[batch]` from each row's `CLS` state.
pub fn classify_logits(g: &mut Graph, w: &Weights<Var>, hidden: Var, batch_size: usize, len: usize) -> Result<Var> {
    let head = w
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no classification head".into()))?;
    let cls: Vec<usize> = (0..batch_size).map(|b| b * len).collect();
    let pooled = g.gather(hidden, &cls)?;
    let logits = linear(g, pooled, head)?;
    g.reshape(logits, &[batch_size])
}

/// Flat slots carrying an MLM target, with the targets.
pub fn masked_slots(batch: &Batch) -> Result<(Vec<usize>, Vec<TokenId>)> {
    let targets = batch
        .mlm_targets
        .as_ref()
        .ok_or_else(|| Error::Contract("batch carries no masking targets".into()))?;
    Ok(targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip())
}

/// Mean cross-entropy over masked slots.
pub fn mlm_loss(
    g: &mut Graph,
    w: &Weights<Var>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: &mut Option<&mut Rng>,
) -> Result<Var> {
    let (rows, targets) = masked_slots(batch)?;
    if rows.is_empty() {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    let enc = forward(g, w, config, batch, dropout)?;
    let logits = mlm_logits(g, w, enc.hidden, &rows)?;
    g.cross_entropy(logits, &targets, usize::MAX)
}

/// Mean binary log-loss of the classifier.
pub fn classification_loss(
    g: &mut Graph,
    w: &Weights<Var>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: &mut Option<&mut Rng>,
) -> Result<Var> {
    let labels: Vec<f64> = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("batch carries no labels".into()))?
        .iter()
        .map(|&y| y as f64)
        .collect();
    let enc = forward(g, w, config, batch, dropout)?;
    let logits = classify_logits(g, w, enc.hidden, batch.size, batch.len)?;
    g.bce_with_logits(logits, &labels)
}

/// Masked-token evaluation of one batch.
#[derive(Debug, Clone)]
pub struct MlmEval {
    pub loss: f64,
    /// `[masked slots, vocab]`.
    pub logits: Tensor,
    pub targets: Vec<TokenId>,
}

/// Frozen weights for evaluation (no dropout, no gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

/// Final hidden states and attention for one sequence.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `[len, hidden]`.
    pub hidden: Tensor,
    pub attention: AttentionMap,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64, with_classifier: bool) -> Result<Self> {
        let weights = init_weights(&config, seed, with_classifier)?;
        Ok(Self { config, weights })
    }

    fn single(&self, seq: &TokenSequence) -> Result<Batch> {
        if seq.len() > self.config.max_len {
            return Err(Error::Length {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        Batch::from_sequences(&[seq])
    }

    /// Eval-mode pass over one sequence.
    pub fn infer(&self, seq: &TokenSequence) -> Result<Inference> {
        let batch = self.single(seq)?;
        let mut g = Graph::new();
        let w = self.weights.register(&mut g, false);
        let enc = forward(&mut g, &w, &self.config, &batch, &mut None)?;
        let n = batch.len;
        let layers = enc
            .attention
            .iter()
            .map(|&a| g.value(a).clone().reshaped(&[self.config.n_heads, n, n]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference {
            hidden: g.value(enc.hidden).clone(),
            attention: AttentionMap {
                layers,
                token_ids: seq.tokens.clone(),
                tokens: Vec::new(),
                real: seq.pad_mask.clone(),
            },
        })
    }

    /// Logits `[len, vocab]` at every position of one sequence.
    pub fn mlm_logits(&self, seq: &TokenSequence) -> Result<Tensor> {
        let batch = self.single(seq)?;
        let mut g = Graph::new();
        let w = self.weights.register(&mut g, false);
        let enc = forward(&mut g, &w, &self.config, &batch, &mut None)?;
        let rows: Vec<usize> = (0..batch.len).collect();
        let logits = mlm_logits(&mut g, &w, enc.hidden, &rows)?;
        Ok(g.value(logits).clone())
    }

    /// Probability of the positive class for each row of a batch.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let w = self.weights.register(&mut g, false);
        let enc = forward(&mut g, &w, &self.config, batch, &mut None)?;
        let logits = classify_logits(&mut g, &w, enc.hidden, batch.size, batch.len)?;
        Ok(g.value(logits).data().iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<f64> {
        let batch = self.single(seq)?;
        Ok(self.predict_batch(&batch)?[0])
    }

    /// Loss and logits at the masked slots of a batch.
    pub fn evaluate_mlm(&self, batch: &Batch) -> Result<MlmEval> {
        let (rows, targets) = masked_slots(batch)?;
        if rows.is_empty() {
            return Err(Error::Contract("batch has no masked positions".into()));
        }
        let mut g = Graph::new();
        let w = self.weights.register(&mut g, false);
        let enc = forward(&mut g, &w, &self.config, batch, &mut None)?;
        let logits = mlm_logits(&mut g, &w, enc.hidden, &rows)?;
        let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
        Ok(MlmEval {
            loss: g.value(loss).item(),
            logits: g.value(logits).clone(),
            targets,
        })
    }
}
