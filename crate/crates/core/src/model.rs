//! GPT-2 style decoder with named, partitionable parameters.
//!
//! Blocks are pre-layer-norm: `x += attn(ln1(x))`, `x += mlp(ln2(x))`, then a
//! final layer-norm and an untied unembedding. Positional embeddings are
//! learned and absolute. In binary-vector mode the token embedding and
//! unembedding are replaced by linear projections from and to `{0,1}^W`.

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Standard deviation of freshly initialised weight matrices and embeddings.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Token,
    BinaryVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub input_mode: InputMode,
    pub binary_width: usize,
}

impl ModelConfig {
    pub fn token(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        context_length: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            context_length,
            vocab_size,
            input_mode: InputMode::Token,
            binary_width: 0,
        }
    }

    pub fn binary(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        context_length: usize,
        binary_width: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            context_length,
            vocab_size: 0,
            input_mode: InputMode::BinaryVector,
            binary_width,
        }
    }

    /// The 2-layer, 4-head, 16-dim architecture used for the algorithmic tasks.
    pub fn small(context_length: usize, vocab_size: usize) -> Self {
        Self::token(2, 4, 16, context_length, vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.context_length == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        match self.input_mode {
            InputMode::Token if self.vocab_size < 2 => {
                bad(format!("vocab_size {} < 2", self.vocab_size))
            }
            InputMode::BinaryVector if self.binary_width < 1 => bad("binary_width < 1".into()),
            _ => Ok(()),
        }
    }

    /// Width of the output layer: vocabulary size or binary width.
    pub fn output_width(&self) -> usize {
        match self.input_mode {
            InputMode::Token => self.vocab_size,
            InputMode::BinaryVector => self.binary_width,
        }
    }

    /// Canonical tensor names and shapes, in canonical order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |n: String, s: Vec<usize>| out.push((n, s));
        match self.input_mode {
            InputMode::Token => {
                push("embed.tok".into(), vec![self.vocab_size, d]);
            }
            InputMode::BinaryVector => {
                push("proj.in.w".into(), vec![self.binary_width, d]);
                push("proj.in.b".into(), vec![d]);
            }
        }
        push("embed.pos".into(), vec![self.context_length, d]);
        for i in 0..self.n_layers {
            let p = format!("layer.{i}");
            push(format!("{p}.ln1.g"), vec![d]);
            push(format!("{p}.ln1.b"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{w}"), vec![d, d]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                push(format!("{p}.attn.{b}"), vec![d]);
            }
            push(format!("{p}.ln2.g"), vec![d]);
            push(format!("{p}.ln2.b"), vec![d]);
            push(format!("{p}.mlp.w1"), vec![d, f]);
            push(format!("{p}.mlp.b1"), vec![f]);
            push(format!("{p}.mlp.w2"), vec![f, d]);
            push(format!("{p}.mlp.b2"), vec![d]);
        }
        push("final_ln.g".into(), vec![d]);
        push("final_ln.b".into(), vec![d]);
        match self.input_mode {
            InputMode::Token => {
                push("unembed.w".into(), vec![d, self.vocab_size]);
                push("unembed.b".into(), vec![self.vocab_size]);
            }
            InputMode::BinaryVector => {
                push("proj.out.w".into(), vec![d, self.binary_width]);
                push("proj.out.b".into(), vec![self.binary_width]);
            }
        }
        out
    }
}

/// Exact parameter count implied by a config.
pub fn count_params(config: &ModelConfig) -> usize {
    config
        .tensor_specs()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Weight partition: embeddings/unembedding (E), attention blocks (A), MLP blocks (F).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentGroup {
    #[serde(rename = "E")]
    Embedding,
    #[serde(rename = "A")]
    Attention,
    #[serde(rename = "F")]
    Mlp,
}

impl ComponentGroup {
    pub const ALL: [ComponentGroup; 3] = [Self::Embedding, Self::Attention, Self::Mlp];

    pub fn letter(self) -> char {
        match self {
            Self::Embedding => 'E',
            Self::Attention => 'A',
            Self::Mlp => 'F',
        }
    }
}

impl fmt::Display for ComponentGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Group membership of a canonical tensor name.
///
/// Layer norms travel with their block: `ln1` belongs to A, `ln2` to F, and
/// the final layer norm to E.
pub fn group_of(name: &str) -> Result<ComponentGroup> {
    let unknown = || Error::UnknownTensor(name.to_string());
    match name {
        "embed.tok" | "embed.pos" | "unembed.w" | "unembed.b" | "final_ln.g" | "final_ln.b"
        | "proj.in.w" | "proj.in.b" | "proj.out.w" | "proj.out.b" => {
            return Ok(ComponentGroup::Embedding)
        }
        _ => {}
    }
    let rest = name.strip_prefix("layer.").ok_or_else(unknown)?;
    let (idx, leaf) = rest.split_once('.').ok_or_else(unknown)?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return Err(unknown());
    }
    match leaf {
        "ln1.g" | "ln1.b" | "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" | "attn.bq"
        | "attn.bk" | "attn.bv" | "attn.bo" => Ok(ComponentGroup::Attention),
        "ln2.g" | "ln2.b" | "mlp.w1" | "mlp.b1" | "mlp.w2" | "mlp.b2" => Ok(ComponentGroup::Mlp),
        _ => Err(unknown()),
    }
}

/// Model weights plus the config that defines their names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    pub provenance: String,
}

impl Checkpoint {
    /// Builds a checkpoint, checking the tensor set against `config`.
    pub fn new(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::TensorSet(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &specs {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::TensorSet(format!("missing `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorSet(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            tensors,
            provenance: provenance.into(),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::TransferShape {
                name: name.to_string(),
                donor: value.shape().to_vec(),
                target: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access to raw parameter buffers, in canonical-name order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f32])> {
        self.tensors
            .iter_mut()
            .map(|(n, t)| (n.as_str(), t.data_mut()))
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Draws one tensor of the fresh-initialisation stream.
///
/// Each tensor has its own RNG stream keyed by `(seed, name)`, so a tensor's
/// initial value does not depend on which other tensors exist.
pub fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if shape.len() == 1 {
        let value = if name.ends_with(".g") { 1.0 } else { 0.0 };
        return Tensor::full(shape, value);
    }
    let mut rng = rng::stream(seed, &format!("init/{name}"));
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Fresh GPT-2 style initialisation: N(0, 0.02²) matrices, unit gains, zero biases.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let tensors = config
        .tensor_specs()
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, seed);
            (name, t)
        })
        .collect();
    Checkpoint::new(config.clone(), tensors, format!("init_random seed={seed}"))
}

/// Parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, ckpt: &Checkpoint, trainable: bool) -> Self {
        let vars = ckpt
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// A batch of equal-length sequences fed to the model.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    /// `seqs·seq_len` token ids.
    Tokens(&'a [u32]),
    /// `seqs·seq_len` rows of `binary_width` values in {0, 1}.
    Binary(&'a [f32]),
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Residual-stream output of the last block, `[seqs·seq_len, d_model]`.
pub fn hidden_states(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    input: ModelInput<'_>,
    seqs: usize,
    seq_len: usize,
) -> Result<Var> {
    if seq_len > config.context_length {
        return Err(Error::ContextOverflow {
            len: seq_len,
            max: config.context_length,
        });
    }
    let n = seqs * seq_len;
    let d = config.d_model;
    let x = match (config.input_mode, input) {
        (InputMode::Token, ModelInput::Tokens(ids)) => {
            if ids.len() != n {
                return Err(Error::InputMode(format!("expected {n} tokens, got {}", ids.len())));
            }
            let idx = ids
                .iter()
                .map(|&t| {
                    if (t as usize) < config.vocab_size {
                        Ok(t as usize)
                    } else {
                        Err(Error::TokenOutOfRange {
                            token: t,
                            vocab: config.vocab_size,
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            tape.gather_rows(params.get("embed.tok"), &idx)?
        }
        (InputMode::BinaryVector, ModelInput::Binary(rows)) => {
            let w = config.binary_width;
            if rows.len() != n * w {
                return Err(Error::InputMode(format!(
                    "expected {} binary values, got {}",
                    n * w,
                    rows.len()
                )));
            }
            let leaf = tape.leaf(Tensor::new(vec![n, w], rows.to_vec())?, false);
            linear(tape, leaf, params.get("proj.in.w"), params.get("proj.in.b"))?
        }
        (mode, _) => {
            return Err(Error::InputMode(format!("model expects {mode:?} input")));
        }
    };
    let positions: Vec<usize> = (0..n).map(|i| i % seq_len).collect();
    let pos = tape.gather_rows(params.get("embed.pos"), &positions)?;
    let mut x = tape.add(x, pos)?;
    debug_assert_eq!(tape.value(x).shape(), &[n, d]);

    for i in 0..config.n_layers {
        let p = |s: &str| params.get(&format!("layer.{i}.{s}"));
        let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), LAYER_NORM_EPS)?;
        let q = linear(tape, h, p("attn.wq"), p("attn.bq"))?;
        let k = linear(tape, h, p("attn.wk"), p("attn.bk"))?;
        let v = linear(tape, h, p("attn.wv"), p("attn.bv"))?;
        let a = tape.causal_attention(q, k, v, seqs, seq_len, config.n_heads)?;
        let o = linear(tape, a, p("attn.wo"), p("attn.bo"))?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), LAYER_NORM_EPS)?;
        let u = linear(tape, h, p("mlp.w1"), p("mlp.b1"))?;
        let u = tape.gelu(u);
        let m = linear(tape, u, p("mlp.w2"), p("mlp.b2"))?;
        x = tape.add(x, m)?;
    }
    Ok(x)
}

/// Final layer norm and output projection, optionally only for selected rows.
pub fn output_logits(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    hidden: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let h = match rows {
        Some(r) => tape.gather_rows(hidden, r)?,
        None => hidden,
    };
    let h = tape.layer_norm(h, params.get("final_ln.g"), params.get("final_ln.b"), LAYER_NORM_EPS)?;
    match config.input_mode {
        InputMode::Token => linear(tape, h, params.get("unembed.w"), params.get("unembed.b")),
        InputMode::BinaryVector => linear(tape, h, params.get("proj.out.w"), params.get("proj.out.b")),
    }
}

/// Logits for one sequence: `[T×V]` in token mode, `[T×W]` in binary mode.
pub fn forward(ckpt: &Checkpoint, input: ModelInput<'_>) -> Result<Tensor> {
    let seq_len = match input {
        ModelInput::Tokens(ids) => ids.len(),
        ModelInput::Binary(rows) => rows.len() / ckpt.config.binary_width.max(1),
    };
    if seq_len == 0 {
        return Err(Error::InputMode("empty sequence".into()));
    }
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, ckpt, false);
    let h = hidden_states(&mut tape, &ckpt.config, &params, input, 1, seq_len)?;
    let logits = output_logits(&mut tape, &ckpt.config, &params, h, None)?;
    Ok(tape.value(logits).clone())
}

/// Thresholds per-cell probabilities at 0.5; a logit of exactly 0 maps to 1.
pub fn predict_binary(logits_row: &[f32]) -> Vec<u8> {
    logits_row.iter().map(|&l| u8::from(l >= 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups() {
        assert_eq!(group_of("layer.0.attn.wq").unwrap(), ComponentGroup::Attention);
        assert_eq!(group_of("layer.1.mlp.w1").unwrap(), ComponentGroup::Mlp);
        assert_eq!(group_of("embed.pos").unwrap(), ComponentGroup::Embedding);
        assert_eq!(group_of("layer.3.ln1.b").unwrap(), ComponentGroup::Attention);
        assert_eq!(group_of("final_ln.g").unwrap(), ComponentGroup::Embedding);
        for bad in ["layer.x.attn.wq", "layer.0.attn", "embed", "layer..mlp.w1", "foo"] {
            assert!(group_of(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn every_canonical_name_has_a_group() {
        for cfg in [ModelConfig::small(8, 10), ModelConfig::binary(2, 4, 16, 60, 100)] {
            let specs = cfg.tensor_specs();
            let mut counts = BTreeMap::new();
            for (n, _) in &specs {
                *counts.entry(group_of(n).unwrap()).or_insert(0) += 1;
            }
            assert_eq!(counts.values().sum::<usize>(), specs.len());
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::token(2, 3, 16, 8, 10).validate().is_err());
        assert!(ModelConfig::token(2, 4, 16, 8, 1).validate().is_err());
        assert!(ModelConfig::binary(2, 4, 16, 8, 0).validate().is_err());
        assert!(ModelConfig::small(8, 2).validate().is_ok());
    }

    #[test]
    fn predict_binary_thresholds() {
        assert_eq!(predict_binary(&[-10.0; 3]), vec![0, 0, 0]);
        assert_eq!(predict_binary(&[10.0; 3]), vec![1, 1, 1]);
        assert_eq!(predict_binary(&[0.0]), vec![1]);
    }
}
