//! Downstream diagnostic tasks: generators, vocabularies, and accuracy.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Arithmetic token layout.
pub mod arith {
    pub const PLUS: u32 = 10;
    pub const TIMES: u32 = 11;
    pub const EQUALS: u32 = 12;
    pub const PAD: u32 = 13;
    pub const SIZE: usize = 14;
}

/// Haystack layout: values first, then markers.
pub mod haystack {
    pub const VALUES: u32 = 50;
    pub const MARKERS: u32 = 50;
    pub const SIZE: usize = (VALUES + MARKERS) as usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticTask {
    Haystack { k_pairs: usize },
    Addition { n_digits: usize },
    ReversedAddition { n_digits: usize },
    Multiplication { n_digits: usize },
    Sorting { n: usize, p: u32 },
    LanguageModelling { seq_len: usize, vocab_size: usize },
}

impl DiagnosticTask {
    pub const HAYSTACK: Self = Self::Haystack { k_pairs: 30 };
    pub const ADDITION: Self = Self::Addition { n_digits: 5 };
    pub const REVERSED_ADDITION: Self = Self::ReversedAddition { n_digits: 10 };
    pub const MULTIPLICATION: Self = Self::Multiplication { n_digits: 5 };
    pub const SORTING: Self = Self::Sorting { n: 10, p: 100 };
    pub const LANGUAGE_MODELLING: Self = Self::LanguageModelling {
        seq_len: 64,
        vocab_size: 2000,
    };

    /// The four algorithmic tasks trained with the small model.
    pub const ALGORITHMIC: [Self; 4] = [
        Self::HAYSTACK,
        Self::ADDITION,
        Self::REVERSED_ADDITION,
        Self::SORTING,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Haystack { .. } => "haystack",
            Self::Addition { .. } => "addition",
            Self::ReversedAddition { .. } => "reversed-addition",
            Self::Multiplication { .. } => "multiplication",
            Self::Sorting { .. } => "sorting",
            Self::LanguageModelling { .. } => "language-modelling",
        }
    }

    /// Task with default parameters by name.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "haystack" => Self::HAYSTACK,
            "addition" => Self::ADDITION,
            "reversed-addition" => Self::REVERSED_ADDITION,
            "multiplication" => Self::MULTIPLICATION,
            "sorting" => Self::SORTING,
            "language-modelling" | "lm" => Self::LANGUAGE_MODELLING,
            _ => return Err(Error::InvalidParams(format!("unknown diagnostic task `{s}`"))),
        })
    }

    pub fn vocab(&self) -> VocabMap {
        match *self {
            Self::Haystack { .. } => VocabMap {
                size: haystack::SIZE,
                separator: None,
                pad: None,
            },
            Self::Addition { .. } | Self::ReversedAddition { .. } | Self::Multiplication { .. } => {
                VocabMap {
                    size: arith::SIZE,
                    separator: Some(arith::EQUALS),
                    pad: Some(arith::PAD),
                }
            }
            Self::Sorting { p, .. } => VocabMap {
                size: p as usize + 2,
                separator: Some(p),
                pad: Some(p + 1),
            },
            Self::LanguageModelling { vocab_size, .. } => VocabMap {
                size: vocab_size + 2,
                separator: None,
                pad: Some(vocab_size as u32 + 1),
            },
        }
    }

    /// Full episode length (input plus answer).
    pub fn episode_len(&self) -> usize {
        match *self {
            Self::Haystack { k_pairs } => 2 * k_pairs + 2,
            Self::Addition { n_digits } | Self::ReversedAddition { n_digits } => {
                2 * n_digits + 2 + n_digits + 1
            }
            Self::Multiplication { n_digits } => 2 * n_digits + 2 + 2 * n_digits,
            Self::Sorting { n, .. } => 2 * n + 1,
            Self::LanguageModelling { seq_len, .. } => seq_len,
        }
    }

    /// Context a model needs: the episode minus the final token.
    pub fn context_length(&self) -> usize {
        self.episode_len() - 1
    }

    /// Fresh random episode. Language modelling draws from a corpus instead;
    /// see [`LmDataset`].
    pub fn episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        match *self {
            Self::Haystack { k_pairs } => gen_haystack(k_pairs, rng),
            Self::Addition { n_digits } => gen_addition(n_digits, false, rng),
            Self::ReversedAddition { n_digits } => gen_addition(n_digits, true, rng),
            Self::Multiplication { n_digits } => gen_multiplication(n_digits, rng),
            Self::Sorting { n, p } => gen_sorting(n, p, rng),
            Self::LanguageModelling { .. } => Err(Error::InvalidParams(
                "language modelling episodes come from a corpus".into(),
            )),
        }
    }
}

/// Token-id layout of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub size: usize,
    pub separator: Option<u32>,
    pub pad: Option<u32>,
}

/// `m₁ c₁ … m_k c_k m_u` with distinct markers; the answer is `c_u`.
pub fn gen_haystack<R: Rng + ?Sized>(k_pairs: usize, rng: &mut R) -> Result<Episode> {
    if k_pairs == 0 {
        return Err(Error::InvalidParams("k_pairs must be at least 1".into()));
    }
    if k_pairs > haystack::MARKERS as usize {
        return Err(Error::InvalidParams(format!(
            "{k_pairs} pairs need more than {} distinct markers",
            haystack::MARKERS
        )));
    }
    let markers = index::sample(rng, haystack::MARKERS as usize, k_pairs);
    let mut input = Vec::with_capacity(2 * k_pairs + 1);
    let mut values = Vec::with_capacity(k_pairs);
    for m in markers.iter() {
        let v = rng.random_range(0..haystack::VALUES);
        input.push(haystack::VALUES + m as u32);
        input.push(v);
        values.push(v);
    }
    let q = rng.random_range(0..k_pairs);
    input.push(input[2 * q]);
    Ok(Episode::seq2seq(input, vec![values[q]]))
}

/// Most-significant-first digits of `x`, zero-padded to `width`.
pub fn digits(mut x: u128, width: usize) -> Vec<u32> {
    let mut out = vec![0; width];
    for d in out.iter_mut().rev() {
        *d = (x % 10) as u32;
        x /= 10;
    }
    out
}

fn operand<R: Rng + ?Sized>(n_digits: usize, rng: &mut R) -> Result<u128> {
    if n_digits == 0 || n_digits > 18 {
        return Err(Error::InvalidParams(format!("n_digits {n_digits} outside [1, 18]")));
    }
    Ok(rng.random_range(0..10u128.pow(n_digits as u32)))
}

/// Episode for `a OP b = result` with fixed-width operands and result.
pub fn arithmetic_episode(
    a: u128,
    b: u128,
    op: u32,
    n_digits: usize,
    result: u128,
    result_width: usize,
    reversed: bool,
) -> Episode {
    let order = |mut v: Vec<u32>| {
        if reversed {
            v.reverse();
        }
        v
    };
    let mut input = order(digits(a, n_digits));
    input.push(op);
    input.extend(order(digits(b, n_digits)));
    input.push(arith::EQUALS);
    Episode::seq2seq(input, order(digits(result, result_width)))
}

/// `a + b =` with an `n+1`-digit answer; `reversed` writes every number
/// least-significant digit first.
pub fn gen_addition<R: Rng + ?Sized>(n_digits: usize, reversed: bool, rng: &mut R) -> Result<Episode> {
    let a = operand(n_digits, rng)?;
    let b = operand(n_digits, rng)?;
    Ok(arithmetic_episode(a, b, arith::PLUS, n_digits, a + b, n_digits + 1, reversed))
}

/// `a × b =` with a `2n`-digit answer.
pub fn gen_multiplication<R: Rng + ?Sized>(n_digits: usize, rng: &mut R) -> Result<Episode> {
    let a = operand(n_digits, rng)?;
    let b = operand(n_digits, rng)?;
    Ok(arithmetic_episode(a, b, arith::TIMES, n_digits, a * b, 2 * n_digits, false))
}

/// `n` values from `[0, P)`, separator `P`, then the values in ascending order.
pub fn gen_sorting<R: Rng + ?Sized>(n: usize, p: u32, rng: &mut R) -> Result<Episode> {
    if n == 0 || p < 2 {
        return Err(Error::InvalidParams(format!("sorting needs n ≥ 1 and P ≥ 2, got n={n} P={p}")));
    }
    let mut input: Vec<u32> = (0..n).map(|_| rng.random_range(0..p)).collect();
    let mut target = input.clone();
    target.sort_unstable();
    input.push(p);
    Ok(Episode::seq2seq(input, target))
}

/// Splits text into words (alphanumeric runs, apostrophes allowed inside) and
/// single punctuation characters.
pub fn tokenize_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let wordy = c.is_alphanumeric() || (c == '\'' && start.is_some());
        if wordy {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Word-level corpus cut into non-overlapping windows whose last token is
/// the prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct LmDataset {
    /// Vocabulary in rank order; token id = index.
    pub words: Vec<String>,
    pub unk: u32,
    pub pad: u32,
    pub windows: Vec<Vec<u32>>,
}

impl LmDataset {
    pub fn build(corpus: &str, vocab_size: usize, seq_len: usize) -> Result<Self> {
        if vocab_size == 0 || seq_len < 2 {
            return Err(Error::InvalidParams("vocab_size ≥ 1 and seq_len ≥ 2 required".into()));
        }
        let toks = tokenize_words(corpus);
        if toks.len() < seq_len {
            return Err(Error::CorpusTooShort {
                tokens: toks.len(),
                needed: seq_len,
            });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for &t in &toks {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(vocab_size);
        let words: Vec<String> = ranked.iter().map(|(w, _)| w.to_string()).collect();
        let ids: HashMap<&str, u32> = ranked
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (*w, i as u32))
            .collect();
        // Ids are relative to the requested size so the layout is fixed even
        // when the corpus has fewer distinct words.
        let unk = vocab_size as u32;
        let encoded: Vec<u32> = toks.iter().map(|t| ids.get(t).copied().unwrap_or(unk)).collect();
        let windows = encoded.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
        Ok(Self {
            words,
            unk,
            pad: unk + 1,
            windows,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pad as usize + 1
    }

    /// Window `i` as an episode supervising only its final token.
    pub fn episode(&self, i: usize) -> Episode {
        let w = &self.windows[i];
        let (last, prefix) = w.split_last().expect("windows are non-empty");
        Episode::seq2seq(prefix.to_vec(), vec![*last])
    }

    /// Every tenth window is held out for evaluation.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.windows.len()).partition(|i| i % 10 != 9)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked-in rows whose argmax equals the target.
pub fn token_accuracy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "token_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        }
        .into());
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total += 1;
            hits += usize::from(argmax(logits.row(r)) == t);
        }
    }
    if total == 0 {
        return Err(TensorError::InvalidBatch("accuracy over an empty mask".into()).into());
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize_words("Tom's dog ran, fast!"),
            vec!["Tom's", "dog", "ran", ",", "fast", "!"]
        );
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn episode_lengths_match_generators() {
        let mut r = crate::rng::stream(1, "t");
        for t in [
            DiagnosticTask::HAYSTACK,
            DiagnosticTask::ADDITION,
            DiagnosticTask::REVERSED_ADDITION,
            DiagnosticTask::MULTIPLICATION,
            DiagnosticTask::SORTING,
        ] {
            assert_eq!(t.episode(&mut r).unwrap().len(), t.episode_len(), "{}", t.name());
            assert_eq!(DiagnosticTask::parse(t.name()).unwrap(), t);
        }
    }
}
