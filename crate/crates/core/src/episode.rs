//! Token episodes and their packing into model batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training example: `input ++ target`, with `loss_mask` flagging the
/// supervised positions of the concatenated sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Episode {
    /// Input/answer episode: only the target positions are supervised.
    pub fn seq2seq(input: Vec<u32>, target: Vec<u32>) -> Self {
        let loss_mask = std::iter::repeat_n(false, input.len())
            .chain(std::iter::repeat_n(true, target.len()))
            .collect();
        Self {
            input,
            target,
            loss_mask,
        }
    }

    /// Plain next-token corpus: every position is supervised. Position 0 has
    /// no prefix, so it never produces a training row.
    pub fn corpus(tokens: Vec<u32>) -> Self {
        let loss_mask = vec![true; tokens.len()];
        Self {
            input: Vec::new(),
            target: tokens,
            loss_mask,
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.input.iter().chain(&self.target).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Space-separated decimal token ids (the corpus dump line format).
    pub fn to_line(&self) -> String {
        self.tokens()
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Episodes packed for a shifted next-token forward pass.
///
/// Row `b·seq_len + t` holds token `t` of episode `b` and, if position `t+1`
/// is supervised, predicts it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub seqs: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    pub fn pack(episodes: &[Episode], pad: u32) -> Result<Self> {
        let seq_len = episodes.iter().map(|e| e.len().saturating_sub(1)).max().unwrap_or(0);
        if episodes.is_empty() || seq_len == 0 {
            return Err(Error::InvalidParams("batch needs episodes of length ≥ 2".into()));
        }
        let mut inputs = Vec::with_capacity(episodes.len() * seq_len);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, ep) in episodes.iter().enumerate() {
            let toks = ep.tokens();
            for t in 0..seq_len {
                inputs.push(toks.get(t).copied().unwrap_or(pad));
                if t + 1 < toks.len() && ep.loss_mask[t + 1] {
                    rows.push(b * seq_len + t);
                    targets.push(toks[t + 1] as usize);
                }
            }
        }
        Ok(Self {
            seqs: episodes.len(),
            seq_len,
            inputs,
            rows,
            targets,
        })
    }
}
