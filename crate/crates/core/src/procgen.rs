//! Procedural pretraining data: k-Dyck, k-Dyck shuffle, Stack, Identity, Set,
//! and elementary cellular automata.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};

/// Number of ordinary symbols in the Stack, Identity and Set vocabularies.
pub const SYMBOLS: u32 = 100;

pub mod stack_vocab {
    pub const POP: u32 = 100;
    pub const SEP: u32 = 101;
    pub const PAD: u32 = 102;
    pub const SIZE: usize = 103;
}

/// Identity and Set share this layout.
pub mod seq_vocab {
    pub const SEP: u32 = 100;
    pub const PAD: u32 = 101;
    pub const SIZE: usize = 102;
}

/// Bracket vocabulary: opener of type `i` is `i`, its closer is `k + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DyckParams {
    pub k: u32,
    pub seq_len: usize,
    pub p_open: f64,
}

impl DyckParams {
    pub fn new(k: u32, seq_len: usize, p_open: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParams("k must be at least 1".into()));
        }
        if seq_len == 0 || !seq_len.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!(
                "seq_len {seq_len} must be positive and even"
            )));
        }
        if !(p_open > 0.0 && p_open < 1.0) {
            return Err(Error::InvalidParams(format!("p_open {p_open} outside (0, 1)")));
        }
        Ok(Self { k, seq_len, p_open })
    }

    /// 128-token k-Dyck with `p_open = 0.49`.
    pub fn dyck(k: u32) -> Self {
        Self::new(k, 128, 0.49).expect("valid defaults")
    }

    /// 128-token k-Dyck shuffle with `p_open = 0.5`.
    pub fn shuffle(k: u32) -> Self {
        Self::new(k, 128, 0.5).expect("valid defaults")
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.k as usize
    }
}

/// Balanced, well-nested k-Dyck word of exactly `seq_len` tokens.
pub fn gen_dyck<R: Rng + ?Sized>(params: &DyckParams, rng: &mut R) -> Vec<u32> {
    let k = params.k;
    let mut stack: Vec<u32> = Vec::with_capacity(params.seq_len / 2);
    let mut out = Vec::with_capacity(params.seq_len);
    for t in 0..params.seq_len {
        let remaining = params.seq_len - t;
        let open = if stack.len() >= remaining {
            false
        } else if stack.is_empty() {
            true
        } else {
            rng.random_bool(params.p_open)
        };
        if open {
            let ty = rng.random_range(0..k);
            stack.push(ty);
            out.push(ty);
        } else {
            let ty = stack.pop().expect("closing only with an open bracket");
            out.push(k + ty);
        }
    }
    out
}

fn shuffle_step<R: Rng + ?Sized>(k: u32, p_open: f64, open: &mut Vec<u32>, rng: &mut R) -> u32 {
    if open.is_empty() || rng.random_bool(p_open) {
        let ty = rng.random_range(0..k);
        open.push(ty);
        ty
    } else {
        let i = rng.random_range(0..open.len());
        k + open.swap_remove(i)
    }
}

/// k-Dyck shuffle truncated at `seq_len`: closers may cross, and brackets
/// still open at the cut stay unmatched.
pub fn gen_dyck_shuffle<R: Rng + ?Sized>(params: &DyckParams, rng: &mut R) -> Vec<u32> {
    let mut open = Vec::new();
    (0..params.seq_len)
        .map(|_| shuffle_step(params.k, params.p_open, &mut open, rng))
        .collect()
}

/// Same process, continued past `seq_len` with closers only until every
/// bracket is matched.
pub fn gen_dyck_shuffle_closed<R: Rng + ?Sized>(params: &DyckParams, rng: &mut R) -> Vec<u32> {
    let mut open = Vec::new();
    let mut out: Vec<u32> = (0..params.seq_len)
        .map(|_| shuffle_step(params.k, params.p_open, &mut open, rng))
        .collect();
    while !open.is_empty() {
        let i = rng.random_range(0..open.len());
        out.push(params.k + open.swap_remove(i));
    }
    out
}

fn check_tokens(seq: &[u32], k: u32) -> Result<()> {
    match seq.iter().find(|&&t| t >= 2 * k) {
        Some(&t) => Err(Error::TokenOutOfRange {
            token: t,
            vocab: 2 * k as usize,
        }),
        None => Ok(()),
    }
}

/// Stack simulation with type-matched nesting.
pub fn is_valid_dyck(seq: &[u32], k: u32) -> Result<bool> {
    check_tokens(seq, k)?;
    let mut stack = Vec::new();
    for &t in seq {
        if t < k {
            stack.push(t);
        } else if stack.pop() != Some(t - k) {
            return Ok(false);
        }
    }
    Ok(stack.is_empty())
}

/// Per-type counts: no prefix over-closes a type and all types balance.
pub fn is_valid_shuffle(seq: &[u32], k: u32) -> Result<bool> {
    check_tokens(seq, k)?;
    let mut depth = vec![0i64; k as usize];
    for &t in seq {
        if t < k {
            depth[t as usize] += 1;
        } else {
            let d = &mut depth[(t - k) as usize];
            *d -= 1;
            if *d < 0 {
                return Ok(false);
            }
        }
    }
    Ok(depth.iter().all(|&d| d == 0))
}

/// Push/pop program followed by the final stack contents, top first.
///
/// Pushes happen with probability 0.75 during the first `⌊2·op_len/3⌋`
/// operations and pops with probability 0.75 afterwards. A pop drawn on an
/// empty stack becomes a push, and pushes only use symbols not currently on
/// the stack.
pub fn gen_stack_episode<R: Rng + ?Sized>(op_len: usize, rng: &mut R) -> Result<Episode> {
    if op_len < 2 {
        return Err(Error::InvalidParams(format!("op_len {op_len} < 2")));
    }
    if op_len > SYMBOLS as usize {
        return Err(Error::InvalidParams(format!(
            "op_len {op_len} exceeds the {SYMBOLS} unique pushable symbols"
        )));
    }
    let boundary = 2 * op_len / 3;
    let mut stack: Vec<u32> = Vec::new();
    let mut ops = Vec::with_capacity(op_len + 1);
    for i in 0..op_len {
        let p_push = if i < boundary { 0.75 } else { 0.25 };
        let push = stack.is_empty() || rng.random_bool(p_push);
        if push {
            let on_stack: HashSet<u32> = stack.iter().copied().collect();
            let free: Vec<u32> = (0..SYMBOLS).filter(|s| !on_stack.contains(s)).collect();
            let sym = *free.choose(rng).expect("op_len ≤ symbol count");
            stack.push(sym);
            ops.push(sym);
        } else {
            stack.pop();
            ops.push(stack_vocab::POP);
        }
    }
    ops.push(stack_vocab::SEP);
    let target = stack.into_iter().rev().collect();
    Ok(Episode::seq2seq(ops, target))
}

fn random_symbols<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Vec<u32>> {
    if len == 0 {
        return Err(Error::InvalidParams("sequence length must be at least 1".into()));
    }
    Ok((0..len).map(|_| rng.random_range(0..SYMBOLS)).collect())
}

/// Random symbols, separator, then an exact copy.
pub fn gen_identity_episode<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Episode> {
    let mut input = random_symbols(len, rng)?;
    let target = input.clone();
    input.push(seq_vocab::SEP);
    Ok(Episode::seq2seq(input, target))
}

/// Random symbols, separator, then the first-occurrence de-duplication.
pub fn gen_set_episode<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Episode> {
    let mut input = random_symbols(len, rng)?;
    let mut seen = [false; SYMBOLS as usize];
    let target = input
        .iter()
        .copied()
        .filter(|&s| !std::mem::replace(&mut seen[s as usize], true))
        .collect();
    input.push(seq_vocab::SEP);
    Ok(Episode::seq2seq(input, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcaParams {
    pub rule: u32,
    pub width: usize,
    pub steps: usize,
}

impl Default for EcaParams {
    /// Rule 110, 100 cells, 60 rows.
    fn default() -> Self {
        Self {
            rule: 110,
            width: 100,
            steps: 60,
        }
    }
}

/// One synchronous update with periodic boundary. Neighbourhood
/// `(left, self, right)` reads as the 3-bit number `n`; the new cell is bit
/// `n` of `rule`.
pub fn eca_step(state: &[u8], rule: u32) -> Result<Vec<u8>> {
    if rule >= 256 {
        return Err(Error::InvalidParams(format!("rule {rule} outside [0, 256)")));
    }
    let w = state.len();
    if w < 3 {
        return Err(Error::InvalidParams(format!("width {w} < 3")));
    }
    Ok((0..w)
        .map(|i| {
            let l = state[(i + w - 1) % w] & 1;
            let c = state[i] & 1;
            let r = state[(i + 1) % w] & 1;
            let n = (l << 2) | (c << 1) | r;
            ((rule >> n) & 1) as u8
        })
        .collect())
}

/// `steps` rows: an iid Bernoulli(0.5) first row, then repeated `eca_step`.
pub fn gen_eca_trace<R: Rng + ?Sized>(params: &EcaParams, rng: &mut R) -> Result<Vec<Vec<u8>>> {
    if params.steps == 0 {
        return Err(Error::InvalidParams("steps must be at least 1".into()));
    }
    let first: Vec<u8> = (0..params.width).map(|_| u8::from(rng.random_bool(0.5))).collect();
    eca_evolve(first, params.rule, params.steps)
}

pub fn eca_evolve(first: Vec<u8>, rule: u32, steps: usize) -> Result<Vec<Vec<u8>>> {
    let mut rows = Vec::with_capacity(steps);
    rows.push(first);
    for t in 1..steps {
        let next = eca_step(&rows[t - 1], rule)?;
        rows.push(next);
    }
    if steps == 1 {
        // Still validate rule and width for a single-row trace.
        eca_step(&rows[0], rule)?;
    }
    Ok(rows)
}

/// Rows of `0`/`1` characters, one per line.
pub fn eca_dump(rows: &[Vec<u8>]) -> String {
    rows.iter()
        .map(|r| r.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect::<String>() + "\n")
        .collect()
}

/// Sequence-length curriculum driven by validation accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub current_len: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub step: usize,
    pub advance_threshold: f64,
    pub checks_without_improvement: usize,
}

impl CurriculumState {
    pub fn new(min_len: usize, max_len: usize, step: usize) -> Self {
        Self {
            current_len: min_len,
            min_len,
            max_len,
            step,
            advance_threshold: 0.99,
            checks_without_improvement: 0,
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.checks_without_improvement >= patience
    }

    pub fn at_cap(&self) -> bool {
        self.current_len >= self.max_len
    }
}

/// Lengthens the episodes by `step` once accuracy reaches the threshold;
/// otherwise counts a check without improvement.
pub fn curriculum_advance(state: CurriculumState, val_accuracy: f64) -> CurriculumState {
    let mut next = state;
    if val_accuracy >= state.advance_threshold && state.current_len < state.max_len {
        next.current_len = (state.current_len + state.step).min(state.max_len);
        next.checks_without_improvement = 0;
    } else {
        next.checks_without_improvement += 1;
    }
    next
}

/// Pretraining data sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProceduralTask {
    Dyck { k: u32 },
    DyckShuffle { k: u32 },
    Stack,
    Identity,
    Set,
    Eca,
}

impl ProceduralTask {
    pub fn name(&self) -> String {
        match self {
            Self::Dyck { k } => format!("{k}-dyck"),
            Self::DyckShuffle { k } => format!("{k}-dyck-shuffle"),
            Self::Stack => "stack".into(),
            Self::Identity => "identity".into(),
            Self::Set => "set".into(),
            Self::Eca => "eca".into(),
        }
    }

    /// Parses names like `identity`, `4-dyck`, `16-dyck-shuffle`, `eca`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParams(format!("unknown pretraining task `{s}`"));
        match s {
            "stack" => return Ok(Self::Stack),
            "identity" => return Ok(Self::Identity),
            "set" => return Ok(Self::Set),
            "eca" | "eca-110" => return Ok(Self::Eca),
            _ => {}
        }
        let (k, rest) = s.split_once('-').ok_or_else(bad)?;
        let k: u32 = k.parse().map_err(|_| bad())?;
        match rest {
            "dyck" if k > 0 => Ok(Self::Dyck { k }),
            "dyck-shuffle" if k > 0 => Ok(Self::DyckShuffle { k }),
            _ => Err(bad()),
        }
    }

    /// Token vocabulary size; `None` for the binary-vector ECA task.
    pub fn vocab_size(&self) -> Option<usize> {
        match self {
            Self::Dyck { k } | Self::DyckShuffle { k } => Some(2 * *k as usize),
            Self::Stack => Some(stack_vocab::SIZE),
            Self::Identity | Self::Set => Some(seq_vocab::SIZE),
            Self::Eca => None,
        }
    }

    pub fn pad_token(&self) -> u32 {
        match self {
            Self::Stack => stack_vocab::PAD,
            Self::Identity | Self::Set => seq_vocab::PAD,
            // Dyck sequences are fixed length and never padded.
            _ => 0,
        }
    }

    pub fn uses_curriculum(&self) -> bool {
        matches!(self, Self::Stack | Self::Identity | Self::Set)
    }

    /// Episode at curriculum length `len` (ignored for Dyck variants).
    pub fn episode<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Episode> {
        match self {
            Self::Dyck { k } => Ok(Episode::corpus(gen_dyck(&DyckParams::dyck(*k), rng))),
            Self::DyckShuffle { k } => Ok(Episode::corpus(gen_dyck_shuffle(
                &DyckParams::shuffle(*k),
                rng,
            ))),
            Self::Stack => gen_stack_episode(len, rng),
            Self::Identity => gen_identity_episode(len, rng),
            Self::Set => gen_set_episode(len, rng),
            Self::Eca => Err(Error::InputMode("ECA produces binary traces, not token episodes".into())),
        }
    }

    /// Longest model input for curriculum cap `max_len`.
    pub fn context_length(&self, max_len: usize) -> usize {
        match self {
            Self::Dyck { .. } | Self::DyckShuffle { .. } => 128,
            // ops + separator + at most `max_len` outputs, minus the final token.
            Self::Stack | Self::Identity | Self::Set => 2 * max_len,
            Self::Eca => EcaParams::default().steps,
        }
    }
}
