//! Pretraining and fine-tuning loops, evaluation, and run records.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{token_accuracy, DiagnosticTask, LmDataset};
use crate::episode::{Episode, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{
    hidden_states, init_random, output_logits, Checkpoint, InputMode, ModelConfig, ModelInput,
    ParamVars,
};
use crate::procgen::{curriculum_advance, gen_eca_trace, CurriculumState, EcaParams, ProceduralTask};
use crate::rng;
use crate::store;
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule, Moments, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ConstantAfterWarmup,
    Cosine,
}

/// Sequence-length curriculum bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    /// When set, warmup covers this fraction of `max_steps` instead.
    #[serde(default)]
    pub warmup_fraction: Option<f32>,
    /// Zero means one pass over a finite dataset (language modelling).
    pub max_steps: u64,
    pub lr_schedule: ScheduleKind,
    #[serde(default)]
    pub grad_clip: Option<f32>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default)]
    pub curriculum: Option<CurriculumSpec>,
}

/// Preset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::InvalidParams(format!("unknown scale `{s}` (desk|paper)"))),
        }
    }
}

pub const PRESET_NAMES: [&str; 9] = [
    "pretrain-dyck",
    "pretrain-stack",
    "pretrain-identity",
    "pretrain-set",
    "pretrain-eca",
    "ft-algorithmic",
    "ft-multiplication",
    "ft-lm",
    "ft-smoke",
];

impl TrainConfig {
    fn base(batch_size: usize, learning_rate: f32, weight_decay: f32, max_steps: u64) -> Self {
        Self {
            batch_size,
            learning_rate,
            weight_decay,
            warmup_steps: 0,
            warmup_fraction: None,
            max_steps,
            lr_schedule: ScheduleKind::ConstantAfterWarmup,
            grad_clip: None,
            eval_interval: 500,
            eval_episodes: 512,
            early_stop_patience: None,
            curriculum: None,
        }
    }

    /// Registered preset by name.
    pub fn preset(name: &str, scale: Scale) -> Result<Self> {
        let paper = scale == Scale::Paper;
        let curriculum = |min_len: usize| CurriculumSpec {
            min_len,
            max_len: if paper { 20 } else { 12 },
            step: 2,
        };
        let seq_task = |min_len: usize| {
            if paper {
                Self {
                    warmup_steps: 1_000,
                    early_stop_patience: Some(100),
                    curriculum: Some(curriculum(min_len)),
                    ..Self::base(256, 5e-4, 0.01, 1_000_000)
                }
            } else {
                Self {
                    warmup_steps: 200,
                    eval_interval: 100,
                    eval_episodes: 256,
                    early_stop_patience: Some(30),
                    curriculum: Some(curriculum(min_len)),
                    ..Self::base(64, 2e-3, 0.01, 12_000)
                }
            }
        };
        Ok(match name {
            "pretrain-dyck" if paper => Self {
                warmup_steps: 100_000,
                ..Self::base(256, 1e-4, 0.01, 1_000_000)
            },
            "pretrain-dyck" => Self {
                warmup_steps: 200,
                eval_interval: 500,
                eval_episodes: 64,
                ..Self::base(32, 1e-3, 0.01, 3_000)
            },
            "pretrain-stack" | "pretrain-identity" => seq_task(4),
            "pretrain-set" => seq_task(2),
            "pretrain-eca" if paper => Self {
                warmup_fraction: Some(0.1),
                lr_schedule: ScheduleKind::Cosine,
                grad_clip: Some(1.0),
                eval_episodes: 64,
                ..Self::base(64, 2e-6, 0.01, 10_000)
            },
            "pretrain-eca" => Self {
                warmup_fraction: Some(0.1),
                lr_schedule: ScheduleKind::Cosine,
                grad_clip: Some(1.0),
                eval_interval: 500,
                eval_episodes: 32,
                ..Self::base(16, 3e-3, 0.01, 3_000)
            },
            "ft-algorithmic" if paper => Self::base(1000, 1e-3, 1e-3, 10_000),
            "ft-algorithmic" => Self {
                eval_interval: 500,
                ..Self::base(128, 1e-3, 1e-3, 2_000)
            },
            "ft-multiplication" => Self {
                warmup_steps: 500,
                ..Self::base(64, 1e-3, 1e-3, if paper { 156_250 } else { 2_000 })
            },
            "ft-lm" => Self {
                warmup_fraction: Some(0.1),
                lr_schedule: ScheduleKind::Cosine,
                eval_interval: 100,
                eval_episodes: 256,
                ..Self::base(64, 2e-3, 0.0, if paper { 0 } else { 200 })
            },
            "ft-smoke" => Self {
                eval_interval: 50,
                eval_episodes: 64,
                ..Self::base(16, 1e-3, 1e-3, 100)
            },
            _ => {
                return Err(Error::InvalidParams(format!(
                    "unknown preset `{name}`; known: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be ≥ 0");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive");
        }
        if let Some(c) = self.grad_clip {
            // Also rejects NaN.
            if c.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return bad("grad_clip must be positive");
            }
        }
        if let Some(f) = self.warmup_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad("warmup_fraction outside [0, 1]");
            }
        }
        if let Some(c) = self.curriculum {
            if c.min_len == 0 || c.min_len > c.max_len || c.step == 0 {
                return bad("curriculum needs 1 ≤ min_len ≤ max_len and step ≥ 1");
            }
        }
        Ok(())
    }

    pub fn schedule(&self, max_steps: u64) -> LrSchedule {
        let warmup_steps = match self.warmup_fraction {
            Some(f) => (f64::from(f) * max_steps as f64).round() as u64,
            None => self.warmup_steps,
        };
        match self.lr_schedule {
            ScheduleKind::ConstantAfterWarmup => LrSchedule::ConstantAfterWarmup { warmup_steps },
            ScheduleKind::Cosine => LrSchedule::Cosine {
                warmup_steps,
                total_steps: max_steps,
            },
        }
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

fn json_digest<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serialisable");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

pub fn config_digest(cfg: &ModelConfig) -> String {
    json_digest(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Curriculum length in effect, when a curriculum runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

/// One training run: identity, lineage digests, and evaluation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Aggregation key: runs sharing it differ only by seed.
    pub configuration: String,
    pub task: String,
    pub seed: u64,
    pub model_digest: String,
    pub train_digest: String,
    #[serde(default)]
    pub plan_digest: Option<String>,
    #[serde(default)]
    pub init_digest: Option<String>,
    #[serde(default)]
    pub checkpoint_digest: Option<String>,
    pub evals: Vec<EvalPoint>,
    pub final_accuracy: f64,
    pub steps: u64,
    pub wall_time_s: f64,
    #[serde(default)]
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::InvalidParams(format!("bad record: {e}")))
    }
}

/// Mean and sample standard deviation of final accuracies for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub configuration: String,
    pub task: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(records: &[RunRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidParams("aggregate needs at least one record".into()))?;
    let key = |r: &RunRecord| format!("{} on {}", r.configuration, r.task);
    for r in records {
        if r.configuration != first.configuration || r.task != first.task {
            return Err(Error::MixedConfigurations(key(first), key(r)));
        }
    }
    let accs: Vec<f64> = records.iter().map(|r| r.final_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(Summary {
        configuration: first.configuration.clone(),
        task: first.task.clone(),
        n: records.len(),
        mean,
        std,
    })
}

/// Thread-safe record sink, optionally appending one JSON line per record.
#[derive(Debug, Default)]
pub struct RecordCollector {
    records: Mutex<Vec<RunRecord>>,
    sink: Option<PathBuf>,
}

impl RecordCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: impl Into<PathBuf>) -> Self {
        Self {
            records: Mutex::default(),
            sink: Some(path.into()),
        }
    }

    pub fn push(&self, record: RunRecord) -> Result<()> {
        let mut guard = self.records.lock().expect("collector poisoned");
        if let Some(path) = &self.sink {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(format!("{}\n", record.to_line()).as_bytes())?;
        }
        guard.push(record);
        Ok(())
    }

    pub fn records(&self) -> Vec<RunRecord> {
        self.records.lock().expect("collector poisoned").clone()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(RunRecord::from_line)
        .collect()
}

/// Worker count: `PROCTRAIN_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("PROCTRAIN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs independent jobs on up to `threads` workers; results keep job order.
pub fn run_parallel<T, F>(jobs: Vec<F>, threads: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let n = jobs.len();
    let slots: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = slots[i].lock().expect("slot").take().expect("job taken once");
                *results[i].lock().expect("slot") = Some(job());
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("job ran"))
        .collect()
}

/// Every step allocates and frees the same few large activation buffers.
/// glibc would hand them back to the kernel each time and fault them in again,
/// so raise its mmap and trim thresholds once per process.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}

/// Parameters plus optimiser state.
struct Trainer {
    ckpt: Checkpoint,
    opt: AdamW,
    moments: Vec<Moments>,
    schedule: LrSchedule,
    base_lr: f32,
    grad_clip: Option<f32>,
}

impl Trainer {
    fn new(ckpt: Checkpoint, cfg: &TrainConfig, max_steps: u64) -> Self {
        tune_allocator();
        let moments = ckpt.tensors().values().map(|t| Moments::zeros(t.len())).collect();
        Self {
            ckpt,
            opt: AdamW::new(AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            }),
            moments,
            schedule: cfg.schedule(max_steps),
            base_lr: cfg.learning_rate,
            grad_clip: cfg.grad_clip,
        }
    }

    /// One optimiser step on the loss built by `loss_fn`. Returns the loss.
    fn step(
        &mut self,
        step: u64,
        loss_fn: impl FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
    ) -> Result<f32> {
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, &self.ckpt, true);
        let loss = loss_fn(&mut tape, &params)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Aborted {
                step,
                reason: format!("loss became {value}"),
            });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .map(|(_, v)| tape.grad(v).expect("parameters are reachable").to_vec())
            .collect();
        if let Some(max) = self.grad_clip {
            clip_grad_norm(grads.iter_mut(), max);
        }
        let lr = self.base_lr * self.schedule.factor(step);
        for (((_, w), g), m) in self.ckpt.params_mut().zip(&grads).zip(&mut self.moments) {
            self.opt.step(w, g, m, lr);
        }
        Ok(value)
    }
}

fn token_loss(tape: &mut Tape, cfg: &ModelConfig, params: &ParamVars, batch: &TokenBatch) -> Result<Var> {
    let h = hidden_states(
        tape,
        cfg,
        params,
        ModelInput::Tokens(&batch.inputs),
        batch.seqs,
        batch.seq_len,
    )?;
    let logits = output_logits(tape, cfg, params, h, Some(&batch.rows))?;
    let mask = vec![true; batch.rows.len()];
    Ok(tape.cross_entropy_masked(logits, &batch.targets, &mask)?)
}

/// Logits of the supervised rows of a packed batch.
fn supervised_logits(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, ckpt, false);
    let h = hidden_states(
        &mut tape,
        &ckpt.config,
        &params,
        ModelInput::Tokens(&batch.inputs),
        batch.seqs,
        batch.seq_len,
    )?;
    let logits = output_logits(&mut tape, &ckpt.config, &params, h, Some(&batch.rows))?;
    Ok(tape.value(logits).clone())
}

/// Mean cross-entropy of the target rows.
fn mean_nll(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max)
            + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[t]);
    }
    total / targets.len().max(1) as f64
}

/// How multi-token answers are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Ground-truth prefixes; one forward pass per batch.
    #[default]
    TeacherForced,
    /// Answers generated greedily one token at a time.
    Greedy,
}

/// Teacher-forced loss and token accuracy over `episodes`.
pub fn evaluate_episodes(ckpt: &Checkpoint, episodes: &[Episode], pad: u32) -> Result<(f64, f64)> {
    let mut hits = 0.0f64;
    let mut total = 0usize;
    let mut loss = 0.0f64;
    for chunk in episodes.chunks(128) {
        let batch = TokenBatch::pack(chunk, pad)?;
        let logits = supervised_logits(ckpt, &batch)?;
        let mask = vec![true; batch.rows.len()];
        let acc = token_accuracy(&logits, &batch.targets, &mask)?;
        hits += acc * batch.rows.len() as f64;
        loss += mean_nll(&logits, &batch.targets) * batch.rows.len() as f64;
        total += batch.rows.len();
    }
    Ok((loss / total as f64, hits / total as f64))
}

/// Greedy decoding of every answer; accuracy is per answer token.
pub fn evaluate_greedy(ckpt: &Checkpoint, episodes: &[Episode]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ep in episodes {
        let toks = ep.tokens();
        let first = ep
            .loss_mask
            .iter()
            .position(|&m| m)
            .filter(|&p| p > 0)
            .ok_or_else(|| Error::InvalidParams("episode has no answer after a prefix".into()))?;
        let mut seq = toks[..first].to_vec();
        for (t, &target) in toks.iter().enumerate().skip(first) {
            let logits = crate::model::forward(ckpt, ModelInput::Tokens(&seq))?;
            let pred = crate::diagnostics::argmax(logits.row(seq.len() - 1)) as u32;
            if ep.loss_mask[t] {
                total += 1;
                hits += usize::from(pred == target);
            }
            seq.push(pred);
        }
    }
    if total == 0 {
        return Err(Error::InvalidParams("no supervised tokens".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Source of fine-tuning episodes.
#[derive(Debug, Clone)]
pub enum FinetuneData<'a> {
    Generated(DiagnosticTask),
    Corpus(&'a LmDataset),
}

impl FinetuneData<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Generated(t) => t.name(),
            Self::Corpus(_) => "language-modelling",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Generated(t) => t.vocab().size,
            Self::Corpus(d) => d.vocab_size(),
        }
    }

    pub fn context_length(&self) -> usize {
        match self {
            Self::Generated(t) => t.context_length(),
            Self::Corpus(d) => d.windows.first().map_or(1, |w| w.len() - 1),
        }
    }

    fn pad(&self) -> u32 {
        match self {
            Self::Generated(t) => t.vocab().pad.unwrap_or(0),
            Self::Corpus(d) => d.pad,
        }
    }
}

/// Small-model config that fits a fine-tuning task.
pub fn finetune_model_config(data: &FinetuneData<'_>) -> ModelConfig {
    match data {
        FinetuneData::Generated(DiagnosticTask::Multiplication { .. }) => {
            ModelConfig::token(4, 8, 512, data.context_length(), data.vocab_size())
        }
        FinetuneData::Corpus(_) | FinetuneData::Generated(DiagnosticTask::LanguageModelling { .. }) => {
            ModelConfig::token(2, 4, 64, data.context_length(), data.vocab_size())
        }
        _ => ModelConfig::small(data.context_length(), data.vocab_size()),
    }
}

/// Settings shared by the run functions.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Aggregation key written into the record; defaults to the task name.
    pub configuration: Option<String>,
    pub eval_mode: EvalMode,
    /// Called after every evaluation with `(step, loss, accuracy)`.
    pub verbose: bool,
}

fn record_skeleton(
    task: &str,
    options: &RunOptions,
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
    kind: &str,
) -> RunRecord {
    let configuration = options.configuration.clone().unwrap_or_else(|| task.to_string());
    RunRecord {
        run_id: format!("{kind}/{configuration}/{task}/seed{seed}"),
        configuration,
        task: task.to_string(),
        seed,
        model_digest: config_digest(model),
        train_digest: train.digest(),
        plan_digest: None,
        init_digest: None,
        checkpoint_digest: None,
        evals: Vec::new(),
        final_accuracy: 0.0,
        steps: 0,
        wall_time_s: 0.0,
        aborted: None,
    }
}

fn abort(mut record: RunRecord, err: Error, started: Instant) -> Error {
    record.wall_time_s = started.elapsed().as_secs_f64();
    match err {
        Error::Aborted { step, reason } => {
            record.aborted = Some(reason.clone());
            record.steps = step;
            Error::AbortedRun {
                step,
                reason,
                record: Box::new(record),
            }
        }
        other => other,
    }
}

fn log_eval(verbose: bool, id: &str, p: &EvalPoint) {
    if verbose {
        match p.length {
            Some(l) => eprintln!("{id} step {} len {l} loss {:.4} acc {:.4}", p.step, p.loss, p.accuracy),
            None => eprintln!("{id} step {} loss {:.4} acc {:.4}", p.step, p.loss, p.accuracy),
        }
    }
}

/// Fine-tunes a copy of `init` with every parameter trainable.
pub fn finetune(
    init: &Checkpoint,
    data: &FinetuneData<'_>,
    train: &TrainConfig,
    seed: u64,
    options: &RunOptions,
) -> Result<(Checkpoint, RunRecord)> {
    train.validate()?;
    let started = Instant::now();
    let task = data.name();
    let mut record = record_skeleton(task, options, seed, &init.config, train, "finetune");
    record.init_digest = Some(store::digest(init));
    record.plan_digest = init
        .provenance
        .split_whitespace()
        .find_map(|w| w.strip_prefix("plan_digest="))
        .map(str::to_string);
    if init.config.vocab_size < data.vocab_size() || init.config.context_length < data.context_length() {
        return Err(Error::InvalidConfig(format!(
            "init (vocab {}, context {}) too small for {task} (vocab {}, context {})",
            init.config.vocab_size,
            init.config.context_length,
            data.vocab_size(),
            data.context_length()
        )));
    }
    let pad = data.pad();

    let (train_windows, val_episodes): (Vec<usize>, Vec<Episode>) = match data {
        FinetuneData::Generated(t) => {
            let mut r = rng::stream(seed, "finetune/validation");
            let eps = (0..train.eval_episodes)
                .map(|_| t.episode(&mut r))
                .collect::<Result<_>>()?;
            (Vec::new(), eps)
        }
        FinetuneData::Corpus(d) => {
            let (tr, va) = d.split();
            let eps = va.iter().take(train.eval_episodes).map(|&i| d.episode(i)).collect();
            (tr, eps)
        }
    };
    if val_episodes.is_empty() {
        return Err(Error::InvalidParams("no validation episodes".into()));
    }
    let max_steps = match (train.max_steps, data) {
        (0, FinetuneData::Corpus(_)) => train_windows.len().div_ceil(train.batch_size) as u64,
        (0, _) => return Err(Error::InvalidParams("max_steps must be positive".into())),
        (n, _) => n,
    };
    let mut order = train_windows.clone();
    let mut data_rng = rng::stream(seed, "finetune/data");
    order.shuffle(&mut data_rng);

    let evaluate_now = |ckpt: &Checkpoint, step: u64| -> Result<EvalPoint> {
        let (loss, mut accuracy) = evaluate_episodes(ckpt, &val_episodes, pad)?;
        if options.eval_mode == EvalMode::Greedy {
            accuracy = evaluate_greedy(ckpt, &val_episodes)?;
        }
        Ok(EvalPoint {
            step,
            loss,
            accuracy,
            length: None,
        })
    };

    let mut trainer = Trainer::new(init.clone(), train, max_steps);
    let cfg = init.config.clone();
    let mut cursor = 0usize;
    for step in 0..max_steps {
        let episodes: Vec<Episode> = match data {
            FinetuneData::Generated(t) => (0..train.batch_size)
                .map(|_| t.episode(&mut data_rng))
                .collect::<Result<_>>()?,
            FinetuneData::Corpus(d) => {
                if order.is_empty() {
                    return Err(Error::InvalidParams("corpus has no training windows".into()));
                }
                (0..train.batch_size)
                    .map(|_| {
                        if cursor == order.len() {
                            cursor = 0;
                            order.shuffle(&mut data_rng);
                        }
                        cursor += 1;
                        d.episode(order[cursor - 1])
                    })
                    .collect()
            }
        };
        let batch = TokenBatch::pack(&episodes, pad)?;
        trainer
            .step(step, |tape, params| token_loss(tape, &cfg, params, &batch))
            .map_err(|e| abort(record.clone(), e, started))?;
        if (step + 1) % train.eval_interval == 0 && step + 1 < max_steps {
            let p = evaluate_now(&trainer.ckpt, step + 1)?;
            log_eval(options.verbose, &record.run_id, &p);
            record.evals.push(p);
        }
    }
    let p = evaluate_now(&trainer.ckpt, max_steps)?;
    log_eval(options.verbose, &record.run_id, &p);
    record.final_accuracy = p.accuracy;
    record.evals.push(p);
    record.steps = max_steps;
    let mut out = trainer.ckpt;
    out.provenance = format!("finetune task={task} seed={seed} steps={max_steps} from={}", init.provenance);
    record.checkpoint_digest = Some(store::digest(&out));
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((out, record))
}

/// Model config used to pretrain on `task` with the small architecture.
pub fn pretrain_model_config(task: ProceduralTask, train: &TrainConfig) -> ModelConfig {
    let max_len = train.curriculum.map_or(20, |c| c.max_len);
    match task.vocab_size() {
        Some(v) => ModelConfig::small(task.context_length(max_len), v),
        None => {
            let p = EcaParams::default();
            ModelConfig::binary(2, 4, 16, p.steps - 1, p.width)
        }
    }
}

struct EcaBatch {
    inputs: Vec<f32>,
    targets: Vec<f32>,
    seqs: usize,
    seq_len: usize,
}

fn eca_batch<R: Rng + ?Sized>(n: usize, params: &EcaParams, rng: &mut R) -> Result<EcaBatch> {
    let seq_len = params.steps - 1;
    let w = params.width;
    let mut inputs = Vec::with_capacity(n * seq_len * w);
    let mut targets = Vec::with_capacity(n * seq_len * w);
    for _ in 0..n {
        let rows = gen_eca_trace(params, rng)?;
        for t in 0..seq_len {
            inputs.extend(rows[t].iter().map(|&b| f32::from(b)));
            targets.extend(rows[t + 1].iter().map(|&b| f32::from(b)));
        }
    }
    Ok(EcaBatch {
        inputs,
        targets,
        seqs: n,
        seq_len,
    })
}

fn eca_logits(tape: &mut Tape, cfg: &ModelConfig, params: &ParamVars, b: &EcaBatch) -> Result<Var> {
    let h = hidden_states(tape, cfg, params, ModelInput::Binary(&b.inputs), b.seqs, b.seq_len)?;
    output_logits(tape, cfg, params, h, None)
}

/// Per-cell next-row loss and accuracy.
fn evaluate_eca(ckpt: &Checkpoint, batch: &EcaBatch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, ckpt, false);
    let logits = eca_logits(&mut tape, &ckpt.config, &params, batch)?;
    let loss = tape.bce_with_logits(logits, &batch.targets)?;
    let l = tape.value(loss).item();
    let hits = tape
        .value(logits)
        .data()
        .iter()
        .zip(&batch.targets)
        .filter(|(&x, &y)| (x >= 0.0) == (y >= 0.5))
        .count();
    Ok((f64::from(l), hits as f64 / batch.targets.len() as f64))
}

/// Pretrains a fresh model on a procedural task.
///
/// Token tasks use next-token cross-entropy on their supervised positions;
/// curriculum tasks lengthen episodes as validation accuracy crosses the
/// threshold and stop early once at the cap and above threshold, or after
/// `early_stop_patience` checks without progress. ECA uses per-cell binary
/// cross-entropy on next-row prediction.
pub fn pretrain(
    task: ProceduralTask,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    options: &RunOptions,
) -> Result<(Checkpoint, RunRecord)> {
    train.validate()?;
    if train.max_steps == 0 {
        return Err(Error::InvalidParams("max_steps must be positive".into()));
    }
    let started = Instant::now();
    let name = task.name();
    let mut record = record_skeleton(&name, options, seed, model, train, "pretrain");
    let init = init_random(model, seed)?;
    record.init_digest = Some(store::digest(&init));
    let mut trainer = Trainer::new(init, train, train.max_steps);
    let mut data_rng = rng::stream(seed, &format!("pretrain/{name}/data"));

    let mut curriculum = match (task.uses_curriculum(), train.curriculum) {
        (true, Some(c)) => Some(CurriculumState::new(c.min_len, c.max_len, c.step)),
        (true, None) => {
            return Err(Error::InvalidParams(format!("{name} pretraining needs a curriculum")))
        }
        (false, _) => None,
    };
    let needed = task
        .vocab_size()
        .map(|v| (v, task.context_length(train.curriculum.map_or(0, |c| c.max_len))));
    match (needed, model.input_mode) {
        (Some((v, ctx)), InputMode::Token) => {
            if model.vocab_size < v || model.context_length < ctx {
                return Err(Error::InvalidConfig(format!(
                    "{name} needs vocab ≥ {v} and context ≥ {ctx}"
                )));
            }
        }
        (None, InputMode::BinaryVector) => {}
        _ => return Err(Error::InputMode(format!("{name} does not match the model input mode"))),
    }
    let eca = EcaParams {
        width: model.binary_width.max(3),
        steps: model.context_length + 1,
        ..EcaParams::default()
    };
    let eca_val = if task == ProceduralTask::Eca {
        Some(eca_batch(
            train.eval_episodes,
            &eca,
            &mut rng::stream(seed, "pretrain/eca/validation"),
        )?)
    } else {
        None
    };
    let cfg = model.clone();
    let pad = task.pad_token();
    let mut steps_run = 0;
    for step in 0..train.max_steps {
        let len = curriculum.map_or(0, |c| c.current_len);
        let result = if eca_val.is_some() {
            let batch = eca_batch(train.batch_size, &eca, &mut data_rng)?;
            trainer.step(step, |tape, params| {
                let logits = eca_logits(tape, &cfg, params, &batch)?;
                Ok(tape.bce_with_logits(logits, &batch.targets)?)
            })
        } else {
            let episodes = (0..train.batch_size)
                .map(|_| task.episode(len, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = TokenBatch::pack(&episodes, pad)?;
            trainer.step(step, |tape, params| token_loss(tape, &cfg, params, &batch))
        };
        result.map_err(|e| abort(record.clone(), e, started))?;
        steps_run = step + 1;

        let last = steps_run == train.max_steps;
        if steps_run % train.eval_interval != 0 && !last {
            continue;
        }
        let (loss, accuracy) = match &eca_val {
            Some(v) => evaluate_eca(&trainer.ckpt, v)?,
            None => {
                let mut r = rng::stream(seed, &format!("pretrain/{name}/validation/{len}"));
                let eps = (0..train.eval_episodes)
                    .map(|_| task.episode(len, &mut r))
                    .collect::<Result<Vec<_>>>()?;
                evaluate_episodes(&trainer.ckpt, &eps, pad)?
            }
        };
        let point = EvalPoint {
            step: steps_run,
            loss,
            accuracy,
            length: curriculum.map(|c| c.current_len),
        };
        log_eval(options.verbose, &record.run_id, &point);
        record.evals.push(point);
        if let Some(state) = curriculum {
            if state.at_cap() && accuracy >= state.advance_threshold {
                break;
            }
            let next = curriculum_advance(state, accuracy);
            curriculum = Some(next);
            if train.early_stop_patience.is_some_and(|p| next.should_stop(p)) {
                break;
            }
        }
    }
    record.final_accuracy = record.evals.last().map_or(0.0, |p| p.accuracy);
    record.steps = steps_run;
    let mut out = trainer.ckpt;
    out.provenance = format!(
        "pretrain task={name} seed={seed} steps={steps_run}{}",
        curriculum.map_or(String::new(), |c| format!(" length={}", c.current_len))
    );
    record.checkpoint_digest = Some(store::digest(&out));
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((out, record))
}

/// Teacher-forced accuracy of `ckpt` on `n_episodes` fresh episodes.
pub fn evaluate(ckpt: &Checkpoint, task: DiagnosticTask, n_episodes: usize, seed: u64) -> Result<f64> {
    evaluate_with(ckpt, task, n_episodes, seed, EvalMode::TeacherForced)
}

pub fn evaluate_with(
    ckpt: &Checkpoint,
    task: DiagnosticTask,
    n_episodes: usize,
    seed: u64,
    mode: EvalMode,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::InvalidParams("n_episodes must be at least 1".into()));
    }
    let mut r = rng::stream(seed, &format!("evaluate/{}", task.name()));
    let eps = (0..n_episodes)
        .map(|_| task.episode(&mut r))
        .collect::<Result<Vec<_>>>()?;
    match mode {
        EvalMode::TeacherForced => Ok(evaluate_episodes(ckpt, &eps, task.vocab().pad.unwrap_or(0))?.1),
        EvalMode::Greedy => evaluate_greedy(ckpt, &eps),
    }
}

/// Per-configuration summaries, sorted by configuration then task.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<Summary>> {
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.configuration.clone(), r.task.clone()))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| aggregate(g)).collect()
}
