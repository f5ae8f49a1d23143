//! Pretrain → surgery → fine-tune → report pipelines for the published tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context, Result};
use proctrain::diagnostics::{DiagnosticTask, LmDataset};
use proctrain::model::Checkpoint;
use proctrain::procgen::ProceduralTask;
use proctrain::store;
use proctrain::surgery::{build_init, embedding_policy_for, PerturbationKind, PerturbationSpec, TransferPlan};
use proctrain::training::{
    finetune, finetune_model_config, pretrain, pretrain_model_config, read_records, run_parallel, worker_threads,
    FinetuneData, RecordCollector, RunOptions, RunRecord, Scale, TrainConfig,
};
use proctrain::Error;

use crate::config::{finetune_preset, pretrain_preset};
use crate::report::{Report, PERTURBATION_SEP, RANDOM_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableId {
    Fig2,
    Tables3To6,
    Table7,
    Table1,
}

impl TableId {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fig2" => Self::Fig2,
            "tables3-6" => Self::Tables3To6,
            "table7" => Self::Table7,
            "table1" => Self::Table1,
            _ => bail!("unknown result `{s}` (fig2, tables3-6, table7, table1)"),
        })
    }
}

/// How an arm's initialisation is assembled from donors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recipe {
    Random,
    Full(ProceduralTask),
    AttentionOnly(ProceduralTask),
    MlpOnly(ProceduralTask),
    /// Attention from the first donor, MLPs from the second.
    Compose(ProceduralTask, ProceduralTask),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arm {
    pub recipe: Recipe,
    pub perturbation: Option<PerturbationKind>,
}

impl Arm {
    fn plain(recipe: Recipe) -> Self {
        Self {
            recipe,
            perturbation: None,
        }
    }

    pub fn donors(&self) -> Vec<ProceduralTask> {
        match self.recipe {
            Recipe::Random => vec![],
            Recipe::Full(d) | Recipe::AttentionOnly(d) | Recipe::MlpOnly(d) => vec![d],
            Recipe::Compose(a, f) => vec![a, f],
        }
    }

    pub fn plan(&self, target: &DiagnosticTask, seed: u64) -> TransferPlan {
        let plan = match self.recipe {
            Recipe::Random => TransferPlan::random(seed),
            Recipe::Full(d) => TransferPlan::full(&d.name(), embedding_policy_for(d, target), seed),
            Recipe::AttentionOnly(d) => TransferPlan::attention_only(&d.name(), seed),
            Recipe::MlpOnly(d) => TransferPlan::mlp_only(&d.name(), seed),
            Recipe::Compose(a, f) => TransferPlan::compose(&a.name(), &f.name(), seed),
        };
        match self.perturbation {
            Some(kind) => plan.with_perturbation(PerturbationSpec { kind, seed, scope: None }),
            None => plan,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.recipe {
            Recipe::Random => f.write_str(RANDOM_LABEL)?,
            Recipe::Full(d) => write!(f, "{} (full)", d.name())?,
            Recipe::AttentionOnly(d) => write!(f, "{} (attention only)", d.name())?,
            Recipe::MlpOnly(d) => write!(f, "{} (mlp only)", d.name())?,
            Recipe::Compose(a, m) => write!(f, "{} (attention) + {} (mlps)", a.name(), m.name())?,
        }
        match self.perturbation {
            Some(PerturbationKind::GaussianNoise { sigma }) => write!(f, "{PERTURBATION_SEP}noise {sigma}"),
            Some(PerturbationKind::PerTensorShuffle) => write!(f, "{PERTURBATION_SEP}shuffled"),
            Some(PerturbationKind::PerLayerShuffle) => write!(f, "{PERTURBATION_SEP}shuffled per layer"),
            None => Ok(()),
        }
    }
}

/// Downstream task of a fine-tuning cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Task(DiagnosticTask),
    /// Language modelling on the `--corpus` file.
    Corpus,
}

impl Target {
    fn name(&self) -> &'static str {
        match self {
            Self::Task(t) => t.name(),
            Self::Corpus => "language-modelling",
        }
    }

    fn policy_task(&self) -> DiagnosticTask {
        match self {
            Self::Task(t) => *t,
            Self::Corpus => DiagnosticTask::LANGUAGE_MODELLING,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub arm: Arm,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub donors: Vec<ProceduralTask>,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub scale: Scale,
}

fn dyck(k: u32) -> ProceduralTask {
    ProceduralTask::Dyck { k }
}

fn shuffle(k: u32) -> ProceduralTask {
    ProceduralTask::DyckShuffle { k }
}

use ProceduralTask::{Eca, Identity, Set, Stack};

/// Cells of one published result.
pub fn cells(table: TableId, with_corpus: bool) -> Vec<Cell> {
    let algorithmic = DiagnosticTask::ALGORITHMIC.map(Target::Task);
    let grid = |arms: &[Arm], targets: &[Target]| -> Vec<Cell> {
        targets
            .iter()
            .flat_map(|&target| arms.iter().map(move |&arm| Cell { arm, target }))
            .collect()
    };
    let random = Arm::plain(Recipe::Random);
    match table {
        TableId::Fig2 => {
            let mut arms = vec![random];
            arms.extend([dyck(4), dyck(16), shuffle(16), Stack, Identity, Set, Eca].map(|d| Arm::plain(Recipe::Full(d))));
            grid(&arms, &algorithmic)
        }
        TableId::Tables3To6 => {
            let rows: [(DiagnosticTask, [ProceduralTask; 6]); 4] = [
                (DiagnosticTask::HAYSTACK, [dyck(4), shuffle(16), Stack, Identity, Set, Eca]),
                (DiagnosticTask::ADDITION, [dyck(16), shuffle(16), Stack, Identity, Set, Eca]),
                (DiagnosticTask::REVERSED_ADDITION, [dyck(16), shuffle(8), Stack, Identity, Set, Eca]),
                (DiagnosticTask::SORTING, [dyck(8), shuffle(8), Stack, Identity, Set, Eca]),
            ];
            rows.iter()
                .flat_map(|(task, donors)| {
                    let mut arms = vec![random];
                    for &d in donors {
                        arms.extend([Recipe::Full(d), Recipe::MlpOnly(d), Recipe::AttentionOnly(d)].map(Arm::plain));
                    }
                    grid(&arms, &[Target::Task(*task)])
                })
                .collect()
        }
        TableId::Table7 => {
            let mut best = vec![
                (Target::Task(DiagnosticTask::HAYSTACK), Recipe::AttentionOnly(Stack)),
                (Target::Task(DiagnosticTask::ADDITION), Recipe::Full(dyck(16))),
                (Target::Task(DiagnosticTask::REVERSED_ADDITION), Recipe::Full(shuffle(8))),
                (Target::Task(DiagnosticTask::SORTING), Recipe::Full(dyck(8))),
            ];
            if with_corpus {
                best.push((Target::Corpus, Recipe::Full(dyck(4))));
            }
            let perturbations = [
                None,
                Some(PerturbationKind::PerTensorShuffle),
                Some(PerturbationKind::GaussianNoise { sigma: 0.01 }),
                Some(PerturbationKind::GaussianNoise { sigma: 0.05 }),
                Some(PerturbationKind::GaussianNoise { sigma: 0.10 }),
            ];
            best.into_iter()
                .flat_map(|(target, recipe)| {
                    let mut arms = vec![random];
                    arms.extend(perturbations.map(|perturbation| Arm { recipe, perturbation }));
                    grid(&arms, &[target])
                })
                .collect()
        }
        TableId::Table1 => {
            let arms = [
                random,
                Arm::plain(Recipe::Full(Set)),
                Arm::plain(Recipe::AttentionOnly(Set)),
                Arm::plain(Recipe::Full(Eca)),
                Arm::plain(Recipe::MlpOnly(Eca)),
                Arm::plain(Recipe::Compose(Set, Eca)),
            ];
            grid(&arms, &algorithmic)
        }
    }
}

impl Pipeline {
    pub fn new(table: TableId, scale: Scale, seeds: Vec<u64>, with_corpus: bool) -> Self {
        let cells = cells(table, with_corpus);
        let mut donors = Vec::new();
        for c in &cells {
            for d in c.arm.donors() {
                if !donors.contains(&d) {
                    donors.push(d);
                }
            }
        }
        Self {
            donors,
            cells,
            seeds,
            scale,
        }
    }

    /// Human-readable DAG of the work, without running anything.
    pub fn describe(&self, out: &Path) -> String {
        let mut s = String::new();
        let scale = format!("{:?}", self.scale).to_lowercase();
        for d in &self.donors {
            s += &format!(
                "pretrain {} [{} {scale}, seed 0] -> {}\n",
                d.name(),
                pretrain_preset(*d),
                donor_path(out, *d).display()
            );
        }
        for c in &self.cells {
            let deps: Vec<String> = c.arm.donors().iter().map(ProceduralTask::name).collect();
            s += &format!(
                "finetune `{}` on {} [{} {scale}, seeds {:?}]{}\n",
                c.arm,
                c.target.name(),
                finetune_preset(c.target.name()),
                self.seeds,
                if deps.is_empty() { String::new() } else { format!(" <- {}", deps.join(", ")) }
            );
        }
        s += &format!(
            "report {} runs -> {}, {}\n",
            self.cells.len() * self.seeds.len(),
            out.join("report.csv").display(),
            out.join("report.txt").display()
        );
        s
    }
}

fn donor_path(out: &Path, d: ProceduralTask) -> PathBuf {
    out.join("donors").join(format!("{}.{}", d.name(), store::EXTENSION))
}

/// Outcome counts of a pipeline run.
#[derive(Debug, Default)]
pub struct Outcome {
    pub ran: usize,
    pub reused: usize,
    pub aborted: usize,
}

/// Runs the pipeline into `out`. Donors and finished (configuration, task,
/// seed) cells already present in `out` are reused, so an interrupted run
/// resumes where it stopped.
pub fn run(p: &Pipeline, out: &Path, corpus: Option<&LmDataset>) -> Result<Outcome> {
    std::fs::create_dir_all(out.join("donors")).with_context(|| format!("creating {}", out.display()))?;
    let mut outcome = Outcome::default();

    let mut donors: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let pre_records = RecordCollector::with_file(out.join("pretrain.ndjson"));
    for &d in &p.donors {
        let path = donor_path(out, d);
        let ck = if path.exists() {
            store::load(&path)?
        } else {
            let tc = TrainConfig::preset(pretrain_preset(d), p.scale)?;
            let model = pretrain_model_config(d, &tc);
            eprintln!("pretraining {} ...", d.name());
            let (ck, rec) = pretrain(d, &model, &tc, 0, &RunOptions::default())
                .with_context(|| format!("pretraining {}", d.name()))?;
            eprintln!("pretrained {}: accuracy {:.4} after {} steps", d.name(), rec.final_accuracy, rec.steps);
            pre_records.push(rec)?;
            store::save(&ck, &path)?;
            ck
        };
        donors.insert(d.name(), ck);
    }

    let records_path = out.join("records.ndjson");
    let done: BTreeSet<(String, String, u64)> = if records_path.exists() {
        read_records(&records_path)?
            .into_iter()
            .filter(|r| r.aborted.is_none())
            .map(|r| (r.configuration, r.task, r.seed))
            .collect()
    } else {
        BTreeSet::new()
    };
    let sink = RecordCollector::with_file(&records_path);

    let mut jobs = Vec::new();
    for c in &p.cells {
        if c.target == Target::Corpus && corpus.is_none() {
            bail!("language-modelling cells need --corpus");
        }
        for &seed in &p.seeds {
            if done.contains(&(c.arm.to_string(), c.target.name().to_string(), seed)) {
                outcome.reused += 1;
                continue;
            }
            jobs.push((c.clone(), seed));
        }
    }
    let total = jobs.len();
    let finished = AtomicUsize::new(0);
    let (donors, sink, finished, scale) = (&donors, &sink, &finished, p.scale);
    let work: Vec<_> = jobs
        .into_iter()
        .map(|(cell, seed)| {
            move || -> Result<bool> {
                let data = match cell.target {
                    Target::Task(t) => FinetuneData::Generated(t),
                    Target::Corpus => FinetuneData::Corpus(corpus.expect("checked above")),
                };
                let cfg = finetune_model_config(&data);
                let init = build_init(&cell.arm.plan(&cell.target.policy_task(), seed), donors, &cfg)?;
                let tc = TrainConfig::preset(finetune_preset(cell.target.name()), scale)?;
                let opts = RunOptions {
                    configuration: Some(cell.arm.to_string()),
                    ..RunOptions::default()
                };
                let (rec, ok) = match finetune(&init, &data, &tc, seed, &opts) {
                    Ok((_, rec)) => (rec, true),
                    Err(Error::AbortedRun { record, .. }) => (*record, false),
                    Err(e) => return Err(e.into()),
                };
                let n = finished.fetch_add(1, Ordering::SeqCst) + 1;
                eprintln!(
                    "[{n}/{total}] {} on {} seed {seed}: {}",
                    cell.arm,
                    cell.target.name(),
                    rec.aborted.as_deref().map_or(format!("{:.1}%", 100.0 * rec.final_accuracy), |r| format!("aborted ({r})"))
                );
                sink.push(rec)?;
                Ok(ok)
            }
        })
        .collect();
    for r in run_parallel(work, worker_threads()) {
        if r? {
            outcome.ran += 1;
        } else {
            outcome.aborted += 1;
        }
    }

    write_report(&read_records(&records_path)?, out)?;
    Ok(outcome)
}

/// Writes `report.csv`, `report.txt` and, with perturbation runs, `relative.csv`.
pub fn write_report(records: &[RunRecord], out: &Path) -> Result<Report> {
    let report = Report::build(records)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.csv"), report.to_csv()?)?;
    std::fs::write(out.join("report.txt"), report.to_text())?;
    if !report.relative.is_empty() {
        std::fs::write(out.join("relative.csv"), report.relative_csv()?)?;
    }
    Ok(report)
}
