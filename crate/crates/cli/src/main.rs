use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use proctrain::diagnostics::{DiagnosticTask, LmDataset};
use proctrain::model::{group_of, init_random, Checkpoint, ComponentGroup};
use proctrain::procgen::ProceduralTask;
use proctrain::store;
use proctrain::surgery::{build_init, TransferPlan};
use proctrain::training::{
    evaluate_episodes, evaluate_with, finetune, finetune_model_config, pretrain, pretrain_model_config,
    read_records, EvalMode, FinetuneData, RecordCollector, RunOptions, RunRecord,
};
use proctrain::Error;
use proctrain_cli::config::{self, ExperimentConfig};
use proctrain_cli::replicate::{self, Pipeline, TableId};
use proctrain_cli::report::RANDOM_LABEL;

#[derive(Parser)]
#[command(name = "proctrain", version, about = "Procedural pretraining, weight surgery and diagnostic fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on a procedural task.
    Pretrain(PretrainArgs),
    /// Assemble an initialisation from donor checkpoints.
    Surgery(SurgeryArgs),
    /// Fine-tune on a diagnostic task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a diagnostic task.
    Eval(EvalArgs),
    /// Summarise run records into CSV and text tables.
    Report(ReportArgs),
    /// Run the full pipeline behind one published result.
    Replicate(ReplicateArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk | paper
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory for checkpoints and records.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scale {
            cfg.scale = Some(s.clone());
        }
        if let Some(p) = &self.preset {
            cfg.preset = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seeds = Some(vec![s]);
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = Some(s.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// identity, set, stack, eca, K-dyck, K-dyck-shuffle
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SurgeryArgs {
    /// Transfer plan (TOML).
    #[arg(long)]
    plan: PathBuf,
    /// Donor checkpoint as NAME=PATH; repeatable.
    #[arg(long = "donor")]
    donors: Vec<String>,
    /// Downstream task whose model shape the init must fit.
    #[arg(long)]
    task: String,
    /// Text corpus, for the language-modelling task.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides the plan's fresh-initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "init.ptck")]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    task: Option<String>,
    /// Initial checkpoint, shared by all seeds.
    #[arg(long, conflicts_with = "plan")]
    init: Option<PathBuf>,
    /// Transfer plan built per seed (its seed is replaced by the run seed).
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long = "donor")]
    donors: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Configuration label used to aggregate records.
    #[arg(long)]
    label: Option<String>,
    /// Score answers by greedy generation instead of teacher forcing.
    #[arg(long)]
    greedy: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 512)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Record files or glob patterns.
    #[arg(required = true)]
    records: Vec<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    /// fig2 | tables3-6 | table7 | table1
    table: String,
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Comma-separated seeds; 3 at desk scale and 10 at paper scale by default.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adds the language-modelling column to table7.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Print the pipeline without training.
    #[arg(long)]
    dry_run: bool,
}

fn load_corpus(path: &Path) -> Result<LmDataset> {
    let DiagnosticTask::LanguageModelling { seq_len, vocab_size } = DiagnosticTask::LANGUAGE_MODELLING else {
        unreachable!()
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(LmDataset::build(&text, vocab_size, seq_len)?)
}

/// Language modelling reads `--corpus`; every other task is generated.
fn finetune_data<'a>(task: &str, corpus: Option<&'a LmDataset>) -> Result<FinetuneData<'a>> {
    let t = DiagnosticTask::parse(task)?;
    Ok(match (t, corpus) {
        (DiagnosticTask::LanguageModelling { .. }, Some(c)) => FinetuneData::Corpus(c),
        (DiagnosticTask::LanguageModelling { .. }, None) => bail!("language modelling needs --corpus"),
        (t, _) => FinetuneData::Generated(t),
    })
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn report_run(rec: &RunRecord) {
    match &rec.aborted {
        Some(reason) => eprintln!("{} seed {}: aborted ({reason})", rec.run_id, rec.seed),
        None => println!(
            "{} seed {}: accuracy {:.4} after {} steps",
            rec.run_id, rec.seed, rec.final_accuracy, rec.steps
        ),
    }
}

/// Pushes the record of a finished or aborted run; other errors propagate.
fn settle(
    result: proctrain::Result<(Checkpoint, RunRecord)>,
    sink: &RecordCollector,
) -> Result<Option<Checkpoint>> {
    match result {
        Ok((ck, rec)) => {
            report_run(&rec);
            sink.push(rec)?;
            Ok(Some(ck))
        }
        Err(Error::AbortedRun { record, .. }) => {
            report_run(&record);
            sink.push(*record)?;
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<bool> {
    let cfg = args.common.resolve()?;
    let name = args.task.or(cfg.pretrain_task.clone()).context("--task is required")?;
    let task = ProceduralTask::parse(&name)?;
    let scale = config::parse_scale(cfg.scale.as_deref())?;
    let preset = cfg.preset.clone().unwrap_or_else(|| config::pretrain_preset(task).into());
    let tc = config::train_config(&preset, scale, &cfg.train)?;
    let model = cfg.model.apply(pretrain_model_config(task, &tc));
    let out = out_dir(&cfg)?;
    let sink = RecordCollector::with_file(out.join("records.ndjson"));
    let opts = RunOptions {
        configuration: cfg.label.clone(),
        verbose: true,
        ..RunOptions::default()
    };
    let mut ok = true;
    for seed in cfg.seeds.clone().unwrap_or(vec![0]) {
        match settle(pretrain(task, &model, &tc, seed, &opts), &sink)? {
            Some(ck) => {
                let path = out.join(format!("{}-seed{seed}.{}", task.name(), store::EXTENSION));
                store::save(&ck, &path)?;
                println!("saved {} ({})", path.display(), store::digest(&ck));
            }
            None => ok = false,
        }
    }
    Ok(ok)
}

fn cmd_surgery(args: SurgeryArgs) -> Result<bool> {
    let mut plan = config::load_plan(&args.plan)?;
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    let donors = config::load_donors(&args.donors, &Default::default())?;
    let corpus = args.corpus.as_deref().map(load_corpus).transpose()?;
    let data = finetune_data(&args.task, corpus.as_ref())?;
    let ck = build_init(&plan, &donors, &finetune_model_config(&data))?;
    store::save(&ck, &args.out)?;
    println!("saved {} ({})", args.out.display(), store::digest(&ck));
    for g in ComponentGroup::ALL {
        let names: Vec<&str> = ck.names().filter(|n| group_of(n).is_ok_and(|x| x == g)).collect();
        println!(
            "  {} from {:<12} {}",
            g.letter(),
            match plan.source(g) {
                proctrain::surgery::Source::Fresh => "fresh".to_string(),
                proctrain::surgery::Source::Donor(d) => d.clone(),
            },
            store::digest_tensors(&ck, names)
        );
    }
    Ok(true)
}

fn cmd_finetune(args: FinetuneArgs) -> Result<bool> {
    let cfg = args.common.resolve()?;
    let task = args.task.or(cfg.finetune_task.clone()).context("--task is required")?;
    let corpus_path = args.corpus.or(cfg.corpus.clone());
    let corpus = corpus_path.as_deref().map(load_corpus).transpose()?;
    let data = finetune_data(&task, corpus.as_ref())?;
    let scale = config::parse_scale(cfg.scale.as_deref())?;
    let preset = cfg.preset.clone().unwrap_or_else(|| config::finetune_preset(&task).into());
    let tc = config::train_config(&preset, scale, &cfg.train)?;
    let model = finetune_model_config(&data);

    let plan: Option<TransferPlan> = match &args.plan {
        Some(p) => Some(config::load_plan(p)?),
        None => cfg.transfer_plan.clone(),
    };
    let init = args.init.as_deref().map(store::load).transpose()?;
    let donors = if plan.is_some() {
        config::load_donors(&args.donors, &cfg.donors)?
    } else {
        Default::default()
    };
    let label = args
        .label
        .or(cfg.label.clone())
        .or_else(|| plan.as_ref().map(TransferPlan::label))
        .unwrap_or_else(|| if init.is_some() { "checkpoint".into() } else { RANDOM_LABEL.into() });

    let out = out_dir(&cfg)?;
    let sink = RecordCollector::with_file(out.join("records.ndjson"));
    let opts = RunOptions {
        configuration: Some(label),
        eval_mode: if args.greedy { EvalMode::Greedy } else { EvalMode::TeacherForced },
        verbose: true,
    };
    let mut ok = true;
    for seed in cfg.seeds.clone().unwrap_or(vec![0]) {
        let start = match (&init, &plan) {
            (Some(ck), _) => ck.clone(),
            (None, Some(p)) => build_init(&TransferPlan { seed, ..p.clone() }, &donors, &model)?,
            (None, None) => init_random(&model, seed)?,
        };
        match settle(finetune(&start, &data, &tc, seed, &opts), &sink)? {
            Some(ck) => {
                let path = out.join(format!("{task}-seed{seed}.{}", store::EXTENSION));
                store::save(&ck, &path)?;
            }
            None => ok = false,
        }
    }
    Ok(ok)
}

fn cmd_eval(args: EvalArgs) -> Result<bool> {
    let ck = store::load(&args.ckpt)?;
    let mode = if args.greedy { EvalMode::Greedy } else { EvalMode::TeacherForced };
    let task = DiagnosticTask::parse(&args.task)?;
    let acc = match task {
        DiagnosticTask::LanguageModelling { .. } => {
            let path = args.corpus.as_deref().context("language modelling needs --corpus")?;
            let ds = load_corpus(path)?;
            let (_, held_out) = ds.split();
            let eps: Vec<_> = held_out.iter().take(args.episodes).map(|&i| ds.episode(i)).collect();
            if eps.is_empty() {
                bail!("corpus has no held-out windows");
            }
            evaluate_episodes(&ck, &eps, ds.pad)?.1
        }
        t => evaluate_with(&ck, t, args.episodes, args.seed, mode)?,
    };
    println!("{} accuracy {acc:.6} over {} episodes", task.name(), args.episodes);
    Ok(true)
}

fn cmd_report(args: ReportArgs) -> Result<bool> {
    let mut files = Vec::new();
    for pattern in &args.records {
        let matched: Vec<PathBuf> = glob::glob(pattern)
            .with_context(|| format!("bad pattern `{pattern}`"))?
            .collect::<std::result::Result<_, _>>()?;
        files.extend(matched);
    }
    if files.is_empty() {
        bail!("no record files match {:?}", args.records);
    }
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_records(f).with_context(|| format!("reading {}", f.display()))?);
    }
    let report = replicate::write_report(&records, &args.out)?;
    print!("{}", report.to_text());
    Ok(true)
}

fn cmd_replicate(args: ReplicateArgs) -> Result<bool> {
    let table = TableId::parse(&args.table)?;
    let scale = config::parse_scale(Some(&args.scale))?;
    let seeds = args.seeds.unwrap_or_else(|| {
        let n = if scale == proctrain::training::Scale::Paper { 10 } else { 3 };
        (0..n).collect()
    });
    let out = args.out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", args.table, args.scale)));
    let pipeline = Pipeline::new(table, scale, seeds, args.corpus.is_some());
    if args.dry_run {
        print!("{}", pipeline.describe(&out));
        return Ok(true);
    }
    let corpus = args.corpus.as_deref().map(load_corpus).transpose()?;
    let outcome = replicate::run(&pipeline, &out, corpus.as_ref())?;
    print!("{}", std::fs::read_to_string(out.join("report.txt"))?);
    eprintln!(
        "{} runs trained, {} reused, {} aborted; results in {}",
        outcome.ran,
        outcome.reused,
        outcome.aborted,
        out.display()
    );
    Ok(outcome.aborted == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Surgery(a) => cmd_surgery(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Replicate(a) => cmd_replicate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more runs aborted");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
