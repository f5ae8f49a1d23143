use std::path::Path;
use std::process::{Command, Output};

use proctrain::model::{group_of, ComponentGroup};
use proctrain::store;
use proctrain::training::{read_records, RunRecord};
use proctrain_cli::replicate::{cells, Pipeline, Recipe, TableId};
use proctrain_cli::report::Report;

fn proctrain(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proctrain"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got:\n{}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK: &str = "[train]\nmax_steps = 20\neval_interval = 10\neval_episodes = 8\nbatch_size = 8\n";

fn record(conf: &str, task: &str, seed: u64, acc: f64) -> RunRecord {
    RunRecord {
        run_id: format!("{conf}/{task}/{seed}"),
        configuration: conf.into(),
        task: task.into(),
        seed,
        model_digest: String::new(),
        train_digest: String::new(),
        plan_digest: None,
        init_digest: None,
        checkpoint_digest: None,
        evals: vec![],
        final_accuracy: acc,
        steps: 1,
        wall_time_s: 0.0,
        aborted: None,
    }
}

#[test]
fn report_two_seeds_one_row() {
    let r = Report::build(&[record("a", "sorting", 0, 0.5), record("a", "sorting", 1, 0.7)]).unwrap();
    assert_eq!(r.summaries.len(), 1);
    assert!((r.summaries[0].mean - 0.6).abs() < 1e-12);
    assert!((r.summaries[0].std - 0.02f64.sqrt()).abs() < 1e-12);
    let text = r.to_text();
    assert!(text.contains("60.0 ± 14.1"), "{text}");
    assert!(Report::build(&[]).is_err());
}

#[test]
fn report_csv_round_trips_six_decimals() {
    let recs = vec![
        record("x, with comma", "haystack", 0, 0.123_456_4),
        record("x, with comma", "haystack", 1, 0.5),
        record("random init", "haystack", 0, 0.1),
    ];
    let r = Report::build(&recs).unwrap();
    let csv_text = r.to_csv().unwrap();
    let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, s) in rows.iter().zip(&r.summaries) {
        assert_eq!(&row[0], s.configuration);
        assert_eq!(row[2].parse::<usize>().unwrap(), s.n);
        let mean: f64 = row[3].parse().unwrap();
        assert_eq!(format!("{mean:.6}"), &row[3]);
        assert!((mean - s.mean).abs() <= 5e-7);
    }
}

#[test]
fn report_relative_improvement_and_order_independence() {
    let mut recs = vec![
        record("random init", "haystack", 0, 0.113),
        record("stack (attention only)", "haystack", 0, 0.989),
        record("stack (attention only) | shuffled", "haystack", 0, 0.172),
        record("stack (attention only) | noise 0.05", "haystack", 0, 0.508),
    ];
    let a = Report::build(&recs).unwrap();
    let shuffled = a.relative.iter().find(|s| s.configuration.ends_with("shuffled")).unwrap();
    assert!((shuffled.score - 5.9 / 87.6).abs() < 1e-9);
    assert_eq!(a.relative.len(), 2);
    recs.reverse();
    let b = Report::build(&recs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
    assert!(a.relative_csv().unwrap().contains("0.067352"));
}

#[test]
fn replicate_cells_match_the_published_layouts() {
    let t1 = cells(TableId::Table1, false);
    assert_eq!(t1.len(), 6 * 4);
    assert!(t1.iter().any(|c| matches!(c.arm.recipe, Recipe::Compose(..))));
    let fig2 = Pipeline::new(TableId::Fig2, proctrain::training::Scale::Desk, vec![0, 1, 2], false);
    assert_eq!(fig2.donors.len(), 7);
    assert_eq!(fig2.cells.len(), 8 * 4);
    assert_eq!(cells(TableId::Tables3To6, false).len(), 4 * (1 + 6 * 3));
    assert_eq!(cells(TableId::Table7, false).len(), 4 * 6);
    assert_eq!(cells(TableId::Table7, true).len(), 5 * 6);
}

#[test]
fn replicate_dry_run_prints_the_dag() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&proctrain(&["replicate", "table1", "--scale", "desk", "--dry-run"], dir.path()));
    assert!(out.contains("pretrain set"));
    assert!(out.contains("pretrain eca"));
    assert!(out.contains("finetune `set (attention) + eca (mlps)` on sorting"));
    assert!(out.contains("<- set, eca"));
    assert!(out.contains("report 72 runs"));
    assert!(!dir.path().join("runs").exists(), "dry run wrote files");
    fails(&proctrain(&["replicate", "table9", "--dry-run"], dir.path()));
}

#[test]
fn pretrain_surgery_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("quick.toml"), QUICK).unwrap();
    ok(&proctrain(
        &["pretrain", "--task", "identity", "--preset", "pretrain-stack", "--seed", "0", "--config", "quick.toml", "--out", "pre"],
        d,
    ));
    let donor_path = d.join("pre/identity-seed0.ptck");
    let donor = store::load(&donor_path).unwrap();
    let recs = read_records(&d.join("pre/records.ndjson")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].steps, 20);

    std::fs::write(
        d.join("attn_only.plan"),
        "embedding = \"fresh\"\nmlp = \"fresh\"\nseed = 4\n\n[attention]\ndonor = \"id\"\n",
    )
    .unwrap();
    let out = ok(&proctrain(
        &["surgery", "--plan", "attn_only.plan", "--donor", "id=pre/identity-seed0.ptck", "--task", "sorting", "--out", "init.ptck"],
        d,
    ));
    assert!(out.contains("A from id"), "{out}");
    let init = store::load(&d.join("init.ptck")).unwrap();
    let attn: Vec<&str> = init.names().filter(|n| group_of(n).unwrap() == ComponentGroup::Attention).collect();
    assert_eq!(store::digest_tensors(&init, attn.clone()), store::digest_tensors(&donor, attn));
    assert!(init.provenance.contains("plan_digest="));

    ok(&proctrain(
        &["finetune", "--task", "sorting", "--init", "init.ptck", "--config", "quick.toml", "--seeds", "0,1", "--out", "ft"],
        d,
    ));
    let recs = read_records(&d.join("ft/records.ndjson")).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.configuration == "checkpoint" && r.task == "sorting"));

    let eval = |p: &str| ok(&proctrain(&["eval", "--ckpt", p, "--task", "sorting", "--episodes", "64"], d));
    let first = eval("ft/sorting-seed0.ptck");
    assert_eq!(first, eval("ft/sorting-seed0.ptck"));
    assert!(first.starts_with("sorting accuracy "));

    let text = ok(&proctrain(&["report", "ft/*.ndjson", "--out", "rep"], d));
    assert!(text.contains("checkpoint"));
    assert!(d.join("rep/report.csv").exists() && d.join("rep/report.txt").exists());
}

#[test]
fn finetune_from_plan_with_random_default_label() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("quick.toml"), format!("finetune_task = \"haystack\"\nseeds = [3]\n{QUICK}")).unwrap();
    ok(&proctrain(&["finetune", "--config", "quick.toml", "--out", "r"], d));
    let recs = read_records(&d.join("r/records.ndjson")).unwrap();
    assert_eq!(recs[0].configuration, "random init");
    assert_eq!(recs[0].seed, 3);
}

#[test]
fn actionable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nmomentum = 0.9\n").unwrap();
    let err = fails(&proctrain(&["finetune", "--task", "sorting", "--config", "bad.toml"], d));
    assert!(err.contains("momentum"), "{err}");
    std::fs::write(d.join("typo.toml"), "finetune_tsk = \"sorting\"\n").unwrap();
    let err = fails(&proctrain(&["finetune", "--config", "typo.toml"], d));
    assert!(err.contains("finetune_tsk"), "{err}");

    std::fs::write(d.join("p.plan"), "embedding = \"fresh\"\nmlp = \"fresh\"\n[attention]\ndonor = \"id\"\n").unwrap();
    let err = fails(&proctrain(&["surgery", "--plan", "p.plan", "--task", "sorting"], d));
    assert!(err.contains("missing donor `id`"), "{err}");
    let err = fails(&proctrain(&["surgery", "--plan", "p.plan", "--donor", "id", "--task", "sorting"], d));
    assert!(err.contains("NAME=PATH"), "{err}");
    std::fs::write(d.join("q.plan"), "embedding = \"fresh\"\nmlp = \"fresh\"\nattention = \"fresh\"\nextra = 1\n").unwrap();
    let err = fails(&proctrain(&["surgery", "--plan", "q.plan", "--task", "sorting"], d));
    assert!(err.contains("extra"), "{err}");
    let err = fails(&proctrain(&["report", "nothing/*.ndjson"], d));
    assert!(err.contains("no record files"), "{err}");
    let err = fails(&proctrain(&["finetune", "--task", "language-modelling"], d));
    assert!(err.contains("--corpus"), "{err}");
}

#[test]
fn aborted_run_exits_nonzero_but_keeps_its_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("hot.toml"), format!("{QUICK}learning_rate = 1e30\n")).unwrap();
    let err = fails(&proctrain(&["finetune", "--task", "sorting", "--config", "hot.toml", "--out", "r"], d));
    assert!(err.contains("aborted"), "{err}");
    let recs = read_records(&d.join("r/records.ndjson")).unwrap();
    assert!(recs[0].aborted.is_some());
}
