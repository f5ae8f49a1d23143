//! Summary tables built from run records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use anyhow::{bail, Result};
use proctrain::surgery::relative_improvement;
use proctrain::training::{summarize, RunRecord, Summary};

/// Configuration label of randomly initialised runs.
pub const RANDOM_LABEL: &str = "random init";
/// Separates a base configuration from its perturbation, e.g. `stack (attention only) | noise 0.05`.
pub const PERTURBATION_SEP: &str = " | ";

const TASK_ORDER: [&str; 6] = [
    "haystack",
    "addition",
    "reversed-addition",
    "multiplication",
    "sorting",
    "language-modelling",
];

fn task_rank(t: &str) -> (usize, &str) {
    (TASK_ORDER.iter().position(|x| *x == t).unwrap_or(TASK_ORDER.len()), t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeScore {
    pub configuration: String,
    pub task: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<Summary>,
    pub relative: Vec<RelativeScore>,
}

impl Report {
    /// Aborted runs are left out of the summaries.
    pub fn build(records: &[RunRecord]) -> Result<Self> {
        if records.is_empty() {
            bail!("no run records to report");
        }
        let finished: Vec<RunRecord> = records.iter().filter(|r| r.aborted.is_none()).cloned().collect();
        if finished.is_empty() {
            bail!("all {} run records are aborted runs", records.len());
        }
        let summaries = summarize(&finished)?;
        let mean: BTreeMap<(&str, &str), f64> = summaries
            .iter()
            .map(|s| ((s.configuration.as_str(), s.task.as_str()), s.mean))
            .collect();
        let mut relative = Vec::new();
        for s in &summaries {
            let Some((base, _)) = s.configuration.split_once(PERTURBATION_SEP) else {
                continue;
            };
            let (Some(&rand), Some(&pre)) = (mean.get(&(RANDOM_LABEL, &*s.task)), mean.get(&(base, &*s.task))) else {
                continue;
            };
            if let Ok(score) = relative_improvement(s.mean, rand, pre) {
                relative.push(RelativeScore {
                    configuration: s.configuration.clone(),
                    task: s.task.clone(),
                    score,
                });
            }
        }
        Ok(Self { summaries, relative })
    }

    /// `configuration,task,n,mean,std`; accuracies as fractions, 6 decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["configuration", "task", "n", "mean", "std"])?;
        for s in &self.summaries {
            w.write_record([
                s.configuration.clone(),
                s.task.clone(),
                s.n.to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// `configuration,task,score` for perturbation runs, 6 decimals.
    pub fn relative_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["configuration", "task", "score"])?;
        for r in &self.relative {
            w.write_record([r.configuration.clone(), r.task.clone(), format!("{:.6}", r.score)])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Aligned tables: configurations as rows, tasks as columns.
    pub fn to_text(&self) -> String {
        let mut out = String::from("Accuracy (%), mean ± std over seeds\n\n");
        let cells: BTreeMap<(&str, &str), String> = self
            .summaries
            .iter()
            .map(|s| {
                let cell = format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std);
                ((s.configuration.as_str(), s.task.as_str()), cell)
            })
            .collect();
        out += &table(&cells);
        if !self.relative.is_empty() {
            out += "\nRelative improvement (1 = pretrained, 0 = random init)\n\n";
            let cells = self
                .relative
                .iter()
                .map(|r| ((r.configuration.as_str(), r.task.as_str()), format!("{:.3}", r.score)))
                .collect();
            out += &table(&cells);
        }
        out
    }
}

fn table(cells: &BTreeMap<(&str, &str), String>) -> String {
    let mut rows: Vec<&str> = cells.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    // Random init first, then perturbations after their base configuration.
    rows.sort_by_key(|r| (*r != RANDOM_LABEL, r.split(PERTURBATION_SEP).next().unwrap_or(r), r.contains(PERTURBATION_SEP), *r));
    let mut cols: Vec<&str> = cells.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    cols.sort_by_key(|c| task_rank(c));

    let first = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0).max("configuration".len());
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| {
            rows.iter()
                .filter_map(|r| cells.get(&(*r, *c)))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
                .max(c.len())
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<first$}", "configuration");
    for (c, w) in cols.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(first + widths.iter().map(|w| w + 2).sum::<usize>()));
    for r in &rows {
        let _ = write!(out, "{r:<first$}");
        for (c, w) in cols.iter().zip(&widths) {
            let cell = cells.get(&(*r, *c)).map_or("-", String::as_str);
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}
