use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{expand_grid, Cell};
use super::spec::{check_spec, ExperimentSpec};
use super::{io_err, HarnessError};
use crate::data::{make_pu_split, PuDataset};
use crate::pipeline::{run_split_pu, CurvePoint, IterationReport, SeedRun, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

/// Result of one (cell, seed) run, as written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub cell: String,
    pub seed: u64,
    pub status: RunStatus,
    pub config: TrainConfig,
    pub n_positive: usize,
    pub n_unlabeled: usize,
    pub prior: f64,
    /// Iteration 0 is the base model.
    pub iterations: Vec<IterationReport>,
    /// Not covered by the determinism guarantee.
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn accuracy_at(&self, iteration: usize) -> Option<f64> {
        self.iterations
            .iter()
            .find(|r| r.iteration == iteration)
            .map(|r| r.accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.accuracy)
    }
}

/// A report plus, when requested, the trained models.
pub struct RunOutcome {
    pub report: RunReport,
    pub run: Option<SeedRun>,
}

/// One line of `raw.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub cell: String,
    pub seed: u64,
    pub iteration: usize,
    pub accuracy: f64,
}

/// One line of `summary.csv`. Footnote rows carry only `cell` and `note`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: Option<usize>,
    pub formatted: String,
    pub note: String,
}

pub const FOOTNOTE: &str = "footnote";

#[derive(Debug)]
pub struct SweepOutput {
    pub out_dir: PathBuf,
    pub cells: Vec<Cell>,
    /// Cell-major, seeds in spec order.
    pub reports: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
}

impl SweepOutput {
    pub fn reports_for<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a RunReport> + 'a {
        self.reports.iter().filter(move |r| r.cell == cell)
    }

    /// Mean accuracy at `iteration` over the successful seeds of `cell`.
    pub fn mean_at(&self, cell: &str, iteration: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .reports_for(cell)
            .filter_map(|r| r.accuracy_at(iteration))
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Percent accuracy as `mean±std` with two decimals.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

/// Summary rows from raw rows: per cell, the final iteration of each seed.
/// Cells keep their order of first appearance.
pub fn summarize(raw: &[RawRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<&str> = Vec::new();
    for r in raw {
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let mut finals: Vec<(u64, usize, f64)> = Vec::new();
            for r in raw.iter().filter(|r| r.cell == cell) {
                match finals.iter_mut().find(|f| f.0 == r.seed) {
                    Some(f) if r.iteration >= f.1 => *f = (r.seed, r.iteration, r.accuracy),
                    Some(_) => {}
                    None => finals.push((r.seed, r.iteration, r.accuracy)),
                }
            }
            let accs: Vec<f64> = finals.iter().map(|f| f.2).collect();
            let (m, s) = mean_std(&accs);
            SummaryRow {
                cell: cell.to_string(),
                mean: Some(m),
                std: Some(s),
                n: Some(accs.len()),
                formatted: format_pm(m, s),
                note: String::new(),
            }
        })
        .collect()
}

pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<Vec<RawRow>, HarnessError> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    Ok(rd.deserialize().collect::<Result<Vec<RawRow>, _>>()?)
}

pub(crate) fn dir_name(cell: &str) -> String {
    cell.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "=.-_".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub(crate) fn build_pool(jobs: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "phase", "epoch", "loss", "agreement"])?;
    for c in curves {
        w.write_record([
            c.iteration.to_string(),
            c.phase.to_string(),
            c.epoch.to_string(),
            c.loss.to_string(),
            c.agreement.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn run_one(
    spec: &ExperimentSpec,
    cell: &Cell,
    seed: u64,
    data: &PuDataset,
    run_dir: &Path,
    keep_models: bool,
) -> Result<RunOutcome, HarnessError> {
    let start = Instant::now();
    let result = run_split_pu(data, &cell.train, seed);
    let wall_clock_secs = start.elapsed().as_secs_f64();
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let (status, iterations, run) = match result {
        Ok(run) => {
            write_curves(&run_dir.join("curves.csv"), &run.curves)?;
            if spec.save_snapshots {
                for (i, m) in run.models.iter().enumerate() {
                    let p = run_dir.join(format!("model-{i}.spun"));
                    fs::write(&p, m.snapshot()).map_err(io_err(&p))?;
                }
            }
            (RunStatus::Ok, run.iterations.clone(), Some(run))
        }
        Err(e) => {
            log::warn!("cell {} seed {seed} failed: {e}", cell.name);
            (
                RunStatus::Failed {
                    error: e.to_string(),
                },
                Vec::new(),
                None,
            )
        }
    };
    let report = RunReport {
        cell: cell.name.clone(),
        seed,
        status,
        config: cell.train.clone(),
        n_positive: data.train.positives.len(),
        n_unlabeled: data.train.unlabeled.len(),
        prior: data.train.prior,
        iterations,
        wall_clock_secs,
    };
    let p = run_dir.join("report.json");
    fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(io_err(&p))?;
    log::info!(
        "cell {} seed {seed}: {:?} in {wall_clock_secs:.1}s",
        cell.name,
        report.final_accuracy()
    );
    Ok(RunOutcome {
        report,
        run: run.filter(|_| keep_models),
    })
}

/// Runs every (cell, seed) pair and writes `raw.csv`, `summary.csv`,
/// `iteration_summary.csv`, `summary.md` and one directory per run under
/// `runs/`. Bad configs and unreadable data fail before any training.
pub fn run(spec: &ExperimentSpec) -> Result<SweepOutput, HarnessError> {
    run_with_models(spec, false).map(|(out, _)| out)
}

/// Like [`run`], also returning the per-run models in report order.
pub fn run_with_models(
    spec: &ExperimentSpec,
    keep_models: bool,
) -> Result<(SweepOutput, Vec<Option<SeedRun>>), HarnessError> {
    check_spec(spec)?;
    let cells = expand_grid(spec);
    for c in &cells {
        if let Some((k, m)) = c.train.problems().into_iter().next() {
            return Err(HarnessError::Config {
                key: format!("sweep[{}].{k}", c.name),
                message: m,
            });
        }
    }
    let loaded = spec.dataset.load()?;
    let datasets = spec
        .seeds
        .iter()
        .map(|&s| make_pu_split(&loaded.train, loaded.test.clone(), spec.n_p, s))
        .collect::<Result<Vec<_>, _>>()?;

    let out = &spec.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.seeds.len()).map(move |s| (c, s)))
        .collect();
    let pool = build_pool(spec.jobs)?;
    let outcomes = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                let cell = &cells[c];
                let seed = spec.seeds[s];
                let dir = out
                    .join("runs")
                    .join(dir_name(&cell.name))
                    .join(format!("seed-{seed}"));
                run_one(spec, cell, seed, &datasets[s], &dir, keep_models)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let (reports, runs): (Vec<RunReport>, Vec<Option<SeedRun>>) =
        outcomes.into_iter().map(|o| (o.report, o.run)).unzip();

    let raw: Vec<RawRow> = reports
        .iter()
        .flat_map(|r| {
            r.iterations.iter().map(|it| RawRow {
                cell: r.cell.clone(),
                seed: r.seed,
                iteration: it.iteration,
                accuracy: it.accuracy,
            })
        })
        .collect();
    write_rows(&out.join("raw.csv"), &raw)?;

    let summary = summary_with_failures(&raw, &cells, &reports);
    write_rows(&out.join("summary.csv"), &summary)?;
    write_iteration_summary(&out.join("iteration_summary.csv"), &cells, &reports)?;
    let md = out.join("summary.md");
    fs::write(&md, markdown_table(&cells, &reports)).map_err(io_err(&md))?;

    Ok((
        SweepOutput {
            out_dir: out.clone(),
            cells,
            reports,
            summary,
        },
        runs,
    ))
}

/// [`summarize`] plus a note on every cell with failed seeds and one
/// footnote row per failure.
fn summary_with_failures(raw: &[RawRow], cells: &[Cell], reports: &[RunReport]) -> Vec<SummaryRow> {
    let mut summary = summarize(raw);
    for cell in cells {
        let failed: Vec<&RunReport> = reports
            .iter()
            .filter(|r| r.cell == cell.name && !r.is_ok())
            .collect();
        if failed.is_empty() {
            continue;
        }
        let note = format!("{} failed seed(s) excluded", failed.len());
        match summary.iter_mut().find(|r| r.cell == cell.name) {
            Some(row) => row.note = note,
            None => summary.push(SummaryRow {
                cell: cell.name.clone(),
                mean: None,
                std: None,
                n: Some(0),
                formatted: String::new(),
                note,
            }),
        }
    }
    for r in reports.iter().filter(|r| !r.is_ok()) {
        if let RunStatus::Failed { error } = &r.status {
            summary.push(SummaryRow {
                cell: FOOTNOTE.to_string(),
                mean: None,
                std: None,
                n: None,
                formatted: String::new(),
                note: format!("cell {} seed {} excluded: {error}", r.cell, r.seed),
            });
        }
    }
    summary
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn per_iteration(reports: &[RunReport], cell: &str) -> Vec<Vec<f64>> {
    let mut by_it: Vec<Vec<f64>> = Vec::new();
    for r in reports.iter().filter(|r| r.cell == cell) {
        for it in &r.iterations {
            if by_it.len() <= it.iteration {
                by_it.resize(it.iteration + 1, Vec::new());
            }
            by_it[it.iteration].push(it.accuracy);
        }
    }
    by_it
}

fn write_iteration_summary(
    path: &Path,
    cells: &[Cell],
    reports: &[RunReport],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "iteration", "mean", "std", "n", "formatted"])?;
    for c in cells {
        for (it, accs) in per_iteration(reports, &c.name).iter().enumerate() {
            if accs.is_empty() {
                continue;
            }
            let (m, s) = mean_std(accs);
            w.write_record([
                c.name.clone(),
                it.to_string(),
                m.to_string(),
                s.to_string(),
                accs.len().to_string(),
                format_pm(m, s),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// One row per cell with the swept settings as leading columns, then the
/// base accuracy, each iteration and the seed count.
fn markdown_table(cells: &[Cell], reports: &[RunReport]) -> String {
    let axis_names: Vec<&str> = cells.first().map_or(Vec::new(), |c| {
        c.axes.iter().map(|(k, _)| k.as_str()).collect()
    });
    let max_it = reports
        .iter()
        .map(|r| r.iterations.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let mut head: Vec<String> = if axis_names.is_empty() {
        vec!["cell".into()]
    } else {
        axis_names.iter().map(|s| s.to_string()).collect()
    };
    head.push("base".into());
    head.extend((1..max_it).map(|i| format!("iter {i}")));
    head.push("n".into());
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", head.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(head.len()));
    for c in cells {
        let mut row: Vec<String> = if c.axes.is_empty() {
            vec![c.name.clone()]
        } else {
            c.axes.iter().map(|(_, v)| v.clone()).collect()
        };
        let by_it = per_iteration(reports, &c.name);
        for i in 0..max_it {
            row.push(match by_it.get(i) {
                Some(a) if !a.is_empty() => {
                    let (m, sd) = mean_std(a);
                    format_pm(m, sd)
                }
                _ => "-".into(),
            });
        }
        let n = reports
            .iter()
            .filter(|r| r.cell == c.name && r.is_ok())
            .count();
        row.push(n.to_string());
        let _ = writeln!(s, "| {} |", row.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: &str, seed: u64, iteration: usize, accuracy: f64) -> RawRow {
        RawRow {
            cell: cell.into(),
            seed,
            iteration,
            accuracy,
        }
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.8, 0.9]);
        assert!((m - 0.85).abs() < 1e-15);
        assert!((s - 0.05).abs() < 1e-15);
        assert_eq!(format_pm(0.8902, 0.0039), "89.02±0.39");
    }

    #[test]
    fn summary_takes_final_iteration() {
        let raw = vec![
            row("a", 0, 0, 0.5),
            row("a", 0, 1, 0.7),
            row("a", 1, 0, 0.6),
            row("a", 1, 1, 0.9),
            row("b", 0, 0, 0.4),
        ];
        let s = summarize(&raw);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].n, Some(2));
        assert!((s[0].mean.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(s[1].mean, Some(0.4));
        assert_eq!(s[1].std, Some(0.0));
    }

    #[test]
    fn failed_seeds_get_note_and_footnote() {
        let spec = ExperimentSpec::default();
        let cells = expand_grid(&spec);
        let report = |seed, status, acc: Option<f64>| RunReport {
            cell: "base".into(),
            seed,
            status,
            config: TrainConfig::default(),
            n_positive: 1,
            n_unlabeled: 1,
            prior: 0.5,
            iterations: acc
                .map(|a| {
                    vec![IterationReport {
                        iteration: 0,
                        accuracy: a,
                        split: None,
                        student: None,
                    }]
                })
                .unwrap_or_default(),
            wall_clock_secs: 0.0,
        };
        let reports = vec![
            report(0, RunStatus::Ok, Some(0.8)),
            report(
                1,
                RunStatus::Failed {
                    error: "diverged".into(),
                },
                None,
            ),
        ];
        let raw = vec![row("base", 0, 0, 0.8)];
        let s = summary_with_failures(&raw, &cells, &reports);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].n, Some(1));
        assert_eq!(s[0].note, "1 failed seed(s) excluded");
        assert_eq!(s[1].cell, FOOTNOTE);
        assert!(s[1].note.contains("seed 1") && s[1].note.contains("diverged"));
    }

    #[test]
    fn dir_names_are_path_safe() {
        assert_eq!(dir_name("tau=0.9,hard_loss=dual"), "tau=0.9_hard_loss=dual");
        assert_eq!(dir_name("a/b c"), "a_b_c");
    }
}
