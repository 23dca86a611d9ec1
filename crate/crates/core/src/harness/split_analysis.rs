use std::fs;

use rayon::prelude::*;
use serde::Serialize;

use super::report::{build_pool, mean_std};
use super::spec::{check_spec, ExperimentSpec};
use super::{io_err, HarnessError};
use crate::data::{make_pu_split, OracleAccess, PuDataset};
use crate::models::Network;
use crate::pipeline::{evaluate, train_base, train_student};
use crate::rng;
use crate::splitter::{
    pseudo_label, split_quality_report, write_split_csv, SplitQuality, TempTrainer,
};

/// Split quality of one seed at every analysed threshold, with the test
/// accuracy of a student trained on that split when enabled.
#[derive(Clone, Debug)]
pub struct SeedSplits {
    pub seed: u64,
    pub base_accuracy: f64,
    pub rows: Vec<(SplitQuality, Option<f64>)>,
}

/// Pooled statistics for one threshold across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauSummary {
    pub tau: f64,
    pub seeds: usize,
    pub reached_tau: usize,
    pub mean_stop_epoch: f64,
    pub mean_n_easy: f64,
    pub mean_n_hard: f64,
    pub noisy_easy: usize,
    pub noisy_hard: usize,
    pub noise_rate_easy: f64,
    pub noise_rate_hard: f64,
    pub noise_rate_overall: f64,
    pub hard_to_overall: f64,
    pub mean_test_accuracy: Option<f64>,
    pub std_test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SplitAnalysis {
    pub seeds: Vec<SeedSplits>,
    pub taus: Vec<TauSummary>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn analyse_seed(
    spec: &ExperimentSpec,
    data: &PuDataset,
    seed: u64,
    access: &OracleAccess,
) -> Result<SeedSplits, HarnessError> {
    let cfg = &spec.train;
    let train = &data.train;
    let (base, _) = train_base(train, cfg, seed)?;
    let base_accuracy = evaluate(&base, &data.test)?;
    let pseudo = pseudo_label(&base, &train.unlabeled)?;
    // Same streams as the first iteration of a full run, so the split at the
    // configured tau matches the pipeline's.
    let init = Network::init(
        base.architecture().clone(),
        &mut rng::stream(seed, "temp-init-1"),
    )?;
    let mut temp = TempTrainer::new(
        init,
        &train.unlabeled,
        &pseudo,
        cfg.temp.clone(),
        &cfg.augment,
        rng::derive_seed(seed, "temp-1"),
    )?;
    let taus = &spec.analysis_taus;
    let mut splits = vec![None; taus.len()];
    while temp.epochs_done() < cfg.temp.max_epochs && splits.iter().any(Option::is_none) {
        let stat = temp.run_epoch()?;
        for (slot, &tau) in splits.iter_mut().zip(taus) {
            if slot.is_none() && stat.agreement > tau {
                *slot = Some(temp.split(true));
            }
        }
    }
    let mut rows = Vec::with_capacity(taus.len());
    for (slot, &tau) in splits.into_iter().zip(taus) {
        let split = slot.unwrap_or_else(|| temp.split(false));
        let q = split_quality_report(&split, &pseudo, data.oracle(), access, tau);
        let acc = if spec.analysis_students {
            let (student, _, _) = train_student(&base, train, &split, &pseudo, cfg, seed, 1)?;
            Some(evaluate(&student, &data.test)?)
        } else {
            None
        };
        rows.push((q, acc));
    }
    Ok(SeedSplits {
        seed,
        base_accuracy,
        rows,
    })
}

/// Oracle noise analysis of the easy/hard split at each threshold in
/// `analysis_taus`. Refused unless the spec enables analysis mode. Writes
/// `split_analysis/seed-<s>.csv` per seed and the pooled `split_quality.csv`.
pub fn analyze_split(spec: &ExperimentSpec) -> Result<SplitAnalysis, HarnessError> {
    let access = OracleAccess::unlock(spec.analysis)?;
    check_spec(spec)?;
    if spec.analysis_taus.is_empty() {
        return Err(HarnessError::Config {
            key: "analysis_taus".into(),
            message: "at least one threshold is required".into(),
        });
    }
    let loaded = spec.dataset.load()?;
    let datasets = spec
        .seeds
        .iter()
        .map(|&s| make_pu_split(&loaded.train, loaded.test.clone(), spec.n_p, s))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = spec.out_dir.join("split_analysis");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let pool = build_pool(spec.jobs)?;
    let seeds = pool.install(|| {
        spec.seeds
            .par_iter()
            .zip(&datasets)
            .map(|(&seed, data)| analyse_seed(spec, data, seed, &access))
            .collect::<Result<Vec<_>, _>>()
    })?;
    for s in &seeds {
        let p = dir.join(format!("seed-{}.csv", s.seed));
        let f = fs::File::create(&p).map_err(io_err(&p))?;
        write_split_csv(&s.rows, f)?;
    }

    let taus: Vec<TauSummary> = spec
        .analysis_taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let qs: Vec<&SplitQuality> = seeds.iter().map(|s| &s.rows[i].0).collect();
            let n = qs.len() as f64;
            let sum = |f: fn(&SplitQuality) -> usize| qs.iter().map(|q| f(q)).sum::<usize>();
            let (n_easy, n_hard) = (sum(|q| q.n_easy), sum(|q| q.n_hard));
            let (noisy_easy, noisy_hard) = (sum(|q| q.noisy_easy), sum(|q| q.noisy_hard));
            let overall = ratio(noisy_easy + noisy_hard, n_easy + n_hard);
            let accs: Vec<f64> = seeds.iter().filter_map(|s| s.rows[i].1).collect();
            let (m, sd) = if accs.is_empty() {
                (None, None)
            } else {
                let (m, sd) = mean_std(&accs);
                (Some(m), Some(sd))
            };
            TauSummary {
                tau,
                seeds: qs.len(),
                reached_tau: qs.iter().filter(|q| q.reached_tau).count(),
                mean_stop_epoch: qs.iter().map(|q| q.stop_epoch as f64).sum::<f64>() / n,
                mean_n_easy: n_easy as f64 / n,
                mean_n_hard: n_hard as f64 / n,
                noisy_easy,
                noisy_hard,
                noise_rate_easy: ratio(noisy_easy, n_easy),
                noise_rate_hard: ratio(noisy_hard, n_hard),
                noise_rate_overall: overall,
                hard_to_overall: if overall > 0.0 {
                    ratio(noisy_hard, n_hard) / overall
                } else {
                    0.0
                },
                mean_test_accuracy: m,
                std_test_accuracy: sd,
            }
        })
        .collect();
    let p = spec.out_dir.join("split_quality.csv");
    let mut w = csv::Writer::from_path(&p)?;
    for t in &taus {
        w.serialize(t)?;
    }
    w.flush().map_err(io_err(&p))?;
    Ok(SplitAnalysis { seeds, taus })
}
