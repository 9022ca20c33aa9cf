//! Training runs and grid sweeps over window size, γ₁ and reward.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{split_documents, RunConfig, Split};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, OrderingStrategy};
use crate::model::{Env, Model};
use crate::rewards::RewardKind;
use crate::trainer::{train, TrainReport, Window};

pub struct TrainedRun {
    pub model: Model,
    pub report: TrainReport,
    pub split: Split,
}

/// Splits `dataset`, builds a model seeded by `cfg.seed` and trains it.
pub fn train_run(cfg: &RunConfig, dataset: &Dataset, diagnostics: Option<&Path>) -> Result<TrainedRun> {
    cfg.validate()?;
    let docs = dataset.prepare()?;
    let split = split_documents(docs, &cfg.data)?;
    let env = Env::new(&dataset.store);
    let mut model = Model::new(cfg.model.clone(), dataset.store.dim(), cfg.seed)?;
    let report = train(
        &mut model,
        &env,
        &split.train,
        &split.valid,
        &cfg.train,
        cfg.seed,
        diagnostics,
    )?;
    Ok(TrainedRun { model, report, split })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub windows: Vec<Window>,
    pub gamma1: Vec<f64>,
    pub rewards: Vec<RewardKind>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(Window, f64, RewardKind, u64)> {
        let mut out = Vec::new();
        for &w in &self.windows {
            for &g in &self.gamma1 {
                for &r in &self.rewards {
                    for &s in &self.seeds {
                        out.push((w, g, r, s));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: String,
    pub gamma1: f64,
    pub reward: String,
    pub seed: u64,
    pub valid_f1: Option<f64>,
    pub test_f1: f64,
    pub offset_f1: f64,
}

pub fn run_sweep(base: &RunConfig, dataset: &Dataset, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    points
        .par_iter()
        .map(|&(window, gamma1, reward, seed)| {
            let mut cfg = base.clone();
            cfg.train.window = window;
            cfg.train.gamma1 = gamma1;
            cfg.train.reward = reward;
            cfg.seed = seed;
            let run = train_run(&cfg, dataset, None)?;
            let env = Env::new(&dataset.store);
            let test = evaluate(&run.model, &env, &run.split.test, &OrderingStrategy::Dynamic { window })?;
            let offset = evaluate(&run.model, &env, &run.split.test, &OrderingStrategy::Offset)?;
            Ok(SweepRow {
                window: window.to_string(),
                gamma1,
                reward: reward_name(reward),
                seed,
                valid_f1: run.report.best_valid_f1,
                test_f1: test.micro_f1,
                offset_f1: offset.micro_f1,
            })
        })
        .collect()
}

fn reward_name(r: RewardKind) -> String {
    serde_json::to_value(r)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub window: String,
    pub gamma1: f64,
    pub reward: String,
    pub runs: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Mean and sample standard deviation of test F1 per grid point, across seeds.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut out: Vec<(SweepSummary, Vec<f64>)> = Vec::new();
    for r in rows {
        match out
            .iter_mut()
            .find(|(s, _)| s.window == r.window && s.gamma1 == r.gamma1 && s.reward == r.reward)
        {
            Some((_, v)) => v.push(r.test_f1),
            None => out.push((
                SweepSummary {
                    window: r.window.clone(),
                    gamma1: r.gamma1,
                    reward: r.reward.clone(),
                    runs: 0,
                    mean_f1: 0.0,
                    std_f1: 0.0,
                },
                vec![r.test_f1],
            )),
        }
    }
    out.into_iter()
        .map(|(mut s, v)| {
            let n = v.len() as f64;
            s.runs = v.len();
            s.mean_f1 = v.iter().sum::<f64>() / n;
            s.std_f1 = if v.len() > 1 {
                (v.iter().map(|x| (x - s.mean_f1).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            s
        })
        .collect()
}
