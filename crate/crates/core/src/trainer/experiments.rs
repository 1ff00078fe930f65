use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train_run, Dataset, Method, RunResult, TrainSetup};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Mean and sample standard deviation; the deviation of fewer than two
/// values is 0.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub runs: usize,
    pub weighted_f1_mean: f64,
    pub weighted_f1_sd: f64,
    pub micro_f1_excl_mean: Option<f64>,
    pub micro_f1_excl_sd: Option<f64>,
    pub cluster_distance_mean: Option<f64>,
    pub prototype_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunResult>,
}

impl CompareReport {
    pub fn row(&self, method: Method) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,runs,weighted_f1_mean,weighted_f1_sd,micro_f1_excl_mean,micro_f1_excl_sd,cluster_distance_mean,prototype_seeds\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let seeds: Vec<String> = r.prototype_seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{},{}",
                r.method,
                r.runs,
                r.weighted_f1_mean,
                r.weighted_f1_sd,
                opt(r.micro_f1_excl_mean),
                opt(r.micro_f1_excl_sd),
                opt(r.cluster_distance_mean),
                seeds.join(" ")
            );
        }
        s
    }
}

/// Trains every method on every seed of `setup` and summarises the test
/// metrics per method.
pub fn compare(data: &Dataset, setup: &TrainSetup, methods: &[Method], exec: Execution) -> Result<CompareReport> {
    setup.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    let seeds = setup.train.seeds.clone();
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs = exec
        .map(jobs, |(m, s)| train_run(data, &setup.with_method(m), s).map(|o| o.result))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows = methods
        .iter()
        .map(|&m| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.method == m).collect();
            let wf: Vec<f64> = mine.iter().map(|r| r.final_report.weighted_f1).collect();
            let micro: Vec<f64> = mine.iter().filter_map(|r| r.final_report.micro_f1_excl).collect();
            let dist: Vec<f64> = mine.iter().filter_map(|r| r.cluster_distance).collect();
            let (wm, ws) = mean_sd(&wf);
            let (mm, ms) = mean_sd(&micro);
            let has_micro = micro.len() == mine.len() && !micro.is_empty();
            CompareRow {
                method: m,
                runs: mine.len(),
                weighted_f1_mean: wm,
                weighted_f1_sd: ws,
                micro_f1_excl_mean: has_micro.then_some(mm),
                micro_f1_excl_sd: has_micro.then_some(ms),
                cluster_distance_mean: (!dist.is_empty()).then(|| mean_sd(&dist).0),
                prototype_seeds: mine.iter().filter_map(|r| r.prototype_seed).collect(),
            }
        })
        .collect();
    Ok(CompareReport { seeds, rows, runs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub method: Method,
    pub batch_size: usize,
    /// Test weighted-F1 of each seed that finished.
    pub per_seed_f1: Vec<f64>,
    pub mean_f1: Option<f64>,
    /// First failure among the cell's runs.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    pub cells: Vec<StabilityCell>,
    /// Per method: standard deviation of the cell means across batch sizes,
    /// over the cells that finished.
    pub sd_by_method: BTreeMap<Method, f64>,
}

impl StabilityTable {
    pub fn cell(&self, method: Method, batch_size: usize) -> Option<&StabilityCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.batch_size == batch_size)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,batch_size,mean_f1,per_seed_f1,method_sd,error\n");
        for c in &self.cells {
            let per: Vec<String> = c.per_seed_f1.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{}",
                c.method,
                c.batch_size,
                c.mean_f1.map(|v| format!("{v:.6}")).unwrap_or_default(),
                per.join(" "),
                self.sd_by_method.get(&c.method).copied().unwrap_or(f64::NAN),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }
}

/// Trains each method at each batch size over the shared seeds. A failing
/// run marks its cell instead of aborting the table.
pub fn batch_stability_experiment(
    data: &Dataset,
    setup: &TrainSetup,
    methods: &[Method],
    batch_sizes: &[usize],
    exec: Execution,
) -> Result<StabilityTable> {
    setup.validate()?;
    let seeds = setup.train.seeds.clone();
    if seeds.len() < 2 {
        return Err(Error::Config("the stability experiment needs at least two seeds".into()));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Config("batch sizes must be positive and non-empty".into()));
    }
    let mut jobs = Vec::new();
    for &m in methods {
        for &b in batch_sizes {
            for &s in &seeds {
                jobs.push((m, b, s));
            }
        }
    }
    let results = exec.map(jobs.clone(), |(m, b, s)| {
        let mut cfg = setup.with_method(m);
        cfg.train.batch_size = b;
        train_run(data, &cfg, s).map(|o| o.result.final_report.weighted_f1)
    });
    let mut cells = Vec::new();
    for &m in methods {
        for &b in batch_sizes {
            let mut per_seed_f1 = Vec::new();
            let mut error = None;
            for ((jm, jb, _), r) in jobs.iter().zip(&results) {
                if (*jm, *jb) != (m, b) {
                    continue;
                }
                match r {
                    Ok(f) => per_seed_f1.push(*f),
                    Err(e) => {
                        error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let mean_f1 = (error.is_none() && !per_seed_f1.is_empty()).then(|| mean_sd(&per_seed_f1).0);
            cells.push(StabilityCell {
                method: m,
                batch_size: b,
                per_seed_f1,
                mean_f1,
                error,
            });
        }
    }
    let sd_by_method = methods
        .iter()
        .map(|&m| {
            let means: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == m)
                .filter_map(|c| c.mean_f1)
                .collect();
            (m, mean_sd(&means).1)
        })
        .collect();
    Ok(StabilityTable {
        seeds,
        batch_sizes: batch_sizes.to_vec(),
        cells,
        sd_by_method,
    })
}
