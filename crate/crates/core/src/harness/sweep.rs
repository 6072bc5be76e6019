use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::stats::csv_err;
use super::{cmd_search, ExperimentConfig, ExperimentRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Cartesian grid of sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub channels: Vec<usize>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            layers: vec![2],
            channels: vec![32],
            betas: vec![0.1],
            seeds: vec![0],
        }
    }
}

impl SweepGrid {
    pub fn configs(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        if self.layers.is_empty() || self.channels.is_empty() || self.betas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Argument("sweep grid has an empty axis".into()));
        }
        let mut out = Vec::new();
        for &layers in &self.layers {
            for &channels in &self.channels {
                for &beta in &self.betas {
                    for &seed in &self.seeds {
                        let mut c = base.clone();
                        c.layers = layers;
                        c.channels = channels;
                        c.search.beta = beta;
                        c.search.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub config: ExperimentConfig,
    pub record: Option<ExperimentRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    /// Indices into `points`, by increasing model size.
    pub frontier: Vec<usize>,
}

/// Indices of the points not dominated in (higher metric, smaller size),
/// ordered by increasing size. Identical points are all kept.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let dominates = |(a_acc, a_size): (f64, f64), (b_acc, b_size): (f64, f64)| {
        a_acc >= b_acc && a_size <= b_size && (a_acc > b_acc || a_size < b_size)
    };
    let mut front: Vec<usize> = (0..points.len())
        .filter(|&i| !points.iter().any(|&p| dominates(p, points[i])))
        .collect();
    front.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(points[a].0.total_cmp(&points[b].0)));
    front
}

fn point_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("point-{i:04}.json"))
}

/// Runs `run` on every grid point over `threads` workers. Each point's
/// result (or error) goes to its own file under `out_dir/points`; the files
/// are merged at the end into `sweep.csv` and `frontier.csv`.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out_dir: &Path,
    threads: usize,
    run: impl Fn(usize, &ExperimentConfig) -> Result<ExperimentRecord> + Sync,
) -> Result<SweepOutcome> {
    let configs = grid.configs(base)?;
    let points_dir = out_dir.join("points");
    fs::create_dir_all(&points_dir)?;
    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(cfg) = configs.get(i) else { return Ok(()) };
            let (record, error) = match run(i, cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let point = SweepPoint {
                index: i,
                config: cfg.clone(),
                record,
                error,
            };
            fs::write(point_path(&points_dir, i), serde_json::to_string(&point)?)?;
        }
    };
    let threads = threads.clamp(1, configs.len());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads).map(|_| s.spawn(worker)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;

    let points = (0..configs.len())
        .map(|i| {
            let path = point_path(&points_dir, i);
            let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, e.to_string()))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<SweepPoint>>>()?;
    let done: Vec<(usize, (f64, f64))> = points
        .iter()
        .filter_map(|p| p.record.as_ref().map(|r| (p.index, (r.test_metric, r.model_bytes))))
        .collect();
    let coords: Vec<(f64, f64)> = done.iter().map(|&(_, c)| c).collect();
    let frontier: Vec<usize> = pareto_frontier(&coords).into_iter().map(|k| done[k].0).collect();
    write_points_csv(&out_dir.join("sweep.csv"), points.iter())?;
    write_points_csv(&out_dir.join("frontier.csv"), frontier.iter().map(|&i| &points[i]))?;
    let outcome = SweepOutcome { points, frontier };
    fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

/// Searches every grid point on `g`; search logs go to per-point files.
pub fn cmd_sweep(
    g: &Graph,
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out_dir: &Path,
    threads: usize,
) -> Result<SweepOutcome> {
    let points_dir = out_dir.join("points");
    run_sweep(base, grid, out_dir, threads, |i, cfg| {
        let log_path = points_dir.join(format!("point-{i:04}.log.jsonl"));
        let mut log = BufWriter::new(fs::File::create(&log_path)?);
        let run = cmd_search(g, cfg, Some(&mut log))?;
        run.checkpoint.save(&points_dir.join(format!("point-{i:04}.ckpt.json")))?;
        Ok(run.record)
    })
}

/// `index,layers,channels,beta,seed,metric,model_bytes,buffer_bytes,error`.
pub fn write_points_csv<'a>(path: &Path, points: impl Iterator<Item = &'a SweepPoint>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "index",
        "layers",
        "channels",
        "beta",
        "seed",
        "metric",
        "model_bytes",
        "buffer_bytes",
        "error",
    ])
    .map_err(csv_err)?;
    for p in points {
        let c = &p.config;
        let (metric, model, buffer) = match &p.record {
            Some(r) => (r.test_metric.to_string(), r.model_bytes.to_string(), r.buffer_bytes.to_string()),
            None => Default::default(),
        };
        w.write_record([
            p.index.to_string(),
            c.layers.to_string(),
            c.channels.to_string(),
            c.search.beta.to_string(),
            c.search.seed.to_string(),
            metric,
            model,
            buffer,
            p.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
