//! Grid sweeps over (architecture, width, depth, seed) with a worker pool.
//!
//! The configuration is a flat `section.key = value` text file — trivially
//! diffable and echoed back canonically by `--print-config`. Every grid
//! point trains on the same generated dataset; results are gathered into one
//! combined CSV (and optionally an SVG of the loss curves), with rows sorted
//! deterministically so the output is independent of worker count.

use crate::csvio::fmt_f64;
use crate::svg::LineChart;
use grelu_core::data::gen_ackley;
use grelu_core::model::{compute_gates_all, init_network, NetworkShape, ReluNetwork};
use grelu_core::train::{
    train_grelu, train_relu, LearningRate, TrainConfig, TrainError, TrainLog,
};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("config line {line}: {what}")]
    Config { line: usize, what: String },
    #[error("grid point {label}: {what}")]
    Run { label: String, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Grelu,
    Relu,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Grelu => "grelu",
            Arch::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub data_n: usize,
    pub data_d: usize,
    pub data_seed: u64,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub arches: Vec<Arch>,
    pub seeds: Vec<u64>,
    pub eta: LearningRate,
    pub iters: usize,
    pub target_loss: f64,
    pub log_every: usize,
    pub csv_path: String,
    pub svg_path: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            data_n: 16,
            data_d: 8,
            data_seed: 1,
            widths: Vec::new(),
            depths: vec![3],
            arches: vec![Arch::Grelu],
            seeds: vec![1],
            eta: LearningRate::Theoretical,
            iters: 1000,
            target_loss: 0.0,
            log_every: 1,
            csv_path: "sweep.csv".into(),
            svg_path: String::new(),
        }
    }
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<SweepConfig, SweepError> {
        let mut cfg = SweepConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |what: String| SweepError::Config { line: idx + 1, what };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_usize_list = |v: &str| -> Result<Vec<usize>, SweepError> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| err(format!("bad count `{s}`"))))
                    .collect()
            };
            match key {
                "data.n" => cfg.data_n = value.parse().map_err(|_| err(format!("bad count `{value}`")))?,
                "data.d" => cfg.data_d = value.parse().map_err(|_| err(format!("bad count `{value}`")))?,
                "data.seed" => {
                    cfg.data_seed = value.parse().map_err(|_| err(format!("bad seed `{value}`")))?
                }
                "grid.widths" => cfg.widths = parse_usize_list(value)?,
                "grid.depths" => cfg.depths = parse_usize_list(value)?,
                "grid.seeds" => {
                    cfg.seeds = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|s| s.trim().parse::<u64>().map_err(|_| err(format!("bad seed `{s}`"))))
                            .collect::<Result<_, _>>()?
                    }
                }
                "grid.arches" => {
                    cfg.arches = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|s| match s.trim() {
                                "grelu" => Ok(Arch::Grelu),
                                "relu" => Ok(Arch::Relu),
                                other => Err(err(format!("unknown arch `{other}`"))),
                            })
                            .collect::<Result<_, _>>()?
                    }
                }
                "train.eta" => {
                    cfg.eta = if value == "theoretical" {
                        LearningRate::Theoretical
                    } else {
                        LearningRate::Fixed(
                            value.parse().map_err(|_| err(format!("bad eta `{value}`")))?,
                        )
                    }
                }
                "train.iters" => {
                    cfg.iters = value.parse().map_err(|_| err(format!("bad count `{value}`")))?
                }
                "train.target_loss" => {
                    cfg.target_loss =
                        value.parse().map_err(|_| err(format!("bad loss `{value}`")))?
                }
                "train.log_every" => {
                    cfg.log_every = value.parse().map_err(|_| err(format!("bad count `{value}`")))?
                }
                "output.csv" => cfg.csv_path = value.into(),
                "output.svg" => cfg.svg_path = value.into(),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    /// Canonical echo; parsing the echo reproduces the config exactly.
    pub fn canonical(&self) -> String {
        let join_usize = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "data.n = {}", self.data_n);
        let _ = writeln!(out, "data.d = {}", self.data_d);
        let _ = writeln!(out, "data.seed = {}", self.data_seed);
        let _ = writeln!(out, "grid.widths = {}", join_usize(&self.widths));
        let _ = writeln!(out, "grid.depths = {}", join_usize(&self.depths));
        let _ = writeln!(
            out,
            "grid.arches = {}",
            self.arches.iter().map(|a| a.name().to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            out,
            "grid.seeds = {}",
            self.seeds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        );
        match self.eta {
            LearningRate::Theoretical => {
                let _ = writeln!(out, "train.eta = theoretical");
            }
            LearningRate::Fixed(v) => {
                let _ = writeln!(out, "train.eta = {}", fmt_f64(v));
            }
        }
        let _ = writeln!(out, "train.iters = {}", self.iters);
        let _ = writeln!(out, "train.target_loss = {}", fmt_f64(self.target_loss));
        let _ = writeln!(out, "train.log_every = {}", self.log_every);
        let _ = writeln!(out, "output.csv = {}", self.csv_path);
        let _ = writeln!(out, "output.svg = {}", self.svg_path);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPoint {
    pub arch: Arch,
    pub m: usize,
    pub depth: usize,
    pub seed: u64,
}

impl GridPoint {
    pub fn label(&self) -> String {
        format!("{} m={} L={} seed={}", self.arch.name(), self.m, self.depth, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub point: GridPoint,
    pub log: TrainLog,
    pub diverged: bool,
}

pub struct SweepOutput {
    pub csv: String,
    pub svg: Option<String>,
    pub results: Vec<GridResult>,
}

pub fn grid_points(cfg: &SweepConfig) -> Vec<GridPoint> {
    let mut points = Vec::new();
    for arch in &cfg.arches {
        for m in &cfg.widths {
            for depth in &cfg.depths {
                for seed in &cfg.seeds {
                    points.push(GridPoint { arch: *arch, m: *m, depth: *depth, seed: *seed });
                }
            }
        }
    }
    points
}

fn run_point(cfg: &SweepConfig, point: &GridPoint) -> Result<GridResult, SweepError> {
    let ds = gen_ackley(cfg.data_n, cfg.data_d, cfg.data_seed)
        .map_err(|e| SweepError::Run { label: point.label(), what: e.to_string() })?;
    let shape = NetworkShape::new(cfg.data_d, 1, point.m, point.depth);
    let net = init_network(shape, point.seed);
    let train_cfg = TrainConfig {
        lr: cfg.eta,
        max_iters: cfg.iters,
        target_loss: cfg.target_loss,
        seed: point.seed,
        log_every: cfg.log_every,
        deterministic_reduction: true,
    };
    let outcome = match point.arch {
        Arch::Grelu => {
            let gates = compute_gates_all(&net, &ds.x)
                .map_err(|e| SweepError::Run { label: point.label(), what: e.to_string() })?;
            train_grelu(&net, &gates, &ds, &train_cfg).map(|(_, log)| log)
        }
        Arch::Relu => {
            let relu = ReluNetwork::from_parts(shape, net.c.clone(), net.b.clone(), net.w.clone());
            train_relu(&relu, &ds, &train_cfg).map(|(_, log)| log)
        }
    };
    match outcome {
        Ok(log) => Ok(GridResult { point: *point, log, diverged: false }),
        Err(TrainError::Diverged { log, .. }) => Ok(GridResult { point: *point, log, diverged: true }),
        Err(e) => Err(SweepError::Run { label: point.label(), what: e.to_string() }),
    }
}

/// Run the whole grid on `jobs` worker threads. Output rows are sorted by
/// grid order, so the CSV does not depend on the worker count.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<SweepOutput, SweepError> {
    let points = grid_points(cfg);
    let jobs = jobs.clamp(1, points.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GridResult, SweepError>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= points.len() {
                    break;
                }
                let result = run_point(cfg, &points[idx]);
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(points.len());
    for slot in slots.into_inner().unwrap() {
        results.push(slot.expect("all grid points processed")?);
    }

    let mut csv = String::from("arch,m,depth,seed,iter,loss\n");
    for r in &results {
        for row in &r.log.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.point.arch.name(),
                r.point.m,
                r.point.depth,
                r.point.seed,
                row.iter,
                fmt_f64(row.loss)
            );
        }
    }

    let svg = if cfg.svg_path.is_empty() {
        None
    } else {
        let mut chart = LineChart::new("training loss", "iteration", "loss", true);
        for r in &results {
            let pts: Vec<(f64, f64)> =
                r.log.rows.iter().map(|row| (row.iter as f64, row.loss)).collect();
            chart.add_series(&r.point.label(), pts);
        }
        Some(chart.render())
    };

    Ok(SweepOutput { csv, svg, results })
}
