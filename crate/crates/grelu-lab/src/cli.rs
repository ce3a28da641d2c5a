//! Command-line interface: dataset generation, training, theory probes,
//! ReLU conversion, tangent-kernel output, and grid sweeps.
//!
//! Exit codes: 0 success (for `train`: target loss reached; for `probe`: all
//! quotas met), 2 iteration budget exhausted, 3 divergence guard tripped,
//! 1 anything else. Failures print a single `ERROR: ...` line on stderr.
//! `GRELU_SEED` overrides the default seed of any subcommand.

use crate::csvio::{self, fmt_f64};
use crate::formats::{self, NetworkCheckpoint};
use crate::sweep::{run_sweep, SweepConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use grelu_core::convert::{grelu_to_relu, verify_equivalence};
use grelu_core::data::{check_separation, gen_ackley, Dataset};
use grelu_core::model::{
    compute_gates_all, init_network, GReluNetwork, GatePattern, NetworkShape, ReluNetwork,
};
use grelu_core::ntk::{kernel_drift, ntk_kernel, ntk_ratio, random_spectral_perturbations};
use grelu_core::theory::{
    cross_term_report, decomposition_check, descent_rate_check, eig_bounds_report, gate_overlap,
    grad_norm_bound_check, initial_loss_check, z_norm_report, SpectralBounds, TheoryRecord,
    TheoryReport,
};
use grelu_core::train::{
    all_layer_gradients, train_grelu, train_relu, LearningRate, TrainConfig, TrainError,
    TrainOutcome,
};
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ITERATION_LIMIT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser)]
#[command(name = "grelu", about = "Gated-ReLU network laboratory", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (or import one from CSV) and save it.
    GenData(GenDataArgs),
    /// Train a gated or ReLU network by full-batch gradient descent.
    Train(TrainArgs),
    /// Run theory probes and write a report CSV.
    Probe(ProbeArgs),
    /// Convert a gated network to its equivalent ReLU network.
    Convert(ConvertArgs),
    /// Tangent-kernel computations: kernel matrix, perturbation ratio, drift.
    Ntk(NtkArgs),
    /// Run a grid sweep from a config file.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Import from a CSV file (header `x0..x{d-1},y0..`) instead of
    /// generating; `--n`/`--d` are ignored.
    #[arg(long)]
    from_csv: Option<PathBuf>,
    /// With `--from-csv`: renormalize rows to unit norm and labels to
    /// max-abs 1.
    #[arg(long)]
    normalize: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Grelu,
    Relu,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "grelu")]
    arch: ArchArg,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    depth: usize,
    /// Learning rate: a number, or `theoretical` for d_x/(n^4 L^3 d_y).
    #[arg(long, default_value = "theoretical")]
    lr: String,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.0)]
    target_loss: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Training log CSV path.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    /// Save the final network checkpoint.
    #[arg(long)]
    out_net: Option<PathBuf>,
    /// Save the gate cache (gated runs only).
    #[arg(long)]
    save_gates: Option<PathBuf>,
    /// Byte-identical logs: zeroes the wall-clock column.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Eig,
    Cross,
    Overlap,
    Znorm,
    Decomp,
    Descent,
    Gradnorm,
    Initloss,
    All,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_enum)]
    which: ProbeKind,
    #[arg(long)]
    out: PathBuf,
    /// Network checkpoint; omitted in seeded mode (fresh nets are drawn).
    #[arg(long)]
    net: Option<PathBuf>,
    /// Gate cache; recomputed from the network and data when omitted.
    #[arg(long)]
    gates: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replicate the probe over this many fresh seeds and enforce the quota.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Fraction of seeds that must pass.
    #[arg(long, default_value_t = 0.95)]
    quota: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Shape for seeded mode.
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Theta parameter for the intermediate-transform norm bound.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    theta: f64,
    /// Step size used by the decomposition probe.
    #[arg(long, default_value_t = 1e-2)]
    eta: f64,
    /// Training-log CSV for the descent-rate probe.
    #[arg(long)]
    train_log: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    gates: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Verify the footprint equality after converting.
    #[arg(long)]
    verify: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NtkMode {
    Kernel,
    Ratio,
    Drift,
}

#[derive(Args)]
struct NtkArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output index (1-based).
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, value_enum)]
    mode: NtkMode,
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint for drift mode.
    #[arg(long)]
    net2: Option<PathBuf>,
    /// Total perturbation budget for ratio mode (per-layer bound xi / L).
    #[arg(long, default_value_t = 0.1)]
    xi: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Echo the parsed config in canonical form and exit.
    #[arg(long)]
    print_config: bool,
}

/// Default seed: `GRELU_SEED` from the environment, else 1.
fn default_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("GRELU_SEED") {
        Ok(v) => v.parse().map_err(|_| anyhow!("GRELU_SEED must be an integer, got `{v}`")),
        Err(_) => Ok(1),
    }
}

pub fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Probe(args) => probe(args),
        Command::Convert(args) => convert(args),
        Command::Ntk(args) => ntk(args),
        Command::Sweep(args) => sweep(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let seed = default_seed(args.seed)?;
    let ds = match &args.from_csv {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
            csvio::import_dataset_csv(&text, args.normalize)?
        }
        None => gen_ackley(args.n, args.d, seed)?,
    };
    formats::save_dataset(&args.out, &ds).with_context(|| format!("writing {:?}", args.out))?;
    let delta = check_separation(&ds);
    if ds.n() < 2 {
        println!("warning: separation undefined for n < 2");
    }
    println!("wrote {:?}: n={} d_x={} d_y={} delta={}", args.out, ds.n(), ds.d_x(), ds.d_y(), fmt_f64(delta));
    Ok(EXIT_OK)
}

fn parse_lr(s: &str) -> Result<LearningRate> {
    if s == "theoretical" {
        Ok(LearningRate::Theoretical)
    } else {
        let v: f64 = s.parse().map_err(|_| anyhow!("--lr must be a number or `theoretical`, got `{s}`"))?;
        Ok(LearningRate::Fixed(v))
    }
}

fn train(args: TrainArgs) -> Result<i32> {
    let seed = default_seed(args.seed)?;
    let ds = formats::load_dataset(&args.data)?;
    let shape = NetworkShape::new(ds.d_x(), ds.d_y(), args.width, args.depth);
    let lr = parse_lr(&args.lr)?;
    let cfg = TrainConfig {
        lr,
        max_iters: args.iters,
        target_loss: args.target_loss,
        seed,
        log_every: args.log_every,
        deterministic_reduction: args.deterministic,
    };
    let eta = grelu_core::train::resolve_lr(lr, &shape, ds.n()).map_err(|e| anyhow!("{e}"))?;
    if matches!(lr, LearningRate::Theoretical) {
        println!("eta = {} (theoretical)", fmt_f64(eta));
    } else {
        println!("eta = {}", fmt_f64(eta));
    }

    let net = init_network(shape, seed);
    let write_log = |log: &grelu_core::train::TrainLog| -> Result<()> {
        let mut buf = Vec::new();
        csvio::write_train_log(&mut buf, log)?;
        fs::write(&args.log, buf).with_context(|| format!("writing {:?}", args.log))
    };

    let (outcome, log, checkpoint) = match args.arch {
        ArchArg::Grelu => {
            let gates = compute_gates_all(&net, &ds.x)?;
            if let Some(path) = &args.save_gates {
                formats::save_gates(path, &gates)?;
            }
            match train_grelu(&net, &gates, &ds, &cfg) {
                Ok((trained, log)) => {
                    (log.outcome, log.clone(), Some(NetworkCheckpoint::Grelu(trained)))
                }
                Err(TrainError::Diverged { log, iter, loss, .. }) => {
                    write_log(&log)?;
                    eprintln!("ERROR: divergence guard tripped at iteration {iter} (loss {loss:e})");
                    return Ok(EXIT_DIVERGED);
                }
                Err(e) => bail!("{e}"),
            }
        }
        ArchArg::Relu => {
            if args.save_gates.is_some() {
                bail!("--save-gates applies only to gated networks");
            }
            let relu = ReluNetwork::from_parts(shape, net.c.clone(), net.b.clone(), net.w.clone());
            match train_relu(&relu, &ds, &cfg) {
                Ok((trained, log)) => {
                    (log.outcome, log.clone(), Some(NetworkCheckpoint::Relu(trained)))
                }
                Err(TrainError::Diverged { log, iter, loss, .. }) => {
                    write_log(&log)?;
                    eprintln!("ERROR: divergence guard tripped at iteration {iter} (loss {loss:e})");
                    return Ok(EXIT_DIVERGED);
                }
                Err(e) => bail!("{e}"),
            }
        }
    };
    write_log(&log)?;
    if let (Some(path), Some(net)) = (&args.out_net, &checkpoint) {
        formats::save_network(path, net)?;
    }
    let last = log.rows.last().expect("log never empty");
    println!("final: iter={} loss={}", last.iter, fmt_f64(last.loss));
    Ok(match outcome {
        TrainOutcome::TargetReached => EXIT_OK,
        TrainOutcome::IterationLimit => EXIT_ITERATION_LIMIT,
    })
}

struct ProbeInstance {
    net: GReluNetwork,
    gates: GatePattern,
    ds: Dataset,
}

fn load_instance(args: &ProbeArgs, seed: u64) -> Result<ProbeInstance> {
    match (&args.net, &args.data) {
        (Some(net_path), Some(data_path)) => {
            let net = match formats::load_network(net_path)? {
                NetworkCheckpoint::Grelu(n) => n,
                NetworkCheckpoint::Relu(_) => bail!("probes need a gated checkpoint"),
            };
            let ds = formats::load_dataset(data_path)?;
            let gates = match &args.gates {
                Some(p) => formats::load_gates(p)?,
                None => compute_gates_all(&net, &ds.x)?,
            };
            Ok(ProbeInstance { net, gates, ds })
        }
        _ => {
            let ds = gen_ackley(args.n, args.d, seed)?;
            let net = init_network(NetworkShape::new(args.d, 1, args.width, args.depth), seed);
            let gates = compute_gates_all(&net, &ds.x)?;
            Ok(ProbeInstance { net, gates, ds })
        }
    }
}

fn probe_once(args: &ProbeArgs, inst: &ProbeInstance) -> Result<TheoryReport> {
    let mut report = TheoryReport::default();
    let kinds: Vec<ProbeKind> = match args.which {
        ProbeKind::All => vec![
            ProbeKind::Eig,
            ProbeKind::Cross,
            ProbeKind::Overlap,
            ProbeKind::Znorm,
            ProbeKind::Gradnorm,
            ProbeKind::Initloss,
        ],
        k => vec![k],
    };
    for kind in kinds {
        match kind {
            ProbeKind::Eig => report.extend(eig_bounds_report(&inst.net, &inst.gates)?),
            ProbeKind::Cross => {
                let (r, _) = cross_term_report(&inst.net, &inst.gates, &inst.ds)?;
                report.extend(r);
            }
            ProbeKind::Overlap => {
                // all distinct pairs, every layer; the bound applies to the
                // input-gated layer and is reported there
                for i in 0..inst.ds.n() {
                    for j in (i + 1)..inst.ds.n() {
                        let overlaps = gate_overlap(&inst.net, inst.ds.x.row(i), inst.ds.x.row(j))?;
                        for (k, o) in overlaps.iter().enumerate() {
                            report.records.push(TheoryRecord {
                                quantity: "gate_overlap",
                                k: Some(k),
                                i: Some(i),
                                j: Some(j),
                                measured: *o,
                                bound: 1.0 / 3.0,
                                pass: k > 1 || *o <= 1.0 / 3.0,
                            });
                        }
                    }
                }
            }
            ProbeKind::Znorm => {
                report.extend(z_norm_report(&inst.net, &inst.gates, args.theta, false)?)
            }
            ProbeKind::Decomp => {
                let (_, grads) = all_layer_gradients(&inst.net, &inst.gates, &inst.ds)?;
                let mut w = inst.net.w.clone();
                for (wk, g) in w.iter_mut().zip(&grads) {
                    wk.axpy(-args.eta, g);
                }
                let stepped = inst.net.with_weights(w);
                let residual =
                    decomposition_check(&inst.net, &stepped, &inst.gates, &inst.ds, args.eta)?;
                report.records.push(TheoryRecord {
                    quantity: "decomposition_residual",
                    k: None,
                    i: None,
                    j: None,
                    measured: residual,
                    bound: 1e-10,
                    pass: residual < 1e-10,
                });
            }
            ProbeKind::Descent => {
                let path = args
                    .train_log
                    .as_ref()
                    .ok_or_else(|| anyhow!("--which descent requires --train-log"))?;
                let text = fs::read_to_string(path)?;
                let rows = csvio::read_train_log_rows(&text)?;
                if rows.len() < 2 {
                    bail!("descent probe needs at least 2 log rows");
                }
                let eta = rows[0].2;
                let log = grelu_core::train::TrainLog {
                    rows: rows
                        .iter()
                        .map(|(iter, loss, eta)| grelu_core::train::TrainLogRow {
                            iter: *iter,
                            loss: *loss,
                            grad_norm: 0.0,
                            grad_tdiff: 0.0,
                            tau: 0.0,
                            eta: *eta,
                            wall_ms: 0,
                            hamming: None,
                        })
                        .collect(),
                    eta,
                    outcome: TrainOutcome::IterationLimit,
                };
                let bounds = SpectralBounds::for_shape(&inst.net.shape);
                let fraction =
                    descent_rate_check(&log, bounds.alpha(), inst.net.shape.depth, eta)?;
                report.records.push(TheoryRecord {
                    quantity: "descent_rate_fraction",
                    k: None,
                    i: None,
                    j: None,
                    measured: fraction,
                    bound: 0.95,
                    pass: fraction >= 0.95,
                });
            }
            ProbeKind::Gradnorm => {
                let bounds = SpectralBounds::for_shape(&inst.net.shape);
                let (_, gamma_hat) = cross_term_report(&inst.net, &inst.gates, &inst.ds)?;
                report.extend(grad_norm_bound_check(
                    &inst.net,
                    &inst.gates,
                    &inst.ds,
                    bounds.beta(),
                    gamma_hat,
                )?);
            }
            ProbeKind::Initloss => {
                report.extend(initial_loss_check(&inst.net, &inst.gates, &inst.ds)?)
            }
            ProbeKind::All => unreachable!(),
        }
    }
    Ok(report)
}

fn probe(args: ProbeArgs) -> Result<i32> {
    let base_seed = default_seed(args.seed)?;
    let mut combined = TheoryReport::default();
    let mut passing_seeds = 0usize;
    let seeds = args.seeds.max(1);
    for s in 0..seeds {
        let inst = load_instance(&args, base_seed + s as u64)?;
        let report = probe_once(&args, &inst)?;
        let pass = report.all_pass();
        passing_seeds += pass as usize;
        println!("seed {}: {}", base_seed + s as u64, if pass { "pass" } else { "FAIL" });
        combined.extend(report);
    }
    let mut buf = Vec::new();
    csvio::write_theory_report(&mut buf, &combined)?;
    fs::write(&args.out, buf).with_context(|| format!("writing {:?}", args.out))?;
    let fraction = passing_seeds as f64 / seeds as f64;
    println!(
        "{passing_seeds}/{seeds} seeds pass (quota {}); report written to {:?}",
        args.quota, args.out
    );
    Ok(if fraction >= args.quota { EXIT_OK } else { EXIT_FAIL })
}

fn convert(args: ConvertArgs) -> Result<i32> {
    let net = match formats::load_network(&args.net)? {
        NetworkCheckpoint::Grelu(n) => n,
        NetworkCheckpoint::Relu(_) => bail!("conversion expects a gated checkpoint"),
    };
    let ds = formats::load_dataset(&args.data)?;
    let gates = match &args.gates {
        Some(p) => formats::load_gates(p)?,
        None => compute_gates_all(&net, &ds.x)?,
    };
    let relu = grelu_to_relu(&net, &gates, &ds)?;
    formats::save_network(&args.out, &NetworkCheckpoint::Relu(relu.clone()))?;
    println!("wrote converted network to {:?}", args.out);
    if args.verify {
        let report = verify_equivalence(&net, &gates, &relu, &ds)?;
        for (k, dev) in report.per_layer_max_dev.iter().enumerate() {
            println!("layer {k}: max deviation {}", fmt_f64(*dev));
        }
        println!("output max deviation: {}", fmt_f64(report.output_max_dev));
        println!(
            "loss gated = {}, loss relu = {}, relative gap = {}",
            fmt_f64(report.loss_grelu),
            fmt_f64(report.loss_relu),
            fmt_f64(report.loss_gap())
        );
        println!("sign violations: {}", report.sign_violations);
        if report.max_layer_dev() > 1e-6 || report.sign_violations > 0 {
            eprintln!("ERROR: footprint verification failed");
            return Ok(EXIT_FAIL);
        }
    }
    Ok(EXIT_OK)
}

fn ntk(args: NtkArgs) -> Result<i32> {
    let seed = default_seed(args.seed)?;
    let net = match formats::load_network(&args.net)? {
        NetworkCheckpoint::Grelu(n) => n,
        NetworkCheckpoint::Relu(_) => bail!("tangent kernels are defined for gated checkpoints"),
    };
    let ds = formats::load_dataset(&args.data)?;
    let gates = compute_gates_all(&net, &ds.x)?;
    match args.mode {
        NtkMode::Kernel => {
            let kernel = ntk_kernel(&net, &gates, &ds, args.p)?;
            let mut buf = Vec::new();
            csvio::write_kernel(&mut buf, &kernel, net.shape.m, net.shape.depth)?;
            fs::write(&args.out, buf)?;
            println!("wrote kernel (p={}) to {:?}", args.p, args.out);
        }
        NtkMode::Ratio => {
            let pert = random_spectral_perturbations(&net.shape, args.xi, seed);
            let ratio = ntk_ratio(&net, &pert, ds.x.row(0), args.p, args.xi)?;
            fs::write(&args.out, format!("quantity,value\nntk_ratio,{}\n", fmt_f64(ratio)))?;
            println!("ntk ratio at xi={}: {}", fmt_f64(args.xi), fmt_f64(ratio));
        }
        NtkMode::Drift => {
            let path = args.net2.as_ref().ok_or_else(|| anyhow!("--mode drift requires --net2"))?;
            let trained = match formats::load_network(path)? {
                NetworkCheckpoint::Grelu(n) => n,
                NetworkCheckpoint::Relu(_) => bail!("--net2 must be a gated checkpoint"),
            };
            let drift = kernel_drift(&net, &trained, &gates, &ds, args.p)?;
            fs::write(&args.out, format!("quantity,value\nkernel_drift,{}\n", fmt_f64(drift)))?;
            println!("kernel drift: {}", fmt_f64(drift));
        }
    }
    Ok(EXIT_OK)
}

fn sweep(args: SweepArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {:?}", args.config))?;
    let cfg = SweepConfig::parse(&text)?;
    if args.print_config {
        print!("{}", cfg.canonical());
        return Ok(EXIT_OK);
    }
    let out = run_sweep(&cfg, args.jobs)?;
    write_rel(&args.config, &cfg.csv_path, out.csv.as_bytes())?;
    if let Some(svg) = &out.svg {
        write_rel(&args.config, &cfg.svg_path, svg.as_bytes())?;
    }
    for r in &out.results {
        let last = r.log.rows.last().expect("log never empty");
        println!(
            "{}: final loss {}{}",
            r.point.label(),
            fmt_f64(last.loss),
            if r.diverged { " (diverged)" } else { "" }
        );
    }
    println!("wrote {} grid points to {}", out.results.len(), cfg.csv_path);
    Ok(EXIT_OK)
}

/// Output paths in a sweep config are resolved relative to the config file.
fn write_rel(config: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = match config.parent() {
        Some(dir) if !Path::new(rel).is_absolute() => dir.join(rel),
        _ => PathBuf::from(rel),
    };
    fs::write(&path, bytes).with_context(|| format!("writing {path:?}"))
}
