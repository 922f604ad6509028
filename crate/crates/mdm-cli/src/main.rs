//! `mdm` — command-line front end for the distillation pipeline: toy data
//! generation, expert-pool training, synthetic-set seeding, distillation,
//! retrieval evaluation, and the gradient-check suite.
//!
//! Human-readable results go to stdout (JSON documents); diagnostics and
//! structured errors go to stderr. Exit codes: 0 success, 1 usage/config,
//! 2 data/format, 3 numeric failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mdm_core::dataio::{
    gen_toy, load_config, load_pairs, load_synthetic, save_pairs, save_synthetic, ToySpec,
};
use mdm_core::distill::{run_steps, seed_synthetic, DistillState, MdmConfig};
use mdm_core::error::{MdmError, Result};
use mdm_core::experts::{load_pool, save_pool, train_pool};
use mdm_core::gradcheck::{run_gradcheck, GradFault};
use mdm_core::numerics::Rng;
use mdm_core::projector::{Activation, ArchSpec};
use mdm_core::retrieval::{cross_arch_sweep, csv_header, csv_row, EvalTrainConfig};
use mdm_core::seeding::{quantization_error, SeedMethod};
use mdm_core::sphere::KernelKind;

#[derive(Parser)]
#[command(
    name = "mdm",
    version,
    about = "Multimodal embedding-set distillation toolkit"
)]
struct Cli {
    /// Worker threads (default: all cores; MDM_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    KmeansJoint,
    Kcenter,
    Herding,
    Random,
}

impl From<MethodArg> for SeedMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::KmeansJoint => SeedMethod::KmeansJoint,
            MethodArg::Kcenter => SeedMethod::Kcenter,
            MethodArg::Herding => SeedMethod::Herding,
            MethodArg::Random => SeedMethod::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    Geodesic,
    Chordal,
    Laplacian,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Geodesic => KernelKind::Geodesic,
            KernelArg::Chordal => KernelKind::Chordal,
            KernelArg::Laplacian => KernelKind::Laplacian,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the clustered toy dataset: train/test pairs plus manifests.
    GenToy {
        /// Training pairs; the test split gets an extra pairs/5.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        /// Image embedding width.
        #[arg(long, default_value_t = 32)]
        dim_v: usize,
        /// Text embedding width.
        #[arg(long, default_value_t = 48)]
        dim_t: usize,
        /// Intra-cluster and cross-modal noise scale.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (train.mdmx/json, test.mdmx/json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pool of experts from a shared anchor, buffering every
    /// epoch checkpoint.
    TrainExperts {
        /// Training pairs (.mdmx).
        #[arg(long)]
        data: PathBuf,
        /// Number of experts.
        #[arg(long, default_value_t = 2)]
        experts: u32,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Projector architecture JSON; default: one linear+tanh layer to
        /// width 16 per branch.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Pool output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select K real pairs as the initial synthetic set.
    Seed {
        #[arg(long)]
        data: PathBuf,
        /// Expert pool directory (anchor encodes the joint features).
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::KmeansJoint)]
        method: MethodArg,
        /// Synthetic pairs K.
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output synthetic set (.mdms).
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a seeded synthetic set against real data.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Seeded or partially distilled synthetic set (.mdms).
        #[arg(long)]
        syn_in: PathBuf,
        /// JSON config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (syn_final.mdms, run_log.jsonl, run_config.json).
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration budget.
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        kernel: Option<KernelArg>,
    },
    /// Train fresh projectors on a synthetic set and report test recall.
    Eval {
        #[arg(long)]
        syn: PathBuf,
        /// Held-out test pairs (.mdmx).
        #[arg(long)]
        test: PathBuf,
        /// ArchSpec JSON: one object, or an array for a sweep.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override evaluation training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Emit the full JSON report instead of the CSV table.
        #[arg(long)]
        json: bool,
        /// Emit the CSV table (default).
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Finite-difference verification of all analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn emit(doc: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(doc).expect("stable schema")
    );
}

fn default_arch(d_v: usize, d_t: usize) -> Result<ArchSpec> {
    ArchSpec::new(vec![d_v, 16], vec![d_t, 16], Activation::Tanh)
}

fn arch_label(a: &ArchSpec) -> String {
    let dims = |d: &[usize]| {
        d.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("-")
    };
    let act = match a.activation {
        Activation::Identity => "identity",
        Activation::Tanh => "tanh",
    };
    format!("v{}_t{}_{}", dims(&a.image_dims), dims(&a.text_dims), act)
}

fn cmd_gen_toy(spec: ToySpec, out: &Path) -> Result<()> {
    let (train, test) = gen_toy(&spec)?;
    std::fs::create_dir_all(out)?;
    save_pairs(&train, &out.join("train.mdmx"))?;
    save_pairs(&test, &out.join("test.mdmx"))?;
    emit(&json!({
        "resolved_config": spec,
        "out": out,
        "train": train.manifest,
        "test": test.manifest,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_experts(
    data_path: &Path,
    experts: u32,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    arch_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let data = load_pairs(data_path)?;
    let arch = match arch_path {
        Some(p) => {
            let a: ArchSpec = load_config(p)?;
            a.validate()?;
            a
        }
        None => default_arch(data.manifest.d_v, data.manifest.d_t)?,
    };
    if lr == 0.0 {
        log::warn!("lr = 0: every expert checkpoint will equal the anchor");
    }
    let (pool, losses) = train_pool(&data, &arch, experts, epochs, lr, batch, seed)?;
    save_pool(&pool, seed, data.manifest.fingerprint, out)?;
    emit(&json!({
        "resolved_config": {
            "experts": experts,
            "epochs": epochs,
            "lr": lr,
            "batch": batch,
            "seed": seed,
            "arch": pool.arch,
        },
        "out": out,
        "data_fingerprint": data.manifest.fingerprint,
        "epoch_losses": losses,
    }));
    Ok(())
}

fn cmd_seed(
    data_path: &Path,
    pool_path: &Path,
    method: SeedMethod,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = load_pairs(data_path)?;
    if k == 0 || k > data.len() {
        return Err(MdmError::Config(format!(
            "--pairs must be in [1, {}], got {k}",
            data.len()
        )));
    }
    let (pool, _) = load_pool(pool_path)?;
    let mut rng = Rng::new(seed);
    let (selection, syn) = seed_synthetic(&data, &pool, method, k, &mut rng)?;
    // Uniform figure of merit alongside the method-specific objective.
    let (zv, zt, _) = pool.anchor.projector.forward(&data.image, &data.text)?;
    let joint = zv.hcat(&zt)?;
    let quant = quantization_error(&joint, &selection.indices)?;
    save_synthetic(&syn, None, out)?;
    emit(&json!({
        "resolved_config": { "method": selection.method, "pairs": k, "seed": seed },
        "out": out,
        "selection": selection,
        "quantization_error": quant,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    data_path: &Path,
    pool_path: &Path,
    syn_in: &Path,
    config: Option<&Path>,
    out: &Path,
    max_iters: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    kernel: Option<KernelKind>,
) -> Result<()> {
    let mut cfg: MdmConfig = match config {
        Some(p) => load_config(p)?,
        None => MdmConfig::default(),
    };
    if let Some(v) = max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = kernel {
        cfg.kernel = v;
    }
    cfg.validate()?;

    let data = load_pairs(data_path)?;
    let (pool, _) = load_pool(pool_path)?;
    let (syn, rng_state) = load_synthetic(syn_in)?;
    let rng = match rng_state {
        Some(s) => Rng::from_state(s),
        None => Rng::new(cfg.seed),
    };
    let mut state = DistillState { syn, rng };

    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("run_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let mut log_file = BufWriter::new(File::create(out.join("run_log.jsonl"))?);
    let mut io_err: Option<std::io::Error> = None;
    let result = run_steps(&mut state, &data, &pool, &cfg, cfg.max_iters, |log| {
        if io_err.is_none() {
            let line = serde_json::to_string(log).expect("stable schema");
            if let Err(e) = writeln!(log_file, "{line}") {
                io_err = Some(e);
            }
        }
    });
    log_file.flush()?;
    if let Some(e) = io_err {
        return Err(MdmError::Io(e));
    }
    let logs = result?;
    save_synthetic(
        &state.syn,
        Some(&state.rng.state()),
        &out.join("syn_final.mdms"),
    )?;
    emit(&json!({
        "resolved_config": cfg,
        "out": out,
        "iterations_run": logs.len(),
        "total_iterations": state.syn.iteration,
        "stopped_early": logs.len() < cfg.max_iters,
        "first_loss": logs.first().map(|l| l.loss.total),
        "final_loss": logs.last().map(|l| l.loss.total),
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    syn_path: &Path,
    test_path: &Path,
    arch_path: &Path,
    repeats: usize,
    seed: u64,
    epochs: Option<usize>,
    lr: Option<f64>,
    as_json: bool,
) -> Result<()> {
    let (syn, _) = load_synthetic(syn_path)?;
    let test = load_pairs(test_path)?;
    let text = std::fs::read_to_string(arch_path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| MdmError::Config(format!("{}: {e}", arch_path.display())))?;
    let archs: Vec<ArchSpec> = if value.is_array() {
        serde_json::from_value(value)
            .map_err(|e| MdmError::Config(format!("{}: {e}", arch_path.display())))?
    } else {
        vec![serde_json::from_value(value)
            .map_err(|e| MdmError::Config(format!("{}: {e}", arch_path.display())))?]
    };
    for a in &archs {
        a.validate()?;
    }
    let mut cfg = EvalTrainConfig::default();
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let reports = cross_arch_sweep(&syn, &test, &archs, &cfg, repeats, &mut rng)?;
    if as_json {
        let rows: Vec<serde_json::Value> = archs
            .iter()
            .zip(&reports)
            .map(|(a, r)| json!({ "arch": a, "report": r }))
            .collect();
        emit(&json!({
            "resolved_config": { "repeats": repeats, "seed": seed, "train": cfg },
            "results": rows,
        }));
    } else {
        println!("arch,{}", csv_header());
        for (a, r) in archs.iter().zip(&reports) {
            println!("{},{}", arch_label(a), csv_row(r));
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize) -> Result<()> {
    let fault = match std::env::var("MDM_GRADCHECK_FAULT") {
        Ok(v) if !v.is_empty() => Some(v.parse::<GradFault>()?),
        _ => None,
    };
    if fault.is_some() {
        log::warn!("gradient fault injection active: {fault:?}");
    }
    let started = std::time::Instant::now();
    let report = run_gradcheck(seed, instances, fault)?;
    emit(&json!({
        "resolved_config": { "seed": seed, "instances": instances },
        "elapsed_s": started.elapsed().as_secs_f64(),
        "report": report,
    }));
    if !report.passed {
        return Err(MdmError::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_err()
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy {
            pairs,
            clusters,
            dim_v,
            dim_t,
            noise,
            seed,
            out,
        } => {
            let spec = ToySpec {
                n_pairs: pairs,
                d_v: dim_v,
                d_t: dim_t,
                n_clusters: clusters,
                intra_noise: noise,
                cross_noise: noise,
                seed,
            };
            cmd_gen_toy(spec, &out)
        }
        Command::TrainExperts {
            data,
            experts,
            epochs,
            lr,
            batch,
            seed,
            arch,
            out,
        } => cmd_train_experts(
            &data,
            experts,
            epochs,
            lr,
            batch,
            seed,
            arch.as_deref(),
            &out,
        ),
        Command::Seed {
            data,
            pool,
            method,
            pairs,
            seed,
            out,
        } => cmd_seed(&data, &pool, method.into(), pairs, seed, &out),
        Command::Distill {
            data,
            pool,
            syn_in,
            config,
            out,
            max_iters,
            seed,
            lr,
            kernel,
        } => cmd_distill(
            &data,
            &pool,
            &syn_in,
            config.as_deref(),
            &out,
            max_iters,
            seed,
            lr,
            kernel.map(Into::into),
        ),
        Command::Eval {
            syn,
            test,
            arch,
            repeats,
            seed,
            epochs,
            lr,
            json,
            csv: _,
        } => cmd_eval(&syn, &test, &arch, repeats, seed, epochs, lr, json),
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("MDM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    if let Err(err) = dispatch(cli) {
        let doc = json!({
            "error": err.class(),
            "message": err.to_string(),
            "exit": err.exit_code(),
        });
        eprintln!("{}", serde_json::to_string(&doc).expect("stable schema"));
        std::process::exit(err.exit_code());
    }
}
