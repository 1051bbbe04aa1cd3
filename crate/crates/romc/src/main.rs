//! Command-line front end: plan budgets, compress checkpoints, report
//! costs, verify artifacts and generate toy fixtures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use romc::error::{Error, Result};
use romc::modelgraph::{ModelConfig, ModelState};
use romc::pipeline::{
    self, CompressObserver, CompressOptions, RomMeta, SlotRecord, StoreDtype,
};
use romc::planner::{self, CompressionPlan};
use romc::tensorstore::{TensorArchive, TokenBatch};
use romc::toygen::{self, ToyParams};

#[derive(Parser)]
#[command(
    name = "romc",
    version,
    about = "Low-rank compression of transformer checkpoints driven by calibration activations"
)]
struct Cli {
    /// Cap the internal thread pool (defaults to all cores). Results are
    /// identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a parameter budget into a per-layer rank plan.
    Plan(PlanArgs),
    /// Decompose the planned slots of a checkpoint and write the result.
    Compress(CompressArgs),
    /// Print parameter and MAC accounting for a config and optional plan.
    Report(ReportArgs),
    /// Check a compressed archive against its original.
    Verify(VerifyArgs),
    /// Generate a seeded toy checkpoint, config and calibration batch.
    GenToy(GenToyArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overall parameter budget; presets exist for 0.90, 0.80 and 0.50.
    #[arg(long)]
    budget: Option<f64>,
    /// Compress only the last K decoder modules.
    #[arg(long)]
    modules_from_end: Option<usize>,
    /// Fraction of each compressed module's parameters to keep.
    #[arg(long)]
    module_budget: Option<f64>,
    /// For a non-preset budget, enumerate (K, b) candidates instead of
    /// failing.
    #[arg(long)]
    search: bool,
    /// Sequence length for the MAC totals in the printed table.
    #[arg(long, default_value_t = planner::DEFAULT_MAC_SEQ_LEN)]
    seq_len_for_macs: usize,
    /// Where to write the plan JSON.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Source checkpoint archive.
    #[arg(long)]
    archive: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Plan JSON produced by `plan` (hand-edits welcome).
    #[arg(long)]
    plan: PathBuf,
    /// Calibration token batch (JSON lines).
    #[arg(long)]
    calib: PathBuf,
    /// Output archive path.
    #[arg(short, long)]
    output: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Recorded in the provenance sidecar; the pipeline itself is
    /// deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence length for the MAC totals in the report.
    #[arg(long, default_value_t = planner::DEFAULT_MAC_SEQ_LEN)]
    seq_len_for_macs: usize,
    /// Carry hidden states forward instead of recomputing each prefix.
    #[arg(long)]
    reuse_hidden: bool,
    /// Storage dtype for factor tensors: f32, f16, bf16 or keep.
    #[arg(long, default_value = "f32")]
    store_dtype: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Optional plan to account for.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Optional archive to cross-check element counts against.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, default_value_t = planner::DEFAULT_MAC_SEQ_LEN)]
    seq_len_for_macs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Original (dense) checkpoint archive.
    #[arg(long)]
    original: PathBuf,
    /// Compressed archive to check.
    #[arg(long)]
    compressed: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// The plan the compressed archive was built from.
    #[arg(long)]
    plan: PathBuf,
    /// Held-out token batch for the drift statistics.
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args)]
struct GenToyArgs {
    /// Hidden size.
    #[arg(long = "d")]
    hidden: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    intermediate: usize,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration batch size.
    #[arg(long, default_value_t = 512)]
    batch: usize,
    /// Calibration sequence length.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long)]
    max_seq: Option<usize>,
    /// Weight scale of the seeded Gaussians.
    #[arg(long, default_value_t = 0.02)]
    scale: f32,
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
}

fn human_count(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.2}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.2}M", x / 1e6)
    } else {
        format!("{n}")
    }
}

fn human_macs(n: u64) -> String {
    format!("{:.2}G", n as f64 / 1e9)
}

fn print_cost_table(config: &ModelConfig, plan: Option<&CompressionPlan>, seq_len: usize) {
    let dense = planner::cost_report(config, None, seq_len);
    println!(
        "params (dense):   {:>16}  ({})",
        dense.total_params,
        human_count(dense.total_params)
    );
    println!(
        "MACs @ seq {:>4}:  {:>16}  ({})",
        seq_len,
        dense.macs,
        human_macs(dense.macs)
    );
    if let Some(plan) = plan {
        let planned = planner::cost_report(config, Some(plan), seq_len);
        println!(
            "params (planned): {:>16}  ({})",
            planned.total_params,
            human_count(planned.total_params)
        );
        println!(
            "MACs (planned):   {:>16}  ({})",
            planned.macs,
            human_macs(planned.macs)
        );
        println!(
            "overall budget:   {:>16.4}",
            planner::overall_budget_of(plan, config)
        );
    }
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    let pair = match (args.budget, args.modules_from_end, args.module_budget) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(Error::Argument(
                "pass either --budget or the --modules-from-end/--module-budget pair, not both"
                    .into(),
            ))
        }
        (None, Some(k), Some(b)) => Some((k, b)),
        (None, None, None) if args.search => None,
        (None, _, _) => {
            return Err(Error::Argument(
                "pass --budget or both --modules-from-end and --module-budget".into(),
            ))
        }
        (Some(budget), None, None) => match planner::preset(budget) {
            Ok(kb) => Some(kb),
            Err(e) if args.search => {
                println!("no preset for budget {budget}; candidates:");
                for c in planner::budget_candidates(&config, budget)? {
                    println!(
                        "  --modules-from-end {:>2} --module-budget {:.4}  -> {} params, budget {:.4}",
                        c.modules_from_end,
                        c.module_budget,
                        human_count(c.total_params),
                        c.achieved_budget
                    );
                }
                let _ = e;
                None
            }
            Err(e) => return Err(e),
        },
    };

    let Some((k, b)) = pair else {
        return Ok(());
    };
    let plan = planner::make_plan(&config, k, b)?;
    println!(
        "plan: last {k} modules at module budget {b} ({} slots)",
        plan.ranks().len()
    );
    print_cost_table(&config, Some(&plan), args.seq_len_for_macs);
    if let Some(path) = &args.output {
        plan.save(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

struct ProgressPrinter;

impl CompressObserver for ProgressPrinter {
    fn on_slot_done(&mut self, record: &SlotRecord) {
        if record.skipped {
            println!(
                "module {:>3} {:<5} rank {:>5}  skipped (at or past the never-worse bound)",
                record.module_index, record.slot, record.rank
            );
        } else {
            println!(
                "module {:>3} {:<5} rank {:>5}  recon {:.4e}  energy kept {:.4e}  ({:.2}s)",
                record.module_index,
                record.slot,
                record.rank,
                record.reconstruction_error,
                record.retained_energy,
                record.wall_time.as_secs_f64()
            );
        }
    }
}

fn cmd_compress(args: &CompressArgs) -> Result<()> {
    let store = StoreDtype::parse(&args.store_dtype)?;
    let config = ModelConfig::load(&args.config)?;
    let archive = TensorArchive::open(&args.archive)?;
    let mut state = ModelState::from_archive(&archive, config)?;
    let plan = CompressionPlan::load(&args.plan)?;
    let calib = TokenBatch::load(&args.calib)?;

    let opts = CompressOptions {
        seq_len_for_macs: args.seq_len_for_macs,
        reuse_hidden: args.reuse_hidden,
    };
    let report =
        pipeline::compress_observed(&mut state, &plan, &calib, &opts, &mut ProgressPrinter)?;

    pipeline::save_compressed(&archive, &state, &args.output, store)?;
    let meta = RomMeta::new(
        &plan,
        &calib,
        &args.calib.display().to_string(),
        args.seed,
        &args.store_dtype,
    );
    meta.save(&args.output)?;
    if let Some(path) = &args.report {
        report.save_json(path)?;
    }

    println!(
        "params {} -> {}  ({} -> {})",
        report.params_before,
        report.params_after,
        human_count(report.params_before),
        human_count(report.params_after)
    );
    println!(
        "MACs @ seq {} {} -> {}  ({} -> {})",
        report.seq_len_for_macs,
        report.macs_before,
        report.macs_after,
        human_macs(report.macs_before),
        human_macs(report.macs_after)
    );
    println!(
        "{} slots in {:.2}s, planned peak workspace {}",
        report.records.len(),
        report.total_wall_time.as_secs_f64(),
        human_count(report.peak_planned_bytes)
    );
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    let plan = match &args.plan {
        Some(path) => {
            let plan = CompressionPlan::load(path)?;
            plan.validate(&config)?;
            Some(plan)
        }
        None => None,
    };
    print_cost_table(&config, plan.as_ref(), args.seq_len_for_macs);
    if let Some(path) = &args.archive {
        let archive = TensorArchive::open(path)?;
        println!(
            "archive elements: {:>16}  ({})",
            archive.total_elements(),
            human_count(archive.total_elements())
        );
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let config = ModelConfig::load(&args.config)?;
    let original =
        ModelState::from_archive(&TensorArchive::open(&args.original)?, config.clone())?;
    let compressed =
        ModelState::from_archive(&TensorArchive::open(&args.compressed)?, config)?;
    let plan = CompressionPlan::load(&args.plan)?;
    let calib = TokenBatch::load(&args.calib)?;

    let summary = pipeline::verify(&original, &compressed, &plan, &calib)?;
    for check in &summary.checks {
        println!(
            "[{}] {} — {}",
            if check.passed { "pass" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    println!(
        "logits drift: max {:.4e}, frobenius {:.4e}, mean {:.4e}",
        summary.logits_drift.max_abs,
        summary.logits_drift.frobenius,
        summary.logits_drift.mean_abs
    );
    let drift = pipeline::output_drift(&original, &compressed, &calib)?;
    for d in &drift {
        println!(
            "block {:>3} output drift: max {:.4e}, frobenius {:.4e}",
            d.module_index, d.max_abs, d.frobenius
        );
    }
    Ok(summary.all_passed())
}

fn cmd_gen_toy(args: &GenToyArgs) -> Result<()> {
    let params = ToyParams {
        hidden: args.hidden,
        heads: args.heads,
        layers: args.layers,
        intermediate: args.intermediate,
        vocab: args.vocab,
        max_seq: args.max_seq.unwrap_or_else(|| args.seq_len.max(128) * 2),
        seed: args.seed,
        scale: args.scale,
    };
    toygen::write_toy_dir(&args.output, &params, args.batch, args.seq_len)?;
    println!(
        "wrote {}, {} and {} (seed {})",
        args.output.join("model.safetensors").display(),
        args.output.join("config.json").display(),
        args.output.join("calib.jsonl").display(),
        args.seed
    );
    Ok(())
}

fn build_thread_pool(threads: Option<usize>) {
    if let Some(n) = threads {
        // ignore "already initialized" in case a test harness built one
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: &Cli) -> Result<bool> {
    build_thread_pool(cli.threads);
    match &cli.command {
        Command::Plan(args) => cmd_plan(args).map(|()| true),
        Command::Compress(args) => cmd_compress(args).map(|()| true),
        Command::Report(args) => cmd_report(args).map(|()| true),
        Command::Verify(args) => cmd_verify(args),
        Command::GenToy(args) => cmd_gen_toy(args).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
