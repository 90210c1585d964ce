//! Command-line entry point: dataset generation, training, evaluation,
//! ablations, transfer learning, gradient checks and visualization.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/numeric error. All
//! randomness is seeded; identical invocations write byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use rfpm::config::KvConfig;
use rfpm::datasynth::{gen_dataset, load_dataset, write_dataset, GenSpec, Sample};
use rfpm::error::Result;
use rfpm::flownet::{load_checkpoint, save_checkpoint, EstimatorConfig};
use rfpm::gradcheck::run_suite;
use rfpm::metrics_io::{atomic_write, flow_to_color, write_flo, write_ppm};
use rfpm::train::{
    ablate, ablate_csv, ablate_table, ablation_grid, eval_model, history_csv,
    iterations_to_reach, predict_flow, split_dataset, train, transfer,
    TrainConfig, TransferPlan,
};

#[derive(Parser)]
#[command(
    name = "rfpm",
    version,
    about = "Residual feature pyramids for optical flow: train, evaluate and verify at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run finite-difference gradient checks over the operation suite
    Gradcheck {
        /// Comma-separated op names, or "all"
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate a synthetic dataset with exact ground-truth flow
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a flow estimator on a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plain-text key/value config file; flags override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Column kinds such as W/R/W
        #[arg(long)]
        columns: Option<String>,
        /// Repair-mask levels such as 1,2 (empty string disables masks)
        #[arg(long)]
        mask_levels: Option<String>,
        /// Asymmetric chromatic augmentation probability
        #[arg(long)]
        ada: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint: prints AEPE / F1-all, writes flows and colorings
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train an ablation grid (axis from config key `ablate_axis`)
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Extend a trained checkpoint with fresh pyramid columns and fine-tune
    Transfer {
        /// Base (smaller) model checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        columns: Option<String>,
        #[arg(long)]
        mask_levels: Option<String>,
        #[arg(long)]
        ada: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Render ground-truth (and optional predicted) flows as color images
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(2);
        }
    }
}

fn load_kv(config: &Option<PathBuf>) -> Result<KvConfig> {
    match config {
        Some(path) => KvConfig::parse(&fs::read_to_string(path)?),
        None => Ok(KvConfig::default()),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_kv(
    config: &Option<PathBuf>,
    columns: &Option<String>,
    mask_levels: &Option<String>,
    ada: Option<f64>,
    iters: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<KvConfig> {
    let mut kv = load_kv(config)?;
    if let Some(c) = columns {
        // flag overrides any canonical per-column form from the file
        kv.remove("ncols");
        kv.remove_prefix("kinds.");
        kv.remove_prefix("channels.");
        kv.set("columns", c);
    }
    if let Some(m) = mask_levels {
        kv.set("mask_levels", m.trim());
    }
    if let Some(v) = ada {
        kv.set("ada", v);
    }
    if let Some(v) = iters {
        kv.set("iters", v);
    }
    if let Some(v) = batch {
        kv.set("batch", v);
    }
    if let Some(v) = lr {
        kv.set("lr", v);
    }
    if let Some(v) = seed {
        kv.set("seed", v);
    }
    if let Some(v) = threads {
        kv.set("threads", v);
    }
    Ok(kv)
}

fn load_samples(data: &Path) -> Result<Vec<Sample>> {
    let samples = load_dataset(data)?;
    println!("loaded {} samples from {}", samples.len(), data.display());
    Ok(samples)
}

fn print_eval(prefix: &str, aepe: f64, f1: f64) {
    println!("{prefix}: aepe = {aepe:.4} px, f1_all = {f1:.2} %");
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Cmd::Gradcheck { ops, seed } => {
            let results = run_suite(&ops, seed)?;
            println!("{:<16} {:>12} {:>10}  status", "op", "max_rel_err", "threshold");
            let mut all_ok = true;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{:<16} {:>12.3e} {:>10.0e}  {status}",
                    r.name, r.max_err, r.threshold
                );
                all_ok &= r.passed();
            }
            Ok(if all_ok { 0 } else { 2 })
        }
        Cmd::GenData {
            out,
            count,
            size,
            seed,
        } => {
            let spec = GenSpec {
                count,
                size,
                seed,
                ..GenSpec::default()
            };
            let samples = gen_dataset(&spec)?;
            write_dataset(&out, &samples, &spec)?;
            println!(
                "wrote {} sample triplets ({}x{}, seed {}) to {}",
                samples.len(),
                size,
                size,
                seed,
                out.display()
            );
            Ok(0)
        }
        Cmd::Train {
            data,
            out,
            config,
            columns,
            mask_levels,
            ada,
            iters,
            batch,
            lr,
            seed,
            threads,
        } => {
            let kv = assemble_kv(
                &config, &columns, &mask_levels, ada, iters, batch, lr, seed, threads,
            )?;
            let est = EstimatorConfig::from_kv(&kv)?;
            let tc = TrainConfig::from_kv(&kv)?;
            let samples = load_samples(&data)?;
            println!(
                "training {} (masks {:?}) for {} iterations, batch {}",
                est.rfpm.kinds_string(),
                est.rfpm.mask_levels,
                tc.iterations,
                tc.batch_size
            );
            let outcome = train(&est, &tc, &samples)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&out.join("model.ckpt"), &outcome.params, &est)?;
            atomic_write(&out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
            print_eval("zero-flow baseline", outcome.zero_flow.aepe, outcome.zero_flow.f1_all);
            print_eval("held-out", outcome.final_eval.aepe, outcome.final_eval.f1_all);
            if let Some(thin) = outcome.final_eval_thin {
                print_eval("held-out thin split", thin.aepe, thin.f1_all);
            }
            if outcome.diverged {
                eprintln!("training diverged; wrote the last good checkpoint");
                return Ok(2);
            }
            Ok(0)
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            threads,
        } => {
            let (store, est) = load_checkpoint(&ckpt)?;
            let samples = load_samples(&data)?;
            fs::create_dir_all(&out)?;
            for (i, sample) in samples.iter().enumerate() {
                let pred = predict_flow(&store, &est, sample)?;
                write_flo(&pred, &out.join(format!("{i:05}_pred.flo")))?;
                write_ppm(
                    &flow_to_color(&pred, None)?,
                    &out.join(format!("{i:05}_pred.ppm")),
                )?;
            }
            let ev = eval_model(&store, &est, &samples, threads.unwrap_or(1))?;
            print_eval("dataset", ev.aepe, ev.f1_all);
            println!("wrote {} predictions to {}", samples.len(), out.display());
            Ok(0)
        }
        Cmd::Ablate {
            data,
            out,
            config,
            iters,
            batch,
            lr,
            seed,
            threads,
        } => {
            let kv = assemble_kv(&config, &None, &None, None, iters, batch, lr, seed, threads)?;
            let tc = TrainConfig::from_kv(&kv)?;
            let axis = kv.raw("ablate_axis").unwrap_or("headline").to_string();
            let seeds: Vec<u64> = kv.get_list("ablate_seeds")?.unwrap_or_else(|| vec![1, 2, 3]);
            let samples = load_samples(&data)?;
            let grid = ablation_grid(&axis, tc.seed)?;
            println!(
                "ablation axis '{axis}': {} configs x {} seeds, {} iterations each",
                grid.len(),
                seeds.len(),
                tc.iterations
            );
            let rows = ablate(&grid, &tc, &samples, &seeds)?;
            fs::create_dir_all(&out)?;
            atomic_write(&out.join("ablate.csv"), ablate_csv(&rows).as_bytes())?;
            let table = ablate_table(&rows);
            atomic_write(&out.join("ablate.txt"), table.as_bytes())?;
            print!("{table}");
            Ok(0)
        }
        Cmd::Transfer {
            ckpt,
            data,
            out,
            config,
            columns,
            mask_levels,
            ada,
            iters,
            batch,
            lr,
            seed,
            threads,
        } => {
            let kv = assemble_kv(
                &config, &columns, &mask_levels, ada, iters, batch, lr, seed, threads,
            )?;
            // target defaults to the full three-column model
            let target_est = if kv.raw("ncols").is_some() || kv.raw("columns").is_some() {
                EstimatorConfig::from_kv(&kv)?
            } else {
                let mut kv2 = kv.clone();
                kv2.set("columns", "W/R/W");
                if kv2.raw("mask_levels").is_none() {
                    kv2.set("mask_levels", "1,2");
                }
                EstimatorConfig::from_kv(&kv2)?
            };
            let tc = TrainConfig::from_kv(&kv)?;
            let samples = load_samples(&data)?;

            // the baseline to match: the base checkpoint's own held-out AEPE
            let (base_store, base_est) = load_checkpoint(&ckpt)?;
            let (_, holdout) = split_dataset(&samples, tc.holdout_fraction);
            let base_eval = eval_model(&base_store, &base_est, holdout, tc.threads)?;
            print_eval("base checkpoint held-out", base_eval.aepe, base_eval.f1_all);

            let plan = TransferPlan {
                base_checkpoint: ckpt,
                target_est: target_est.clone(),
                fine_tune: tc,
                freeze_prefixes: kv
                    .get_list::<String>("freeze_prefixes")?
                    .unwrap_or_default(),
                freeze_iters: kv.get_or("freeze_iters", 0)?,
            };
            let outcome = transfer(&plan, &samples)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&out.join("transfer.ckpt"), &outcome.params, &target_est)?;
            atomic_write(&out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
            let matched = iterations_to_reach(&outcome.history, base_eval.aepe);
            let mut report = String::new();
            use std::fmt::Write as _;
            let _ = writeln!(report, "base_aepe = {}", base_eval.aepe);
            let _ = writeln!(report, "final_aepe = {}", outcome.final_eval.aepe);
            let _ = writeln!(report, "final_f1_all = {}", outcome.final_eval.f1_all);
            let _ = writeln!(
                report,
                "iterations_to_match = {}",
                matched.map_or("none".to_string(), |i| i.to_string())
            );
            atomic_write(&out.join("transfer.txt"), report.as_bytes())?;
            print_eval("transfer held-out", outcome.final_eval.aepe, outcome.final_eval.f1_all);
            match matched {
                Some(i) => println!("matched the base AEPE after {i} iterations"),
                None => println!("did not match the base AEPE within the schedule"),
            }
            if outcome.diverged {
                eprintln!("fine-tuning diverged; wrote the last good checkpoint");
                return Ok(2);
            }
            Ok(0)
        }
        Cmd::Viz { data, out, ckpt } => {
            let samples = load_samples(&data)?;
            fs::create_dir_all(&out)?;
            let model = match ckpt {
                Some(p) => Some(load_checkpoint(&p)?),
                None => None,
            };
            for (i, sample) in samples.iter().enumerate() {
                write_ppm(
                    &flow_to_color(&sample.flow, None)?,
                    &out.join(format!("{i:05}_gt.ppm")),
                )?;
                if let Some((store, est)) = &model {
                    let pred = predict_flow(store, est, sample)?;
                    write_ppm(
                        &flow_to_color(&pred, None)?,
                        &out.join(format!("{i:05}_pred.ppm")),
                    )?;
                }
            }
            println!("wrote visualizations for {} samples to {}", samples.len(), out.display());
            Ok(0)
        }
    }
}
