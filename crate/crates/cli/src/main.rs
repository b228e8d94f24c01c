//! `vmbhinet`: verification, training, benchmarking and evaluation commands.
//!
//! Exit codes: 0 success, 1 contract or tolerance failure, 2 bad invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vmbhinet::handmodel::HandRig;
use vmbhinet::pipeline::{checkpoint, PipelineConfig, VmBhiNet};
use vmbhinet::tensor::set_corrupt_grad_op;
use vmbhinet::train::{
    accounting, evaluate, load_dataset, save_dataset, synth_dataset, train_loop, write_loss_csv, LrSchedule, Metrics,
    SynthConfig, TrainConfig, TrainingSample, METRICS_HEADER,
};
use vmbhinet::verify::{gradient_suite, scan_bench, SCAN_BENCH_HEADER, SUITE_OPS};

#[derive(Parser)]
#[command(name = "vmbhinet", version, about = "Two-hand mesh reconstruction toolkit")]
struct Cli {
    /// Network configuration (JSON). Defaults to the toy profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for network initialization, data and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the full network.
    Gradcheck {
        /// Coordinates sampled per parameter tensor in the end-to-end check.
        #[arg(long, default_value_t = 2)]
        coords: usize,
        /// Test hook: corrupt the backward rule of this primitive op.
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
    /// Overfit a small synthetic set; writes loss.csv, checkpoint.vmbh, metrics.csv.
    TrainToy {
        #[command(flatten)]
        data: DataArgs,
        /// Passes over the training set.
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// MPJPE/MPVPE of a checkpoint per split; writes eval_metrics.csv.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Defaults to <out>/checkpoint.vmbh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset written by gen-data; synthesized from --seed otherwise.
        #[arg(long)]
        data_file: Option<PathBuf>,
    },
    /// Counted FLOPs and wall time of the selective scan vs the dense operator.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        seq_lengths: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
    },
    /// Parameter and FLOP totals next to the reported full-size model.
    Count {
        /// Built-in profile used when --config is absent.
        #[arg(long, value_enum, default_value_t = Profile::Full)]
        profile: Profile,
    },
    /// Write a synthetic dataset to <out>/dataset.json.
    GenData {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the configured hand rig to <out>/rig.json and revalidate it.
    RigExport,
}

#[derive(Args)]
struct DataArgs {
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Toy,
    Full,
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<vmbhinet::Error> for Failure {
    fn from(e: vmbhinet::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = |default: PipelineConfig| -> Result<PipelineConfig, Failure> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None => default,
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    };
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_path();
    let prepare_out = || -> Result<(), Failure> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(())
    };

    match &cli.command {
        Command::Gradcheck { coords, corrupt_grad } => {
            cmd_gradcheck(&config(PipelineConfig::toy())?, seed, *coords, corrupt_grad.as_deref())
        }
        Command::TrainToy {
            data,
            epochs,
            lr,
            batch_size,
        } => {
            if !(*lr >= 0.0) {
                return Err(usage("--lr must be non-negative"));
            }
            let cfg = config(PipelineConfig::toy())?;
            let train = TrainConfig {
                epochs: *epochs,
                batch_size: *batch_size,
                schedule: LrSchedule::constant(*lr),
                seed,
                ..TrainConfig::toy()
            };
            prepare_out()?;
            cmd_train_toy(&cfg, &train, data.samples, seed, out)
        }
        Command::Eval {
            data,
            checkpoint,
            data_file,
        } => {
            let cfg = config(PipelineConfig::toy())?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.vmbh"));
            prepare_out()?;
            cmd_eval(&cfg, &ckpt, data_file.as_deref(), data.samples, seed, out)
        }
        Command::BenchScan {
            seq_lengths,
            channels,
            state,
        } => {
            if seq_lengths.is_empty() || seq_lengths.contains(&0) || *channels == 0 || *state == 0 {
                return Err(usage("sequence lengths, channels and state must all be at least 1"));
            }
            prepare_out()?;
            cmd_bench_scan(seq_lengths, *channels, *state, seed, out)
        }
        Command::Count { profile } => {
            let default = match profile {
                Profile::Toy => PipelineConfig::toy(),
                Profile::Full => PipelineConfig::full(),
            };
            let cfg = config(default)?;
            let rig = cfg.hand_model.build()?;
            let cost = accounting::model_cost(&cfg, rig.num_vertices(), rig.pose_dirs.is_some());
            print!("{}", accounting::report(&cfg, &cost));
            Ok(())
        }
        Command::GenData { data } => {
            let cfg = config(PipelineConfig::toy())?;
            prepare_out()?;
            let rig = cfg.hand_model.build()?;
            let samples = synth(&cfg, &rig, data.samples, seed)?;
            let path = out.join("dataset.json");
            save_dataset(&samples, &path)?;
            let two = samples.iter().filter(|s| s.two_hands).count();
            println!("wrote {} samples ({two} two-hand) to {}", samples.len(), path.display());
            Ok(())
        }
        Command::RigExport => {
            let cfg = config(PipelineConfig::toy())?;
            prepare_out()?;
            let rig = cfg.hand_model.build()?;
            let path = out.join("rig.json");
            rig.save_json(&path)?;
            let back = HandRig::load_json(&path)?;
            println!(
                "wrote {}: {} vertices, {} faces, revalidated",
                path.display(),
                back.num_vertices(),
                back.faces.len()
            );
            Ok(())
        }
    }
}

fn synth(cfg: &PipelineConfig, rig: &HandRig, n: usize, seed: u64) -> Result<Vec<TrainingSample>, Failure> {
    if n == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    Ok(synth_dataset(
        rig,
        n,
        seed,
        &SynthConfig::for_image(cfg.image_height, cfg.image_width),
    )?)
}

fn cmd_gradcheck(cfg: &PipelineConfig, seed: u64, coords: usize, corrupt: Option<&str>) -> CmdResult {
    if coords == 0 {
        return Err(usage("--coords must be at least 1"));
    }
    set_corrupt_grad_op(corrupt);
    let checks = gradient_suite(seed, cfg, coords);
    set_corrupt_grad_op(None);
    let checks = checks?;
    println!(
        "{:<16} {:>14} {:>10} {:>8}  status",
        "op", "max_rel_error", "tolerance", "coords"
    );
    for c in &checks {
        println!(
            "{:<16} {:>14.3e} {:>10.0e} {:>8}  {}",
            c.op,
            c.report.max_rel_error,
            c.tolerance,
            c.report.coords_checked,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    debug_assert_eq!(checks.len(), SUITE_OPS.len());
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(anyhow!(
            "gradient tolerance exceeded: {}",
            failed.join(", ")
        )))
    }
}

fn write_metrics(path: &Path, rows: &[(&str, &Metrics)]) -> anyhow::Result<()> {
    let mut s = format!("{METRICS_HEADER}\n");
    for (split, m) in rows {
        s += &m.csv_row(split);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train_toy(cfg: &PipelineConfig, train: &TrainConfig, samples: usize, seed: u64, out: &Path) -> CmdResult {
    let net = VmBhiNet::new(cfg)?;
    let data = synth(cfg, &net.rig, samples, seed)?;
    let before = evaluate(&net, &data)?;
    let every = (train.epochs * samples.div_ceil(train.batch_size.max(1)) / 10).max(1);
    let trace = train_loop(&net, &data, train, |r| {
        if r.step % every == 0 {
            println!("step {:>5}  epoch {:>4}  loss {:.6}", r.step, r.epoch, r.total);
        }
    })?;
    let after = evaluate(&net, &data)?;

    write_loss_csv(&out.join("loss.csv"), &trace)?;
    checkpoint::save(&net.params, &out.join("checkpoint.vmbh"))?;
    fs::write(out.join("config.json"), cfg.to_json()).context("writing config.json")?;
    write_metrics(&out.join("metrics.csv"), &[("initial", &before), ("final", &after)])?;

    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "loss {:.6} -> {:.6} ({:.1}% of step 0)",
            first.total,
            last.total,
            100.0 * last.total / first.total
        );
    }
    println!(
        "MPJPE {:.3} -> {:.3} mm, MPVPE {:.3} -> {:.3} mm",
        before.mpjpe_all(),
        after.mpjpe_all(),
        before.mpvpe_all(),
        after.mpvpe_all()
    );
    println!(
        "wrote loss.csv, checkpoint.vmbh, config.json, metrics.csv to {}",
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &PipelineConfig,
    ckpt: &Path,
    data_file: Option<&Path>,
    samples: usize,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let net = VmBhiNet::new(cfg)?;
    checkpoint::load(&net.params, ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = match data_file {
        Some(p) => load_dataset(p).with_context(|| format!("reading {}", p.display()))?,
        None => synth(cfg, &net.rig, samples, seed)?,
    };
    let m = evaluate(&net, &data)?;
    let path = out.join("eval_metrics.csv");
    write_metrics(&path, &[("eval", &m)])?;
    println!("{METRICS_HEADER}\n{}", m.csv_row("eval"));
    println!("samples: {} single, {} two-hand", m.counts[0], m.counts[1]);
    Ok(())
}

fn cmd_bench_scan(lengths: &[usize], channels: usize, state: usize, seed: u64, out: &Path) -> CmdResult {
    let rows = scan_bench(lengths, channels, state, seed)?;
    let mut csv = format!("{SCAN_BENCH_HEADER}\n");
    for r in &rows {
        csv += &r.csv_row();
        csv.push('\n');
    }
    print!("{csv}");
    for w in rows.windows(2) {
        let f = w[1].seq as f64 / w[0].seq as f64;
        println!(
            "seq {} -> {} (x{f}): scan flops x{:.3}, dense flops x{:.3}",
            w[0].seq,
            w[1].seq,
            w[1].scan_flops as f64 / w[0].scan_flops as f64,
            w[1].dense_flops as f64 / w[0].dense_flops as f64
        );
    }
    let path = out.join("bench_scan.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
