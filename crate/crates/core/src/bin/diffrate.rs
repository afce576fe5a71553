use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffrate::harness::{pipeline, RunConfig, Target};
use diffrate::Error;

#[derive(Parser)]
#[command(name = "diffrate", version, about = "Search, apply and inspect per-block token compression schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// FLOPs target: "50%" of the baseline, "0.45G", or an absolute count.
    #[arg(long, global = true)]
    target_flops: Option<Target>,
    /// Latency target in ms, or "80%" of the uncompressed latency.
    #[arg(long, global = true)]
    target_latency: Option<Target>,
    /// Power target in mW, or "80%" of the uncompressed power.
    #[arg(long, global = true)]
    target_power: Option<Target>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as IDX files.
    GenData,
    /// Train the backbone and save a checkpoint.
    TrainBackbone,
    /// Search compression rates on the frozen backbone.
    Search,
    /// Search rates and accelerator configuration together.
    CosearchHw,
    /// Apply the saved schedule by dropping tokens.
    Apply,
    /// Analytic operation counts of the model and the saved schedule.
    Flops,
    /// Score random or grid schedules off the shelf.
    Enumerate,
    /// Fine-tune the backbone with the saved schedule applied.
    Finetune,
    /// Render token maps of the saved schedule.
    Render,
    /// Summarise the run directory.
    Report,
    /// Print the effective configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Schedule(_) | Error::Shape { .. } | Error::Domain { .. } | Error::Json(_) => 2,
        Error::Infeasible { .. } => 3,
        Error::Io(_) | Error::Missing(_) | Error::Truncated(_) | Error::Format { .. } => 4,
        Error::NonFinite(_) | Error::Diverged { .. } => 1,
    }
}

fn load_config(cli: &Cli) -> diffrate::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    for (flag, slot, section) in [
        (cli.target_flops, &mut cfg.targets.flops, &mut cfg.search.target_flops),
        (cli.target_latency, &mut cfg.targets.latency, &mut cfg.search.target_latency),
        (cli.target_power, &mut cfg.targets.power, &mut cfg.search.target_power),
    ] {
        if flag.is_some() {
            *slot = flag;
            *section = None;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn run(cli: &Cli) -> diffrate::Result<()> {
    let cfg = load_config(cli)?;
    let dir: &Path = &cli.out;
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, dir)?;
            println!("wrote {} training and {} validation examples to {}", s.train, s.val, dir.join("data").display());
        }
        Command::TrainBackbone => {
            let s = pipeline::train_backbone(&cfg, dir)?;
            for e in &s.epochs {
                println!("epoch {} loss {:.4} val {}", e.epoch, e.loss, e.val_accuracy.map_or("-".into(), pct));
            }
            println!("val accuracy {} (init {})", pct(s.val_accuracy), pct(s.init_accuracy));
        }
        Command::Search => {
            let s = pipeline::search(&cfg, dir)?;
            print_search(&s);
        }
        Command::CosearchHw => {
            let (s, h) = pipeline::cosearch(&cfg, dir)?;
            print_search(&s);
            println!(
                "hardware {} latency {:.3} ms power {:.2} mW",
                serde_json::to_string(&h.config)?,
                h.latency,
                h.power
            );
        }
        Command::Apply => {
            let s = pipeline::apply(&cfg, dir)?;
            println!(
                "accuracy {} (baseline {}), {} MACs per image of {}, tokens {:?}",
                pct(s.accuracy),
                pct(s.baseline_accuracy),
                s.macs_per_image,
                s.baseline_flops,
                s.token_counts
            );
        }
        Command::Flops => {
            let s = pipeline::flops_report(&cfg, dir)?;
            println!("baseline {} min {} stem+head {}", s.baseline_flops, s.min_flops, s.stem_and_head_flops);
            if let Some(f) = s.schedule_flops {
                println!("schedule {f} ({:.3} of baseline)", f as f64 / s.baseline_flops as f64);
            }
            println!("overhead {} parameters, {} FLOPs", s.overhead.parameters, s.overhead.flops);
        }
        Command::Enumerate => {
            let s = pipeline::enumerate(&cfg, dir)?;
            println!("evaluated {} of {} schedules", s.evaluated, s.requested);
            if let Some(b) = &s.best_under_target {
                println!("best under target {} at {} FLOPs", pct(b.accuracy), b.flops);
            }
            if let Some(a) = s.searched_accuracy {
                println!("searched schedule {}", pct(a));
            }
        }
        Command::Finetune => {
            let s = pipeline::finetune(&cfg, dir)?;
            println!("accuracy {} -> {} (baseline {})", pct(s.before), pct(s.after), pct(s.baseline_accuracy));
        }
        Command::Render => {
            for p in pipeline::render(&cfg, dir)? {
                println!("{}", dir.join(p).display());
            }
        }
        Command::Report => print!("{}", pipeline::report(dir)?.text),
        Command::Config => print!("{}", cfg.to_json()?),
    }
    Ok(())
}

fn print_search(s: &pipeline::SearchSummary) {
    println!("prune kept {:?}", s.prune_kept);
    println!("merge kept {:?}", s.merge_kept);
    println!(
        "flops {} ({:.3} of baseline{}), accuracy {} (baseline {})",
        s.flops,
        s.flops as f64 / s.baseline_flops as f64,
        s.target_flops.map_or(String::new(), |t| format!(", {:.3} of target", s.flops as f64 / t)),
        pct(s.accuracy),
        pct(s.baseline_accuracy)
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
