use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiedit::config::PipelineConfig;
use hiedit::dataforge::build_dataset;
use hiedit::run::{edit_file, evaluate_checkpoint};
use hiedit::selftest;
use hiedit::train::{train, TrainOptions};
use hiedit::{Error, Result};

/// Hypothetical-instruction image editing at desk scale.
///
/// Exit codes: 0 success, 1 configuration or validation error, 2 I/O or file
/// format error, 3 invariant violation (including non-finite losses).
#[derive(Parser, Debug)]
#[command(name = "hiedit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Dotted-key JSON config merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic edit dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Category weights, e.g. `physical=2,temporal=1,causal=1,story=0`.
        #[arg(long)]
        category_mix: Option<String>,
    },
    /// Train from a dataset directory into a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Fix one batch of this many samples and its noise draws.
        #[arg(long)]
        overfit: Option<usize>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop early once the loss has fallen by this fraction of its first value.
        #[arg(long)]
        stop_at_reduction: Option<f64>,
    },
    /// Edit the validation split and write a metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Score the targets themselves instead of model outputs.
        #[arg(long)]
        oracle_outputs: bool,
    },
    /// Edit one image (RBT1 or binary PPM).
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Output tensor path; a `.ppm` preview is written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Archive of the guidance tensors.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Gradient audit over every op and the composite blocks.
    Selftest {
        #[arg(long, default_value_t = selftest::SEEDS.len())]
        seeds: usize,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &g.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenData { count, out_dir, category_mix } => {
            if let Some(n) = count {
                cfg.set(&format!("data.count={n}"))?;
            }
            if let Some(mix) = category_mix {
                cfg.set_category_mix(&mix)?;
            }
            let m = build_dataset(&cfg, &out_dir)?;
            cfg.write_effective(&out_dir)?;
            println!("{} samples (seed {}) in {}", m.count, m.seed, out_dir.display());
            for (cat, c) in &m.categories {
                println!("  {cat:<9} total {:>6}  train {:>6}  val {:>4}", c.total, c.train, c.val);
            }
        }
        Command::Train { data, run_dir, steps, overfit, resume, stop_at_reduction } => {
            if let Some(s) = steps {
                cfg.set(&format!("train.steps={s}"))?;
            }
            if let Some(n) = overfit {
                cfg.set(&format!("train.overfit={n}"))?;
                cfg.set(&format!("optim.batch_size={n}"))?;
            }
            if stop_at_reduction.is_some_and(|r| !(0.0..1.0).contains(&r)) {
                return Err(Error::Config("--stop-at-reduction must lie in [0, 1)".into()));
            }
            let out = train(&cfg, &data, &run_dir, &TrainOptions { resume, stop_at_reduction })?;
            let first = out.history.first().map_or(f64::NAN, |h| h.l_total);
            let last = out.history.last().map_or(f64::NAN, |h| h.l_total);
            println!(
                "trained to step {} in {:.1?}: loss {first:.5} -> {last:.5}",
                out.last_step, out.elapsed
            );
        }
        Command::Eval { data, checkpoint, out_dir, oracle_outputs } => {
            let r = evaluate_checkpoint(&cfg, &data, &checkpoint, &out_dir, oracle_outputs)?;
            print!("{}", r.to_table());
        }
        Command::Edit { checkpoint, image, instruction, out, dump } => {
            let r = edit_file(&cfg, &checkpoint, &image, &instruction, &out, dump.as_deref())?;
            println!("wrote {} ({:?}); guidance V has {} rows", out.display(), r.image.shape(), r.dump.v.rows());
        }
        Command::Selftest { seeds } => {
            let list: Vec<u64> = (0..seeds as u64).collect();
            let rep = selftest::run(&list)?;
            for c in &rep.checks {
                println!("{:<20} seed {}  max rel err {:.3e}  {}", c.name, c.seed, c.max_rel_err, if c.passed { "ok" } else { "FAIL" });
            }
            println!("{} checks, worst {:.3e}, {:.2?}", rep.checks.len(), rep.worst(), rep.elapsed);
            if !rep.passed() {
                return Err(Error::Invariant(format!("gradient audit exceeded {:e}", selftest::TOLERANCE)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
