use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use actionllm::config::{Preset, RunConfig};
use actionllm::par::ExecMode;
use actionllm::runner::{self, SweepAxis, GRADCHECK_TOL};
use actionllm::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "actionllm", version, about = "Long-term action anticipation: train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// flat key=value config file; takes the place of --preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["breakfast", "salads50", "synthetic"])]
    preset: Option<String>,
    /// comma-separated observation ratios
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// comma-separated prediction ratios
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    queries: Option<usize>,
    #[arg(long, global = true)]
    cmib_dim: Option<usize>,
    #[arg(long, global = true)]
    tune_dim: Option<usize>,
    /// label noise on the text stream during training
    #[arg(long, global = true)]
    noise_p: Option<f64>,
    /// label noise on the text stream during evaluation
    #[arg(long, global = true)]
    eval_noise_p: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    loss_mean: bool,
    #[arg(long, global = true)]
    shared_projections: bool,
    #[arg(long, global = true)]
    shared_past_head: bool,
    #[arg(long, global = true)]
    tuning_residual: bool,
    #[arg(long, global = true)]
    freeze_audit: bool,
    /// dataset root holding mapping.txt, bundles/, groundTruth/ and features/; synthetic data when absent
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// extra KEY=VALUE overrides, applied last
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// run everything on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write final/best checkpoints
    Train,
    /// Evaluate a checkpoint over the observation/prediction grid
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast one test video and write its timeline
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: String,
    },
    /// Finite-difference gradient checks at tiny dimensions
    Gradcheck,
    /// Write the synthetic train/test corpus
    Synth {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train and evaluate once per value of one dimension
    Sweep {
        /// N|queries, d_c|cmib_dim or L_MA|tune_dim
        #[arg(long)]
        axis: String,
        /// comma-separated values
        #[arg(long)]
        values: String,
    },
    /// Learnable and frozen parameter counts
    Params,
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Input(format!("--{flag}: cannot parse {s:?}")))
        })
        .collect()
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(_), Some(_)) => return Err(Error::Input("--config and --preset are mutually exclusive".into())),
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::preset(p.parse::<Preset>()?),
        (None, None) => RunConfig::default(),
    };
    if let Some(a) = &c.alpha {
        cfg.eval_alphas = parse_list("alpha", a)?;
    }
    if let Some(b) = &c.beta {
        cfg.eval_betas = parse_list("beta", b)?;
    }
    if let Some(n) = c.queries {
        cfg.model.num_queries = n;
    }
    if let Some(d) = c.cmib_dim {
        cfg.model.cmib_dim = d;
    }
    if let Some(d) = c.tune_dim {
        cfg.model.tune_dim = d;
    }
    if let Some(p) = c.noise_p {
        cfg.noise_p = p;
    }
    if let Some(p) = c.eval_noise_p {
        cfg.eval_noise_p = p;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    cfg.loss_mean |= c.loss_mean;
    cfg.model.shared_projections |= c.shared_projections;
    cfg.model.shared_past_head |= c.shared_past_head;
    cfg.model.tuning_residual |= c.tuning_residual;
    cfg.freeze_audit |= c.freeze_audit;
    if let Some(d) = &c.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| Error::Input(format!("--set {k}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    let mode = if cli.common.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let started = Instant::now();
    match cli.command {
        Command::Train => {
            let out = runner::run_train(&cfg, mode)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  total {:.6}  val {:.6}", i + 1, l.total, out.val_losses[i]);
            }
            println!("best epoch {}", out.best_epoch);
            if let Some(p) = &out.final_path {
                println!("final checkpoint {}", p.display());
            }
            if let Some(p) = &out.best_path {
                println!("best checkpoint {}", p.display());
            }
        }
        Command::Eval { checkpoint } => {
            let (report, path) = runner::run_eval(&cfg, &checkpoint, mode)?;
            print!("{}", report.table("ActionLLM-stub"));
            println!("report {}", path.display());
        }
        Command::Predict { checkpoint, video } => {
            let (txt, svg) = runner::run_predict(&cfg, &checkpoint, &video, mode)?;
            println!("{}\n{}", txt.display(), svg.display());
        }
        Command::Gradcheck => {
            let cases = runner::run_gradcheck(cfg.seed, mode)?;
            let mut worst = 0.0f64;
            for c in &cases {
                println!("{:<28} max_rel_err {:.3e}  ({} entries)", c.name, c.report.max_rel_error, c.report.checked);
                worst = worst.max(c.report.max_rel_error);
            }
            if worst < GRADCHECK_TOL {
                println!("PASS max_rel_err < {GRADCHECK_TOL:e}");
            } else {
                println!("FAIL max_rel_err {worst:.3e} >= {GRADCHECK_TOL:e}");
                return Err(Error::Numeric(format!("gradient check failed: {worst:.3e}")));
            }
        }
        Command::Synth { dir } => {
            let (n_train, n_test) = runner::run_synth(&cfg, &dir)?;
            println!("wrote {n_train} train and {n_test} test videos under {}", dir.display());
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let values: Vec<usize> = parse_list("values", &values)?;
            let result = runner::run_sweep(&cfg, axis, &values, mode)?;
            print!("{}", result.table());
        }
        Command::Params => {
            let (_, text) = runner::run_params(&cfg)?;
            print!("{text}");
        }
    }
    info!("done in {:.1?}", started.elapsed());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
