use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use pyrdiff_cli::commands;
use pyrdiff_cli::verify::{self, Precision, VerifyOptions};
use pyrdiff_cli::RunConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

/// Pyramid diffusion for low-light image enhancement.
#[derive(Debug, Parser)]
#[command(name = "pyrdiff", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sample with this many DDIM denoiser calls instead of all steps.
    #[arg(long, global = true)]
    ddim: Option<usize>,
    /// DDIM stochasticity (0 is deterministic).
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Correction threshold on the amplification factor.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Downsampling schedules in bracket notation, e.g. "[1,1,2,2]".
    /// Several may be given (repeat the flag or separate with ';').
    #[arg(long, global = true)]
    schedules: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic low/normal-light PNG pairs and a manifest.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train (or resume training) the denoiser and corrector.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        /// Folder of `{id}_low.png` / `{id}_normal.png` pairs.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Enhance one low-light PNG.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Skip the global corrector.
        #[arg(long)]
        no_corrector: bool,
        /// Dump every intermediate state as a PYDT tensor here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Run the oracle checks; exits with 2 if any fails.
    Verify {
        #[arg(long, value_enum)]
        precision: Vec<Precision>,
        /// Parameter entries sampled per tensor in network gradient checks.
        #[arg(long, default_value_t = 3)]
        entries: usize,
        #[arg(long, hide = true)]
        corrupt_beta_tilde: Option<usize>,
    },
    /// Time reverse passes across downsampling schedules.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Diffusion length used for timing.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Splits `[1,1,2,2];[1,2]` or `[1,1,2,2],[1,2]` into bracket groups.
fn split_schedules(values: &[String]) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    for v in values {
        let mut depth = 0;
        let mut current = String::new();
        for ch in v.chars() {
            match ch {
                '[' => {
                    depth += 1;
                    current.push(ch);
                }
                ']' => {
                    depth -= 1;
                    current.push(ch);
                    if depth == 0 {
                        out.push(std::mem::take(&mut current));
                    }
                }
                ',' | ';' | ' ' if depth == 0 => {}
                _ => current.push(ch),
            }
        }
        if depth != 0 || !current.trim().is_empty() {
            bail!("malformed schedule list {v:?}");
        }
    }
    Ok(out)
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.ddim {
        cfg.sampling.ddim_steps = Some(n);
        cfg.bench.ddim_steps = Some(n);
    }
    if let Some(eta) = cli.eta {
        cfg.sampling.eta = eta;
    }
    if let Some(gamma) = cli.gamma {
        cfg.sampling.gamma = gamma;
        cfg.train.gamma = gamma;
    }
    let schedules = split_schedules(&cli.schedules)?;
    if !schedules.is_empty() {
        if matches!(cli.command, Command::Bench { .. }) {
            cfg.bench.schedules = schedules;
        } else if let [one] = schedules.as_slice() {
            cfg.schedule.pyramid = one.clone();
        } else {
            bail!("this command takes a single schedule");
        }
    }
    match &cli.command {
        Command::Train { iterations, data } => {
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            if let Some(d) = data {
                cfg.data.folder = Some(d.clone());
            }
        }
        Command::Enhance { no_corrector, .. } if *no_corrector => {
            cfg.sampling.use_corrector = false;
        }
        Command::Bench {
            steps,
            passes,
            workers,
            ..
        } => {
            if steps.is_some() {
                cfg.bench.steps = *steps;
            }
            if let Some(p) = passes {
                cfg.bench.passes = *p;
            }
            if let Some(w) = workers {
                cfg.bench.workers = *w;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Usage errors are 1, failures touching files are 3.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pyrdiff_core::Error>() {
            if e.is_io() {
                return EXIT_IO;
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| Path::new(default).to_path_buf())
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { count } => {
            let out = out_dir(cli, "data");
            let manifest = commands::gen_data(&cfg, &out, count.unwrap_or(cfg.data.count))?;
            println!("{}", manifest.display());
        }
        Command::Train { .. } => {
            let out = out_dir(cli, "runs/train");
            let summary = commands::train(&cfg, &out, |_| {})?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
            dump_dir,
            ..
        } => {
            let report = commands::enhance(&cfg, checkpoint, input, output, dump_dir.as_deref())?;
            if let Some(out) = &cli.out {
                cfg.echo_into(out)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify {
            precision,
            entries,
            corrupt_beta_tilde,
        } => {
            let opts = VerifyOptions {
                precisions: if precision.is_empty() {
                    vec![Precision::F32, Precision::F64]
                } else {
                    precision.clone()
                },
                seed: cfg.seed,
                corrupt_beta_tilde: *corrupt_beta_tilde,
                entries_per_tensor: *entries,
            };
            let report = verify::run(&opts);
            print!("{report}");
            if let Some(out) = &cli.out {
                cfg.echo_into(out)?;
                let path = out.join("verify.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if !report.passed() {
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Bench { checkpoint, .. } => {
            let out = out_dir(cli, "runs/bench");
            let report = commands::bench(&cfg, checkpoint, &out)?;
            print!("{}", report.summary());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Ok(v) = std::env::var("PYRDIFF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: PYRDIFF_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
