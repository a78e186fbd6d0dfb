use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dsbeam::config::ExperimentConfig;
use dsbeam::models::BeamModelKind;
use dsbeam::pipeline;

/// Distributed-sensing beam prediction: simulate, train, evaluate.
///
/// Settings come from the experiment file; flags override the file, and the
/// output root is taken from `--output`, then `DSBEAM_OUTPUT`, then the
/// file's `output` key.
#[derive(Parser)]
#[command(name = "dsbeam", version)]
struct Cli {
    /// Experiment TOML file; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, short, global = true, env = "DSBEAM_OUTPUT")]
    output: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the scenario, train the identifiers and write the datasets.
    Generate,
    /// Train beam models on the generated datasets.
    Train {
        /// Model to train; every configured model when omitted.
        #[arg(long)]
        model: Vec<BeamModelKind>,
        /// Node to train for; every configured node when omitted.
        #[arg(long)]
        node: Vec<usize>,
    },
    /// Evaluate trained models on the test splits and write the report.
    Eval {
        #[arg(long)]
        model: Vec<BeamModelKind>,
        #[arg(long)]
        node: Vec<usize>,
    },
    /// generate, train and eval in one run.
    Pipeline,
    /// Pretty-print an artifact.
    Inspect { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.output.clone().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, out))
}

fn select(cfg: &mut ExperimentConfig, models: &[BeamModelKind], nodes: &[usize]) -> Result<()> {
    if !models.is_empty() {
        cfg.models = models.to_vec();
    }
    if !nodes.is_empty() {
        cfg.nodes = nodes.to_vec();
    }
    cfg.validate()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Cmd::Inspect { path } = &cli.cmd {
        print!("{}", pipeline::inspect(path).with_context(|| format!("inspecting {}", path.display()))?);
        return Ok(());
    }
    let (mut cfg, out) = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Generate => {
            let m = pipeline::generate(&cfg, &out)?;
            print_generate(&m);
        }
        Cmd::Train { model, node } => {
            select(&mut cfg, model, node)?;
            for &n in &cfg.nodes {
                for &k in &cfg.models {
                    let c = pipeline::train(&cfg, &out, k, n)?;
                    let tr = c.train.last().copied().unwrap_or(f64::NAN);
                    let va = c.val.last().map_or("-".to_string(), |v| format!("{v:.6}"));
                    println!("node {n} {k}: final train loss {tr:.6}, val loss {va}");
                }
            }
        }
        Cmd::Eval { model, node } => {
            select(&mut cfg, model, node)?;
            let r = pipeline::evaluate(&cfg, &out)?;
            print!("{}", r.summary());
        }
        Cmd::Pipeline => {
            let r = pipeline::run_pipeline(&cfg, &out, |s| eprintln!("[dsbeam] {s}"))?;
            print_generate(&pipeline::Manifest::load(&out)?);
            print!("{}", r.summary());
        }
        Cmd::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn print_generate(m: &pipeline::Manifest) {
    println!("frames {} seed {}", m.frames, m.seed);
    println!("node  windows  in_fov  served  dropped  train  val  test  compression");
    for n in &m.nodes {
        println!(
            "{:>4}  {:>7}  {:>6}  {:>6}  {:>7}  {:>5}  {:>3}  {:>4}  {:.3e}",
            n.node, n.windows, n.in_fov, n.served, n.dropped, n.train, n.val, n.test, n.mean_compression
        );
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| c.downcast_ref::<dsbeam::Error>().is_some_and(dsbeam::Error::is_numeric));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
