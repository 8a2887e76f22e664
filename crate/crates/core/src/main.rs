use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eatlab::config::{DatasetChoice, Method, RunConfig};
use eatlab::pipeline::{self, run_stage, PipelineError};

#[derive(Parser)]
#[command(name = "eatlab", version, about = "Embodiment-aware transformer lab: data, training, evaluation, ablations and morphology search")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; flags override its fields [default: built-in config]
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every stage [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: runs/default]
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Method to train, evaluate or evolve with [default: eat]
    #[arg(long, global = true, value_parser = ["eat", "vanilla", "eabc", "expert"])]
    method: Option<String>,

    /// Training dataset [default: full27]
    #[arg(long, global = true, value_parser = ["full27", "ld8", "ld8x5", "ld8x10"])]
    dataset: Option<String>,

    /// Evaluation noise multiplier [default: 1]
    #[arg(long, global = true, value_parser = ["1", "2"])]
    noise: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert trajectories for --dataset and print the manifest
    GenData,
    /// Print counts and normalisation of the stored --dataset as JSON
    Manifest,
    /// Train --method on --dataset and store the checkpoint and loss curve
    Train,
    /// Score --method on the 80-cell grid at --noise
    EvalMatrix,
    /// Horizon-1 and less-diverse-data variants of EAT, clean and noisy
    Ablate,
    /// Bayesian optimisation, random search and grid search of the stepper body
    Evolve,
    /// Heatmaps and the method table from the evaluation CSVs
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &cli.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset.choice = d.parse::<DatasetChoice>()?;
    }
    if let Some(n) = &cli.noise {
        cfg.noise = n.parse::<f64>().map_err(|e| e.to_string())?;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenData => run_stage(cfg, |art| {
            let (data, path) = pipeline::gen_data(cfg, cfg.dataset.choice, art)?;
            println!("{}", serde_json::to_string_pretty(&data.manifest_json()).expect("manifest serialises"));
            eprintln!("wrote {} ({} trajectories, {} excluded)", path.display(), data.len(), data.excluded);
            Ok(())
        }),
        Command::Manifest => {
            let data = pipeline::load_dataset(cfg, cfg.dataset.choice)?;
            println!("{}", serde_json::to_string_pretty(&data.manifest_json()).expect("manifest serialises"));
            Ok(())
        }
        Command::Train => run_stage(cfg, |art| {
            let (_, path) = pipeline::train_stage(cfg, cfg.method, cfg.dataset.choice, art)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }),
        Command::EvalMatrix => run_stage(cfg, |art| {
            for m in pipeline::eval_stage(cfg, cfg.method, art)? {
                println!("{} noise x{}: mean {:.3} std {:.3}", m.method, m.noise_multiplier, m.mean(), m.std_across_cells());
            }
            Ok(())
        }),
        Command::Ablate => run_stage(cfg, |art| {
            let (table, _) = pipeline::ablate_stage(cfg, art)?;
            print!("{}", table.to_csv());
            Ok(())
        }),
        Command::Evolve => run_stage(cfg, |art| {
            let o = pipeline::evolve_stage(cfg, cfg.method, art)?;
            println!("bo     best {} fitness {:.4}", o.bo.best, o.bo.best_fitness);
            println!("random best {} fitness {:.4}", o.random.best, o.random.best_fitness);
            if let Some((e, f)) = o.grid_best() {
                println!("grid   best {e} fitness {f:.4}");
            }
            Ok(())
        }),
        Command::Report => run_stage(cfg, |art| {
            let n = pipeline::report_stage(cfg, art)?;
            eprintln!("wrote {n} heatmaps under {}", cfg.out.join("report").display());
            Ok(())
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("EATLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
