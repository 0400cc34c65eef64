//! `p4sim` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use p4sim::data::{gen_synthetic, load_feature_file, write_feature_file};
use p4sim::harness::{
    emit_results, random_grouping_ablation, run_experiment, run_separation_diagnostic,
    ExperimentConfig, HarnessError,
};
use p4sim::privacy::calibrate_sigma;

#[derive(Parser)]
#[command(name = "p4sim", version, about = "Deterministic private peer-to-peer co-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment across its seeds.
    Run(RunArgs),
    /// Same pipeline with the similarity grouping replaced by a random one.
    AblateRandomGrouping(RunArgs),
    /// Read or write pooled feature files.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Print the calibrated noise level for a privacy budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 1)]
        k: u64,
        #[arg(long)]
        t: u64,
        #[arg(long, default_value_t = 1)]
        m_prime: u64,
        #[arg(long, default_value_t = 1.0)]
        calib_const: f64,
    },
    /// Phase-1 diagnostic only: grouping and the separation report.
    Separation {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a synthetic pool and write it as a feature file.
    Write {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        separation: f64,
        #[arg(long)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a feature file's header and class histogram.
    Inspect {
        #[arg(long)]
        path: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::from_toml_file(&args.config)?;
    if let Some(seeds) = &args.seed {
        cfg.run.seeds = seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.run.out = Some(out.display().to_string());
    }
    Ok(cfg)
}

fn emit(output: &p4sim::harness::ExperimentOutput) -> Result<(), HarnessError> {
    let dir = output
        .resolved_config
        .run
        .out
        .clone()
        .unwrap_or_else(|| "results".to_string());
    emit_results(output, std::path::Path::new(&dir))?;
    for r in &output.results {
        println!(
            "seed {}: theta {:.4} +/- {:.4}, phi {:.4} +/- {:.4}{}{}",
            r.seed,
            r.final_mean_acc_theta,
            r.final_std_acc_theta,
            r.final_mean_acc_phi,
            r.final_std_acc_phi,
            r.attack_impact
                .map(|v| format!(", attack impact {v:.2} pts"))
                .unwrap_or_default(),
            r.ideal_delta
                .map(|v| format!(", ideal delta {v:.2} pts"))
                .unwrap_or_default(),
        );
    }
    println!("results written to {dir}/");
    Ok(())
}

fn real_main() -> Result<(), HarnessError> {
    if let Ok(threads) = std::env::var("P4SIM_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| HarnessError::Config(format!("P4SIM_THREADS = {threads:?} is not a number")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .ok();
        }
    }

    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let output = run_experiment(&cfg)?;
            emit(&output)
        }
        Command::AblateRandomGrouping(args) => {
            let cfg = load_config(&args)?;
            let output = random_grouping_ablation(&cfg)?;
            emit(&output)
        }
        Command::Dataset { command } => match command {
            DatasetCommand::Write {
                out,
                num_classes,
                dim,
                separation,
                n_per_class,
                seed,
            } => {
                let pool = gen_synthetic(num_classes, dim, separation, n_per_class, seed)?;
                write_feature_file(&out, &pool)?;
                println!(
                    "wrote {} rows of dim {} over {} classes to {}",
                    pool.len(),
                    pool.dim(),
                    pool.num_classes(),
                    out.display()
                );
                Ok(())
            }
            DatasetCommand::Inspect { path } => {
                let pool = load_feature_file(&path)?;
                let mut hist = vec![0usize; pool.num_classes()];
                for &y in pool.labels() {
                    hist[y] += 1;
                }
                println!(
                    "{}: n = {}, dim = {}, classes = {}",
                    path.display(),
                    pool.len(),
                    pool.dim(),
                    pool.num_classes()
                );
                for (class, count) in hist.iter().enumerate() {
                    println!("  class {class}: {count}");
                }
                Ok(())
            }
        },
        Command::Calibrate {
            epsilon,
            delta,
            s,
            l,
            k,
            t,
            m_prime,
            calib_const,
        } => {
            let sigma = calibrate_sigma(epsilon, delta, s, l, t, k, m_prime, calib_const)?;
            println!("sigma_g = {sigma}");
            Ok(())
        }
        Command::Separation { config, seed } => {
            let mut cfg = ExperimentConfig::from_toml_file(&config)?;
            if let Some(seeds) = seed {
                cfg.run.seeds = seeds;
            }
            for &s in &cfg.run.seeds.clone() {
                let (assignment, report) = run_separation_diagnostic(&cfg, s)?;
                let groups_json = serde_json::to_string(assignment.groups())
                    .map_err(|e| HarnessError::Serialize(e.to_string()))?;
                println!("seed {s}: groups = {groups_json}");
                match report {
                    Some(rep) => println!(
                        "seed {s}: intra = {:.4}, inter = {:.4}, ratio = {:.4}",
                        rep.mean_intra_l1, rep.mean_inter_l1, rep.ratio
                    ),
                    None => println!("seed {s}: no ground-truth distributions for a report"),
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
