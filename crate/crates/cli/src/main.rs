use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trajcast_cli::{
    cmd_cluster, cmd_eval, cmd_explain, cmd_gen, cmd_preprocess, cmd_train, exit_code,
};

/// Map-free multimodal trajectory prediction pipeline.
#[derive(Parser)]
#[command(name = "trajcast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory record file.
    Gen {
        /// Generator configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cut, normalize, mask, and split scenes from raw records.
    Preprocess {
        /// Input record CSV.
        #[arg(long)]
        input: PathBuf,
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.jsonl / test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the motion-mode bank from the training archive.
    Cluster {
        /// Training scene archive.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output bank path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model and write a checkpoint.
    Train {
        /// Training scene archive.
        #[arg(long)]
        train: PathBuf,
        /// Motion-mode bank.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Epoch loss log (line-delimited JSON).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: metrics and spatial error fields.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test scene archive.
        #[arg(long)]
        test: PathBuf,
        /// Motion-mode bank.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Kernel bandwidth for the error fields, meters.
        #[arg(long, default_value_t = 5.0)]
        sigma: f64,
        /// Cells per grid side.
        #[arg(long, default_value_t = 32)]
        grid_size: usize,
        /// Worker threads for per-scene evaluation.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Export the attention trace for one archived scene.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene archive to index into.
        #[arg(long)]
        archive: PathBuf,
        /// Zero-based scene index.
        #[arg(long)]
        scene: usize,
        /// Motion-mode bank.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output trace path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { config, out, seed } => cmd_gen(config, out, *seed),
        Command::Preprocess { input, config, out } => cmd_preprocess(input, config, out),
        Command::Cluster {
            train,
            config,
            out,
            seed,
        } => cmd_cluster(train, config, out, *seed),
        Command::Train {
            train,
            bank,
            config,
            out,
            log,
            seed,
        } => cmd_train(train, bank, config, out, log, *seed),
        Command::Eval {
            checkpoint,
            test,
            bank,
            config,
            out,
            sigma,
            grid_size,
            threads,
        } => cmd_eval(
            checkpoint, test, bank, config, out, *sigma, *grid_size, *threads,
        ),
        Command::Explain {
            checkpoint,
            archive,
            scene,
            bank,
            config,
            out,
        } => cmd_explain(checkpoint, archive, *scene, config, bank, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
