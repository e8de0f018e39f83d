use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "holiseg", version, about = "Holistic label filtering for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that read a run configuration.
#[derive(Args, Default)]
pub struct ConfigArgs {
    /// key = value file; explicit flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Label excluded from every count
    #[arg(long)]
    pub ignore: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Score predicted label maps against ground truth (PGM files matched by name)
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Argmax restricted to the classes listed in a label file
    FilterHard {
        /// h×w×c score tensor
        #[arg(long)]
        scores: PathBuf,
        /// Whitespace- or comma-separated class ids
        #[arg(long)]
        labels_file: PathBuf,
        /// Output PGM label map
        #[arg(long)]
        out: PathBuf,
    },
    /// Soft filter with image-level confidences, optionally upsampled
    FilterSoft {
        #[arg(long)]
        scores: PathBuf,
        /// Rank-1 tensor of per-class confidence logits
        #[arg(long)]
        conf: PathBuf,
        #[arg(long, default_value_t = holiseg_core::tensor::DEFAULT_EPS)]
        eps: f64,
        /// Output tensor
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        upsample: Option<Vec<usize>>,
        /// Upsample first and filter at full resolution
        #[arg(long, requires = "upsample")]
        filter_after_upsample: bool,
    },
    /// Hard filtering with contaminated ground-truth label sets over an (n_p, n_r) grid
    ContaminateGrid {
        /// Score tensors named <stem>.hstn
        #[arg(long)]
        scores_dir: PathBuf,
        /// Label maps named <stem>.pgm
        #[arg(long)]
        truth_dir: PathBuf,
        /// Comma-separated numbers of added labels
        #[arg(long)]
        np_list: Option<String>,
        /// Comma-separated numbers of removed labels
        #[arg(long)]
        nr_list: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: PathBuf,
        /// PPM heatmap of --metric
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value = "mIU")]
        metric: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare backward passes with central finite differences
    Gradcheck {
        #[arg(long, conflicts_with = "full_net")]
        op: Option<String>,
        /// Every weight tensor of the toy network on a 16×16 input
        #[arg(long)]
        full_net: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to 1e-6 per op and 1e-3 for the full network
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train the toy network on generated shapes
    TrainToy {
        #[arg(long, default_value = "holistic")]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Per-epoch CSV log
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Color a label map
    Render {
        #[arg(long)]
        labels: PathBuf,
        /// Output PPM
        #[arg(long)]
        out: PathBuf,
        /// Defaults to one more than the largest label
        #[arg(long)]
        classes: Option<usize>,
        /// Painted black
        #[arg(long, default_value_t = holiseg_core::DEFAULT_IGNORE_LABEL)]
        ignore: u32,
        #[arg(long, default_value_t = 0)]
        palette_seed: u64,
    },
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Eval {
            pred_dir,
            truth_dir,
            config,
            out,
        } => commands::eval(&pred_dir, &truth_dir, &config, out.as_deref()),
        Command::FilterHard {
            scores,
            labels_file,
            out,
        } => commands::filter_hard(&scores, &labels_file, &out),
        Command::FilterSoft {
            scores,
            conf,
            eps,
            out,
            upsample,
            filter_after_upsample,
        } => commands::filter_soft(&scores, &conf, eps, &out, upsample.as_deref(), filter_after_upsample),
        Command::ContaminateGrid {
            scores_dir,
            truth_dir,
            np_list,
            nr_list,
            seed,
            csv,
            heatmap,
            metric,
            config,
        } => commands::contaminate_grid(commands::GridArgs {
            scores_dir: &scores_dir,
            truth_dir: &truth_dir,
            np_list: np_list.as_deref(),
            nr_list: nr_list.as_deref(),
            seed,
            csv: &csv,
            heatmap: heatmap.as_deref(),
            metric: &metric,
            config: &config,
        }),
        Command::Gradcheck {
            op,
            full_net,
            seed,
            tol,
        } => commands::gradcheck(op.as_deref(), full_net, seed, tol),
        Command::TrainToy {
            variant,
            config,
            seed,
            out_checkpoint,
            log,
        } => commands::train_toy(&variant, config.as_deref(), seed, out_checkpoint.as_deref(), log.as_deref()),
        Command::Render {
            labels,
            out,
            classes,
            ignore,
            palette_seed,
        } => commands::render(&labels, &out, classes, ignore, palette_seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("holiseg: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("holiseg: {}", chain.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
