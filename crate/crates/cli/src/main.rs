mod chat;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mmdial", version, about = "Multimodal dialogue response generation")]
struct Cli {
    /// Log filter, e.g. `info` or `mmdial=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus into a directory.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint or a responses file against a split.
    Eval(EvalArgs),
    /// Write greedy (or oracle) responses for a split.
    Generate(GenerateArgs),
    /// Talk to a trained model.
    Chat(ChatArgs),
    /// Finite-difference check of every gradient in a tiny model.
    Gradcheck(GradcheckArgs),
    /// Sweep the modality dropout rate.
    AblatePnet(AblatePnetArgs),
    /// Trained versus frozen initial history.
    AblateHistory(AblateHistoryArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    n_attributes: Option<usize>,
    #[arg(long)]
    n_keywords: Option<usize>,
    #[arg(long)]
    image_noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistoryArg {
    Trained,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Step,
    Example,
}

/// Training settings shared by `train` and the ablations. Every flag
/// overrides the corresponding config file entry.
#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size profile instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    p_net: Option<f64>,
    #[arg(long, value_enum)]
    history_mode: Option<HistoryArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Float width, 32 or 64.
    #[arg(long)]
    precision: Option<u8>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Stop once validation BLEU-4 reaches this value.
    #[arg(long)]
    target_bleu4: Option<f64>,
    /// Validate on at most this many samples per epoch.
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    context_size: Option<usize>,
    #[arg(long, value_enum)]
    dropout_granularity: Option<GranularityArg>,
    /// Use a separate output projection instead of the embedding table.
    #[arg(long)]
    untied_output: bool,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its config is used as the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, conflicts_with = "responses", required_unless_present = "responses")]
    checkpoint: Option<PathBuf>,
    /// JSON-lines responses file written by `generate`.
    #[arg(long)]
    responses: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the rule-based responder of the synthetic generator.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory holding the generator world (for `#attribute`
    /// image tags).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblatePnetArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    seeds: Vec<u64>,
    /// Dropout rates to sweep.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct AblateHistoryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_secs()
        .init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Chat(a) => chat::run(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::AblatePnet(a) => commands::ablate_pnet(a),
        Command::AblateHistory(a) => commands::ablate_history(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
