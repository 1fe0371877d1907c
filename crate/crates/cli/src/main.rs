//! `vampcf`: prepare splits, train, evaluate, recommend and check gradients.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fail::exit_code;

#[derive(Parser, Debug)]
#[command(name = "vampcf", version, about = "Variational autoencoders for top-N recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a ratings file and write a strong-generalization split.
    Prepare(PrepareArgs),
    /// Train a model on a split and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test (or validation) users of a split.
    Eval(EvalArgs),
    /// Rank items for a single interaction history.
    Recommend(RecommendArgs),
    /// Finite-difference check of ELBO gradients for every model variant.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Sectioned key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set model.K=1000`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// CSV of user,item,rating[,timestamp]; defaults to data.ratings.
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Output directory; defaults to data.split_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_rating: Option<f64>,
    #[arg(long)]
    min_items: Option<usize>,
    /// Users in each of the validation and test sets.
    #[arg(long)]
    heldout_users: Option<usize>,
    #[arg(long)]
    fold_in_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Split directory; defaults to data.split_dir.
    #[arg(long)]
    split_dir: Option<PathBuf>,
    /// Directory for model.ckpt and train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitChoice {
    Test,
    Validation,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
    ks: Vec<usize>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Also write per_user.csv.
    #[arg(long)]
    per_user: bool,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directory whose vocabulary maps item ids.
    #[arg(long)]
    split_dir: PathBuf,
    /// Comma-separated item ids the user consumed.
    #[arg(long, value_delimiter = ',')]
    items: Vec<String>,
    /// File with one item id per line, added to --items.
    #[arg(long)]
    items_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Perturb the analytic gradient of this tensor (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Recommend(a) => commands::recommend(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
