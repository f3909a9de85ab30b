use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abslab_core::analysis::pareto::{read_points_csv, ParetoPoint};
use abslab_core::analysis::pipeline::{
    ablation_run, read_ablation_csv, run_baseline, run_lm_eval, run_lm_train, run_score, run_summarize, run_train,
    write_ablation_csv,
};
use abslab_core::analysis::{emit_plots, frontiers_by_family, RunConfig};
use abslab_core::decoding::BeamConfig;
use abslab_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "abslab", version, about = "Abstraction-promoting summarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides both the config seed and ABSLAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        load_config(&self.config, self.seed)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?.with_env_seed()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Subcommand)]
enum Command {
    /// Train a summarizer; writes checkpoints and a metrics log to output_dir.
    Train(ConfigArgs),
    /// Pretrain the language model on the training summaries.
    LmTrain(ConfigArgs),
    /// Perplexity of a pretrained language model on a corpus's summaries.
    LmEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        entities: Option<PathBuf>,
    },
    /// Beam-decode a corpus with a trained model into JSONL summaries.
    Summarize {
        /// Output directory of a `train` run.
        #[arg(long)]
        model_dir: PathBuf,
        /// Parameter file to use instead of the final model.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long, default_value_t = BeamConfig::default().width)]
        beam_width: usize,
        #[arg(long, default_value_t = BeamConfig::default().max_len)]
        max_len: usize,
        /// Allow repeated trigrams.
        #[arg(long)]
        no_block_trigrams: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROUGE and novel n-gram scores of system outputs against a corpus.
    Score {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON report path; the report is always printed to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-document CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Randomly insert novel words into system outputs.
    Baseline {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.0005)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score a grid of configs into a comparison table.
    Ablate {
        /// One config per grid cell, in table order.
        #[arg(long = "config", short, required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pareto frontiers of ROUGE vs. novel n-grams, as CSV and SVG.
    Pareto {
        /// Ablation table from `ablate`.
        #[arg(long, conflicts_with = "points", required_unless_present = "points")]
        table: Option<PathBuf>,
        /// Point CSV with columns label,family,x,y.
        #[arg(long)]
        points: Option<PathBuf>,
        /// n-gram order of both axes (1 or 2) when reading a table.
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "pareto")]
        stem: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NumericDomain(_) | Error::StateCorruption(_) => 3,
        Error::Data(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Alignment { .. }
        | Error::EmptyInput(_)
        | Error::SupervisionInconsistency { .. }
        | Error::Dimension { .. } => 2,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = run_train(&cfg)?;
            if let Some(last) = outcome.history.last() {
                eprintln!("epoch {} loss {:.4}", last.epoch, last.mean_loss);
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::LmTrain(args) => print_json(&run_lm_train(&args.load()?)?)?,
        Command::LmEval {
            checkpoint,
            corpus,
            entities,
        } => {
            let ppl = run_lm_eval(&checkpoint, &corpus, entities.as_deref())?;
            print_json(&serde_json::json!({ "perplexity": ppl }))?;
        }
        Command::Summarize {
            model_dir,
            checkpoint,
            corpus,
            entities,
            beam_width,
            max_len,
            no_block_trigrams,
            out,
        } => {
            let beam = BeamConfig {
                width: beam_width,
                max_len,
                block_trigrams: !no_block_trigrams,
            };
            let n = run_summarize(&model_dir, checkpoint.as_deref(), &corpus, entities.as_deref(), beam, &out)?.len();
            eprintln!("wrote {n} summaries to {}", out.display());
        }
        Command::Score {
            outputs,
            corpus,
            report,
            csv,
        } => print_json(&run_score(&outputs, &corpus, report.as_deref(), csv.as_deref())?)?,
        Command::Baseline {
            outputs,
            corpus,
            rate,
            seed,
            out,
        } => {
            let n = run_baseline(&outputs, &corpus, rate, seed, &out)?.len();
            eprintln!("wrote {n} perturbed summaries to {}", out.display());
        }
        Command::Ablate { configs, seed, out } => {
            let grid = configs
                .iter()
                .map(|p| load_config(p, seed))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = ablation_run(&grid)?;
            write_ablation_csv(&rows, &out)?;
            for r in &rows {
                eprintln!("{}: {}", r.label, r.status);
            }
        }
        Command::Pareto {
            table,
            points,
            order,
            out_dir,
            stem,
        } => {
            let points: Vec<ParetoPoint> = match (table, points) {
                (Some(t), _) => read_ablation_csv(&t)?
                    .iter()
                    .filter(|r| r.is_ok())
                    .map(|r| r.pareto_point(order))
                    .collect::<Result<_, _>>()?,
                (None, Some(p)) => read_points_csv(&p)?,
                (None, None) => return Err(Error::Config("pass --table or --points".into())),
            };
            let fronts = if points.is_empty() {
                Default::default()
            } else {
                frontiers_by_family(&points)?
            };
            let labels = (format!("ROUGE-{order}"), format!("NN-{order}"));
            let files = emit_plots(&points, &fronts, &out_dir, &stem, (&labels.0, &labels.1))?;
            print_json(&fronts)?;
            eprintln!("wrote {} and {}", files.csv.display(), files.svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
