use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selftrain::config::RunConfig;
use selftrain::confidence::Measure;
use selftrain::corpus::{self, LoadView, Split};
use selftrain::decode::{read_nbest, write_nbest};
use selftrain::model::Model;
use selftrain::ssl::{self, PipelineConfig};

/// Semi-supervised self-training lab for an end-to-end character recognizer.
#[derive(Parser)]
#[command(name = "selftrain", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores; env SELFTRAIN_WORKERS)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain corpus
    GenCorpus,
    /// Train a seed model on the labeled source split
    Train {
        #[arg(long)]
        seed: u64,
        /// train the MC-dropout variant
        #[arg(long)]
        dropout: bool,
    },
    /// Encoder-only adaptation of a checkpoint on dev1
    Adapt {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "e2e_s")]
        system: String,
    },
    /// Beam N-best decode of a split
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate confidence thresholds on dev1 for both measures
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold-select pseudo labels from an N-best file
    Select {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long, value_parser = parse_measure)]
        measure: Measure,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline for one master seed
    SelfTrain {
        #[arg(long)]
        seed: u64,
    },
    /// Run the full experiment matrix over all configured seeds
    Matrix,
    /// Greedy-decode WER of a checkpoint on a split
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
    },
    /// Rewrite the results CSV from a finished matrix run
    Report,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev1" => Ok(Split::Dev1),
        "dev2" => Ok(Split::Dev2),
        "dev3" => Ok(Split::Dev3),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other}; use train|dev1|dev2|dev3|test")),
    }
}

fn parse_measure(s: &str) -> Result<Measure, String> {
    match s {
        "decode_score" => Ok(Measure::DecodeScore),
        "entropy" => Ok(Measure::Entropy),
        other => Err(format!("unknown measure {other}; use decode_score|entropy")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Ok(out) = std::env::var("SELFTRAIN_OUT_DIR") {
        cfg.pipeline.out_dir = PathBuf::from(out);
    }
    Ok(cfg)
}

fn workers(cli: &Cli) -> Option<usize> {
    cli.workers.or_else(|| {
        std::env::var("SELFTRAIN_WORKERS").ok().and_then(|v| v.parse().ok())
    })
}

fn run(cli: Cli) -> Result<(), String> {
    if let Some(n) = workers(&cli) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let cfg = load_config(&cli)?;
    let pipeline: &PipelineConfig = &cfg.pipeline;
    let err = |e: ssl::SslError| e.to_string();

    match cli.command {
        Command::GenCorpus => {
            let built = corpus::build_corpus(&cfg.corpus, &pipeline.corpus_dir, cfg.master_seed)
                .map_err(|e| e.to_string())?;
            println!("corpus at {} hash {}", built.dir.display(), built.corpus_hash);
            for (split, n) in &built.counts {
                println!("  {split}: {n}");
            }
        }
        Command::Train { seed, dropout } => {
            let (_, report, ckpt) = ssl::train_seed_model(pipeline, seed, dropout).map_err(err)?;
            println!("checkpoint {}", ckpt.display());
            if let Some(best) = report.best_epoch {
                println!("best epoch {best}, eval loss {:.4}", report.curve[best].eval_loss);
            }
        }
        Command::Adapt { seed, model, system } => {
            let base = Model::load(&model).map_err(|e| e.to_string())?;
            let (_, report, ckpt) =
                ssl::adapt_model(pipeline, base, &system, seed).map_err(err)?;
            println!("checkpoint {}", ckpt.display());
            if let Some(best) = report.best_epoch {
                println!("best epoch {best}, eval loss {:.4}", report.curve[best].eval_loss);
            }
        }
        Command::Decode { model, split, out } => {
            let m = Model::load(&model).map_err(|e| e.to_string())?;
            let set = corpus::load_split(&pipeline.corpus_dir, split, LoadView::Training)
                .map_err(|e| e.to_string())?;
            let lists = ssl::decode_beam_set(&m, &set, &pipeline.decode).map_err(err)?;
            write_nbest(&out, &lists).map_err(|e| e.to_string())?;
            println!("{} n-best lists -> {}", lists.len(), out.display());
        }
        Command::Calibrate { model, out } => {
            let m = Model::load(&model).map_err(|e| e.to_string())?;
            let dev1 = corpus::load_split(&pipeline.corpus_dir, Split::Dev1, LoadView::Training)
                .map_err(|e| e.to_string())?;
            let obs = ssl::calibration_observations(&m, &dev1).map_err(err)?;
            let score = ssl::calibrate_from_observations(&obs, Measure::DecodeScore, pipeline)
                .map_err(err)?;
            let ent =
                ssl::calibrate_from_observations(&obs, Measure::Entropy, pipeline).map_err(err)?;
            let json = serde_json::json!({ "decode_score": score, "entropy": ent });
            std::fs::write(&out, serde_json::to_string_pretty(&json).unwrap())
                .map_err(|e| e.to_string())?;
            println!(
                "decode_score threshold {:.3}, entropy threshold {:.3} -> {}",
                score.threshold,
                ent.threshold,
                out.display()
            );
        }
        Command::Select { nbest, measure, threshold, out } => {
            let lists = read_nbest(&nbest).map_err(|e| e.to_string())?;
            let set = ssl::make_pseudo_labels(
                &lists,
                None,
                measure,
                threshold,
                pipeline.max_hyps_per_utt,
            );
            ssl::write_pseudo_labels(&out, &set).map_err(err)?;
            println!(
                "kept {} of {} hypotheses -> {}",
                set.audit.kept,
                set.audit.considered,
                out.display()
            );
        }
        Command::SelfTrain { seed } => {
            let outcome = ssl::run_pipeline_for_seed(pipeline, seed).map_err(err)?;
            for (system, per_split) in &outcome.wer {
                for (split, wer) in per_split {
                    println!("{system} {split} wer {wer:.4}");
                }
            }
        }
        Command::Matrix => {
            let outcome = ssl::run_experiment_matrix(pipeline).map_err(err)?;
            println!(
                "report at {}",
                pipeline.out_dir.join("report").join("results.csv").display()
            );
            for (system, per_split) in &outcome.median_wer {
                for (split, wer) in per_split {
                    println!("{system} {split} median wer {wer:.4}");
                }
            }
        }
        Command::Eval { model, split } => {
            let m = Model::load(&model).map_err(|e| e.to_string())?;
            let set = corpus::load_split(&pipeline.corpus_dir, split, LoadView::OracleEval)
                .map_err(|e| e.to_string())?;
            let score = ssl::evaluate_model(&m, &set).map_err(err)?;
            println!(
                "{}: wer {:.4} cer {:.4} over {} utterances",
                split.name(),
                score.wer,
                score.cer,
                score.utterances
            );
        }
        Command::Report => {
            let path = pipeline.out_dir.join("report").join("matrix.json");
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            let outcome: ssl::MatrixOutcome =
                serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let csv = pipeline.out_dir.join("report").join("results.csv");
            ssl::write_matrix_report(&csv, &outcome).map_err(err)?;
            println!("report at {}", csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
