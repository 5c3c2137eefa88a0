use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minis2t::audio::FrontendConfig;
use minis2t::config::RunConfig;
use minis2t::evaluation::{self, Case, EvalConfig, Metric, Punctuation, ScoreLine, TokenizerKind};
use minis2t::model::Task;
use minis2t::pipeline::{prepare, PrepareSpec};
use minis2t::tensor::Checkpoint;
use minis2t::train::{average_checkpoints, init_from_checkpoints, train};
use minis2t::{inference, Error, Result};

#[derive(Parser)]
#[command(name = "minis2t", version, about = "Minimal speech-to-text toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a manifest (and optional feature caches) from a WAV directory.
    Prepare {
        #[arg(long)]
        wav_dir: PathBuf,
        /// `id<TAB>transcript` lines.
        #[arg(long)]
        transcripts: PathBuf,
        /// `id<TAB>translation` lines.
        #[arg(long)]
        translations: Option<PathBuf>,
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 80)]
        n_mels: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model from a YAML config.
    Train { config: PathBuf },
    /// Transcribe a manifest or WAV list.
    Recognize(DecodeArgs),
    /// Translate a manifest, WAV list or sentence list.
    Translate(DecodeArgs),
    /// Score hypotheses against references.
    Score {
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        case: Option<Case>,
        #[arg(long)]
        punctuation: Option<Punctuation>,
        #[arg(long)]
        tokenizer: Option<TokenizerKind>,
    },
    /// Average checkpoints parameter-wise.
    AvgCkpt {
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Build an ST checkpoint from an ASR encoder and an MT decoder.
    TransferInit {
        config: PathBuf,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        mt: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(clap::Args)]
struct DecodeArgs {
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Overrides `testing.beam_size`.
    #[arg(long)]
    beam_size: Option<usize>,
}

fn read_lines(path: &std::path::Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            wav_dir,
            transcripts,
            translations,
            features_dir,
            sample_rate,
            n_mels,
            output,
        } => {
            let spec = PrepareSpec {
                wav_dir,
                transcripts,
                translations,
                features_dir,
                frontend: FrontendConfig {
                    sample_rate,
                    n_mels,
                    ..FrontendConfig::default()
                },
            };
            let entries = prepare(&spec, &output)?;
            println!("wrote {} entries to {}", entries.len(), output.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = train(&cfg)?;
            println!(
                "trained {} steps; best {} = {}; outputs in {}",
                out.state.step,
                cfg.training.early_stopping_metric.name(),
                out.state.best_metric.map_or("NA".to_string(), |m| format!("{m:.2}")),
                out.model_dir.display()
            );
        }
        Command::Recognize(a) | Command::Translate(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let out = inference::run_inference(&cfg, &a.ckpt, &a.input, &a.output, a.beam_size)?;
            log::info!("wrote {} hypotheses to {}", out.hypotheses.len(), a.output.display());
        }
        Command::Score {
            metric,
            hyp,
            reference,
            case,
            punctuation,
            tokenizer,
        } => {
            let mut cfg = EvalConfig::for_metric(metric);
            if let Some(c) = case {
                cfg.case = c;
            }
            if let Some(p) = punctuation {
                cfg.punctuation = p;
            }
            if let Some(t) = tokenizer {
                cfg.tokenizer = t;
            }
            let value = evaluation::score(&read_lines(&hyp)?, &read_lines(&reference)?, &cfg)?;
            println!("{}", ScoreLine { value, cfg: &cfg });
        }
        Command::AvgCkpt { output, inputs } => {
            let ckpts = inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            average_checkpoints(&ckpts)?.save(&output)?;
            println!("averaged {} checkpoints into {}", ckpts.len(), output.display());
        }
        Command::TransferInit { config, asr, mt, output } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.task != Task::S2T {
                return Err(Error::Config {
                    key: "task".into(),
                    msg: "transfer initialization needs an S2T config".into(),
                });
            }
            let loader = minis2t::pipeline::build_loader(&cfg, None)?;
            let model_cfg = cfg.model_config(minis2t::pipeline::resolved_dims(&loader))?;
            let (model, report) = init_from_checkpoints(model_cfg, &Checkpoint::load(&asr)?, &Checkpoint::load(&mt)?)?;
            for (name, prov) in &report {
                println!("{name}\t{}", prov.as_str());
            }
            model.to_checkpoint().save(&output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
