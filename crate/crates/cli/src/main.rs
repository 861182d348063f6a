use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use speechdst::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use speechdst::config::RunConfig;
use speechdst::data::{DialogueCorpus, SynthSpec};
use speechdst::inference::{read_predictions, write_predictions, HistorySource};
use speechdst::metrics::{evaluate_lines, AliasTable};
use speechdst::pipeline::{self, SplitSizes};
use speechdst::postprocess::Ontology;
use speechdst::training::{dst_examples, final_finetune, Stage, TrainReport};
use speechdst::Model;

/// Spoken dialogue state tracking toolkit.
///
/// Configuration precedence, lowest first: built-in defaults, `--config` file, `--set`
/// overrides, then dedicated subcommand flags. Relative checkpoint paths resolve against
/// `paths.checkpoint_root`, then `$SPEECHDST_HOME`, then the working directory.
#[derive(Parser, Debug)]
#[command(name = "speechdst", version)]
struct Cli {
    /// JSON (comments allowed) run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set stage2.learning_rate=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic corpora and an ontology.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dialogues in the train split.
        #[arg(long)]
        dialogues: Option<usize>,
    },
    /// Pretrain the language model on plain text from a corpus.
    PretrainLm {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: align encoder and connector to the frozen LM on transcription.
    PretrainAsr {
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        data: TrainData,
        /// Use at most this many utterances.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: joint transcription and state tracking.
    TrainDst {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        data: TrainData,
        /// Re-initialize encoder and connector instead of keeping the stage-1 weights.
        #[arg(long)]
        no_asr_init: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// One pass over train and dev data with the final-tuning settings.
    Finetune {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode every turn of a corpus.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        history_mode: Option<HistoryArg>,
        /// Leave agent turns out of the history.
        #[arg(long)]
        user_only: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a gold corpus.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        fuzzy: bool,
        #[arg(long)]
        fuzzy_threshold: Option<u32>,
        /// Report path; defaults to `<predictions>.report[.fuzzy].json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainData {
    /// Training corpus; repeat to mix corpora. Defaults to `paths.train`.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Dev corpus for early stopping. Defaults to `paths.dev`.
    #[arg(long)]
    dev: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistoryArg {
    SelfDecoded,
    OracleUser,
    ExternalAsr,
}

impl From<HistoryArg> for HistorySource {
    fn from(h: HistoryArg) -> Self {
        match h {
            HistoryArg::SelfDecoded => HistorySource::SelfDecoded,
            HistoryArg::OracleUser => HistorySource::OracleUser,
            HistoryArg::ExternalAsr => HistorySource::ExternalAsr,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<speechdst::Error>() {
                Some(speechdst::Error::Config { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.cmd {
        Command::Synth { out, seed, dialogues } => {
            let spec = SynthSpec { seed: seed.unwrap_or(cfg.synth.seed), n_dialogues: dialogues.unwrap_or(cfg.synth.n_dialogues), ..cfg.synth.clone() };
            spec.validate()?;
            let splits = pipeline::synthetic_splits(&spec, &SplitSizes::default())?;
            pipeline::write_splits(&splits, &out)?;
            info!("wrote synthetic splits to {} (train hash {})", out.display(), splits.train.hash());
        }
        Command::PretrainLm { data, out } => {
            let (train, dev) = data.load(&cfg)?;
            let (model, report) = pipeline::pretrained_model::<f32>(&cfg, &concat(train), &dev)?;
            save(&cfg, &out, &model, Stage::LmPretrain, &report)?;
        }
        Command::PretrainAsr { init, data, limit, out } => {
            let mut model = match init {
                Some(p) => load(&cfg, &p)?,
                None => Model::new(&cfg.model, cfg.seed)?,
            };
            let (train, dev) = data.load(&cfg)?;
            let report = pipeline::asr_stage(&mut model, &cfg, &concat(train), &dev, limit)?;
            save(&cfg, &out, &model, Stage::AsrPretrain, &report)?;
        }
        Command::TrainDst { init, data, no_asr_init, out } => {
            let mut model = load(&cfg, &init)?;
            if no_asr_init {
                model.reinit_speech_side(cfg.seed)?;
            }
            let (train, dev) = data.load(&cfg)?;
            let train: Vec<&DialogueCorpus> = train.iter().collect();
            let report = pipeline::dst_stage(&mut model, &cfg, &train, &[&dev])?;
            save(&cfg, &out, &model, Stage::JointDst, &report)?;
        }
        Command::Finetune { init, data, out } => {
            let mut model = load(&cfg, &init)?;
            let (mut train, dev) = data.load(&cfg)?;
            train.push(dev);
            let mut examples = Vec::new();
            for c in &train {
                examples.extend(dst_examples(&model, c, cfg.history.include_agent)?);
            }
            let report = final_finetune(&mut model, &examples, &cfg.final_ft)?;
            save(&cfg, &out, &model, Stage::FinalFt, &report)?;
        }
        Command::Infer { checkpoint, corpus, history_mode, user_only, workers, out } => {
            if let Some(h) = history_mode {
                cfg.history.mode = h.into();
            }
            if user_only {
                cfg.history.include_agent = false;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let model = load(&cfg, &checkpoint)?;
            let corpus = DialogueCorpus::load(&required(corpus, &cfg.paths.test, "--corpus", "paths.test")?)?;
            let lines = pipeline::decode(&model, &corpus, cfg.history, &cfg)?;
            write_predictions(&out, &lines)?;
            info!("wrote {} predictions to {}", lines.len(), out.display());
        }
        Command::Evaluate { predictions, corpus, ontology, aliases, fuzzy, fuzzy_threshold, out } => {
            if let Some(t) = fuzzy_threshold {
                cfg.fuzzy_threshold = t;
            }
            cfg.validate()?;
            let gold = DialogueCorpus::load(&required(corpus, &cfg.paths.test, "--corpus", "paths.test")?)?;
            let ontology = match ontology.or_else(|| cfg.paths.ontology.clone()) {
                Some(p) => Some(Ontology::load(&p)?),
                None if fuzzy => bail!("--fuzzy needs --ontology or paths.ontology"),
                None => None,
            };
            let aliases = match aliases.or_else(|| cfg.paths.aliases.clone()) {
                Some(p) => AliasTable::load(&p)?,
                None => AliasTable::default(),
            };
            let lines = read_predictions(&predictions)?;
            let mut report = evaluate_lines(&lines, &gold, ontology.as_ref(), fuzzy, cfg.fuzzy_threshold, &aliases)?;
            if report.config_hash.is_none() {
                report.config_hash = Some(cfg.hash());
            }
            let out = out.unwrap_or_else(|| default_report_path(&predictions, fuzzy));
            write_atomic(&out, &(report.to_json() + "\n"))?;
            print!("{}", report.table());
            info!("wrote report to {}", out.display());
        }
    }
    Ok(())
}

impl TrainData {
    fn load(&self, cfg: &RunConfig) -> Result<(Vec<DialogueCorpus>, DialogueCorpus)> {
        let mut paths = self.corpus.clone();
        if paths.is_empty() {
            paths.extend(cfg.paths.train.clone());
            paths.extend(cfg.paths.extra_train.iter().cloned());
        }
        if paths.is_empty() {
            bail!("no training corpus: pass --corpus or set paths.train");
        }
        let train = paths.iter().map(|p| DialogueCorpus::load(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<Vec<_>>>()?;
        let dev = DialogueCorpus::load(&required(self.dev.clone(), &cfg.paths.dev, "--dev", "paths.dev")?)?;
        Ok((train, dev))
    }
}

fn concat(corpora: Vec<DialogueCorpus>) -> DialogueCorpus {
    let mut it = corpora.into_iter();
    let mut first = it.next().expect("at least one corpus");
    for c in it {
        first.dialogues.extend(c.dialogues);
    }
    first
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str, field: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone()).with_context(|| format!("pass {name} or set {field}"))
}

fn load(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let path = cfg.checkpoint_path(path);
    let (model, manifest) = load_checkpoint::<f32>(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    info!("loaded {} (stage {:?}, step {})", path.display(), manifest.stage, manifest.step);
    Ok(model)
}

fn save(cfg: &RunConfig, out: &Path, model: &Model, stage: Stage, report: &TrainReport) -> Result<()> {
    let out = cfg.checkpoint_path(out);
    let meta = CheckpointMeta { step: report.steps, seed: cfg.seed, stage: Some(stage), run_config: Some(cfg.to_value()), config_hash: Some(cfg.hash()) };
    save_checkpoint(&out, model, &meta)?;
    match report.best_dev_ce {
        Some(ce) => info!("{stage:?}: {} steps, best dev CE {ce:.4} at step {}; saved {}", report.steps, report.best_step, out.display()),
        None => info!("{stage:?}: {} steps; saved {}", report.steps, out.display()),
    }
    Ok(())
}

fn default_report_path(predictions: &Path, fuzzy: bool) -> PathBuf {
    let stem = predictions.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "predictions".into());
    let name = if fuzzy { format!("{stem}.report.fuzzy.json") } else { format!("{stem}.report.json") };
    predictions.with_file_name(name)
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
