use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dst_core::corpus::{load_corpus, DialogueCorpus, SlotSchema};
use dst_core::harness::{ablate, ablation_table, check_schema, evaluate, inspect_graph, prediction_json, track, train, EvalOptions};
use dst_core::model::{EvalMode, InferenceOptions};
use dst_core::synth::{default_schema, synthesize_corpus, SynthConfig};
use dst_core::{Config, DstError, DstModel, Result};

#[derive(Parser)]
#[command(name = "dst", about = "Dialogue state tracking with per-slot history selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        max_turns: usize,
        #[arg(long, default_value_t = 0.3)]
        coref_rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Schema to generate for; defaults to the built-in one.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Also write the schema used.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key (`key=value`), repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Tracked evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dicos")]
        mode: EvalMode,
        #[arg(long)]
        k: Option<usize>,
        /// Feed gold previous states instead of predictions.
        #[arg(long)]
        gold_replay: bool,
    },
    /// Evaluate all seven perspective combinations.
    Ablate {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dicos")]
        mode: EvalMode,
    },
    /// Per-turn predictions for each dialogue in a file.
    Predict {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        dialogue: PathBuf,
    },
    /// Dump the selection graph of one slot at one turn as JSON.
    InspectGraph {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        dialogue: PathBuf,
        #[arg(long)]
        turn: usize,
        #[arg(long)]
        slot: String,
    },
}

#[derive(Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Schema the data was written for; must match the checkpoint's.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
}

impl CkptArgs {
    fn load(&self) -> Result<DstModel> {
        let mut model = DstModel::load(&self.ckpt)?;
        if let Some(path) = &self.schema {
            check_schema(&model, &SlotSchema::load(path)?)?;
        }
        if !self.set.is_empty() {
            let mut cfg = model.config.clone();
            cfg.apply_overrides(&self.set)?;
            if cfg.encoder() != model.config.encoder() {
                return Err(DstError::Config("architecture keys cannot be overridden on a checkpoint".into()));
            }
            model.config = cfg;
        }
        Ok(model)
    }
}

fn load_schema(path: Option<&Path>) -> Result<SlotSchema> {
    match path {
        Some(p) => SlotSchema::load(p),
        None => Ok(default_schema()),
    }
}

fn read_dialogues(path: &Path, schema: &SlotSchema) -> Result<DialogueCorpus> {
    let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    DialogueCorpus::parse_with(&text, schema, false)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData { out, n, max_turns, coref_rate, seed, schema, schema_out } => {
            let schema = load_schema(schema.as_deref())?;
            let corpus = synthesize_corpus(&schema, &SynthConfig { n_dialogues: n, max_turns, coref_rate, seed })?;
            corpus.save(&out, &schema)?;
            if let Some(p) = schema_out {
                schema.save(&p)?;
            }
            eprintln!("wrote {} dialogues ({} turns) to {}", corpus.len(), corpus.num_turns(), out.display());
        }
        Command::Train { config, data, out, set } => {
            let mut cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            cfg.apply_overrides(&set)?;
            let schema = load_schema((!cfg.schema.is_empty()).then(|| Path::new(&cfg.schema)))?;
            let corpus = load_corpus(&data, &schema)?;
            let trained = train(&corpus, &schema, &cfg, &mut |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  update {:.4}  extractive {:.4}  classification {:.4}",
                    e.epoch, e.loss, e.update, e.extractive, e.classification
                )
            })?;
            trained.model.save(&out)?;
            let log = out.join("train_log.txt");
            fs::write(&log, trained.log.to_text()).map_err(|e| DstError::io(&log, e))?;
            if let Some(e) = trained.diverged {
                eprintln!("error: {e}; last good checkpoint written to {}", out.display());
                return Ok(ExitCode::from(3));
            }
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Eval { ckpt, data, mode, k, gold_replay } => {
            let mut model = ckpt.load()?;
            if let Some(k) = k {
                model.config.k = k;
            }
            let corpus = load_corpus(&data, &model.schema)?;
            let opts = EvalOptions { inference: InferenceOptions { mode, ..Default::default() }, gold_replay };
            println!("{}", evaluate(&model, &corpus, &opts)?.to_json());
        }
        Command::Ablate { ckpt, data, mode } => {
            let model = ckpt.load()?;
            let corpus = load_corpus(&data, &model.schema)?;
            print!("{}", ablation_table(&ablate(&model, &corpus, mode)?));
        }
        Command::Predict { ckpt, dialogue } => {
            let model = ckpt.load()?;
            for d in read_dialogues(&dialogue, &model.schema)?.dialogues {
                let preds = track(&model, &d, d.num_turns(), &InferenceOptions::default())?;
                for line in prediction_json(&model, &preds) {
                    println!("{line}");
                }
            }
        }
        Command::InspectGraph { ckpt, dialogue, turn, slot } => {
            let model = ckpt.load()?;
            let corpus = read_dialogues(&dialogue, &model.schema)?;
            let d = corpus.dialogues.first().ok_or_else(|| DstError::Config("dialogue file is empty".into()))?;
            let graph = inspect_graph(&model, d, turn, &slot)?;
            println!("{}", serde_json::to_string_pretty(&graph).expect("graph serialises"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DstError::Diverged { .. } => ExitCode::from(3),
                e if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
