use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cada::corpus::{encode_input, load_corpus, save_corpus, Dialogue, EncodeOptions, Vocabulary};
use cada::eval::{
    audit_synthetic, generate_synthetic, predict_corpus, run_ablation, score, SyntheticSpec, Variant,
};
use cada::graphs::StructureMatrices;
use cada::model::{Model, ModelConfig};
use cada::tensor::Checkpoint;
use cada::training::{apply_settings, train, TrainConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cada", version, about = "Structure-aware reading comprehension over multi-party dialogues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best-on-dev checkpoint.
    Train(TrainArgs),
    /// Score predictions, or a checkpoint's predictions, against a corpus.
    Eval(EvalArgs),
    /// Write a qa-id to answer map for a corpus.
    Predict(PredictArgs),
    /// Train several channel variants on identical settings and compare them.
    Ablate(AblateArgs),
    /// Generate a synthetic probing corpus.
    GenSynthetic(GenArgs),
    /// Print M1, M2 and G for one question as text grids.
    DumpGraphs(DumpArgs),
}

#[derive(Args)]
struct Shared {
    /// Settings file with `key = value` lines for model and training options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Discourse window as counted in hops; stored internally as hops + 1.
    #[arg(long)]
    gamma_paper: Option<String>,
}

impl Shared {
    fn configs(&self) -> Result<(ModelConfig, TrainConfig)> {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            apply_settings(&text, &mut model, &mut train)?;
        }
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        if let Some(g) = &self.gamma_paper {
            model.set("gamma_paper", g)?;
        }
        Ok((model, train))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Output directory for the checkpoint and metric log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// JSON map of qa-id to answer text.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    gamma_paper: Option<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gamma_paper: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Training corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Test corpus; without it the last fifth of `--corpus` is held out.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', default_value = "full,w/o-CAE,w/o-IPM,w/o-DDM,w/o-all")]
    variants: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 500)]
    dialogues: usize,
    #[arg(long, default_value_t = 6)]
    utterances: usize,
    #[arg(long, default_value_t = 3)]
    speakers: usize,
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.0)]
    coref_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    discourse_fraction: f64,
    #[arg(long, default_value_t = 2)]
    questions_per_dialogue: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Dialogue id; defaults to the first dialogue.
    #[arg(long)]
    dialogue: Option<String>,
    /// Index of the question within the dialogue.
    #[arg(long, default_value_t = 0)]
    question: usize,
    #[arg(long, default_value = "2")]
    gamma_paper: String,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long)]
    no_question_routing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::DumpGraphs(a) => cmd_dump(a),
    }
}

fn load(path: &Path) -> Result<Vec<Dialogue>> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, gamma_paper: Option<&str>) -> Result<(Model, Vocabulary)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (mut model, vocab) = Model::from_checkpoint(&ck)?;
    if let Some(g) = gamma_paper {
        let mut config = model.config().clone();
        config.set("gamma_paper", g)?;
        model.set_config(config)?;
    }
    Ok((model, vocab))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (model_config, train_config) = a.shared.configs()?;
    let corpus = load(&a.corpus)?;
    let dev = a.dev.as_deref().map(load).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = train(&corpus, dev.as_deref(), &model_config, &train_config, Some(&a.out))?;
    if let Some(f1) = out.best_dev_f1 {
        log::info!("best dev F1 {f1:.2}");
    }
    println!("steps: {}", out.steps);
    if let Some(p) = &out.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    if let Some(p) = &out.metrics {
        println!("metrics: {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let predictions: BTreeMap<String, String> = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(ck)) => {
            let (model, vocab) = load_model(ck, a.gamma_paper.as_deref())?;
            predict_corpus(&model, &vocab, &corpus)?
        }
        (None, None) => bail!("either --checkpoint or --predictions is required"),
    };
    let report = score(&predictions, &corpus)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write(out, &report.to_json())?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let (model, vocab) = load_model(&a.checkpoint, a.gamma_paper.as_deref())?;
    let predictions = predict_corpus(&model, &vocab, &corpus)?;
    write(&a.out, &serde_json::to_string_pretty(&predictions)?)?;
    println!("{} predictions written to {}", predictions.len(), a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (model_config, train_config) = a.shared.configs()?;
    let mut corpus = load(&a.corpus)?;
    let test = match &a.test {
        Some(p) => load(p)?,
        None => {
            let held = corpus.len() / 5;
            if held == 0 {
                bail!("corpus too small to hold out a test split; pass --test");
            }
            corpus.split_off(corpus.len() - held)
        }
    };
    let variants = a.variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?;
    let table = run_ablation(&corpus, &test, &model_config, &train_config, &variants, &a.seeds)?;
    print!("{}", table.to_table());
    if let Some(out) = &a.out {
        write(out, &table.to_json())?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        dialogues: a.dialogues,
        utterances: a.utterances,
        speakers: a.speakers,
        vocab_size: a.vocab_size,
        coref_fraction: a.coref_fraction,
        discourse_fraction: a.discourse_fraction,
        questions_per_dialogue: a.questions_per_dialogue,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&spec)?;
    let [coref, discourse, control] = audit_synthetic(&corpus)?;
    save_corpus(&a.out, &corpus)?;
    println!(
        "{} dialogues written to {} ({coref} coreference, {discourse} discourse, {control} control questions)",
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let dialogue = match &a.dialogue {
        Some(id) => corpus.iter().find(|d| &d.id == id).with_context(|| format!("no dialogue '{id}'"))?,
        None => corpus.first().context("empty corpus")?,
    };
    let qa = dialogue
        .qas
        .get(a.question)
        .with_context(|| format!("dialogue '{}' has {} question(s)", dialogue.id, dialogue.qas.len()))?;
    let mut config = ModelConfig::default();
    config.set("gamma_paper", &a.gamma_paper)?;
    let vocab = Vocabulary::build(std::slice::from_ref(dialogue), 1);
    let opts = EncodeOptions {
        max_len: a.max_len,
        speaker_prefix: true,
    };
    let seq = encode_input(dialogue, qa, &vocab, &opts)?;
    let s = StructureMatrices::build(dialogue, &seq, config.gamma(), !a.no_question_routing);
    let mut text = format!("tokens: {}\n", seq.tokens.join(" "));
    for (name, m) in [("M1", &s.m1), ("M2", &s.m2), ("G", &s.g)] {
        text.push_str(&format!("\n{name}\n{}", m.to_grid()));
    }
    match &a.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
