//! Mini-batch training with AdamW, global-norm clipping, a JSON-lines metric
//! log, best-on-dev checkpointing and early stopping.

mod optim;

pub use optim::{adamw_step, clip_global_norm, global_norm, OptimState};

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Dialogue, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{predict_examples, score};
use crate::model::{batch_loss, prepare_examples, Example, Model, ModelConfig, ParamStore};
use crate::tensor::Tape;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Examples per optimizer step (`K`).
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluate on dev every this many steps; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Stop after this many evaluations without a dev-F1 improvement.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    /// Vocabulary frequency cutoff.
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 3e-4,
            epochs: 3,
            seed: 42,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            eval_every: 0,
            patience: None,
            max_steps: None,
            warmup_steps: 0,
            min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "learning_rate = {:?}", self.learning_rate).unwrap();
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "weight_decay = {:?}", self.weight_decay).unwrap();
        writeln!(s, "clip_norm = {}", opt(self.clip_norm.map(|c| format!("{c:?}")))).unwrap();
        writeln!(s, "eval_every = {}", self.eval_every).unwrap();
        writeln!(s, "patience = {}", opt(self.patience.map(|p| p.to_string()))).unwrap();
        writeln!(s, "max_steps = {}", opt(self.max_steps.map(|p| p.to_string()))).unwrap();
        writeln!(s, "warmup_steps = {}", self.warmup_steps).unwrap();
        writeln!(s, "min_freq = {}", self.min_freq).unwrap();
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::model::config_parse as parse;
        fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
            if v == "none" {
                Ok(None)
            } else {
                crate::model::config_parse(key, v).map(Some)
            }
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = opt(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = opt(key, value)?,
            "max_steps" => self.max_steps = opt(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training setting '{key}'"))),
        }
        Ok(())
    }
}

/// Splits a combined settings file into model and training settings.
/// Keys are looked up in the model settings first.
pub fn apply_settings(text: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (k, v) in crate::model::config_pairs(text)? {
        if model.set(k, v).is_err() {
            train.set(k, v).map_err(|_| Error::Config(format!("unknown or invalid setting '{k} = {v}'")))?;
        }
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-on-dev weights, or the final weights without a dev set.
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub best_dev_f1: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl TrainOutcome {
    /// The metric log as JSON lines.
    pub fn log_text(&self) -> String {
        log_lines(&self.log)
    }
}

fn log_lines(log: &[LogEntry]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
        .collect()
}

/// Sums each parameter's gradient from a differentiated tape.
pub fn collect_grads(tape: &Tape, params: &ParamStore) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
    for (id, g) in tape.param_grads() {
        for (a, b) in grads[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }
    grads
}

/// One optimizer step on `batch`. Returns the batch loss.
pub fn train_step(
    model: &mut Model,
    batch: &[&Example],
    state: &mut OptimState,
    clip_norm: Option<f64>,
    tape_seed: u64,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new(tape_seed);
    tape.set_training(true);
    let p = model.bind(&mut tape);
    let mut heads = Vec::with_capacity(batch.len());
    let mut golds = Vec::with_capacity(batch.len());
    for ex in batch {
        let gold = ex.gold.ok_or_else(|| {
            Error::Config(format!("example '{}' has no trainable target", ex.qa_id))
        })?;
        heads.push(model.forward(&mut tape, &p, ex, None)?);
        golds.push(gold);
    }
    let loss = batch_loss(&mut tape, &heads, &golds)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            examples: batch.iter().map(|e| e.qa_id.clone()).collect(),
        });
    }
    tape.backward(loss)?;
    let mut grads = collect_grads(&tape, model.params());
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adamw_step(model.params_mut(), &grads, state);
    Ok(value)
}

/// Trains a fresh model on `train`, evaluating on `dev` when given.
///
/// With `out_dir`, writes the metric log to [`METRICS_FILE`] and the best
/// checkpoint to [`CHECKPOINT_FILE`] inside it. Everything is a function of
/// the inputs and `train_config.seed`.
pub fn train(
    train: &[Dialogue],
    dev: Option<&[Dialogue]>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    let vocab = Vocabulary::build(train, train_config.min_freq);
    let mut config = model_config.clone();
    config.vocab_size = vocab.len();
    let seed = train_config.seed;
    let mut model = Model::new(config, seed)?;

    let examples: Vec<Example> = prepare_examples(train, &vocab, model.config())?
        .into_iter()
        .filter(|e| e.gold.is_some())
        .collect();
    if examples.is_empty() {
        return Err(Error::Config("no trainable examples".into()));
    }
    let dev_examples = match dev {
        Some(d) => Some(prepare_examples(d, &vocab, model.config())?),
        None => None,
    };
    log::info!(
        "training on {} examples, {} dev questions",
        examples.len(),
        dev_examples.as_ref().map_or(0, Vec::len)
    );

    let (ckpt_path, metrics_path) = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            (Some(dir.join(CHECKPOINT_FILE)), Some(dir.join(METRICS_FILE)))
        }
        None => (None, None),
    };
    let mut metrics_file = match &metrics_path {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let mut state = OptimState::new(model.params(), train_config.learning_rate, train_config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0usize;
    let max_steps = train_config.max_steps.unwrap_or(usize::MAX);

    'epochs: for _epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(train_config.batch_size).collect();
        let last_batch = batches.len() - 1;
        for (b, chunk) in batches.iter().enumerate() {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            if train_config.warmup_steps > 0 {
                let ramp = (step as f64 / train_config.warmup_steps as f64).min(1.0);
                state.learning_rate = train_config.learning_rate * ramp;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let tape_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
            let loss = train_step(&mut model, &batch, &mut state, train_config.clip_norm, tape_seed, step)?;

            let mut entry = LogEntry {
                step,
                loss,
                dev_em: None,
                dev_f1: None,
                seed,
            };
            let due = if train_config.eval_every == 0 {
                b == last_batch
            } else {
                step.is_multiple_of(train_config.eval_every)
            };
            let mut stop = false;
            if let (Some(dev), Some(dev_ex), true) = (dev, &dev_examples, due || step == max_steps) {
                let preds = predict_examples(&model, dev_ex)?;
                let report = score(&preds, dev)?;
                entry.dev_em = Some(report.em);
                entry.dev_f1 = Some(report.f1);
                log::info!("step {step}: loss {loss:.4}, dev EM {:.2} F1 {:.2}", report.em, report.f1);
                if best.as_ref().is_none_or(|(f, _)| report.f1 > *f) {
                    best = Some((report.f1, model.params().clone()));
                    stale = 0;
                    if let Some(p) = &ckpt_path {
                        model.to_checkpoint(&vocab, seed).save(p)?;
                    }
                } else {
                    stale += 1;
                    stop = train_config.patience.is_some_and(|p| stale >= p);
                }
            }
            if let Some(f) = metrics_file.as_mut() {
                let p = metrics_path.as_ref().unwrap();
                f.write_all(log_lines(std::slice::from_ref(&entry)).as_bytes())
                    .map_err(|e| Error::io(p, e))?;
            }
            log.push(entry);
            if stop {
                log::info!("early stop at step {step}");
                break 'epochs;
            }
        }
    }

    let best_dev_f1 = best.as_ref().map(|(f, _)| *f);
    match best {
        Some((_, params)) => *model.params_mut() = params,
        None => {
            if let Some(p) = &ckpt_path {
                model.to_checkpoint(&vocab, seed).save(p)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        vocab,
        log,
        steps: step,
        best_dev_f1,
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_text_round_trip() {
        let c = TrainConfig {
            clip_norm: None,
            patience: Some(3),
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in crate::model::config_pairs(&c.to_text()).unwrap() {
            back.set(k, v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn combined_settings_route_to_both_configs() {
        let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
        apply_settings("hidden = 16\nepochs = 9\n# comment\n", &mut m, &mut t).unwrap();
        assert_eq!((m.hidden, t.epochs), (16, 9));
        assert!(apply_settings("nonsense = 1", &mut m, &mut t).is_err());
    }
}
