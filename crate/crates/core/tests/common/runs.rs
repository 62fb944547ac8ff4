use std::time::{Duration, Instant};

use cada::corpus::Dialogue;
use cada::eval::{generate_synthetic, predict_corpus, score, SyntheticSpec};
use cada::model::ModelConfig;
use cada::training::{train, TrainConfig, TrainOutcome};

pub const OVERFIT_STEPS: usize = 300;

/// Sixteen dialogues with two questions each, half of them needing a
/// coreference or discourse hop.
pub fn overfit_corpus() -> Vec<Dialogue> {
    generate_synthetic(&SyntheticSpec {
        dialogues: 16,
        utterances: 4,
        coref_fraction: 0.25,
        discourse_fraction: 0.25,
        questions_per_dialogue: 2,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn micro_configs(seed: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        hidden: 16,
        heads: 2,
        base_layers: 1,
        interlocutor_layers: 1,
        discourse_layers: 1,
        max_len: 48,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        learning_rate: 3e-3,
        epochs: OVERFIT_STEPS,
        max_steps: Some(OVERFIT_STEPS),
        weight_decay: 0.0,
        seed,
        ..TrainConfig::default()
    };
    (model, train)
}

pub struct OverfitRun {
    pub outcome: TrainOutcome,
    pub train_em: f64,
    pub elapsed: Duration,
}

pub fn overfit(seed: u64) -> OverfitRun {
    let corpus = overfit_corpus();
    let (model_config, train_config) = micro_configs(seed);
    let start = Instant::now();
    let outcome = train(&corpus, None, &model_config, &train_config, None).unwrap();
    let elapsed = start.elapsed();
    let preds = predict_corpus(&outcome.model, &outcome.vocab, &corpus).unwrap();
    let train_em = score(&preds, &corpus).unwrap().em;
    OverfitRun {
        outcome,
        train_em,
        elapsed,
    }
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks(width)
        .filter(|c| c.len() == width)
        .map(|c| c.iter().sum::<f64>() / width as f64)
        .collect()
}
