use cada::corpus::{parse_corpus, Dialogue, Vocabulary};
use cada::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model_for(d: &Dialogue, config: ModelConfig, seed: u64) -> (Model, Vocabulary) {
    let vocab = Vocabulary::build(std::slice::from_ref(d), 1);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config
    };
    (Model::new(config, seed).unwrap(), vocab)
}

/// Replaces every weight, including biases and norm gains, with noise.
pub fn scramble(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
}

pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    ModelConfig {
        hidden: heads * rng.gen_range(2..=4),
        heads,
        base_layers: rng.gen_range(1..=2),
        interlocutor_layers: rng.gen_range(1..=2),
        discourse_layers: rng.gen_range(1..=3),
        gamma_paper: rng.gen_range(1..=3),
        question_routing: rng.gen_bool(0.5),
        max_len: 256,
        ..ModelConfig::default()
    }
}

/// One utterance of 93 words behind a two-token question: exactly 100
/// tokens once `[CLS]`, separators and the speaker prefix are added.
pub fn hundred_token_corpus(questions: usize) -> Vec<Dialogue> {
    let words: Vec<String> = (0..93).map(|i| format!("w{i}")).collect();
    let qas: Vec<String> = (0..questions)
        .map(|q| {
            format!(
                r#"{{"question": "what ?", "answerable": true, "answer": {{"utt": 0, "start": {q}, "end": {}, "text": "w{q}"}}}}"#,
                q + 1
            )
        })
        .collect();
    parse_corpus(&format!(
        r#"[{{"id": "long", "utterances": [{{"speaker": "ann", "text": "{}"}}], "qas": [{}]}}]"#,
        words.join(" "),
        qas.join(",")
    ))
    .unwrap()
}

