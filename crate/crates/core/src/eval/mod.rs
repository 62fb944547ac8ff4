//! Scoring, the synthetic probing corpus and channel ablations.

mod ablation;
mod score;
mod synthetic;

pub use ablation::{run_ablation, AblationRow, AblationTable, Variant};
pub use score::{
    exact_match, f1_score, normalize_answer, question_type, score, EvalReport, TypeScore,
    QUESTION_TYPES, UNANSWERABLE,
};

pub use synthetic::{audit_synthetic, generate_synthetic, QuestionKind, SyntheticSpec};

use std::collections::BTreeMap;

use crate::corpus::{Dialogue, Vocabulary};
use crate::error::Result;
use crate::model::{prepare_examples, Example, Model};

/// Answer text per question id.
pub fn predict_examples(model: &Model, examples: &[Example]) -> Result<BTreeMap<String, String>> {
    examples
        .iter()
        .map(|ex| Ok((ex.qa_id.clone(), model.predict(ex)?.text)))
        .collect()
}

/// Encodes `dialogues` with `vocab` and predicts every question.
pub fn predict_corpus(
    model: &Model,
    vocab: &Vocabulary,
    dialogues: &[Dialogue],
) -> Result<BTreeMap<String, String>> {
    predict_examples(model, &prepare_examples(dialogues, vocab, model.config())?)
}
