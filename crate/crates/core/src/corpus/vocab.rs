use std::collections::HashMap;

use super::{tokenize, Dialogue};
use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

const RESERVED: [&str; 4] = [CLS, SEP, PAD, UNK];

/// Token ↔ id map. Ids 0–3 are `[CLS]`, `[SEP]`, `[PAD]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const CLS_ID: u32 = 0;
    pub const SEP_ID: u32 = 1;
    pub const PAD_ID: u32 = 2;
    pub const UNK_ID: u32 = 3;

    /// Every utterance, speaker-name and question token seen at least
    /// `min_freq` times, ordered by descending frequency then lexicographically.
    /// The `:` separating a speaker prefix from its utterance is always kept.
    pub fn build(dialogues: &[Dialogue], min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut add = |text: &str| {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        };
        for d in dialogues {
            for u in &d.utterances {
                add(&u.speaker);
                add(&u.text);
            }
            for qa in &d.qas {
                add(&qa.question);
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        if !tokens.iter().any(|t| t == ":") {
            tokens.push(":".into());
        }
        Self::from_ordered(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Config(
                "vocabulary must start with [CLS] [SEP] [PAD] [UNK]".into(),
            ));
        }
        let vocab = Self::from_ordered(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
