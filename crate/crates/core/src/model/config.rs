use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graphs::{gamma_from_arc_count, GAMMA_UNBOUNDED};

/// Architecture and decoding settings. Serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden size `F`.
    pub hidden: usize,
    pub heads: usize,
    /// Base encoder depth `L0`.
    pub base_layers: usize,
    /// Interlocutor channel depth `L1`.
    pub interlocutor_layers: usize,
    /// Discourse channel depth `L2`.
    pub discourse_layers: usize,
    /// How many of the base layers use coreference attention, counted from
    /// the bottom. `None` means all of them.
    pub coref_layers: Option<usize>,
    /// Maximum number of discourse arcs between attending utterances.
    /// `u32::MAX` is unbounded.
    pub gamma_paper: u32,
    pub max_len: usize,
    pub vocab_size: usize,
    pub max_answer_len: usize,
    pub dropout: f64,
    /// Answerability threshold `τ`.
    pub threshold: f64,
    pub speaker_prefix: bool,
    /// Link question and special tokens to every utterance in the discourse mask.
    pub question_routing: bool,
    /// Channel switches. A disabled channel keeps its parameters but sees an
    /// all-zero structure matrix (for the discourse channel: a mask that
    /// admits everything).
    pub use_coref: bool,
    pub use_role: bool,
    pub use_discourse: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            base_layers: 2,
            interlocutor_layers: 2,
            discourse_layers: 2,
            coref_layers: None,
            gamma_paper: 2,
            max_len: 128,
            vocab_size: 0,
            max_answer_len: 30,
            dropout: 0.0,
            threshold: 0.5,
            speaker_prefix: true,
            question_routing: true,
            use_coref: true,
            use_role: true,
            use_discourse: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Threshold on stored distances (`1 + hops`).
    pub fn gamma(&self) -> u32 {
        if self.gamma_paper == GAMMA_UNBOUNDED {
            GAMMA_UNBOUNDED
        } else {
            gamma_from_arc_count(self.gamma_paper)
        }
    }

    pub fn uses_coref_at(&self, layer: usize) -> bool {
        self.use_coref && self.coref_layers.is_none_or(|k| layer < k)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail("hidden must be a positive multiple of heads");
        }
        if self.base_layers == 0 || self.interlocutor_layers == 0 || self.discourse_layers == 0 {
            return fail("every channel needs at least one layer");
        }
        if self.gamma_paper == 0 {
            return fail("gamma must be at least 1");
        }
        if self.max_len < 4 {
            return fail("max_len must be at least 4");
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover the reserved tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("hidden", self.hidden.to_string());
        kv("heads", self.heads.to_string());
        kv("base_layers", self.base_layers.to_string());
        kv("interlocutor_layers", self.interlocutor_layers.to_string());
        kv("discourse_layers", self.discourse_layers.to_string());
        kv(
            "coref_layers",
            self.coref_layers.map_or("all".into(), |k| k.to_string()),
        );
        kv(
            "gamma_paper",
            if self.gamma_paper == GAMMA_UNBOUNDED {
                "inf".into()
            } else {
                self.gamma_paper.to_string()
            },
        );
        kv("max_len", self.max_len.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("max_answer_len", self.max_answer_len.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("threshold", format!("{:?}", self.threshold));
        kv("speaker_prefix", self.speaker_prefix.to_string());
        kv("question_routing", self.question_routing.to_string());
        kv("use_coref", self.use_coref.to_string());
        kv("use_role", self.use_role.to_string());
        kv("use_discourse", self.use_discourse.to_string());
        s
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Overrides fields from `key = value` lines, rejecting unknown keys.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "base_layers" => self.base_layers = parse(key, value)?,
            "interlocutor_layers" => self.interlocutor_layers = parse(key, value)?,
            "discourse_layers" => self.discourse_layers = parse(key, value)?,
            "coref_layers" => {
                self.coref_layers = match value {
                    "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "gamma_paper" => {
                self.gamma_paper = match value {
                    "inf" => GAMMA_UNBOUNDED,
                    v => parse(key, v)?,
                }
            }
            "max_len" => self.max_len = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_answer_len" => self.max_answer_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "speaker_prefix" => self.speaker_prefix = parse(key, value)?,
            "question_routing" => self.question_routing = parse(key, value)?,
            "use_coref" => self.use_coref = parse(key, value)?,
            "use_role" => self.use_role = parse(key, value)?,
            "use_discourse" => self.use_discourse = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model setting '{key}'"))),
        }
        Ok(())
    }
}

pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("expected 'key = value', got '{l}'")))
        })
        .collect()
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = ModelConfig {
            vocab_size: 77,
            coref_layers: Some(1),
            gamma_paper: GAMMA_UNBOUNDED,
            dropout: 0.1,
            use_role: false,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ModelConfig::from_text("colour = blue").is_err());
        assert!(ModelConfig::from_text("hidden = many").is_err());
        assert!(ModelConfig::from_text("hidden 4").is_err());
    }

    #[test]
    fn gamma_shift() {
        let c = ModelConfig::default();
        assert_eq!((c.gamma_paper, c.gamma()), (2, 3));
    }

    #[test]
    fn validation() {
        let ok = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { heads: 3, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { discourse_layers: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { threshold: 1.0, ..ok }.validate().is_err());
    }
}
