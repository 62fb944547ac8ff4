//! Dialogue corpora: the data model, the JSON file format, tokenization,
//! vocabulary construction and assembly of the model input sequence.
//!
//! A corpus file is one JSON list of dialogues:
//!
//! ```json
//! [{"id": "d1",
//!   "utterances": [{"speaker": "alice", "text": "Is the printer on?"}],
//!   "edges": [{"from": 1, "to": 0, "rel": "QAP"}],
//!   "clusters": [[[0, 2, 3], [1, 0, 1]]],
//!   "qas": [{"question": "What is on?", "answerable": true,
//!            "answer": {"utt": 0, "start": 2, "end": 3, "text": "printer"}}]}]
//! ```
//!
//! Cluster mentions and answer spans are `[start, end)` token offsets within
//! one utterance, counted with [`tokenize`]. Coreference clusters and discourse
//! edges are annotations supplied with the corpus; nothing here computes them.

mod encode;
mod tokenize;
mod vocab;

pub use encode::{encode_input, AnswerTarget, EncodeOptions, EncodedSequence};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, CLS, PAD, SEP, UNK};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// Discourse arc between two utterances. The relation label is kept for
/// provenance only; the model ignores it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscourseEdge {
    pub from_utt: usize,
    pub to_utt: usize,
    pub relation: String,
}

/// A mention span `[start, end)` in utterance-local token coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mention {
    pub utt: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoreferenceCluster {
    pub mentions: Vec<Mention>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSpan {
    pub utt: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    /// Corpus-unique question id; defaults to `<dialogue id>_<position>`.
    pub id: String,
    pub question: String,
    /// Present exactly when the question is answerable.
    pub answer: Option<AnswerSpan>,
}

impl QaPair {
    pub fn answerable(&self) -> bool {
        self.answer.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub edges: Vec<DiscourseEdge>,
    pub clusters: Vec<CoreferenceCluster>,
    pub qas: Vec<QaPair>,
}

impl Dialogue {
    /// Dense speaker id per utterance, numbered by first appearance.
    pub fn speaker_ids(&self) -> Vec<usize> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        self.utterances
            .iter()
            .map(|u| {
                let next = seen.len();
                *seen.entry(u.speaker.as_str()).or_insert(next)
            })
            .collect()
    }

    pub fn speaker_count(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.speaker.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Checks every corpus invariant, naming the offending element on failure.
    pub fn validate(&self) -> Result<()> {
        let fail = |what: String, message: String| {
            Err(Error::Validation {
                location: format!("dialogue '{}', {what}", self.id),
                message,
            })
        };
        let n = self.utterances.len();
        if n == 0 {
            return fail("utterances".into(), "dialogue has no utterances".into());
        }
        let lens: Vec<usize> = self.utterances.iter().map(|u| u.tokens().len()).collect();
        for (i, u) in self.utterances.iter().enumerate() {
            if u.index != i {
                return fail(format!("utterance {i}"), format!("index {} out of order", u.index));
            }
            if u.speaker.trim().is_empty() {
                return fail(format!("utterance {i}"), "empty speaker".into());
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.from_utt >= n || e.to_utt >= n {
                return fail(
                    format!("edge {k}"),
                    format!("{} -> {} out of range for {n} utterances", e.from_utt, e.to_utt),
                );
            }
            if e.from_utt == e.to_utt {
                return fail(format!("edge {k}"), format!("self loop on {}", e.from_utt));
            }
        }
        for (c, cluster) in self.clusters.iter().enumerate() {
            if cluster.mentions.len() < 2 {
                return fail(format!("cluster {c}"), "fewer than 2 mentions".into());
            }
            let mut seen = HashSet::new();
            for (m, mention) in cluster.mentions.iter().enumerate() {
                if mention.utt >= n
                    || mention.start >= mention.end
                    || mention.end > lens[mention.utt]
                {
                    return fail(
                        format!("cluster {c} mention {m}"),
                        format!("span {mention:?} outside its utterance"),
                    );
                }
                if !seen.insert(*mention) {
                    return fail(
                        format!("cluster {c} mention {m}"),
                        format!("duplicate mention {mention:?}"),
                    );
                }
            }
        }
        for (q, qa) in self.qas.iter().enumerate() {
            if let Some(a) = &qa.answer {
                if a.utt >= n || a.start >= a.end || a.end > lens[a.utt] {
                    return fail(format!("qa {q}"), format!("answer span out of range: {a:?}"));
                }
                let covered = &self.utterances[a.utt].tokens()[a.start..a.end];
                if tokenize(&a.text) != covered {
                    return fail(
                        format!("qa {q}"),
                        format!(
                            "answer text '{}' does not match span tokens '{}'",
                            a.text,
                            detokenize(covered)
                        ),
                    );
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ file IO

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    id: String,
    utterances: Vec<RawUtterance>,
    #[serde(default)]
    edges: Vec<RawEdge>,
    #[serde(default)]
    clusters: Vec<Vec<[usize; 3]>>,
    #[serde(default)]
    qas: Vec<RawQa>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    speaker: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: usize,
    to: usize,
    #[serde(default)]
    rel: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQa {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    question: String,
    answerable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<RawAnswer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnswer {
    utt: usize,
    start: usize,
    end: usize,
    text: String,
}

fn default_qa_id(dialogue: &str, position: usize) -> String {
    format!("{dialogue}_{position}")
}

fn from_raw(raw: RawDialogue) -> Result<Dialogue> {
    let id = raw.id;
    let mut qas = Vec::with_capacity(raw.qas.len());
    for (q, rq) in raw.qas.into_iter().enumerate() {
        if rq.answerable != rq.answer.is_some() {
            return Err(Error::Validation {
                location: format!("dialogue '{id}', qa {q}"),
                message: format!(
                    "answerable = {} but answer is {}",
                    rq.answerable,
                    if rq.answer.is_some() { "present" } else { "absent" }
                ),
            });
        }
        qas.push(QaPair {
            id: rq.id.unwrap_or_else(|| default_qa_id(&id, q)),
            question: rq.question,
            answer: rq.answer.map(|a| AnswerSpan {
                utt: a.utt,
                start: a.start,
                end: a.end,
                text: a.text,
            }),
        });
    }
    Ok(Dialogue {
        utterances: raw
            .utterances
            .into_iter()
            .enumerate()
            .map(|(index, u)| Utterance {
                index,
                speaker: u.speaker,
                text: u.text,
            })
            .collect(),
        edges: raw
            .edges
            .into_iter()
            .map(|e| DiscourseEdge {
                from_utt: e.from,
                to_utt: e.to,
                relation: e.rel,
            })
            .collect(),
        clusters: raw
            .clusters
            .into_iter()
            .map(|c| CoreferenceCluster {
                mentions: c
                    .into_iter()
                    .map(|[utt, start, end]| Mention { utt, start, end })
                    .collect(),
            })
            .collect(),
        qas,
        id,
    })
}

fn to_raw(d: &Dialogue) -> RawDialogue {
    RawDialogue {
        id: d.id.clone(),
        utterances: d
            .utterances
            .iter()
            .map(|u| RawUtterance {
                speaker: u.speaker.clone(),
                text: u.text.clone(),
            })
            .collect(),
        edges: d
            .edges
            .iter()
            .map(|e| RawEdge {
                from: e.from_utt,
                to: e.to_utt,
                rel: e.relation.clone(),
            })
            .collect(),
        clusters: d
            .clusters
            .iter()
            .map(|c| c.mentions.iter().map(|m| [m.utt, m.start, m.end]).collect())
            .collect(),
        qas: d
            .qas
            .iter()
            .enumerate()
            .map(|(q, qa)| RawQa {
                id: (qa.id != default_qa_id(&d.id, q)).then(|| qa.id.clone()),
                question: qa.question.clone(),
                answerable: qa.answerable(),
                answer: qa.answer.as_ref().map(|a| RawAnswer {
                    utt: a.utt,
                    start: a.start,
                    end: a.end,
                    text: a.text.clone(),
                }),
            })
            .collect(),
    }
}

/// Parses and validates a corpus held in memory.
pub fn parse_corpus(json: &str) -> Result<Vec<Dialogue>> {
    let raw: Vec<RawDialogue> = serde_json::from_str(json)?;
    let dialogues = raw.into_iter().map(from_raw).collect::<Result<Vec<_>>>()?;
    let mut dialogue_ids = HashSet::new();
    let mut qa_ids = HashSet::new();
    for d in &dialogues {
        d.validate()?;
        if !dialogue_ids.insert(d.id.as_str()) {
            return Err(Error::Validation {
                location: format!("dialogue '{}'", d.id),
                message: "duplicate dialogue id".into(),
            });
        }
        for qa in &d.qas {
            if !qa_ids.insert(qa.id.as_str()) {
                return Err(Error::Validation {
                    location: format!("dialogue '{}', qa '{}'", d.id, qa.id),
                    message: "duplicate question id".into(),
                });
            }
        }
    }
    Ok(dialogues)
}

/// Reads, parses and validates a corpus file.
pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn corpus_to_json(dialogues: &[Dialogue]) -> String {
    let raw: Vec<RawDialogue> = dialogues.iter().map(to_raw).collect();
    serde_json::to_string(&raw).expect("corpus serialization cannot fail")
}

pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    fs::write(path, corpus_to_json(dialogues)).map_err(|e| Error::io(path, e))
}
