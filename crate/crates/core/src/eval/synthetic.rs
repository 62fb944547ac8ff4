//! Template dialogues whose questions need one specific kind of structure.
//!
//! Every question names an entity, and the answer is a single answer word.
//!
//! * Coreference-hop dialogues hold two anchor utterances, each mentioning a
//!   different entity, and two answer utterances of the form "it is X". One
//!   cluster links each anchor mention to "it" and to X. The two answer
//!   utterances look alike, so only the clusters tell which answer goes with
//!   the entity in the question.
//! * Discourse-hop dialogues split into two disconnected discourse
//!   components. Each has an anchor utterance asking about an entity and an
//!   answer utterance replying to it. There are no clusters, so only the arcs
//!   pair an answer with its anchor.
//! * Control dialogues state the single fact "the E is X" in one utterance.
//!
//! Utterance order, speakers and the shape of the discourse trees are drawn
//! at random, independently of which answer goes with which anchor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    tokenize, AnswerSpan, CoreferenceCluster, Dialogue, DiscourseEdge, Mention, QaPair, Utterance,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dialogues: usize,
    pub utterances: usize,
    pub speakers: usize,
    /// Distinct content words, split evenly between entities and answers.
    pub vocab_size: usize,
    pub coref_fraction: f64,
    pub discourse_fraction: f64,
    /// 1 or 2. Probing dialogues ask about each anchor in turn.
    pub questions_per_dialogue: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dialogues: 500,
            utterances: 6,
            speakers: 3,
            vocab_size: 40,
            coref_fraction: 0.0,
            discourse_fraction: 0.0,
            questions_per_dialogue: 2,
            seed: 0,
        }
    }
}

/// Which structure a synthetic question depends on. Encoded in the question
/// id as `<dialogue>_<kind>_<k>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    Coreference,
    Discourse,
    Control,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Coreference => "coref",
            QuestionKind::Discourse => "discourse",
            QuestionKind::Control => "control",
        }
    }

    /// Kind of a generated question, read back from its id.
    pub fn of_id(id: &str) -> Option<Self> {
        let mut parts = id.rsplit('_');
        parts.next()?;
        match parts.next()? {
            "coref" => Some(QuestionKind::Coreference),
            "discourse" => Some(QuestionKind::Discourse),
            "control" => Some(QuestionKind::Control),
            _ => None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InfeasibleSpec(m));
        let fr = [self.coref_fraction, self.discourse_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr[0] + fr[1] > 1.0 + 1e-12 {
            return fail("fractions must lie in [0, 1] and sum to at most 1".into());
        }
        if self.speakers == 0 || self.speakers > self.utterances {
            return fail(format!(
                "{} speakers cannot share {} utterances",
                self.speakers, self.utterances
            ));
        }
        if self.speakers > SPEAKERS.len() {
            return fail(format!("at most {} speakers", SPEAKERS.len()));
        }
        let needed = if fr[0] + fr[1] > 0.0 { 4 } else { 1 };
        if self.utterances < needed {
            return fail(format!("probing dialogues need at least {needed} utterances"));
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must be at least 4".into());
        }
        if !(1..=2).contains(&self.questions_per_dialogue) {
            return fail("questions_per_dialogue must be 1 or 2".into());
        }
        Ok(())
    }
}

const SPEAKERS: [&str; 12] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "oscar",
];
const ENTITY_STEMS: [&str; 20] = [
    "laptop", "printer", "router", "monitor", "keyboard", "kernel", "driver", "server", "modem",
    "speaker", "camera", "tablet", "charger", "cable", "mouse", "disk", "screen", "phone", "switch",
    "adapter",
];
const ANSWER_STEMS: [&str; 20] = [
    "red", "blue", "green", "broken", "fixed", "slow", "fast", "loud", "quiet", "cheap", "new",
    "old", "black", "white", "silver", "tiny", "huge", "busy", "idle", "fine",
];
const FILLERS: [&str; 8] = [
    "ok thanks",
    "sure thing",
    "good to know",
    "let me check",
    "no idea sorry",
    "hold on",
    "makes sense",
    "anyone else here ?",
];
const COREF_ANCHORS: [&str; 3] = [
    "my {e} arrived today",
    "i just got the {e}",
    "has anyone tried the {e} ?",
];
const COREF_ANSWERS: [&str; 3] = ["i think it is {a}", "it looks {a} to me", "well it is {a} now"];
const DISCOURSE_ANCHORS: [&str; 3] = [
    "which {e} should i pick ?",
    "any advice on the {e} ?",
    "what do you think of the {e} ?",
];
const DISCOURSE_ANSWERS: [&str; 3] = ["get the {a} one", "go with {a}", "{a} for sure"];
const CONTROL_FACTS: [&str; 3] = ["the {e} is {a}", "my {e} turned {a}", "our {e} seems {a}"];
const QUESTIONS: [&str; 4] = [
    "what about the {e} ?",
    "how is the {e} ?",
    "which {e} was meant ?",
    "what is said on the {e} ?",
];

fn word(stems: &[&str], k: usize) -> String {
    let (stem, round) = (stems[k % stems.len()], k / stems.len());
    if round == 0 {
        stem.to_string()
    } else {
        format!("{stem}{round}")
    }
}

/// Fills a template, returning the text and the token offsets of `{e}`,
/// `{a}` and `it`.
struct Filled {
    text: String,
    entity: Option<usize>,
    answer: Option<usize>,
    pronoun: Option<usize>,
}

fn fill(template: &str, e: &str, a: &str) -> Filled {
    let mut out = Filled {
        text: String::new(),
        entity: None,
        answer: None,
        pronoun: None,
    };
    let mut words = Vec::new();
    for (i, w) in template.split(' ').enumerate() {
        match w {
            "{e}" => {
                out.entity = Some(i);
                words.push(e);
            }
            "{a}" => {
                out.answer = Some(i);
                words.push(a);
            }
            "it" => {
                out.pronoun = Some(i);
                words.push(w);
            }
            _ => words.push(w),
        }
    }
    out.text = words.join(" ");
    debug_assert_eq!(tokenize(&out.text).len(), words.len());
    out
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    id: String,
    texts: Vec<String>,
    edges: Vec<DiscourseEdge>,
    clusters: Vec<CoreferenceCluster>,
    qas: Vec<QaPair>,
}

impl Builder<'_> {
    fn question(&mut self, kind: QuestionKind, entity: &str, utt: usize, off: usize, answer: &str) {
        let frame = QUESTIONS.choose(self.rng).unwrap();
        let k = self.qas.len();
        self.qas.push(QaPair {
            id: format!("{}_{}_{k}", self.id, kind.as_str()),
            question: frame.replace("{e}", entity),
            answer: Some(AnswerSpan {
                utt,
                start: off,
                end: off + 1,
                text: answer.to_string(),
            }),
        });
    }

    fn edge(&mut self, from: usize, to: usize) {
        let relation = ["QAP", "Comment", "Clarification_question", "Continuation"]
            .choose(self.rng)
            .unwrap()
            .to_string();
        self.edges.push(DiscourseEdge {
            from_utt: from,
            to_utt: to,
            relation,
        });
    }

    /// Random tree over `nodes` that must contain the arc `fixed`, if any.
    fn tree(&mut self, nodes: &[usize], fixed: Option<(usize, usize)>) {
        let mut order: Vec<usize> = nodes.to_vec();
        order.shuffle(self.rng);
        let mut placed = Vec::new();
        if let Some((a, b)) = fixed {
            self.edge(a, b);
            placed.extend([a, b]);
            order.retain(|x| *x != a && *x != b);
        } else if let Some(first) = order.pop() {
            placed.push(first);
        }
        for u in order {
            let v = *placed.choose(self.rng).unwrap();
            if self.rng.gen_bool(0.5) {
                self.edge(u, v);
            } else {
                self.edge(v, u);
            }
            placed.push(u);
        }
    }
}

fn pick_two(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Generates the corpus described by `spec`. The same spec always yields
/// the same corpus.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_coref = (spec.coref_fraction * spec.dialogues as f64).round() as usize;
    let n_disc = ((spec.discourse_fraction * spec.dialogues as f64).round() as usize)
        .min(spec.dialogues - n_coref);
    let mut kinds = vec![QuestionKind::Coreference; n_coref];
    kinds.extend(vec![QuestionKind::Discourse; n_disc]);
    kinds.resize(spec.dialogues, QuestionKind::Control);
    kinds.shuffle(&mut rng);

    let n_entities = spec.vocab_size / 2;
    let n_answers = spec.vocab_size - n_entities;
    let mut out = Vec::with_capacity(spec.dialogues);
    for (di, &kind) in kinds.iter().enumerate() {
        let n = spec.utterances;
        let (ei, ej) = pick_two(&mut rng, n_entities);
        let (ai, aj) = pick_two(&mut rng, n_answers);
        let ents = [word(&ENTITY_STEMS, ei), word(&ENTITY_STEMS, ej)];
        let ans = [word(&ANSWER_STEMS, ai), word(&ANSWER_STEMS, aj)];
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(&mut rng);

        let mut b = Builder {
            rng: &mut rng,
            id: format!("syn{di}"),
            texts: vec![String::new(); n],
            edges: Vec::new(),
            clusters: Vec::new(),
            qas: Vec::new(),
        };
        let mut used = Vec::new();
        match kind {
            QuestionKind::Coreference | QuestionKind::Discourse => {
                let (anchor_t, answer_t) = if kind == QuestionKind::Coreference {
                    (&COREF_ANCHORS, &COREF_ANSWERS)
                } else {
                    (&DISCOURSE_ANCHORS, &DISCOURSE_ANSWERS)
                };
                let mut facts = Vec::new();
                for p in 0..2 {
                    let (anchor, answer) = (positions[2 * p], positions[2 * p + 1]);
                    let fa = fill(anchor_t.choose(b.rng).unwrap(), &ents[p], &ans[p]);
                    let fb = fill(answer_t.choose(b.rng).unwrap(), &ents[p], &ans[p]);
                    let (e_off, a_off) = (fa.entity.unwrap(), fb.answer.unwrap());
                    if kind == QuestionKind::Coreference {
                        let it = fb.pronoun.unwrap();
                        b.clusters.push(CoreferenceCluster {
                            mentions: vec![
                                Mention { utt: anchor, start: e_off, end: e_off + 1 },
                                Mention { utt: answer, start: it, end: it + 1 },
                                Mention { utt: answer, start: a_off, end: a_off + 1 },
                            ],
                        });
                    }
                    b.texts[anchor] = fa.text;
                    b.texts[answer] = fb.text;
                    used.extend([anchor, answer]);
                    facts.push((answer, a_off));
                }
                let fillers: Vec<usize> = positions[4..].to_vec();
                if kind == QuestionKind::Coreference {
                    b.tree(&positions, None);
                } else {
                    let mut comps = [vec![positions[0], positions[1]], vec![positions[2], positions[3]]];
                    for &f in &fillers {
                        comps[b.rng.gen_range(0..2)].push(f);
                    }
                    for (c, comp) in comps.iter().enumerate() {
                        b.tree(comp, Some((positions[2 * c + 1], positions[2 * c])));
                    }
                }
                for p in 0..spec.questions_per_dialogue {
                    let (utt, off) = facts[p];
                    b.question(kind, &ents[p], utt, off, &ans[p]);
                }
            }
            QuestionKind::Control => {
                let fact = positions[0];
                let f = fill(CONTROL_FACTS.choose(b.rng).unwrap(), &ents[0], &ans[0]);
                b.texts[fact] = f.text;
                used.push(fact);
                b.tree(&positions, None);
                for _ in 0..spec.questions_per_dialogue {
                    b.question(kind, &ents[0], fact, f.answer.unwrap(), &ans[0]);
                }
            }
        }
        for u in 0..n {
            if !used.contains(&u) {
                b.texts[u] = FILLERS.choose(b.rng).unwrap().to_string();
            }
        }
        let speakers = assign_speakers(b.rng, n, spec.speakers);
        let utterances = b
            .texts
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance {
                index: i,
                speaker: speakers[i].to_string(),
                text: t.clone(),
            })
            .collect();
        let mut edges = std::mem::take(&mut b.edges);
        edges.sort_by_key(|e| (e.from_utt, e.to_utt));
        out.push(Dialogue {
            id: b.id,
            utterances,
            edges,
            clusters: b.clusters,
            qas: b.qas,
        });
    }
    for d in &out {
        d.validate()?;
    }
    Ok(out)
}

/// `k` distinct names drawn from the pool, each used at least once.
fn assign_speakers(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<&'static str> {
    let names: Vec<&str> = SPEAKERS.choose_multiple(rng, k).copied().collect();
    let mut who: Vec<&str> = names.clone();
    while who.len() < n {
        who.push(names.choose(rng).unwrap());
    }
    who.shuffle(rng);
    who
}

/// Checks that each probing question depends on the structure it claims to:
///
/// * coreference-hop: the answer lies in a cluster that also holds the
///   question's entity, mentioned in a different utterance;
/// * discourse-hop: the answer utterance does not contain the entity, no
///   cluster exists, and an arc joins it to an utterance that does;
/// * control: the answer utterance contains the entity.
///
/// Returns the number of questions audited per kind.
pub fn audit_synthetic(dialogues: &[Dialogue]) -> Result<[usize; 3]> {
    let mut counts = [0; 3];
    for d in dialogues {
        for qa in &d.qas {
            let fail = |m: &str| Err(Error::Validation {
                location: format!("dialogue '{}', question '{}'", d.id, qa.id),
                message: m.to_string(),
            });
            let kind = match QuestionKind::of_id(&qa.id) {
                Some(k) => k,
                None => return fail("question id carries no kind"),
            };
            let Some(ans) = &qa.answer else {
                return fail("synthetic questions are answerable");
            };
            let q_tokens = tokenize(&qa.question);
            let entity_utts: Vec<usize> = d
                .utterances
                .iter()
                .filter(|u| u.tokens().iter().any(|t| q_tokens.contains(t) && is_entity(t)))
                .map(|u| u.index)
                .collect();
            match kind {
                QuestionKind::Coreference => {
                    let linked = d.clusters.iter().any(|c| {
                        let has_answer = c
                            .mentions
                            .iter()
                            .any(|m| m.utt == ans.utt && m.start == ans.start && m.end == ans.end);
                        has_answer
                            && c.mentions
                                .iter()
                                .any(|m| m.utt != ans.utt && entity_utts.contains(&m.utt))
                    });
                    if !linked || entity_utts.contains(&ans.utt) {
                        return fail("answer not reachable by exactly one coreference hop");
                    }
                    counts[0] += 1;
                }
                QuestionKind::Discourse => {
                    let arc = d.edges.iter().any(|e| {
                        (e.from_utt == ans.utt && entity_utts.contains(&e.to_utt))
                            || (e.to_utt == ans.utt && entity_utts.contains(&e.from_utt))
                    });
                    if !arc || entity_utts.contains(&ans.utt) || !d.clusters.is_empty() {
                        return fail("answer not reachable by exactly one discourse hop");
                    }
                    counts[1] += 1;
                }
                QuestionKind::Control => {
                    if !entity_utts.contains(&ans.utt) {
                        return fail("control answer does not share an utterance with the entity");
                    }
                    counts[2] += 1;
                }
            }
        }
    }
    Ok(counts)
}

fn is_entity(token: &str) -> bool {
    let stem = token.trim_end_matches(|c: char| c.is_ascii_digit());
    ENTITY_STEMS.contains(&stem)
}
