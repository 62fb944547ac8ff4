use cada::corpus::{
    detokenize, parse_corpus, AnswerSpan, CoreferenceCluster, Dialogue, DiscourseEdge, Mention, QaPair, Utterance,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the", "server", "crashed", "again", "try", "reboot", "it", "works", "now", "thanks", "which", "kernel", "ubuntu",
    "driver", "is", "broken", ",", "?", "!",
];
const NAMES: &[&str] = &["ann", "bob", "cleo", "dev", "eve"];

/// A valid random dialogue with `n` utterances, random undirected-distinct
/// arcs, clusters and one answerable plus one unanswerable question.
pub fn random_dialogue(seed: u64, n: usize) -> Dialogue {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = rng.gen_range(1..=NAMES.len().min(n));
    let utterances: Vec<Utterance> = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=6);
            let text: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
            Utterance {
                index: i,
                speaker: NAMES[rng.gen_range(0..speakers)].to_string(),
                text: text.join(" "),
            }
        })
        .collect();
    let lens: Vec<usize> = utterances.iter().map(|u| u.tokens().len()).collect();
    let edges = random_edges(&mut rng, n, 0.3)
        .into_iter()
        .map(|(from_utt, to_utt)| DiscourseEdge {
            from_utt,
            to_utt,
            relation: "QAP".into(),
        })
        .collect();
    let mut clusters = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let mut mentions: Vec<Mention> = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            let utt = rng.gen_range(0..n);
            let start = rng.gen_range(0..lens[utt]);
            let end = rng.gen_range(start + 1..=lens[utt]);
            let m = Mention { utt, start, end };
            if !mentions.contains(&m) {
                mentions.push(m);
            }
        }
        if mentions.len() >= 2 {
            clusters.push(CoreferenceCluster { mentions });
        }
    }
    let utt = rng.gen_range(0..n);
    let start = rng.gen_range(0..lens[utt]);
    let end = rng.gen_range(start + 1..=lens[utt]);
    let text = detokenize(&utterances[utt].tokens()[start..end]);
    let qas = vec![
        QaPair {
            id: format!("r{seed}_0"),
            question: "what is broken ?".into(),
            answer: Some(AnswerSpan { utt, start, end, text }),
        },
        QaPair {
            id: format!("r{seed}_1"),
            question: "why ?".into(),
            answer: None,
        },
    ];
    let d = Dialogue {
        id: format!("r{seed}"),
        utterances,
        edges,
        clusters,
        qas,
    };
    d.validate().expect("generator emits valid dialogues");
    d
}

/// Directed arcs without self loops, each ordered pair present with
/// probability `p`.
pub fn random_edges(rng: &mut impl Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// A dialogue with `n` one-word utterances and the given arcs.
pub fn graph_dialogue(n: usize, edges: &[(usize, usize)]) -> Dialogue {
    Dialogue {
        id: "g".into(),
        utterances: (0..n)
            .map(|i| Utterance {
                index: i,
                speaker: format!("s{}", i % 3),
                text: format!("w{i}"),
            })
            .collect(),
        edges: edges
            .iter()
            .map(|&(from_utt, to_utt)| DiscourseEdge {
                from_utt,
                to_utt,
                relation: String::new(),
            })
            .collect(),
        clusters: Vec::new(),
        qas: vec![QaPair {
            id: "g_0".into(),
            question: "where ?".into(),
            answer: None,
        }],
    }
}

/// Seven utterances by five interlocutors; U1 and U4 are by neighborlee,
/// U2 by libben, with arcs U7→U5 and U5→U3 (1-based names).
pub fn interlocutor_dialogue() -> Dialogue {
    parse_corpus(
        r#"[{"id": "fig1b", "utterances": [
            {"speaker": "neighborlee", "text": "my wifi keeps dropping"},
            {"speaker": "libben", "text": "which card"},
            {"speaker": "sebastien", "text": "peter knows this"},
            {"speaker": "neighborlee", "text": "intel one"},
            {"speaker": "peter", "text": "did you try the driver"},
            {"speaker": "mike", "text": "hello all"},
            {"speaker": "sebastien", "text": "yes it failed"}],
          "edges": [{"from": 6, "to": 4, "rel": "QAP"}, {"from": 4, "to": 2, "rel": "Clari_q"}],
          "qas": [{"question": "who has the wifi problem ?", "answerable": true,
                   "answer": {"utt": 0, "start": 1, "end": 2, "text": "wifi"}}]}]"#,
    )
    .unwrap()
    .remove(0)
}
