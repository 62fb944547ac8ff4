use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Dialogue;
use crate::error::{Error, Result};

/// Prediction string standing for "no answer in the dialogue".
pub const UNANSWERABLE: &str = "unanswerable";

/// Question-type buckets, in report order.
pub const QUESTION_TYPES: [&str; 7] = ["who", "when", "what", "where", "why", "how", "other"];

/// Lowercase, drop ASCII punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unanswerable(s: &str) -> bool {
    s.trim() == UNANSWERABLE
}

/// 1.0 on exact normalized match, else 0.0.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    match (is_unanswerable(pred), is_unanswerable(gold)) {
        (true, true) => 1.0,
        (false, false) if normalize_answer(pred) == normalize_answer(gold) => 1.0,
        _ => 0.0,
    }
}

/// Bag-of-tokens F1 in `[0, 1]` over normalized strings. Two unanswerable
/// sides score 1, exactly one scores 0.
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    match (is_unanswerable(pred), is_unanswerable(gold)) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (p, g) = (normalize_answer(pred), normalize_answer(gold));
    let (p, g): (Vec<&str>, Vec<&str>) = (p.split(' ').collect(), g.split(' ').collect());
    if p == [""] || g == [""] {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// The first of who/when/what/where/why/how among the question's words, or
/// "other".
pub fn question_type(question: &str) -> &'static str {
    normalize_answer(question)
        .split(' ')
        .find_map(|w| QUESTION_TYPES[..6].iter().find(|&&t| t == w).copied())
        .unwrap_or("other")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TypeScore {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
    /// Share of questions whose answerable/unanswerable call was right.
    pub answerable_accuracy: f64,
    pub per_type: BTreeMap<String, TypeScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: overall row, then one row per question type.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<8} {:>7} {:>7} {:>6}", "type", "EM", "F1", "count").unwrap();
        writeln!(s, "{:<8} {:>7.2} {:>7.2} {:>6}", "overall", self.em, self.f1, self.count).unwrap();
        for t in QUESTION_TYPES {
            if let Some(ts) = self.per_type.get(t) {
                writeln!(s, "{:<8} {:>7.2} {:>7.2} {:>6}", t, ts.em, ts.f1, ts.count).unwrap();
            }
        }
        writeln!(s, "answerable accuracy {:.2}", self.answerable_accuracy).unwrap();
        s
    }
}

/// Scores `predictions` (question id → answer text) against every question
/// in `gold`. Every question must have a prediction.
pub fn score(predictions: &BTreeMap<String, String>, gold: &[Dialogue]) -> Result<EvalReport> {
    let qas: Vec<_> = gold.iter().flat_map(|d| &d.qas).collect();
    let missing: Vec<String> = qas
        .iter()
        .filter(|qa| !predictions.contains_key(&qa.id))
        .map(|qa| qa.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions { ids: missing });
    }
    let mut per_type: BTreeMap<String, TypeScore> = QUESTION_TYPES
        .iter()
        .map(|t| (t.to_string(), TypeScore::default()))
        .collect();
    let (mut em, mut f1, mut type_ok) = (0.0, 0.0, 0usize);
    for qa in &qas {
        let pred = &predictions[&qa.id];
        let gold_text = qa.answer.as_ref().map_or(UNANSWERABLE, |a| a.text.as_str());
        let (e, f) = (exact_match(pred, gold_text), f1_score(pred, gold_text));
        em += e;
        f1 += f;
        if is_unanswerable(pred) == qa.answer.is_none() {
            type_ok += 1;
        }
        let ts = per_type.get_mut(question_type(&qa.question)).unwrap();
        ts.em += e;
        ts.f1 += f;
        ts.count += 1;
    }
    let pct = |x: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * x / n as f64 };
    for ts in per_type.values_mut() {
        ts.em = pct(ts.em, ts.count);
        ts.f1 = pct(ts.f1, ts.count);
    }
    Ok(EvalReport {
        em: pct(em, qas.len()),
        f1: pct(f1, qas.len()),
        count: qas.len(),
        answerable_accuracy: pct(type_ok as f64, qas.len()),
        per_type,
    })
}
