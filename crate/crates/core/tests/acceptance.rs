//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cada::corpus::{encode_input, Dialogue, EncodeOptions, Vocabulary};
use cada::eval::{
    exact_match, f1_score, generate_synthetic, run_ablation, score, AblationTable, SyntheticSpec, Variant,
    UNANSWERABLE,
};
use cada::graphs::{
    build_discourse_mask, build_role_matrix, coref_matrix_from_spans, utterance_distances, SquareMatrix,
};
use cada::model::{batch_loss, example_loss, prepare_examples, Example, Model, ModelConfig, Trace};
use cada::tensor::Tape;
use cada::training::TrainConfig;
use common::fixtures::{graph_dialogue, interlocutor_dialogue, random_dialogue, random_edges};
use common::grad::{micro_model_check, op_suite, TOLERANCE};
use common::models::{hundred_token_corpus, model_for, random_config, scramble};
use common::oracles::{floyd_warshall, plain_channels};
use common::runs::{overfit, OVERFIT_STEPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (name, err) in op_suite(20).into_iter().chain([("micro model", micro_model_check())]) {
        if !(err < worst.1) {
            worst = (name, err);
        }
    }
    let elapsed = start.elapsed();
    ensure(worst.1 < TOLERANCE, || format!("{} relative error {:e}", worst.0, worst.1))?;
    ensure(elapsed < Duration::from_secs(60), || format!("suite took {elapsed:.1?}"))?;
    Ok(format!("max relative error {:.1e} ({}), {elapsed:.1?}", worst.1, worst.0))
}

fn masking() -> Outcome {
    let mut masked = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dialogue(seed, 1 + seed as usize % 6);
        let (mut model, vocab) = model_for(&d, random_config(&mut rng), seed);
        scramble(&mut model, seed);
        let ex = Example::new(&d, &d.qas[0], &vocab, model.config()).unwrap();
        let mut tape = Tape::new(0);
        let p = model.bind(&mut tape);
        let mut trace = Trace::default();
        model.forward(&mut tape, &p, &ex, Some(&mut trace)).unwrap();
        let g = ex.structure.g.as_slice();
        for &a in &trace.discourse {
            for (w, &m) in tape.value(a).data().iter().zip(g) {
                if m == f64::NEG_INFINITY {
                    ensure(*w == 0.0, || format!("seed {seed}: weight {w:e} at a masked pair"))?;
                    masked += 1;
                }
            }
        }
        for &a in trace.base.iter().chain(&trace.interlocutor).chain(&trace.discourse) {
            let t = tape.value(a);
            for r in 0..t.rows() {
                let sum: f64 = t.row(r).iter().sum();
                ensure((sum - 1.0).abs() < 1e-12, || format!("seed {seed}: row sums to {sum}"))?;
            }
        }
    }
    Ok(format!("{masked} masked weights exactly 0 over 100 inputs"))
}

fn reduction() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dialogue(seed, 1 + seed as usize % 5);
        let (mut model, vocab) = model_for(&d, random_config(&mut rng), seed);
        scramble(&mut model, seed);
        let ex = Example::new(&d, &d.qas[0], &vocab, model.config()).unwrap();
        let zero = SquareMatrix::zeros(ex.seq.len());
        let mut tape = Tape::new(0);
        let p = model.bind(&mut tape);
        let h1 = model.encode_base(&mut tape, &p, &ex.seq.token_ids, &zero, None).unwrap();
        let h2 = model.encode_interlocutor(&mut tape, &p, h1, &zero, None).unwrap();
        let h3 = model.encode_discourse(&mut tape, &p, h1, &zero, None).unwrap();
        let reference = plain_channels(&model, &ex.seq.token_ids);
        for (h, r) in [h1, h2, h3].iter().zip(&reference) {
            let t = tape.value(*h);
            for (i, row) in r.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    worst = worst.max((t.at(i, j) - v).abs());
                }
            }
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 50 models"))
}

fn graph_oracles() -> Outcome {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + seed as usize % 12;
        let edges = random_edges(&mut rng, n, 0.3);
        let routing = seed % 2 == 0;
        let dist = utterance_distances(&graph_dialogue(n, &edges), routing);
        let oracle = floyd_warshall(n, &edges, routing);
        for a in 0..=n {
            for b in 0..=n {
                ensure(dist.get(a, b) == oracle[a][b], || format!("graph {seed}: pair ({a}, {b})"))?;
            }
        }
    }

    let m1 = coref_matrix_from_spans(7, &[vec![(1, 2), (4, 5)], vec![(3, 4), (5, 6), (6, 7)]]);
    let linked = [(1, 4), (3, 5), (3, 6), (5, 6)];
    for i in 0..7 {
        for j in 0..7 {
            let want = linked.contains(&(i.min(j), i.max(j)));
            ensure(m1.get(i, j) == if want { 1.0 } else { 0.0 }, || format!("cluster fixture ({i}, {j})"))?;
        }
    }

    let d = interlocutor_dialogue();
    let vocab = Vocabulary::build(std::slice::from_ref(&d), 1);
    let seq = encode_input(&d, &d.qas[0], &vocab, &EncodeOptions { max_len: 256, speaker_prefix: true }).unwrap();
    let m2 = build_role_matrix(&seq);
    let speakers = d.speaker_ids();
    for i in 0..seq.len() {
        for j in 0..seq.len() {
            let (a, b) = (seq.token_utt[i], seq.token_utt[j]);
            let same = a >= 0 && b >= 0 && speakers[a as usize] == speakers[b as usize];
            ensure(m2.get(i, j) == if same { 1.0 } else { 0.0 }, || format!("speaker fixture ({i}, {j})"))?;
        }
    }
    let at = |u: i32| (0..seq.len()).find(|&t| seq.token_utt[t] == u).unwrap();
    ensure(m2.get(at(0), at(3)) == 1.0 && m2.get(at(0), at(1)) == 0.0, || "speaker fixture blocks".into())?;

    for seed in 0..100u64 {
        let d = random_dialogue(seed, 1 + seed as usize % 8);
        let vocab = Vocabulary::build(std::slice::from_ref(&d), 1);
        let seq = encode_input(&d, &d.qas[0], &vocab, &EncodeOptions { max_len: 256, speaker_prefix: true }).unwrap();
        let dist = utterance_distances(&d, seed % 2 == 0);
        let gamma = 1 + seed as u32 % 4;
        let small = build_discourse_mask(&dist, &seq, gamma);
        let large = build_discourse_mask(&dist, &seq, gamma + 1 + seed as u32 % 3);
        for (s, l) in small.as_slice().iter().zip(large.as_slice()) {
            ensure(*s != 0.0 || *l == 0.0, || format!("instance {seed}: larger gamma masked an open pair"))?;
        }
    }
    Ok("200 graphs, both fixtures, 100 monotonicity instances".into())
}

fn loss_arithmetic() -> Outcome {
    let corpus = hundred_token_corpus(4);
    let vocab = Vocabulary::build(&corpus, 1);
    let config = ModelConfig { max_len: 128, vocab_size: vocab.len(), ..ModelConfig::default() };
    let model = Model::new(config.clone(), 5).unwrap();
    let examples = prepare_examples(&corpus, &vocab, &config).unwrap();
    let mut tape = Tape::new(0);
    let p = model.bind(&mut tape);
    let heads: Vec<_> = examples.iter().map(|e| model.forward(&mut tape, &p, e, None).unwrap()).collect();
    let golds: Vec<_> = examples.iter().map(|e| e.gold.unwrap()).collect();
    let loss = batch_loss(&mut tape, &heads, &golds).unwrap();
    let got = tape.value(loss).data()[0];
    let expected = 2.0 * 100f64.ln() + 2f64.ln();
    ensure((got - expected).abs() < 1e-6, || format!("uniform loss {got} vs {expected}"))?;

    let d = random_dialogue(21, 4);
    let (mut model, vocab) = model_for(&d, ModelConfig { hidden: 8, heads: 2, max_len: 256, ..ModelConfig::default() }, 2);
    scramble(&mut model, 9);
    let examples: Vec<_> = d.qas.iter().map(|qa| Example::new(&d, qa, &vocab, model.config()).unwrap()).collect();
    let golds: Vec<_> = examples.iter().map(|e| e.gold.unwrap()).collect();
    let mut tape = Tape::new(0);
    let p = model.bind(&mut tape);
    let heads: Vec<_> = examples.iter().map(|e| model.forward(&mut tape, &p, e, None).unwrap()).collect();
    let mut sum = 0.0;
    for (h, g) in heads.iter().zip(&golds) {
        let l = example_loss(&mut tape, h, *g).unwrap();
        sum += tape.value(l).data()[0];
    }
    let batch = batch_loss(&mut tape, &heads, &golds).unwrap();
    let mean = sum / golds.len() as f64;
    let got_mean = tape.value(batch).data()[0];
    ensure((got_mean - mean).abs() < 1e-12, || format!("batch {got_mean} vs mean {mean}"))?;
    Ok(format!("uniform loss {got:.9} (closed form {expected:.9})"))
}

fn overfitting() -> Outcome {
    let run = overfit(17);
    let again = overfit(17);
    let steps = run.outcome.steps;
    ensure(run.train_em == 100.0, || format!("train EM {:.2}", run.train_em))?;
    ensure(steps <= OVERFIT_STEPS, || format!("{steps} steps"))?;
    ensure(run.elapsed < Duration::from_secs(300), || format!("took {:.1?}", run.elapsed))?;
    ensure(run.outcome.log_text() == again.outcome.log_text(), || "logs differ across identical seeds".into())?;
    Ok(format!("train EM 100 in {steps} steps, {:.1?}, logs identical", run.elapsed))
}

fn ablation_corpus(coref: f64, discourse: f64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut corpus = generate_synthetic(&SyntheticSpec {
        dialogues: 500,
        utterances: 4,
        vocab_size: 8,
        coref_fraction: coref,
        discourse_fraction: discourse,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let test = corpus.split_off(400);
    (corpus, test)
}

fn ablate(coref: f64, discourse: f64, epochs: usize, variants: &[Variant]) -> AblationTable {
    let (train, test) = ablation_corpus(coref, discourse);
    let model = ModelConfig {
        hidden: 32,
        heads: 2,
        base_layers: 2,
        interlocutor_layers: 1,
        discourse_layers: 1,
        max_len: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { batch_size: 8, learning_rate: 1e-3, epochs, eval_every: 0, ..TrainConfig::default() };
    let table = run_ablation(&train, &test, &model, &tc, variants, &[1, 2, 3]).unwrap();
    print!("{}", table.to_table());
    table
}

fn gap(table: &AblationTable, ablated: &str) -> f64 {
    table.row("full").unwrap().mean_f1 - table.row(ablated).unwrap().mean_f1
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let coref = gap(&ablate(0.8, 0.0, 16, &[Variant::full(), Variant::without_cae()]), "w/o-CAE");
    let discourse = gap(&ablate(0.0, 0.8, 12, &[Variant::full(), Variant::without_ddm()]), "w/o-DDM");
    let control = ablate(0.0, 0.0, 4, &Variant::all());
    let full = control.row("full").unwrap().mean_f1;
    let spread = control.rows.iter().map(|r| (r.mean_f1 - full).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let summary = format!(
        "coref gap {coref:.2}, discourse gap {discourse:.2}, control spread {spread:.2}, {:.1} min",
        elapsed.as_secs_f64() / 60.0
    );
    let ok = coref >= 3.0 && discourse >= 3.0 && spread <= 2.0 && elapsed < Duration::from_secs(30 * 60);
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn scorer() -> Outcome {
    ensure(exact_match("Peter", "Peter") == 1.0 && f1_score("Peter", "Peter") == 1.0, || "identical answers".into())?;
    ensure(
        exact_match("the running PowerPC", "running PowerPC") == 1.0
            && f1_score("the running PowerPC", "running PowerPC") == 1.0,
        || "article stripping".into(),
    )?;
    let f1 = f1_score("x b c", "b c d");
    ensure(exact_match("x b c", "b c d") == 0.0 && (100.0 * f1 - 66.7).abs() < 0.05, || format!("overlap F1 {f1}"))?;

    let corpus: Vec<Dialogue> = (0..30).map(|s| random_dialogue(s, 1 + s as usize % 6)).collect();
    let gold: BTreeMap<String, String> = corpus
        .iter()
        .flat_map(|d| &d.qas)
        .map(|qa| (qa.id.clone(), qa.answer.as_ref().map_or(UNANSWERABLE.to_string(), |a| a.text.clone())))
        .collect();
    let report = score(&gold, &corpus).unwrap();
    ensure(report.em == 100.0 && report.f1 == 100.0, || format!("gold scores {}/{}", report.em, report.f1))?;
    let bucketed: usize = report.per_type.values().map(|t| t.count).sum();
    ensure(bucketed == report.count, || format!("buckets hold {bucketed} of {}", report.count))?;
    Ok(format!("examples reproduce, gold 100/100, {bucketed} questions bucketed"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradients),
        ("masking exactness", masking),
        ("reduction to plain transformer", reduction),
        ("graph oracles", graph_oracles),
        ("loss arithmetic", loss_arithmetic),
        ("overfit", overfitting),
        ("ablation", ablation),
        ("scorer", scorer),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {number} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
