use cada::model::{batch_loss, prepare_examples, Model, ModelConfig};
use cada::corpus::{parse_corpus, Vocabulary};
use cada::model::Gold;
use cada::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Evaluates `Σ build(inputs) ⊙ R` for a fixed random `R`.
fn weighted_loss(tape: &mut Tape, inputs: &[Var], build: &Build, weight_seed: u64) -> Var {
    let out = build(tape, inputs);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let r = tape.input(random(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn loss_value(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new(seed);
    tape.set_training(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_loss(&mut tape, &vars, build, seed);
    tape.value(loss).data()[0]
}

/// Largest relative error between backward and central differences over
/// every entry of every input.
pub fn check(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new(seed);
    tape.set_training(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_loss(&mut tape, &vars, build, seed);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let n = (loss_value(&plus, build, seed) - loss_value(&minus, build, seed)) / (2.0 * STEP);
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    rng.gen_range(1..=hi)
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A `{0, −∞}` mask with at least one open entry per row.
pub fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        let keep = rng.gen_range(0..cols);
        for c in 0..cols {
            if c != keep && rng.gen_bool(0.4) {
                m[r * cols + c] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

/// Worst relative error of each differentiable op over `shapes` random
/// shapes apiece.
pub fn op_suite(shapes: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = e.max(err),
        None => results.push((name, err)),
    };
    for s in 0..shapes as u64 {
        let (m, k, p) = (dims(&mut rng, 5), dims(&mut rng, 5), dims(&mut rng, 5));
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, p], -1.0, 1.0);
        let c = random(&mut rng, &[m, k], -1.0, 1.0);
        record("matmul", check(&[a.clone(), b], &|t, v| t.matmul(v[0], v[1]).unwrap(), s));
        record("transpose", check(std::slice::from_ref(&a), &|t, v| t.transpose(v[0]), s));
        record("reshape", check(std::slice::from_ref(&a), &|t, v| t.reshape(v[0], &[k, m]).unwrap(), s));
        record("concat_cols", check(&[a.clone(), c.clone()], &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap(), s));
        let lo = rng.gen_range(0..k);
        let hi = rng.gen_range(lo + 1..=k);
        record("slice_cols", check(std::slice::from_ref(&a), &|t, v| t.slice_cols(v[0], lo, hi).unwrap(), s));
        let r = rng.gen_range(0..m);
        record("row", check(std::slice::from_ref(&a), &|t, v| t.row(v[0], r).unwrap(), s));
        record("add", check(&[a.clone(), c.clone()], &|t, v| t.add(v[0], v[1]).unwrap(), s));
        let bias = random(&mut rng, &[k], -1.0, 1.0);
        record("add_row", check(&[a.clone(), bias], &|t, v| t.add_row(v[0], v[1]).unwrap(), s));
        let scalar = random(&mut rng, &[1], -1.0, 1.0);
        record("add_scalar", check(&[a.clone(), scalar], &|t, v| t.add_scalar(v[0], v[1]).unwrap(), s));
        record("mul", check(&[a.clone(), c.clone()], &|t, v| t.mul(v[0], v[1]).unwrap(), s));
        record("mul (shared operand)", check(std::slice::from_ref(&a), &|t, v| t.mul(v[0], v[0]).unwrap(), s));
        record("scale", check(std::slice::from_ref(&a), &|t, v| t.scale(v[0], -1.7), s));
        record("add_const", check(std::slice::from_ref(&a), &|t, v| t.add_const(v[0], 0.3), s));
        let kinked = away_from_zero(&mut rng, &[m, k]);
        record("relu", check(&[kinked], &|t, v| t.relu(v[0]), s));
        record("gelu", check(&[random(&mut rng, &[m, k], -3.0, 3.0)], &|t, v| t.gelu(v[0]), s));
        record("sigmoid", check(&[random(&mut rng, &[m, k], -3.0, 3.0)], &|t, v| t.sigmoid(v[0]), s));
        record("log", check(&[random(&mut rng, &[m, k], 0.2, 2.0)], &|t, v| t.log(v[0], 1e-12), s));
        record("sum", check(std::slice::from_ref(&a), &|t, v| t.sum(v[0]), s));
        record("mean", check(std::slice::from_ref(&a), &|t, v| t.mean(v[0]), s));
        let idx = rng.gen_range(0..m * k);
        record("pick", check(std::slice::from_ref(&a), &|t, v| t.pick(v[0], idx).unwrap(), s));
        let mask = random_mask(&mut rng, m, k);
        record("masked_softmax", check(&[random(&mut rng, &[m, k], -2.0, 2.0)], &|t, v| t.masked_softmax(v[0], Some(&mask)).unwrap(), s));
        let batch = dims(&mut rng, 3);
        record("masked_softmax (batched)", check(&[random(&mut rng, &[batch, m, k], -2.0, 2.0)], &|t, v| t.masked_softmax(v[0], Some(&mask)).unwrap(), s));
        let f = dims(&mut rng, 5) + 1;
        let x = random(&mut rng, &[m, f], -2.0, 2.0);
        let gain = random(&mut rng, &[f], 0.5, 1.5);
        let shift = random(&mut rng, &[f], -0.5, 0.5);
        record("layer_norm", check(&[x, gain, shift], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), s));
        let vocab = dims(&mut rng, 6);
        let ids: Vec<usize> = (0..dims(&mut rng, 8)).map(|_| rng.gen_range(0..vocab)).collect();
        record("embedding", check(&[random(&mut rng, &[vocab, f], -1.0, 1.0)], &|t, v| t.embedding(v[0], &ids).unwrap(), s));
        record("dropout", check(std::slice::from_ref(&a), &|t, v| t.dropout(v[0], 0.3), s));
        let (n, d) = (dims(&mut rng, 5), dims(&mut rng, 4));
        let q = random(&mut rng, &[n, d], -1.0, 1.0);
        let kk = random(&mut rng, &[n, d], -1.0, 1.0);
        let w = random(&mut rng, &[d, d], -1.0, 1.0);
        let bb = random(&mut rng, &[1], -1.0, 1.0);
        let gate: Vec<f64> = (0..n * n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        record("masked_bilinear", check(&[q, kk, w, bb], &|t, v| t.masked_bilinear(v[0], v[1], v[2], v[3], &gate).unwrap(), s));
    }
    results
}

/// Twelve tokens without speaker prefixes: two questions over three
/// utterances, one coreference link and one discourse arc, so every
/// structure matrix is non-trivial.
pub const MICRO_CORPUS: &str = r#"[{"id": "micro", "utterances": [
    {"speaker": "ann", "text": "pc broke"},
    {"speaker": "bob", "text": "fix it"},
    {"speaker": "ann", "text": "ok"}],
  "edges": [{"from": 1, "to": 0, "rel": "QAP"}],
  "clusters": [[[0, 0, 1], [1, 1, 2]]],
  "qas": [
    {"question": "what ?", "answerable": true, "answer": {"utt": 0, "start": 0, "end": 1, "text": "pc"}},
    {"question": "why ?", "answerable": false}]}]"#;

pub fn micro_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        base_layers: 1,
        interlocutor_layers: 1,
        discourse_layers: 1,
        gamma_paper: 1,
        max_len: 12,
        vocab_size,
        speaker_prefix: false,
        ..ModelConfig::default()
    }
}

/// Every parameter of the micro model against central differences of the
/// batch loss. Head weights are randomized first so gradients reach the
/// encoder.
pub fn micro_model_check() -> f64 {
    let corpus = parse_corpus(MICRO_CORPUS).unwrap();
    let vocab = Vocabulary::build(&corpus, 1);
    let config = micro_config(vocab.len());
    let mut model = Model::new(config.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids: Vec<_> = model.params().ids().collect();
    for id in &ids {
        if model.params().name(*id).starts_with("head.") {
            for x in model.params_mut().get_mut(*id).data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let examples = prepare_examples(&corpus, &vocab, &config).unwrap();
    assert!(examples.iter().all(|e| e.seq.len() <= 12));
    assert!(!examples[0].structure.m1.is_zero());
    assert!(examples[0].structure.g.as_slice().contains(&f64::NEG_INFINITY));
    let golds: Vec<Gold> = examples.iter().map(|e| e.gold.unwrap()).collect();

    let loss_of = |model: &Model| -> (Tape, Var) {
        let mut tape = Tape::new(0);
        let p = model.bind(&mut tape);
        let heads: Vec<_> = examples.iter().map(|e| model.forward(&mut tape, &p, e, None).unwrap()).collect();
        let loss = batch_loss(&mut tape, &heads, &golds).unwrap();
        (tape, loss)
    };
    let (mut tape, loss) = loss_of(&model);
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; model.params().get(*id).numel()]).collect();
    for (id, g) in tape.param_grads() {
        for (a, x) in analytic[id.0].iter_mut().zip(g) {
            *a += x;
        }
    }
    let mut worst = 0.0f64;
    for id in &ids {
        for i in 0..model.params().get(*id).numel() {
            let orig = model.params().get(*id).data()[i];
            model.params_mut().get_mut(*id).data_mut()[i] = orig + STEP;
            let (t, l) = loss_of(&model);
            let up = t.value(l).data()[0];
            model.params_mut().get_mut(*id).data_mut()[i] = orig - STEP;
            let (t, l) = loss_of(&model);
            let down = t.value(l).data()[0];
            model.params_mut().get_mut(*id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[id.0][i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}
