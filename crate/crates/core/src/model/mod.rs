//! The network: a coreference-aware base encoder producing `H₁`, an
//! interlocutor channel producing `H₂` and a discourse channel producing
//! `H₃`, both reading `H₁`, then span and answerability heads over
//! `H_o = [H₁, H₂, H₃]`.

mod attention;
mod config;
mod params;

pub use attention::{graph_biaffine_scores, Structure};
pub use config::ModelConfig;
pub(crate) use config::{parse as config_parse, parse_pairs as config_pairs};
pub use params::{Bound, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attention::{layer_norm_params, normal, Block};
use crate::corpus::{
    detokenize, encode_input, AnswerTarget, Dialogue, EncodeOptions, EncodedSequence, QaPair,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::graphs::{SquareMatrix, StructureMatrices};
use crate::tensor::{Checkpoint, ParamId, Tape, Tensor, Var};

/// Floor applied to probabilities before taking logarithms in the loss.
pub const PROB_FLOOR: f64 = 1e-12;
const EMBED_LN_EPS: f64 = 1e-5;

/// Gold indices for one example. Unanswerable questions point both
/// positions at `[CLS]`. `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gold {
    pub start: usize,
    pub end: usize,
    pub answerable: bool,
}

impl Gold {
    pub const UNANSWERABLE: Gold = Gold {
        start: 0,
        end: 0,
        answerable: false,
    };
}

/// One encoded question with its cached structure matrices.
#[derive(Clone, Debug)]
pub struct Example {
    pub qa_id: String,
    pub seq: EncodedSequence,
    pub structure: StructureMatrices,
    /// `None` when the answer was truncated out of the sequence.
    pub gold: Option<Gold>,
}

impl Example {
    pub fn new(
        dialogue: &Dialogue,
        qa: &QaPair,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        let opts = EncodeOptions {
            max_len: config.max_len,
            speaker_prefix: config.speaker_prefix,
        };
        let seq = encode_input(dialogue, qa, vocab, &opts)?;
        let structure =
            StructureMatrices::build(dialogue, &seq, config.gamma(), config.question_routing);
        let gold = match seq.target {
            AnswerTarget::Unanswerable => Some(Gold::UNANSWERABLE),
            AnswerTarget::Span { start, end } => Some(Gold {
                start,
                end: end - 1,
                answerable: true,
            }),
            AnswerTarget::TruncatedOut => None,
        };
        Ok(Example {
            qa_id: qa.id.clone(),
            seq,
            structure,
            gold,
        })
    }
}

/// Encodes every question of every dialogue, in corpus order.
pub fn prepare_examples(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogues {
        for qa in &d.qas {
            out.push(Example::new(d, qa, vocab, config)?);
        }
    }
    Ok(out)
}

/// Output variables of the prediction heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[N, 3F]`.
    pub fused: Var,
    /// `[1, N]` start distribution.
    pub start: Var,
    /// `[1, N]` end distribution.
    pub end: Var,
    /// `[1, 1]` answerability probability.
    pub answerable: Var,
}

/// Attention probabilities recorded during a forward pass, one `[N, N]`
/// variable per head per layer, bottom layer first.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub base: Vec<Var>,
    pub interlocutor: Vec<Var>,
    pub discourse: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodedAnswer {
    Unanswerable,
    /// Inclusive global token positions.
    Span { start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub p_type: f64,
    pub answer: DecodedAnswer,
    /// `pˢ·pᵉ` of the chosen span, or `1 − pᵗ` when unanswerable.
    pub score: f64,
    /// Detokenized span text, or [`UNANSWERABLE`](crate::eval::UNANSWERABLE).
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embed_ln: (ParamId, ParamId),
    base: Vec<Block>,
    interlocutor: Vec<Block>,
    discourse: Vec<Block>,
    start_head: (ParamId, ParamId),
    end_head: (ParamId, ParamId),
    type_head: (ParamId, ParamId),
}

impl Model {
    /// Fresh weights drawn from `seed`. Head weights start at zero, so the
    /// initial span distributions are uniform and `pᵗ = 0.5`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (f, heads) = (config.hidden, config.heads);
        let token_embedding =
            store.register("embed.token", normal(&mut rng, &[config.vocab_size, f], 1.0));
        let position_embedding =
            store.register("embed.position", normal(&mut rng, &[config.max_len, f], 1.0));
        let embed_ln = layer_norm_params(&mut store, "embed.ln", f);
        let base = (0..config.base_layers)
            .map(|l| Block::register(&mut store, &mut rng, &format!("base.{l}"), f, heads, true))
            .collect();
        let interlocutor = (0..config.interlocutor_layers)
            .map(|l| {
                Block::register(&mut store, &mut rng, &format!("interlocutor.{l}"), f, heads, true)
            })
            .collect();
        let discourse = (0..config.discourse_layers)
            .map(|l| {
                Block::register(&mut store, &mut rng, &format!("discourse.{l}"), f, heads, false)
            })
            .collect();
        let mut head = |name: &str| {
            (
                store.register(format!("{name}.weight"), Tensor::zeros([3 * f, 1])),
                store.register(format!("{name}.bias"), Tensor::zeros([1])),
            )
        };
        let start_head = head("head.start");
        let end_head = head("head.end");
        let type_head = head("head.type");
        log::info!(
            "model: {} tensors, {} weights",
            store.len(),
            store.scalar_count()
        );
        Ok(Model {
            config,
            params: store,
            token_embedding,
            position_embedding,
            embed_ln,
            base,
            interlocutor,
            discourse,
            start_head,
            end_head,
            type_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Swaps in settings that leave every parameter shape unchanged, such as
    /// `gamma_paper`, the threshold or the channel switches.
    pub fn set_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        let c = &self.config;
        let same_shapes = config.hidden == c.hidden
            && config.heads == c.heads
            && config.base_layers == c.base_layers
            && config.interlocutor_layers == c.interlocutor_layers
            && config.discourse_layers == c.discourse_layers
            && config.coref_layers == c.coref_layers
            && config.max_len == c.max_len
            && config.vocab_size == c.vocab_size;
        if !same_shapes {
            return Err(Error::Config(
                "only settings that keep parameter shapes can change after construction".into(),
            ));
        }
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, token_ids: &[u32]) -> Result<Var> {
        let n = token_ids.len();
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max_len: self.config.max_len,
            });
        }
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.embedding(p[self.token_embedding], &ids)?;
        let pos = tape.embedding(p[self.position_embedding], &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(x, p[self.embed_ln.0], p[self.embed_ln.1], EMBED_LN_EPS)?;
        Ok(tape.dropout(x, self.config.dropout))
    }

    /// `H₁`: embeddings through the base blocks with coreference attention
    /// over `m1`.
    pub fn encode_base(
        &self,
        tape: &mut Tape,
        p: &Bound,
        token_ids: &[u32],
        m1: &SquareMatrix,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_matrix(m1, token_ids.len())?;
        let mut h = self.embed(tape, p, token_ids)?;
        for (l, block) in self.base.iter().enumerate() {
            let m = self.config.uses_coref_at(l).then_some(m1);
            h = block.forward(
                tape,
                p,
                h,
                self.config.heads,
                self.config.dropout,
                Structure::Biaffine(m),
                trace.as_deref_mut().map(|t| &mut t.base),
            )?;
        }
        Ok(h)
    }

    /// `H₂`: `H₁` through the interlocutor blocks with biaffine attention
    /// over the role matrix.
    pub fn encode_interlocutor(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h1: Var,
        m2: &SquareMatrix,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_matrix(m2, tape.shape(h1)[0])?;
        let m = self.config.use_role.then_some(m2);
        let mut h = h1;
        for block in &self.interlocutor {
            h = block.forward(
                tape,
                p,
                h,
                self.config.heads,
                self.config.dropout,
                Structure::Biaffine(m),
                trace.as_deref_mut().map(|t| &mut t.interlocutor),
            )?;
        }
        Ok(h)
    }

    /// `H₃`: `H₁` through the discourse blocks, whose attention adds `g` to
    /// the scaled scores.
    pub fn encode_discourse(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h1: Var,
        g: &SquareMatrix,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_matrix(g, tape.shape(h1)[0])?;
        let g = self.config.use_discourse.then_some(g);
        let mut h = h1;
        for block in &self.discourse {
            h = block.forward(
                tape,
                p,
                h,
                self.config.heads,
                self.config.dropout,
                Structure::Masked(g),
                trace.as_deref_mut().map(|t| &mut t.discourse),
            )?;
        }
        Ok(h)
    }

    fn check_matrix(&self, m: &SquareMatrix, n: usize) -> Result<()> {
        if m.size() != n {
            return Err(Error::shape(
                "structure matrix",
                format!("{0}×{0} for {n} tokens", m.size()),
            ));
        }
        Ok(())
    }

    /// Fuses the three channels and applies the span and answerability heads.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, h1: Var, h2: Var, h3: Var) -> Result<Heads> {
        let fused = tape.concat_cols(&[h1, h2, h3])?;
        let n = tape.shape(fused)[0];
        let distribution = |tape: &mut Tape, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let logits = tape.matmul(fused, p[w])?;
            let logits = tape.add_scalar(logits, p[b])?;
            let logits = tape.reshape(logits, &[1, n])?;
            tape.masked_softmax(logits, None)
        };
        let start = distribution(tape, self.start_head)?;
        let end = distribution(tape, self.end_head)?;
        let cls = tape.row(fused, 0)?;
        let t = tape.matmul(cls, p[self.type_head.0])?;
        let t = tape.add_row(t, p[self.type_head.1])?;
        let answerable = tape.sigmoid(t);
        Ok(Heads {
            fused,
            start,
            end,
            answerable,
        })
    }

    /// Full forward pass for one example.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ex: &Example,
        mut trace: Option<&mut Trace>,
    ) -> Result<Heads> {
        let s = &ex.structure;
        let h1 = self.encode_base(tape, p, &ex.seq.token_ids, &s.m1, trace.as_deref_mut())?;
        let h2 = self.encode_interlocutor(tape, p, h1, &s.m2, trace.as_deref_mut())?;
        let h3 = self.encode_discourse(tape, p, h1, &s.g, trace)?;
        self.heads(tape, p, h1, h2, h3)
    }

    /// Inference on a fresh tape with dropout off.
    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let mut tape = Tape::new(0);
        let p = self.bind(&mut tape);
        let heads = self.forward(&mut tape, &p, ex, None)?;
        let p_start = tape.value(heads.start).data().to_vec();
        let p_end = tape.value(heads.end).data().to_vec();
        let p_type = tape.value(heads.answerable).data()[0];
        Ok(decode(p_start, p_end, p_type, &ex.seq, &self.config))
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary, seed: u64) -> Checkpoint {
        Checkpoint {
            seed,
            config: self.config.to_text(),
            vocab: vocab.tokens().to_vec(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vocabulary)> {
        let config = ModelConfig::from_text(&ck.config)?;
        let vocab = Vocabulary::from_tokens(ck.vocab.clone())?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary of {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut model = Model::new(config, ck.seed)?;
        model.params.load_named(&ck.tensors)?;
        Ok((model, vocab))
    }
}

/// Chooses the answer from the head outputs.
///
/// Below the answerability threshold the answer is unanswerable. Otherwise
/// the span maximizing `pˢᵢ·pᵉⱼ` with `i ≤ j ≤ i + max_answer_len`, both
/// positions on content tokens of one utterance. Ties go to the earliest
/// start, then the earliest end.
pub fn decode(
    p_start: Vec<f64>,
    p_end: Vec<f64>,
    p_type: f64,
    seq: &EncodedSequence,
    config: &ModelConfig,
) -> Prediction {
    let mut best: Option<(f64, usize, usize)> = None;
    if p_type >= config.threshold {
        for &(lo, hi) in &seq.utterance_ranges {
            for i in lo..hi {
                let last = hi.min(i + config.max_answer_len + 1);
                for j in i..last {
                    let s = p_start[i] * p_end[j];
                    if best.is_none_or(|(b, _, _)| s > b) {
                        best = Some((s, i, j));
                    }
                }
            }
        }
    }
    let (answer, score, text) = match best {
        Some((s, i, j)) => (
            DecodedAnswer::Span { start: i, end: j },
            s,
            detokenize(&seq.tokens[i..=j]),
        ),
        None => (
            DecodedAnswer::Unanswerable,
            1.0 - p_type,
            crate::eval::UNANSWERABLE.to_string(),
        ),
    };
    Prediction {
        p_start,
        p_end,
        p_type,
        answer,
        score,
        text,
    }
}

/// `−[ln pˢ_start + ln pᵉ_end + ln pᵗ_type]` for one example, where the type
/// term uses `1 − pᵗ` for unanswerable gold.
pub fn example_loss(tape: &mut Tape, heads: &Heads, gold: Gold) -> Result<Var> {
    let ps = tape.pick(heads.start, gold.start)?;
    let pe = tape.pick(heads.end, gold.end)?;
    let pt = tape.pick(heads.answerable, 0)?;
    let pt = if gold.answerable {
        pt
    } else {
        let neg = tape.scale(pt, -1.0);
        tape.add_const(neg, 1.0)
    };
    let ls = tape.log(ps, PROB_FLOOR);
    let le = tape.log(pe, PROB_FLOOR);
    let lt = tape.log(pt, PROB_FLOOR);
    let sum = tape.add(ls, le)?;
    let sum = tape.add(sum, lt)?;
    Ok(tape.scale(sum, -1.0))
}

/// Mean of [`example_loss`] over a batch.
pub fn batch_loss(tape: &mut Tape, heads: &[Heads], golds: &[Gold]) -> Result<Var> {
    if heads.is_empty() || heads.len() != golds.len() {
        return Err(Error::shape(
            "batch_loss",
            format!("{} outputs, {} gold labels", heads.len(), golds.len()),
        ));
    }
    let mut total = example_loss(tape, &heads[0], golds[0])?;
    for (h, &g) in heads.iter().zip(golds).skip(1) {
        let l = example_loss(tape, h, g)?;
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / heads.len() as f64))
}
