use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamStore};
use crate::error::Result;
use crate::graphs::SquareMatrix;
use crate::tensor::{ParamId, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
pub(crate) const BIAFFINE_BIAS_INIT: f64 = 0.5;

/// Structure-aware attention scores for one head:
///
/// `e[i, j] = (q_i · k_j + (q_i W k_jᵀ + b) · M[i, j]) / √d`
///
/// The biaffine term is evaluated only where `M` is set, so an all-zero `M`
/// leaves plain scaled dot-product scores.
pub fn graph_biaffine_scores(
    tape: &mut Tape,
    q: Var,
    k: Var,
    w: Var,
    b: Var,
    m: &SquareMatrix,
) -> Result<Var> {
    scores(tape, q, k, Some((w, b, m)))
}

fn scores(tape: &mut Tape, q: Var, k: Var, biaffine: Option<(Var, Var, &SquareMatrix)>) -> Result<Var> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k);
    let mut e = tape.matmul(q, kt)?;
    if let Some((w, b, m)) = biaffine {
        let lambda = tape.masked_bilinear(q, k, w, b, m.as_slice())?;
        e = tape.add(e, lambda)?;
    }
    Ok(tape.scale(e, 1.0 / (d as f64).sqrt()))
}

/// How a block's attention sees the dialogue structure.
#[derive(Clone, Copy, Debug)]
pub enum Structure<'a> {
    /// Biaffine scoring over a binary matrix (coreference or role).
    Biaffine(Option<&'a SquareMatrix>),
    /// Additive `{0, −∞}` mask on the scaled scores (discourse).
    Masked(Option<&'a SquareMatrix>),
}

/// Parameter ids of one post-LN transformer block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    /// Per head; empty for blocks without biaffine scoring.
    biaffine_w: Vec<ParamId>,
    biaffine_b: Vec<ParamId>,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, out: usize) -> (ParamId, ParamId) {
    let w = normal(rng, &[inp, out], (1.0 / inp as f64).sqrt());
    (
        store.register(format!("{name}.weight"), w),
        store.register(format!("{name}.bias"), Tensor::zeros([out])),
    )
}

pub(crate) fn layer_norm_params(store: &mut ParamStore, name: &str, f: usize) -> (ParamId, ParamId) {
    let ones = Tensor::new([f], vec![1.0; f]).unwrap();
    (
        store.register(format!("{name}.gain"), ones),
        store.register(format!("{name}.bias"), Tensor::zeros([f])),
    )
}

impl Block {
    pub(crate) fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        hidden: usize,
        heads: usize,
        biaffine: bool,
    ) -> Self {
        let d = hidden / heads;
        let (wq, bq) = linear(store, rng, &format!("{name}.query"), hidden, hidden);
        let (wk, bk) = linear(store, rng, &format!("{name}.key"), hidden, hidden);
        let (wv, bv) = linear(store, rng, &format!("{name}.value"), hidden, hidden);
        let (wo, bo) = linear(store, rng, &format!("{name}.output"), hidden, hidden);
        let (mut biaffine_w, mut biaffine_b) = (Vec::new(), Vec::new());
        if biaffine {
            for h in 0..heads {
                let w = normal(rng, &[d, d], (1.0 / d as f64).sqrt());
                biaffine_w.push(store.register(format!("{name}.biaffine{h}.weight"), w));
                biaffine_b.push(store.register(
                    format!("{name}.biaffine{h}.bias"),
                    Tensor::new([1], vec![BIAFFINE_BIAS_INIT]).unwrap(),
                ));
            }
        }
        let (ln1_g, ln1_b) = layer_norm_params(store, &format!("{name}.ln1"), hidden);
        let (ff1_w, ff1_b) = linear(store, rng, &format!("{name}.ff1"), hidden, 4 * hidden);
        let (ff2_w, ff2_b) = linear(store, rng, &format!("{name}.ff2"), 4 * hidden, hidden);
        let (ln2_g, ln2_b) = layer_norm_params(store, &format!("{name}.ln2"), hidden);
        Block {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            biaffine_w,
            biaffine_b,
            ln1_g,
            ln1_b,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            ln2_g,
            ln2_b,
        }
    }

    /// attention → residual → LN → GELU feed-forward → residual → LN.
    /// Attention probabilities of every head are appended to `trace`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        heads: usize,
        dropout: f64,
        structure: Structure<'_>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let hidden = tape.shape(x)[1];
        let d = hidden / heads;
        let proj = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
            let y = tape.matmul(x, p[w])?;
            tape.add_row(y, p[b])
        };
        let q = proj(tape, self.wq, self.bq)?;
        let k = proj(tape, self.wk, self.bk)?;
        let v = proj(tape, self.wv, self.bv)?;

        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * d, (h + 1) * d)?;
            let kh = tape.slice_cols(k, h * d, (h + 1) * d)?;
            let vh = tape.slice_cols(v, h * d, (h + 1) * d)?;
            let probs = match structure {
                Structure::Biaffine(m) => {
                    let biaffine = m
                        .filter(|_| !self.biaffine_w.is_empty())
                        .map(|m| (p[self.biaffine_w[h]], p[self.biaffine_b[h]], m));
                    let e = scores(tape, qh, kh, biaffine)?;
                    tape.masked_softmax(e, None)?
                }
                Structure::Masked(g) => {
                    let e = scores(tape, qh, kh, None)?;
                    tape.masked_softmax(e, g.map(SquareMatrix::as_slice))?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            contexts.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&contexts)?;
        let attn = tape.matmul(ctx, p[self.wo])?;
        let attn = tape.add_row(attn, p[self.bo])?;
        let attn = tape.dropout(attn, dropout);
        let res = tape.add(x, attn)?;
        let h = tape.layer_norm(res, p[self.ln1_g], p[self.ln1_b], LN_EPS)?;

        let ff = tape.matmul(h, p[self.ff1_w])?;
        let ff = tape.add_row(ff, p[self.ff1_b])?;
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, p[self.ff2_w])?;
        let ff = tape.add_row(ff, p[self.ff2_b])?;
        let ff = tape.dropout(ff, dropout);
        let res = tape.add(h, ff)?;
        tape.layer_norm(res, p[self.ln2_g], p[self.ln2_b], LN_EPS)
    }
}
