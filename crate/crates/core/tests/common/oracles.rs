use cada::corpus::EncodedSequence;
use cada::model::{Model, ModelConfig};

/// All-pairs distances over the utterance nodes plus a question node at
/// index `n`, stored as `1 + hops` with 0 for no path. The question node
/// touches every utterance but never relays a path between two of them.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)], routing: bool) -> Vec<Vec<u32>> {
    const INF: u64 = u64::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let mut out = vec![vec![0u32; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            if d[i][j] < INF {
                out[i][j] = d[i][j] as u32 + 1;
            }
        }
    }
    out[n][n] = 1;
    if routing {
        for i in 0..n {
            out[i][n] = 2;
            out[n][i] = 2;
        }
    }
    out
}

/// Exhaustive span search with the decoder's constraints: both ends on
/// content tokens of one utterance, `i ≤ j ≤ i + max_len`, earliest span
/// on ties.
pub fn best_span(p_start: &[f64], p_end: &[f64], seq: &EncodedSequence, max_len: usize) -> Option<(usize, usize)> {
    let n = p_start.len();
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in 0..n {
            let (Some((ui, _)), Some((uj, _))) = (seq.global_to_local[i], seq.global_to_local[j]) else {
                continue;
            };
            if ui != uj || j < i || j > i + max_len {
                continue;
            }
            let s = p_start[i] * p_end[j];
            let better = match best {
                None => true,
                Some((b, bi, bj)) => s > b || (s == b && (i, j) < (bi, bj)),
            };
            if better {
                best = Some((s, i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

type Matrix = Vec<Vec<f64>>;

fn weight(model: &Model, name: &str) -> Matrix {
    let id = model.params().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = model.params().get(id);
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn vector(model: &Model, name: &str) -> Vec<f64> {
    model.params().get(model.params().id(name).unwrap()).data().to_vec()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Matrix {
    x.iter()
        .map(|row| {
            let f = row.len() as f64;
            let mean = row.iter().sum::<f64>() / f;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// One post-LN block with ordinary scaled dot-product attention.
fn plain_block(model: &Model, name: &str, x: &Matrix, heads: usize) -> Matrix {
    let p = |s: &str| format!("{name}.{s}");
    let q = affine(x, &weight(model, &p("query.weight")), &vector(model, &p("query.bias")));
    let k = affine(x, &weight(model, &p("key.weight")), &vector(model, &p("key.bias")));
    let v = affine(x, &weight(model, &p("value.weight")), &vector(model, &p("value.bias")));
    let (n, f) = (x.len(), x[0].len());
    let d = f / heads;
    let mut ctx = vec![vec![0.0; f]; n];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..n).map(|j| exp[j] / z * v[j][c]).sum();
            }
        }
    }
    let attn = affine(&ctx, &weight(model, &p("output.weight")), &vector(model, &p("output.bias")));
    let h1 = layer_norm(&add(x, &attn), &vector(model, &p("ln1.gain")), &vector(model, &p("ln1.bias")), 1e-5);
    let mut ff = affine(&h1, &weight(model, &p("ff1.weight")), &vector(model, &p("ff1.bias")));
    for row in &mut ff {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    let ff = affine(&ff, &weight(model, &p("ff2.weight")), &vector(model, &p("ff2.bias")));
    layer_norm(&add(&h1, &ff), &vector(model, &p("ln2.gain")), &vector(model, &p("ln2.bias")), 1e-5)
}

/// Reference outputs of the three channels with every structure term
/// removed: a plain transformer stack reading the model's own weights.
pub fn plain_channels(model: &Model, token_ids: &[u32]) -> [Matrix; 3] {
    let config: &ModelConfig = model.config();
    let tok = weight(model, "embed.token");
    let pos = weight(model, "embed.position");
    let x: Matrix = token_ids
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let mut h = layer_norm(&x, &vector(model, "embed.ln.gain"), &vector(model, "embed.ln.bias"), 1e-5);
    for l in 0..config.base_layers {
        h = plain_block(model, &format!("base.{l}"), &h, config.heads);
    }
    let mut h2 = h.clone();
    for l in 0..config.interlocutor_layers {
        h2 = plain_block(model, &format!("interlocutor.{l}"), &h2, config.heads);
    }
    let mut h3 = h.clone();
    for l in 0..config.discourse_layers {
        h3 = plain_block(model, &format!("discourse.{l}"), &h3, config.heads);
    }
    [h, h2, h3]
}
