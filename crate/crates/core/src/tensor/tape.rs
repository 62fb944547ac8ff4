use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{add_assign, dot, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Index of a trainable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log { x: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Vec<f64> },
    MaskedBilinear {
        q: Var,
        k: Var,
        w: Var,
        b: Var,
        pairs: Vec<(u32, u32)>,
        qw: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
///
/// Nodes are appended in evaluation order, so recording order is already a
/// topological order and [`Tape::backward`] simply walks the list backwards,
/// visiting each node once.
///
/// ```
/// use cada::tensor::{Tape, Tensor};
///
/// let mut tape = Tape::new(0);
/// let w = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
/// let sq = tape.mul(w, w).unwrap();
/// let loss = tape.sum(sq);
/// tape.backward(loss).unwrap();
/// assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
/// ```
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    differentiated: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl Tape {
    /// A fresh tape; `seed` drives dropout masks.
    pub fn new(seed: u64) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Enables dropout. Tapes start in evaluation mode.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    ///
    /// `None` before backward has run or for constant inputs. Leaves and
    /// parameters the loss does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v);
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter recorded on this tape, in recording
    /// order. A parameter recorded twice appears twice.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    fn node(&self, v: Var) -> &Node {
        self.check(v);
        &self.nodes[v.idx]
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        assert!(
            !self.differentiated,
            "tape already differentiated; start a new tape for the next forward pass"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    // ---------------------------------------------------------------- leaves

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf whose gradient can be read back with [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    // ----------------------------------------------------------- structural

    /// `[…, m, k] × [k, p]` or `[…, m, k] × […, k, p]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        if k != k2 || (sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let mut out = vec![0.0; batch_a * m * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch_a {
            let boff = if batch_b == 1 { 0 } else { bi * k * p };
            gemm_nn(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[boff..boff + k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, p]);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut shape = t.shape().to_vec();
        if shape.len() < 2 {
            shape.insert(0, 1);
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = t.numel() / (m * n).max(1);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        shape.swap(r - 2, r - 1);
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data().to_vec(),
        };
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Concatenates along the last dimension; all inputs share leading dims.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_cols", format!("{s:?} vs lead {lead:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data: out }, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::SliceCols(a, start), ng))
    }

    /// Row `i` of a 2-D tensor, as shape `[1, cols]`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || i >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {i} of {:?}", t.shape())));
        }
        let value = Tensor {
            shape: vec![1, t.cols()],
            data: t.row(i).to_vec(),
        };
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Row(a, i), ng))
    }

    // ----------------------------------------------------------- arithmetic

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), ng))
    }

    /// Adds a `[cols]` (or `[1, cols]`) bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (t, bt) = (self.value(a), self.value(bias));
        if bt.numel() != t.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", t.shape(), bt.shape()),
            ));
        }
        let c = t.cols();
        let b = bt.data();
        let data = t.data().iter().enumerate().map(|(i, x)| x + b[i % c]).collect();
        let shape = t.shape().to_vec();
        let ng = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, bias), ng))
    }

    /// Adds a one-element tensor to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("add_scalar", format!("{:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, s]);
        Ok(self.push(Tensor { shape, data }, Op::AddScalar(a, s), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x < 0.0 { 0.0 } else { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::Log { x: a, floor }, |x| if x < floor { floor.ln() } else { x.ln() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Entry at a flat index, as a one-element tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.numel() {
            return Err(Error::shape("pick", format!("index {index} of {}", t.numel())));
        }
        let v = t.data()[index];
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), ng))
    }

    /// Softmax over the last dimension after adding an optional `{0, −∞}`
    /// mask shaped like the last two dimensions of `scores`.
    ///
    /// Masked entries come out exactly zero and pass no gradient back. A row
    /// with no finite entry is an error rather than a row of NaNs.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&[f64]>) -> Result<Var> {
        let t = self.value(scores);
        let c = t.cols();
        let rows = t.rows();
        let mask_rows = match mask {
            None => 0,
            Some(m) => {
                let s = t.shape();
                let r = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
                if m.len() != r * c {
                    return Err(Error::shape(
                        "masked_softmax",
                        format!("mask of {} entries for scores {:?}", m.len(), s),
                    ));
                }
                r
            }
        };
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for row in 0..rows {
            let x = &src[row * c..(row + 1) * c];
            let m = mask.map(|m| {
                let mr = row % mask_rows;
                &m[mr * c..(mr + 1) * c]
            });
            let y = &mut out[row * c..(row + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                let v = x[j] + m.map_or(0.0, |m| m[j]);
                y[j] = v;
                if v > max || v.is_nan() {
                    max = v;
                }
            }
            if max.is_nan() {
                y.fill(f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMaskedRow { row });
            }
            let mut z = 0.0;
            for v in y.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in y.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.any_grad(&[scores]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(scores), ng))
    }

    /// Normalizes each last-dimension vector, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let f = t.cols();
        if self.value(gain).numel() != f || self.value(bias).numel() != f {
            return Err(Error::shape("layer_norm", format!("feature dim {f}")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut out = vec![0.0; t.numel()];
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let h = (row[j] - mean) * rs;
                xhat[r * f + j] = h;
                out[r * f + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows of a `[V, F]` table; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (v, f) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * f);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {id} of vocab {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let ng = self.any_grad(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), f],
                data: out,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let keep: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = zip_map(self.value(x).data(), &keep, |a, k| a * k);
        let shape = self.shape(x).to_vec();
        let ng = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Dropout { x, keep }, ng)
    }

    /// Pairwise biaffine scores gated by a binary `mask`:
    /// `out[i, j] = (q_i · W · k_jᵀ + b) · mask[i, j]`.
    ///
    /// Only the pairs where the mask is set are evaluated.
    pub fn masked_bilinear(
        &mut self,
        q: Var,
        k: Var,
        w: Var,
        b: Var,
        mask: &[f64],
    ) -> Result<Var> {
        let (sq, sk, sw) = (self.shape(q), self.shape(k), self.shape(w));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sw != [sq[1], sq[1]] {
            return Err(Error::shape(
                "masked_bilinear",
                format!("q {sq:?}, k {sk:?}, W {sw:?}"),
            ));
        }
        let (n, m, d) = (sq[0], sk[0], sq[1]);
        if mask.len() != n * m || !self.value(b).is_scalar() {
            return Err(Error::shape("masked_bilinear", "mask or bias size"));
        }
        let mut qw = vec![0.0; n * d];
        gemm_nn(self.value(q).data(), self.value(w).data(), &mut qw, n, d, d);
        let kd = self.value(k).data();
        let bias = self.value(b).data()[0];
        let mut out = vec![0.0; n * m];
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let gate = mask[i * m + j];
                if gate != 0.0 {
                    debug_assert_eq!(gate, 1.0, "masked_bilinear expects a binary mask");
                    out[i * m + j] = dot(&qw[i * d..(i + 1) * d], &kd[j * d..(j + 1) * d]) + bias;
                    pairs.push((i as u32, j as u32));
                }
            }
        }
        let ng = self.any_grad(&[q, k, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::MaskedBilinear {
                q,
                k,
                w,
                b,
                pairs,
                qw,
            },
            ng,
        ))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ------------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` with respect to every node.
    ///
    /// May run once per tape; a second call returns [`Error::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Detached);
        }
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        if !self.nodes[loss.idx].value.is_scalar() || !self.nodes[loss.idx].needs_grad {
            return Err(Error::Detached);
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf | Op::Param(_)) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.idx].value;
        // Gradient buffer of `v`, or None when `v` does not need one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.idx].needs_grad {
                    Some(
                        grads[v.idx]
                            .get_or_insert_with(|| vec![0.0; nodes[v.idx].value.numel()]),
                    )
                } else {
                    None
                }
            }};
        }
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = sb[sb.len() - 1];
                let batch = ta.numel() / (m * k);
                let b_batched = sb.len() > 2;
                let (da, db) = (ta.data().to_vec(), tb.data().to_vec());
                if let Some(ga) = slot!(*a) {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * p } else { 0 };
                        gemm_nt(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &db[boff..boff + k * p],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * p } else { 0 };
                        gemm_tn(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[boff..boff + k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let s = y.shape();
                let r = s.len();
                // y is [.., n, m]; input was [.., m, n].
                let (n, m) = (s[r - 2], s[r - 1]);
                let batch = y.numel() / (n * m).max(1);
                if let Some(ga) = slot!(*a) {
                    for bi in 0..batch {
                        let off = bi * n * m;
                        for i in 0..n {
                            for j in 0..m {
                                ga[off + j * n + i] += g[off + i * m + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::AddConst(a) => {
                if let Some(ga) = slot!(*a) {
                    add_assign(ga, g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if let Some(gp) = slot!(p) {
                        for r in 0..rows {
                            add_assign(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + off..r * total + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let w = y.cols();
                let rows = y.rows();
                if let Some(ga) = slot!(*a) {
                    for r in 0..rows {
                        add_assign(
                            &mut ga[r * c + start..r * c + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Row(a, i) => {
                let c = y.cols();
                if let Some(ga) = slot!(*a) {
                    add_assign(&mut ga[i * c..(i + 1) * c], g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_assign(gb, g);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot!(*a) {
                    add_assign(ga, g);
                }
                let c = y.cols();
                if let Some(gb) = slot!(*bias) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                }
            }
            Op::AddScalar(a, s) => {
                if let Some(ga) = slot!(*a) {
                    add_assign(ga, g);
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += g.iter().sum::<f64>();
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot!(*a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += gi * f;
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data().to_vec();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data().to_vec();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        let s = y.data()[i];
                        ga[i] += g[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Log { x, floor } => {
                let xd = val(*x).data().to_vec();
                if let Some(ga) = slot!(*x) {
                    for i in 0..g.len() {
                        if xd[i] > *floor {
                            ga[i] += g[i] / xd[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                if let Some(ga) = slot!(*a) {
                    for d in ga.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Pick(a, index) => {
                if let Some(ga) = slot!(*a) {
                    ga[*index] += g[0];
                }
            }
            Op::Softmax(a) => {
                let c = y.cols();
                if let Some(ga) = slot!(*a) {
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let inner = dot(yr, gr);
                        let out = &mut ga[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let f = y.cols();
                let rows = y.rows();
                let gv = val(*gain).data().to_vec();
                if let Some(gx) = slot!(*x) {
                    for r in 0..rows {
                        let gr = &g[r * f..(r + 1) * f];
                        let hr = &xhat[r * f..(r + 1) * f];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..f {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= f as f64;
                        mean_dh /= f as f64;
                        for j in 0..f {
                            let d = gr[j] * gv[j];
                            gx[r * f + j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for i in 0..g.len() {
                        gg[i % f] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for i in 0..g.len() {
                        gb[i % f] += g[i];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let f = y.cols();
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * f..(id + 1) * f], &g[r * f..(r + 1) * f]);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = slot!(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * keep[i];
                    }
                }
            }
            Op::MaskedBilinear {
                q,
                k,
                w,
                b,
                pairs,
                qw,
            } => {
                let m = y.cols();
                let (qd, kd, wd) = (
                    val(*q).data().to_vec(),
                    val(*k).data().to_vec(),
                    val(*w).data().to_vec(),
                );
                let d = val(*w).cols();
                let n = qd.len() / d;
                let mut dqw = vec![0.0; n * d];
                let mut dk = vec![0.0; kd.len()];
                let mut gsum = 0.0;
                for &(i, j) in pairs {
                    let (i, j) = (i as usize, j as usize);
                    let gij = g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    gsum += gij;
                    for t in 0..d {
                        dqw[i * d + t] += gij * kd[j * d + t];
                        dk[j * d + t] += gij * qw[i * d + t];
                    }
                }
                if let Some(gk) = slot!(*k) {
                    add_assign(gk, &dk);
                }
                if let Some(gb) = slot!(*b) {
                    gb[0] += gsum;
                }
                if let Some(gq) = slot!(*q) {
                    gemm_nt(&dqw, &wd, gq, n, d, d);
                }
                if let Some(gw) = slot!(*w) {
                    gemm_tn(&qd, &dqw, gw, n, d, d);
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
