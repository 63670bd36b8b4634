use std::borrow::Cow;

use rand::Rng;

use super::kernels::{gemm, sigmoid, MatRef};
use super::{Float, Gradients, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on both sides; needs odd `k`.
    Symmetric,
    /// `k - 1` zeros on the left, so output `t` sees inputs `<= t` only.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Float),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        logits: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        padding: Padding,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        table: Var,
        offsets: Vec<Option<usize>>,
    },
    Dropout {
        x: Var,
        mask: Vec<Float>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<Float>,
        weight: Float,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A graph is meant to live for one forward/backward
/// pass and is not shared between threads.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Vec<Float>>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    /// A graph whose parameter leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf backed by a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let v = self.push_cow(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients) {
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.leaf_grads[v.0].as_ref()) {
                for (a, b) in grads.get_mut(ParamId(i)).iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_rank("matmul", 2)?;
        tb.expect_rank("matmul", 2)?;
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        ta.expect_rank("transpose", 2)?;
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg))
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).numel() == 1 {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Float, Float) -> Float) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if tb.numel() == 1 && ta.numel() != 1 {
            let s = tb.item();
            ta.data().iter().map(|&x| f(x, s)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    /// Elementwise sum; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`d` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = tx.cols();
        if tb.numel() != d || tx.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        if d > 0 {
            for row in out.data.chunks_mut(d) {
                row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += *b);
            }
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: Float) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the trailing axis of `logits + bias`.
    ///
    /// `bias` has the shape of `logits` or of one trailing row and may hold
    /// `-inf`; such positions get exactly zero weight and zero gradient.
    pub fn softmax(&mut self, logits: Var, bias: Option<Var>) -> Result<Var> {
        let tl = self.value(logits);
        let n = tl.cols();
        if tl.shape().is_empty() {
            return Err(TensorError::Rank {
                op: "softmax",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let tb = bias.map(|b| self.value(b));
        if let Some(tb) = tb {
            if tb.shape() != tl.shape() && tb.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    left: tl.shape().to_vec(),
                    right: tb.shape().to_vec(),
                });
            }
        }
        let mut out = tl.clone();
        if n > 0 {
            for (r, row) in out.data.chunks_mut(n).enumerate() {
                if let Some(tb) = tb {
                    let brow = if tb.numel() == n {
                        tb.data()
                    } else {
                        &tb.data()[r * n..(r + 1) * n]
                    };
                    row.iter_mut().zip(brow).for_each(|(v, b)| *v += *b);
                }
                let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
                if max == Float::NEG_INFINITY {
                    return Err(TensorError::DegenerateMask { row: r });
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let rg = self.needs(&[logits]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out, Op::Softmax { logits, bias }, rg))
    }

    /// Per-row standardization over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: Float) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        for p in [gain, shift] {
            if self.value(p).numel() != d || tx.shape().is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let rows = tx.numel().checked_div(d).unwrap_or(0);
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Float>() / d as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Length-preserving 1D convolution of `x[t×d_in]` with `kernel[k×d_in×d_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        tx.expect_rank("conv1d", 2)?;
        tk.expect_rank("conv1d", 3)?;
        let (t, din) = (tx.rows(), tx.cols());
        let (k, kin, dout) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if kin != din {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: tx.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        if padding == Padding::Symmetric && k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        let mut out = vec![0.0; t * dout];
        for (o, lo, hi, src) in conv_windows(t, k, padding) {
            gemm(
                MatRef::new(&tx.data()[src * din..(src + hi - lo) * din], hi - lo, din),
                MatRef::new(&tk.data()[o * din * dout..(o + 1) * din * dout], din, dout),
                1.0,
                &mut out[lo * dout..hi * dout],
            );
        }
        let rg = self.needs(&[x, kernel]);
        Ok(self.push(
            Tensor::new([t, dout], out)?,
            Op::Conv1d { x, kernel, padding },
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        tx.expect_rank("slice_rows", 2)?;
        let c = tx.cols();
        if start + len > tx.rows() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: tx.rows(),
            });
        }
        let out = Tensor::new([len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        tx.expect_rank("slice_cols", 2)?;
        let (r, c) = (tx.rows(), tx.cols());
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            tp.expect_rank("concat_rows", 2)?;
            if tp.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new([rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            tp.expect_rank("concat_cols", 2)?;
            if tp.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
            widths.push(tp.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new([r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Looks up rows of `table[v×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        tt.expect_rank("embedding", 2)?;
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Builds a tensor of `shape` whose entries are flat elements of `table`;
    /// `None` entries become `-inf`.
    pub fn gather(
        &mut self,
        table: Var,
        offsets: Vec<Option<usize>>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let tt = self.value(table);
        let mut data = Vec::with_capacity(offsets.len());
        for off in &offsets {
            match *off {
                Some(i) if i >= tt.numel() => {
                    return Err(TensorError::IndexOutOfRange {
                        index: i,
                        bound: tt.numel(),
                    })
                }
                Some(i) => data.push(tt.data()[i]),
                None => data.push(Float::NEG_INFINITY),
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(out, Op::Gather { table, offsets }, rg))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: Float, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<Float> = (0..n)
            .map(|_| {
                if (rng.gen::<f64>() as Float) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Float)
    }

    /// Gated linear unit over the trailing axis: `sigmoid(first half) * second half`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if !c.is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "glu",
                left: self.shape(x).to_vec(),
                right: vec![c / 2, c / 2],
            });
        }
        let gate = self.slice_cols(x, 0, c / 2)?;
        let signal = self.slice_cols(x, c / 2, c / 2)?;
        let gate = self.sigmoid(gate);
        self.mul(gate, signal)
    }

    /// Token cross-entropy of `logits[t×v]` against `targets`, skipping `pad`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: usize,
        reduction: Reduction,
    ) -> Result<Var> {
        let tl = self.value(logits);
        tl.expect_rank("cross_entropy", 2)?;
        let (t, v) = (tl.rows(), tl.cols());
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    index: target,
                    bound: v,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let sum: Float = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            count += 1;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        if count == 0 {
            return Err(TensorError::AllPadding);
        }
        let weight = match reduction {
            Reduction::Mean => 1.0 / count as Float,
            Reduction::Sum => 1.0,
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * weight),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let Graph {
            nodes, leaf_grads, ..
        } = self;
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backward_node(nodes, &mut grads, node, &g);
            if matches!(node.op, Op::Leaf | Op::Param) {
                match &mut leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// `(kernel offset, first output row, end output row, first source row)`
/// for every kernel tap that overlaps the sequence.
fn conv_windows(t: usize, k: usize, padding: Padding) -> Vec<(usize, usize, usize, usize)> {
    let left = match padding {
        Padding::Symmetric => (k - 1) / 2,
        Padding::Causal => k.saturating_sub(1),
    };
    (0..k)
        .filter_map(|o| {
            // output row i reads source row i + o - left
            let lo = left.saturating_sub(o);
            let hi = (t + left).saturating_sub(o).min(t);
            (lo < hi).then(|| (o, lo, hi, lo + o - left))
        })
        .collect()
}

fn slot<'a>(
    nodes: &[Node<'_>],
    grads: &'a mut [Option<Vec<Float>>],
    v: Var,
) -> Option<&'a mut Vec<Float>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

fn backward_node(
    nodes: &[Node<'_>],
    grads: &mut [Option<Vec<Float>>],
    node: &Node<'_>,
    g: &[Float],
) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let gm = MatRef::new(g, m, n);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(gm, MatRef::new(tb.data(), k, n).t(), 1.0, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(MatRef::new(ta.data(), m, k).t(), gm, 1.0, db);
            }
        }
        Op::Transpose(a) => {
            let ta = val(*a);
            let (m, n) = (ta.rows(), ta.cols());
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            let broadcast = val(*b).numel() != g.len();
            if let Some(db) = slot(nodes, grads, *b) {
                if broadcast {
                    db[0] += g.iter().sum::<Float>();
                } else {
                    add_into(db, g);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let broadcast = tb.numel() != ta.numel();
            if let Some(da) = slot(nodes, grads, *a) {
                if broadcast {
                    let s = tb.item();
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                } else {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gi * bi;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                if broadcast {
                    db[0] += g.iter().zip(ta.data()).map(|(gi, ai)| gi * ai).sum::<Float>();
                } else {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * ai;
                    }
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let d = db.len();
                if d > 0 {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Relu(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Softmax { logits, bias } => {
            let w = node.value.data();
            let n = node.value.cols();
            let mut dz = vec![0.0; w.len()];
            if n > 0 {
                for ((dzr, wr), gr) in dz.chunks_mut(n).zip(w.chunks(n)).zip(g.chunks(n)) {
                    let dot: Float = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dzr[j] = if wr[j] == 0.0 { 0.0 } else { wr[j] * (gr[j] - dot) };
                    }
                }
            }
            if let Some(dl) = slot(nodes, grads, *logits) {
                add_into(dl, &dz);
            }
            if let Some(b) = bias {
                if let Some(db) = slot(nodes, grads, *b) {
                    if db.len() == dz.len() {
                        add_into(db, &dz);
                    } else {
                        for row in dz.chunks(n) {
                            add_into(db, row);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            inv_std,
        } => {
            let d = val(*gain).numel();
            let gv = val(*gain).data();
            if let Some(dgain) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(dshift) = slot(nodes, grads, *shift) {
                for gr in g.chunks(d) {
                    add_into(dshift, gr);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let df = d as Float;
                let mut dh = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                    }
                    let sum_dh: Float = dh.iter().sum();
                    let sum_dh_h: Float = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxr[j] += is / df * (df * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Conv1d { x, kernel, padding } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let (t, din) = (tx.rows(), tx.cols());
            let (k, dout) = (tk.shape()[0], tk.shape()[2]);
            let windows = conv_windows(t, k, *padding);
            if let Some(dx) = slot(nodes, grads, *x) {
                for &(o, lo, hi, src) in &windows {
                    let len = hi - lo;
                    gemm(
                        MatRef::new(&g[lo * dout..hi * dout], len, dout),
                        MatRef::new(&tk.data()[o * din * dout..(o + 1) * din * dout], din, dout)
                            .t(),
                        1.0,
                        &mut dx[src * din..(src + len) * din],
                    );
                }
            }
            if let Some(dk) = slot(nodes, grads, *kernel) {
                for &(o, lo, hi, src) in &windows {
                    let len = hi - lo;
                    gemm(
                        MatRef::new(&tx.data()[src * din..(src + len) * din], len, din).t(),
                        MatRef::new(&g[lo * dout..hi * dout], len, dout),
                        1.0,
                        &mut dk[o * din * dout..(o + 1) * din * dout],
                    );
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.value.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (node.value.rows(), node.value.cols());
            let c = val(*x).cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    add_into(
                        &mut dx[i * c + start..i * c + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(dp) = slot(nodes, grads, *p) {
                    add_into(dp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (node.value.rows(), node.value.cols());
            let mut col = 0;
            for p in parts {
                let w = val(*p).cols();
                if let Some(dp) = slot(nodes, grads, *p) {
                    for i in 0..r {
                        add_into(
                            &mut dp[i * w..(i + 1) * w],
                            &g[i * total + col..i * total + col + w],
                        );
                    }
                }
                col += w;
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).cols();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Gather { table, offsets } => {
            if let Some(dt) = slot(nodes, grads, *table) {
                for (off, gi) in offsets.iter().zip(g) {
                    if let Some(i) = off {
                        dt[*i] += gi;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            probs,
            weight,
        } => {
            let v = val(*logits).cols();
            if let Some(dl) = slot(nodes, grads, *logits) {
                let s = g[0] * weight;
                for (r, &target) in targets.iter().enumerate() {
                    if target == *pad {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] += s * probs[r * v + j];
                    }
                    dl[r * v + target] -= s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.constant(Tensor::zeros([3, 2]));
        let p = g.matmul(z, m).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "dimension error in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    fn elementwise_add_mul_and_product_rule() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
        let p = g.mul(a, one).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
        let bad = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(g.add(a, bad).is_err());

        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.0]));
        let b = g.leaf(t(&[1], &[3.0]));
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[2], &[0.0, 0.0]));
        let w = g.softmax(l, None).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[0.0, Float::NEG_INFINITY]));
        let w = g.softmax(l, Some(b)).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 0.0]);
        let all = g.constant(t(&[2], &[Float::NEG_INFINITY; 2]));
        assert_eq!(
            g.softmax(l, Some(all)).unwrap_err(),
            TensorError::DegenerateMask { row: 0 }
        );
    }

    #[test]
    fn masked_logits_get_exactly_zero_gradient() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[1, 3], &[0.3, -1.2, 2.0]));
        let b = g.constant(t(&[1, 3], &[0.0, Float::NEG_INFINITY, 0.0]));
        let w = g.softmax(l, Some(b)).unwrap();
        let c = g.constant(t(&[1, 3], &[1.0, 5.0, -2.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let grad = g.grad(l).unwrap();
        assert_eq!(grad[1], 0.0);
        assert!(grad[0] != 0.0 && grad[2] != 0.0);
    }

    #[test]
    fn layer_norm_two_point_and_constant_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 3.0, 4.0, 4.0]));
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let shift = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.layer_norm(x, gain, shift, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn conv1d_identity_zero_and_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut k = Tensor::zeros([1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let k = g.constant(k);
        let y = g.conv1d(x, k, Padding::Symmetric).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(Tensor::zeros([3, 2, 5]));
        let y = g.conv1d(x, z, Padding::Causal).unwrap();
        assert_eq!(g.shape(y), &[3, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let even = g.constant(Tensor::zeros([2, 2, 2]));
        assert_eq!(
            g.conv1d(x, even, Padding::Symmetric).unwrap_err(),
            TensorError::EvenKernel(2)
        );
        assert!(g.conv1d(x, even, Padding::Causal).is_ok());
    }

    #[test]
    fn backward_linear_power_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);

        assert!(matches!(g.backward(x), Ok(())));
        let v = g.leaf(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(v).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn cross_entropy_uniform_and_all_pad() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros([2, 9]));
        let loss = g.cross_entropy(l, &[3, 4], 0, Reduction::Mean).unwrap();
        assert!((g.value(loss).item() - (9.0 as Float).ln()).abs() < 1e-12);
        assert_eq!(
            g.cross_entropy(l, &[0, 0], 0, Reduction::Mean).unwrap_err(),
            TensorError::AllPadding
        );
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
        let y = g.dropout(x, 0.5, &mut rng);
        assert!(g.value(y).data().iter().zip([1.0, 2.0, 3.0]).all(|(v, o)| *v == 0.0 || *v == 2.0 * o));
    }
}
