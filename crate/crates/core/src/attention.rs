//! Multi-head attention and the mixing-sublayer variants built around it:
//! the self-attention gate, fixed-span and learned relative-position biases,
//! and a gated convolution used in place of self-attention.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::Error;
use crate::layers::{xavier_uniform, Linear, Mode};
use crate::tensor::{Float, Graph, Padding, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::ShapeMismatch {
                op: "attention heads",
                left: vec![dim],
                right: vec![heads],
            });
        }
        Ok(AttentionParams {
            q: Linear::new(store, &format!("{name}.q_proj"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k_proj"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v_proj"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out_proj"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Additive attention-logit bias for one query/key block.
#[derive(Clone, Debug)]
pub enum HeadBias {
    /// One `[t_q × t_k]` bias used by every head.
    Shared(Var),
    /// One `[t_q × t_k]` bias per head.
    PerHead(Vec<Var>),
}

/// `-inf` wherever key index `j` exceeds query index `i`.
pub fn causal_mask(t_q: usize, t_k: usize) -> Tensor {
    let mut m = Tensor::zeros([t_q, t_k]);
    for i in 0..t_q {
        for j in (i + 1)..t_k {
            m.data_mut()[i * t_k + j] = Float::NEG_INFINITY;
        }
    }
    m
}

/// `0` where `|i - j| <= span`, `-inf` elsewhere.
pub fn fixed_span_bias(t: usize, span: usize) -> Tensor {
    let mut m = Tensor::zeros([t, t]);
    for i in 0..t {
        for j in 0..t {
            if i.abs_diff(j) > span {
                m.data_mut()[i * t + j] = Float::NEG_INFINITY;
            }
        }
    }
    m
}

/// Relative-distance bin of key `j` seen from query `i`: `clamp(j - i, -s, s) + s`.
pub fn relative_bin(i: usize, j: usize, span: usize) -> usize {
    let d = (j as i64 - i as i64).clamp(-(span as i64), span as i64);
    (d + span as i64) as usize
}

/// Signed distance labels of the `2s + 1` bins.
pub fn bin_distances(span: usize) -> Vec<i64> {
    (-(span as i64)..=span as i64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanMode {
    Fixed,
    T5,
}

/// Span restriction for one stack side. The learned mode owns a table of
/// shape `[layers × heads × (2s + 1)]`.
#[derive(Clone, Copy, Debug)]
pub struct SpanBias {
    pub span: usize,
    pub mode: SpanMode,
    pub table: Option<ParamId>,
}

impl SpanBias {
    pub fn fixed(span: usize) -> Self {
        SpanBias {
            span,
            mode: SpanMode::Fixed,
            table: None,
        }
    }

    /// Zero-initialized learned table.
    pub fn t5(store: &mut ParamStore, name: &str, layers: usize, heads: usize, span: usize) -> Self {
        let table = store.insert(name, Tensor::zeros([layers, heads, 2 * span + 1]));
        SpanBias {
            span,
            mode: SpanMode::T5,
            table: Some(table),
        }
    }
}

fn t5_offsets(
    table_shape: &[usize],
    layer: usize,
    head: usize,
    t: usize,
    causal: bool,
) -> Result<Vec<Option<usize>>> {
    let (layers, heads, bins) = match table_shape {
        &[l, h, b] if b % 2 == 1 => (l, h, b),
        other => {
            return Err(TensorError::Rank {
                op: "t5_bias",
                expected: 3,
                shape: other.to_vec(),
            })
        }
    };
    if layer >= layers {
        return Err(TensorError::IndexOutOfRange {
            index: layer,
            bound: layers,
        });
    }
    if head >= heads {
        return Err(TensorError::IndexOutOfRange {
            index: head,
            bound: heads,
        });
    }
    let span = bins / 2;
    let base = (layer * heads + head) * bins;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            out.push(if causal && j > i {
                None
            } else {
                Some(base + relative_bin(i, j, span))
            });
        }
    }
    Ok(out)
}

/// Per-head `[t × t]` bias matrices looked up from a learned table.
pub fn t5_bias(table: &Tensor, layer: usize, t: usize, causal: bool) -> Result<Vec<Tensor>> {
    let heads = table.shape().get(1).copied().unwrap_or(0);
    (0..heads)
        .map(|h| {
            let data = t5_offsets(table.shape(), layer, h, t, causal)?
                .into_iter()
                .map(|o| o.map_or(Float::NEG_INFINITY, |o| table.data()[o]))
                .collect();
            Tensor::new([t, t], data)
        })
        .collect()
}

/// Differentiable version of [`t5_bias`] reading from a table on the graph.
pub fn t5_bias_var(
    g: &mut Graph<'_>,
    table: Var,
    layer: usize,
    t: usize,
    causal: bool,
) -> Result<Vec<Var>> {
    let shape = g.shape(table).to_vec();
    let heads = shape.get(1).copied().unwrap_or(0);
    (0..heads)
        .map(|h| {
            let offsets = t5_offsets(&shape, layer, h, t, causal)?;
            g.gather(table, offsets, [t, t])
        })
        .collect()
}

/// Scaled dot-product attention over already projected `q[t_q×d]`,
/// `k[t_k×d]`, `v[t_k×d]`, split into heads. Returns the concatenated head
/// outputs, before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&HeadBias>,
    causal: bool,
    mode: &mut Mode,
    attn_dropout: Float,
) -> Result<Var> {
    let d = g.value(q).cols();
    let (t_q, t_k) = (g.value(q).rows(), g.value(k).rows());
    let hd = d / heads;
    let scale = 1.0 / (hd as Float).sqrt();
    let mask = causal.then(|| g.constant(causal_mask(t_q, t_k)));
    let shared = match (bias, mask) {
        (Some(HeadBias::Shared(b)), Some(m)) => Some(g.add(*b, m)?),
        (Some(HeadBias::Shared(b)), None) => Some(*b),
        (None, m) => m,
        (Some(HeadBias::PerHead(_)), _) => None,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let head_bias = match bias {
            Some(HeadBias::PerHead(per)) => {
                let b = *per.get(h).ok_or(TensorError::IndexOutOfRange {
                    index: h,
                    bound: per.len(),
                })?;
                Some(match mask {
                    Some(m) => g.add(b, m)?,
                    None => b,
                })
            }
            _ => shared,
        };
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, hd)?,
                g.slice_cols(k, h * hd, hd)?,
                g.slice_cols(v, h * hd, hd)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, head_bias)?;
        let w = mode.dropout(g, w, attn_dropout);
        outs.push(g.matmul(w, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Full multi-head attention of one query sequence over one key/value sequence.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    x_q: Var,
    x_kv: Var,
    params: &AttentionParams,
    bias: Option<&HeadBias>,
    causal: bool,
    mode: &mut Mode,
    attn_dropout: Float,
) -> Result<Var> {
    let q = params.q.forward(g, x_q)?;
    let k = params.k.forward(g, x_kv)?;
    let v = params.v.forward(g, x_kv)?;
    let heads = attend(g, q, k, v, params.heads, bias, causal, mode, attn_dropout)?;
    params.out.forward(g, heads)
}

/// Scales a sublayer output by `sigmoid(beta)`, `beta` a one-element tensor.
pub fn sag_apply(g: &mut Graph<'_>, x: Var, beta: Var) -> Result<Var> {
    let gate = g.sigmoid(beta);
    g.mul(x, gate)
}

/// Convolution to `2d` channels followed by a GLU back to `d`.
#[derive(Clone, Copy, Debug)]
pub struct ConvMixerParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl ConvMixerParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(TensorError::EvenKernel(kernel_size));
        }
        let kernel = store.insert(
            format!("{name}.weight"),
            xavier_uniform(&[kernel_size, dim, 2 * dim], kernel_size * dim, 2 * dim, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([2 * dim]));
        Ok(ConvMixerParams {
            kernel,
            bias,
            kernel_size,
        })
    }
}

pub fn conv_mixer(g: &mut Graph<'_>, x: Var, params: &ConvMixerParams, causal: bool) -> Result<Var> {
    let kernel = g.param(params.kernel);
    let bias = g.param(params.bias);
    let padding = if causal {
        Padding::Causal
    } else {
        Padding::Symmetric
    };
    let y = g.conv1d(x, kernel, padding)?;
    let y = g.add_row(y, bias)?;
    g.glu(y)
}

/// Softmax of each head's relative-position bias over the distance bins.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPreferences {
    /// Distance label of each reported bin.
    pub distances: Vec<i64>,
    /// `[layer][head][bin]`.
    pub values: Vec<Vec<Vec<Float>>>,
}

/// Per-layer, per-head preference distributions over relative distances.
///
/// Decoder tables only report bins with distance `<= 0`, since later keys
/// are masked; the softmax is taken over the reported bins.
pub fn bias_preferences(table: &Tensor, decoder: bool) -> Result<BiasPreferences> {
    let &[layers, heads, bins] = table.shape() else {
        return Err(TensorError::Rank {
            op: "bias_preferences",
            expected: 3,
            shape: table.shape().to_vec(),
        });
    };
    let span = bins / 2;
    let keep: Vec<usize> = bin_distances(span)
        .iter()
        .enumerate()
        .filter(|(_, &d)| !decoder || d <= 0)
        .map(|(i, _)| i)
        .collect();
    let mut values = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let row = &table.data()[(l * heads + h) * bins..(l * heads + h + 1) * bins];
            let logits: Vec<Float> = keep.iter().map(|&i| row[i]).collect();
            let max = logits.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let exps: Vec<Float> = logits.iter().map(|b| (b - max).exp()).collect();
            let sum: Float = exps.iter().sum();
            per_head.push(exps.into_iter().map(|e| e / sum).collect());
        }
        values.push(per_head);
    }
    Ok(BiasPreferences {
        distances: keep.iter().map(|&i| i as i64 - span as i64).collect(),
        values,
    })
}

impl BiasPreferences {
    /// Writes `<side>.layer<l>.txt` per layer: a `#` header with the
    /// distance of each column, then one whitespace-separated row per head.
    pub fn write_files(&self, dir: &Path, side: &str) -> crate::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
        let mut paths = Vec::new();
        for (l, heads) in self.values.iter().enumerate() {
            let path = dir.join(format!("{side}.layer{l}.txt"));
            let mut text = String::from("# distance");
            for d in &self.distances {
                text.push_str(&format!(" {d}"));
            }
            text.push('\n');
            for row in heads {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&cells.join(" "));
                text.push('\n');
            }
            fs::write(&path, text).map_err(Error::file(&path))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Parses a file written by [`write_files`](Self::write_files):
    /// returns the distances and the per-head rows.
    pub fn read_file(path: &Path) -> crate::Result<(Vec<i64>, Vec<Vec<Float>>)> {
        let text = fs::read_to_string(path).map_err(Error::file(path))?;
        let mut lines = text.lines();
        let bad = |line: usize, message: &str| Error::Dataset {
            line,
            message: message.to_string(),
        };
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# distance"))
            .ok_or_else(|| bad(1, "missing distance header"))?;
        let distances = header
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| bad(1, "bad distance")))
            .collect::<crate::Result<Vec<i64>>>()?;
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                l.split_whitespace()
                    .map(|v| v.parse::<Float>().map_err(|_| bad(i + 2, "bad value")))
                    .collect()
            })
            .collect::<crate::Result<Vec<Vec<Float>>>>()?;
        Ok((distances, rows))
    }
}
