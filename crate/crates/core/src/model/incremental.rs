//! Token-by-token decoding with cached keys, values and convolution inputs.
//!
//! Decoder self-mixing is causal, so every layer's output at a position is
//! final once computed. Each step therefore only runs the newest position
//! of every active sequence through the stack.

use super::{Mixer, Seq2Seq};
use crate::attention::{attend, conv_mixer, relative_bin, sag_apply, HeadBias, SpanMode};
use crate::layers::Mode;
use crate::tensor::{Float, Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
struct LayerCache {
    /// Self-attention keys and values, or convolution inputs (in `keys`).
    keys: Vec<Float>,
    values: Vec<Float>,
    cross_keys: Tensor,
    cross_values: Tensor,
}

impl Default for LayerCache {
    fn default() -> Self {
        LayerCache {
            keys: Vec::new(),
            values: Vec::new(),
            cross_keys: Tensor::zeros([0, 0]),
            cross_values: Tensor::zeros([0, 0]),
        }
    }
}

/// Decoding state of a batch of sequences.
#[derive(Clone, Debug)]
pub struct DecodeState {
    /// `[sequence][layer]`.
    caches: Vec<Vec<LayerCache>>,
    /// Tokens fed so far per sequence.
    lengths: Vec<usize>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn fed(&self, seq: usize) -> usize {
        self.lengths[seq]
    }
}

fn rows(data: &[Float], d: usize) -> usize {
    data.len() / d
}

impl Seq2Seq {
    /// Prepares decoding against encoder outputs, one `[t × d]` tensor per
    /// sequence.
    pub fn start_decode(&self, memories: &[Tensor]) -> Result<DecodeState> {
        let d = self.config.embed_dim;
        let mut caches: Vec<Vec<LayerCache>> = vec![vec![LayerCache::default(); self.decoder.len()]; memories.len()];
        if !memories.is_empty() {
            let mut g = Graph::with_params(&self.params);
            let mut data = Vec::new();
            for m in memories {
                if m.cols() != d {
                    return Err(TensorError::ShapeMismatch {
                        op: "start_decode",
                        left: m.shape().to_vec(),
                        right: vec![d],
                    });
                }
                data.extend_from_slice(m.data());
            }
            let total = rows(&data, d);
            let packed = g.constant(Tensor::new([total, d], data)?);
            for (l, layer) in self.decoder.iter().enumerate() {
                let (p, _, _) = layer.cross.as_ref().expect("decoder layers attend to the encoder");
                let k = p.k.forward(&mut g, packed)?;
                let v = p.v.forward(&mut g, packed)?;
                let mut start = 0;
                for (s, m) in memories.iter().enumerate() {
                    let n = m.rows();
                    let slice = |var: Var| {
                        Tensor::new([n, d], g.value(var).data()[start * d..(start + n) * d].to_vec())
                    };
                    caches[s][l].cross_keys = slice(k)?;
                    caches[s][l].cross_values = slice(v)?;
                    start += n;
                }
            }
        }
        Ok(DecodeState {
            lengths: vec![0; memories.len()],
            caches,
        })
    }

    /// Feeds `tokens[b]` to sequence `active[b]` and returns next-token
    /// logits `[|active| × |V_tgt|]`.
    pub fn decode_next(&self, state: &mut DecodeState, active: &[usize], tokens: &[usize]) -> Result<Tensor> {
        if active.len() != tokens.len() {
            return Err(TensorError::ShapeMismatch {
                op: "decode_next",
                left: vec![active.len()],
                right: vec![tokens.len()],
            });
        }
        let d = self.config.embed_dim;
        let mut g = Graph::with_params(&self.params);
        let mut mode = Mode::eval();
        let mut pos = Vec::with_capacity(active.len() * d);
        for &s in active {
            let p = state.lengths[s];
            if p >= self.config.max_positions {
                return Err(TensorError::SequenceTooLong {
                    len: p + 1,
                    max: self.config.max_positions,
                });
            }
            pos.extend_from_slice(self.positions.row(p));
        }
        let table = g.param(self.tgt_embed);
        let tok = g.embedding(table, tokens)?;
        let tok = g.scale(tok, (d as Float).sqrt());
        let pos = g.constant(Tensor::new([active.len(), d], pos)?);
        let mut x = g.add(tok, pos)?;
        let single = |g: &mut Graph<'_>, v: Var, b: usize| -> Result<Var> {
            if active.len() == 1 {
                Ok(v)
            } else {
                g.slice_rows(v, b, 1)
            }
        };
        for (l, layer) in self.decoder.iter().enumerate() {
            let mut outs = Vec::with_capacity(active.len());
            let h = match &layer.mixer {
                Mixer::Attention(p) => {
                    let q = p.q.forward(&mut g, x)?;
                    let k = p.k.forward(&mut g, x)?;
                    let v = p.v.forward(&mut g, x)?;
                    for (b, &s) in active.iter().enumerate() {
                        let cache = &mut state.caches[s][l];
                        cache.keys.extend_from_slice(g.value(k).row(b));
                        cache.values.extend_from_slice(g.value(v).row(b));
                        let t = rows(&cache.keys, d);
                        let kc = g.constant(Tensor::new([t, d], cache.keys.clone())?);
                        let vc = g.constant(Tensor::new([t, d], cache.values.clone())?);
                        let bias = self.last_row_bias(&mut g, l, t)?;
                        let qb = single(&mut g, q, b)?;
                        outs.push(attend(&mut g, qb, kc, vc, p.heads, bias.as_ref(), false, &mut mode, 0.0)?);
                    }
                    let heads = Self::concat(&mut g, outs)?;
                    p.out.forward(&mut g, heads)?
                }
                Mixer::Conv(c) => {
                    let k = c.kernel_size;
                    for (b, &s) in active.iter().enumerate() {
                        let cache = &mut state.caches[s][l];
                        cache.keys.extend_from_slice(g.value(x).row(b));
                        let t = rows(&cache.keys, d);
                        let mut window = vec![0.0; k.saturating_sub(t) * d];
                        window.extend_from_slice(&cache.keys[t.saturating_sub(k) * d..]);
                        let w = g.constant(Tensor::new([k, d], window)?);
                        let y = conv_mixer(&mut g, w, c, true)?;
                        outs.push(g.slice_rows(y, k - 1, 1)?);
                    }
                    Self::concat(&mut g, outs)?
                }
            };
            let h = match layer.gate {
                Some(beta) => {
                    let beta = g.param(beta);
                    sag_apply(&mut g, h, beta)?
                }
                None => h,
            };
            x = self.residual(&mut g, x, h, &layer.mix_norm, &mut mode)?;
            let (p, gate, norm) = layer.cross.as_ref().expect("decoder layers attend to the encoder");
            let q = p.q.forward(&mut g, x)?;
            let mut outs = Vec::with_capacity(active.len());
            for (b, &s) in active.iter().enumerate() {
                let cache = &state.caches[s][l];
                let kc = g.constant(cache.cross_keys.clone());
                let vc = g.constant(cache.cross_values.clone());
                let qb = single(&mut g, q, b)?;
                outs.push(attend(&mut g, qb, kc, vc, p.heads, None, false, &mut mode, 0.0)?);
            }
            let heads = Self::concat(&mut g, outs)?;
            let mut h = p.out.forward(&mut g, heads)?;
            if let Some(beta) = gate {
                let beta = g.param(*beta);
                h = sag_apply(&mut g, h, beta)?;
            }
            x = self.residual(&mut g, x, h, norm, &mut mode)?;
            let h = layer.ffn.forward(&mut g, x)?;
            x = self.residual(&mut g, x, h, &layer.ffn_norm, &mut mode)?;
        }
        let logits = self.output.forward(&mut g, x)?;
        for &s in active {
            state.lengths[s] += 1;
        }
        Ok(g.value(logits).clone())
    }

    /// Bias of the newest query (position `t - 1`) over keys `0..t`.
    fn last_row_bias(&self, g: &mut Graph<'_>, layer: usize, t: usize) -> Result<Option<HeadBias>> {
        let Some(span) = self.dec_span else { return Ok(None) };
        let i = t - 1;
        Ok(Some(match span.mode {
            SpanMode::Fixed => {
                let row = (0..t)
                    .map(|j| if i - j > span.span { Float::NEG_INFINITY } else { 0.0 })
                    .collect();
                HeadBias::Shared(g.constant(Tensor::new([1, t], row)?))
            }
            SpanMode::T5 => {
                let table = self.params.get(span.table.expect("t5 span owns a table"));
                let (heads, bins) = (table.shape()[1], table.shape()[2]);
                let per = (0..heads)
                    .map(|h| {
                        let base = (layer * heads + h) * bins;
                        let row = (0..t).map(|j| table.data()[base + relative_bin(i, j, span.span)]).collect();
                        Ok(g.constant(Tensor::new([1, t], row)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                HeadBias::PerHead(per)
            }
        }))
    }
}
