//! Encoder/decoder stacks with post-norm residual sublayers.
//!
//! Batches are packed: every sequence of a batch is laid end to end along
//! the row axis, so position-wise work (projections, feed-forward, norms,
//! the vocabulary projection) runs as one matrix product. Only the mixing
//! step inside attention and convolution is done per sequence.

pub(crate) mod checkpoint;
mod config;
mod incremental;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{short_hash, AttentionVariant, ModelConfig};
pub use incremental::DecodeState;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, conv_mixer, fixed_span_bias, sag_apply, t5_bias_var, AttentionParams,
    ConvMixerParams, HeadBias, SpanBias, SpanMode,
};
use crate::layers::{xavier_uniform, LayerNorm, Linear, Mode};
use crate::scan::{BOS, EOS, PAD};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Reduction, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Mixer {
    Attention(AttentionParams),
    Conv(ConvMixerParams),
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    mixer: Mixer,
    gate: Option<ParamId>,
    mix_norm: LayerNorm,
    cross: Option<(AttentionParams, Option<ParamId>, LayerNorm)>,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Packed activations of a batch together with each sequence's row range.
#[derive(Clone, Debug)]
pub struct Packed {
    pub value: Var,
    /// `(first row, length)` per sequence.
    pub segments: Vec<(usize, usize)>,
}

/// One training pair as token ids, without reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl EncodedPair {
    /// Source ids followed by end-of-sequence.
    pub fn encoder_input(&self) -> Vec<usize> {
        let mut s = self.source.clone();
        s.push(EOS);
        s
    }

    /// Begin-of-sequence followed by the target.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.target.len() + 1);
        s.push(BOS);
        s.extend(&self.target);
        s
    }

    /// Target followed by end-of-sequence.
    pub fn gold(&self) -> Vec<usize> {
        let mut s = self.target.clone();
        s.push(EOS);
        s
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    enc_span: Option<SpanBias>,
    dec_span: Option<SpanBias>,
    output: Linear,
    positions: Tensor,
}

fn sinusoidal(max_positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros([max_positions, d]);
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-(2.0 * i as f64) / d as f64);
            let angle = pos as f64 * freq;
            t.data_mut()[pos * d + 2 * i] = angle.sin() as Float;
            t.data_mut()[pos * d + 2 * i + 1] = angle.cos() as Float;
        }
    }
    t
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> crate::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let src_embed = store.insert(
            "encoder.embed_tokens",
            xavier_uniform(&[config.src_vocab, d], config.src_vocab, d, &mut rng),
        );
        let tgt_embed = store.insert(
            "decoder.embed_tokens",
            xavier_uniform(&[config.tgt_vocab, d], config.tgt_vocab, d, &mut rng),
        );
        let build = |side: Side, store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<Vec<Layer>> {
            (0..config.layers)
                .map(|i| {
                    let name = format!("{}.layers.{i}", side.as_str());
                    let mixer = match config.variant {
                        AttentionVariant::SagConv => Mixer::Conv(ConvMixerParams::new(
                            store,
                            &format!("{name}.conv"),
                            d,
                            config.kernel_size,
                            rng,
                        )?),
                        _ => Mixer::Attention(AttentionParams::new(
                            store,
                            &format!("{name}.self_attn"),
                            d,
                            config.heads,
                            rng,
                        )?),
                    };
                    let beta0 = match side {
                        Side::Encoder => config.beta0_encoder,
                        Side::Decoder => config.beta0_decoder,
                    } as Float;
                    let gate = config
                        .variant
                        .gated()
                        .then(|| store.insert(format!("{name}.gate"), Tensor::new([1], vec![beta0]).unwrap()));
                    let mix_norm = LayerNorm::new(store, &format!("{name}.self_attn_norm"), d);
                    let cross = match side {
                        Side::Encoder => None,
                        Side::Decoder => {
                            let p = AttentionParams::new(
                                store,
                                &format!("{name}.cross_attn"),
                                d,
                                config.heads,
                                rng,
                            )?;
                            let gate = (config.variant.gated() && config.gate_cross_attention).then(|| {
                                store.insert(
                                    format!("{name}.cross_gate"),
                                    Tensor::new([1], vec![beta0]).unwrap(),
                                )
                            });
                            Some((p, gate, LayerNorm::new(store, &format!("{name}.cross_attn_norm"), d)))
                        }
                    };
                    let ffn = FeedForward {
                        fc1: Linear::new(store, &format!("{name}.ffn.fc1"), d, config.ffn_dim, rng),
                        fc2: Linear::new(store, &format!("{name}.ffn.fc2"), config.ffn_dim, d, rng),
                    };
                    let ffn_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d);
                    Ok(Layer {
                        mixer,
                        gate,
                        mix_norm,
                        cross,
                        ffn,
                        ffn_norm,
                    })
                })
                .collect()
        };
        let encoder = build(Side::Encoder, &mut store, &mut rng)?;
        let decoder = build(Side::Decoder, &mut store, &mut rng)?;
        let span_for = |side: Side, store: &mut ParamStore| match config.variant {
            AttentionVariant::SagFixedSpan => Some(SpanBias::fixed(config.span)),
            AttentionVariant::SagT5 => Some(SpanBias::t5(
                store,
                &format!("{}.rel_bias", side.as_str()),
                config.layers,
                config.heads,
                config.span,
            )),
            _ => None,
        };
        let enc_span = span_for(Side::Encoder, &mut store);
        let dec_span = span_for(Side::Decoder, &mut store);
        let output = Linear::new(&mut store, "decoder.output_proj", d, config.tgt_vocab, &mut rng);
        let positions = sinusoidal(config.max_positions, d);
        Ok(Seq2Seq {
            config,
            params: store,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            enc_span,
            dec_span,
            output,
            positions,
        })
    }

    /// Learned relative-bias table of one side, if the variant has one.
    pub fn bias_table(&self, side: Side) -> Option<&Tensor> {
        let span = match side {
            Side::Encoder => self.enc_span,
            Side::Decoder => self.dec_span,
        };
        span.and_then(|s| s.table).map(|id| self.params.get(id))
    }

    /// Gate parameters (β) of the self-mixing sublayers, one per layer.
    pub fn gate_params(&self, side: Side) -> Vec<ParamId> {
        let layers = match side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        };
        layers.iter().filter_map(|l| l.gate).collect()
    }

    fn drop_p(&self) -> Float {
        self.config.dropout as Float
    }

    /// Token embedding scaled by `sqrt(d)` plus the sinusoidal position
    /// code, for several sequences packed along the rows.
    pub fn embed_packed(
        &self,
        g: &mut Graph<'_>,
        seqs: &[&[usize]],
        side: Side,
        mode: &mut Mode,
    ) -> Result<Packed> {
        let d = self.config.embed_dim;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > self.config.max_positions {
                return Err(TensorError::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_positions,
                });
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            for p in 0..s.len() {
                pos.extend_from_slice(self.positions.row(p));
            }
        }
        let table = g.param(match side {
            Side::Encoder => self.src_embed,
            Side::Decoder => self.tgt_embed,
        });
        let tok = g.embedding(table, &ids)?;
        let tok = g.scale(tok, (d as Float).sqrt());
        let pos = g.constant(Tensor::new([ids.len(), d], pos)?);
        let x = g.add(tok, pos)?;
        let x = mode.dropout(g, x, self.drop_p());
        Ok(Packed { value: x, segments })
    }

    /// Embedding of a single sequence.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[usize], side: Side, mode: &mut Mode) -> Result<Var> {
        Ok(self.embed_packed(g, &[tokens], side, mode)?.value)
    }

    fn self_bias(
        &self,
        g: &mut Graph<'_>,
        side: Side,
        layer: usize,
        t: usize,
        cache: &mut HashMap<usize, HeadBias>,
    ) -> Result<Option<HeadBias>> {
        let span = match side {
            Side::Encoder => self.enc_span,
            Side::Decoder => self.dec_span,
        };
        let Some(span) = span else { return Ok(None) };
        if let Some(b) = cache.get(&t) {
            return Ok(Some(b.clone()));
        }
        let bias = match span.mode {
            SpanMode::Fixed => HeadBias::Shared(g.constant(fixed_span_bias(t, span.span))),
            SpanMode::T5 => {
                let table = g.param(span.table.expect("t5 span owns a table"));
                HeadBias::PerHead(t5_bias_var(g, table, layer, t, side == Side::Decoder)?)
            }
        };
        cache.insert(t, bias.clone());
        Ok(Some(bias))
    }

    fn concat(g: &mut Graph<'_>, parts: Vec<Var>) -> Result<Var> {
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    fn self_mix(
        &self,
        g: &mut Graph<'_>,
        layer: &Layer,
        index: usize,
        x: &Packed,
        side: Side,
        mode: &mut Mode,
    ) -> Result<Var> {
        let causal = side == Side::Decoder;
        match &layer.mixer {
            Mixer::Attention(p) => {
                let q = p.q.forward(g, x.value)?;
                let k = p.k.forward(g, x.value)?;
                let v = p.v.forward(g, x.value)?;
                let mut cache = HashMap::new();
                let mut outs = Vec::with_capacity(x.segments.len());
                for &(start, len) in &x.segments {
                    let (qs, ks, vs) = if x.segments.len() == 1 {
                        (q, k, v)
                    } else {
                        (
                            g.slice_rows(q, start, len)?,
                            g.slice_rows(k, start, len)?,
                            g.slice_rows(v, start, len)?,
                        )
                    };
                    let bias = self.self_bias(g, side, index, len, &mut cache)?;
                    // learned decoder biases already carry the causal mask
                    let add_mask = causal && !matches!(bias, Some(HeadBias::PerHead(_)));
                    outs.push(attend(
                        g,
                        qs,
                        ks,
                        vs,
                        p.heads,
                        bias.as_ref(),
                        add_mask,
                        mode,
                        self.config.attention_dropout as Float,
                    )?);
                }
                let heads = Self::concat(g, outs)?;
                p.out.forward(g, heads)
            }
            Mixer::Conv(c) => {
                let mut outs = Vec::with_capacity(x.segments.len());
                for &(start, len) in &x.segments {
                    let xs = if x.segments.len() == 1 {
                        x.value
                    } else {
                        g.slice_rows(x.value, start, len)?
                    };
                    outs.push(conv_mixer(g, xs, c, causal)?);
                }
                Self::concat(g, outs)
            }
        }
    }

    fn cross_attend(
        &self,
        g: &mut Graph<'_>,
        p: &AttentionParams,
        x: &Packed,
        memory: &Packed,
        mode: &mut Mode,
    ) -> Result<Var> {
        let q = p.q.forward(g, x.value)?;
        let k = p.k.forward(g, memory.value)?;
        let v = p.v.forward(g, memory.value)?;
        let mut outs = Vec::with_capacity(x.segments.len());
        for (&(qs, ql), &(ks, kl)) in x.segments.iter().zip(&memory.segments) {
            let (qv, kv, vv) = if x.segments.len() == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, qs, ql)?,
                    g.slice_rows(k, ks, kl)?,
                    g.slice_rows(v, ks, kl)?,
                )
            };
            outs.push(attend(
                g,
                qv,
                kv,
                vv,
                p.heads,
                None,
                false,
                mode,
                self.config.attention_dropout as Float,
            )?);
        }
        let heads = Self::concat(g, outs)?;
        p.out.forward(g, heads)
    }

    /// `layer_norm(residual + dropout(h))`.
    fn residual(
        &self,
        g: &mut Graph<'_>,
        residual: Var,
        h: Var,
        norm: &LayerNorm,
        mode: &mut Mode,
    ) -> Result<Var> {
        let h = mode.dropout(g, h, self.drop_p());
        let s = g.add(residual, h)?;
        norm.forward(g, s)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layer(
        &self,
        g: &mut Graph<'_>,
        layer: &Layer,
        index: usize,
        x: Packed,
        memory: Option<&Packed>,
        side: Side,
        mode: &mut Mode,
    ) -> Result<Packed> {
        let mut h = self.self_mix(g, layer, index, &x, side, mode)?;
        if let Some(beta) = layer.gate {
            let beta = g.param(beta);
            h = sag_apply(g, h, beta)?;
        }
        let mut value = self.residual(g, x.value, h, &layer.mix_norm, mode)?;
        if let (Some((p, gate, norm)), Some(memory)) = (&layer.cross, memory) {
            let cur = Packed {
                value,
                segments: x.segments.clone(),
            };
            let mut h = self.cross_attend(g, p, &cur, memory, mode)?;
            if let Some(beta) = gate {
                let beta = g.param(*beta);
                h = sag_apply(g, h, beta)?;
            }
            value = self.residual(g, value, h, norm, mode)?;
        }
        let h = layer.ffn.forward(g, value)?;
        let value = self.residual(g, value, h, &layer.ffn_norm, mode)?;
        Ok(Packed {
            value,
            segments: x.segments,
        })
    }

    /// Runs the encoder stack over packed source sequences (ids as fed to
    /// the encoder, i.e. already terminated).
    pub fn encode_packed(&self, g: &mut Graph<'_>, sources: &[&[usize]], mode: &mut Mode) -> Result<Packed> {
        let mut x = self.embed_packed(g, sources, Side::Encoder, mode)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            x = self.run_layer(g, layer, i, x, None, Side::Encoder, mode)?;
        }
        Ok(x)
    }

    pub fn encode(&self, g: &mut Graph<'_>, source: &[usize], mode: &mut Mode) -> Result<Var> {
        Ok(self.encode_packed(g, &[source], mode)?.value)
    }

    /// Decoder logits `[Σ t × |V_tgt|]` for packed prefixes, each attending
    /// to the matching sequence of `memory`.
    pub fn decode_packed(
        &self,
        g: &mut Graph<'_>,
        prefixes: &[&[usize]],
        memory: &Packed,
        mode: &mut Mode,
    ) -> Result<Packed> {
        if prefixes.len() != memory.segments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: vec![prefixes.len()],
                right: vec![memory.segments.len()],
            });
        }
        let mut x = self.embed_packed(g, prefixes, Side::Decoder, mode)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = self.run_layer(g, layer, i, x, Some(memory), Side::Decoder, mode)?;
        }
        let logits = self.output.forward(g, x.value)?;
        Ok(Packed {
            value: logits,
            segments: x.segments,
        })
    }

    /// Logits for every position of one prefix, which must start with
    /// begin-of-sequence. `memory` is a single encoded source.
    pub fn decode_step(&self, g: &mut Graph<'_>, prefix: &[usize], memory: Var, mode: &mut Mode) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(TensorError::IndexOutOfRange {
                index: prefix.first().copied().unwrap_or(PAD),
                bound: BOS,
            });
        }
        let t = g.value(memory).rows();
        let memory = Packed {
            value: memory,
            segments: vec![(0, t)],
        };
        Ok(self.decode_packed(g, &[prefix], &memory, mode)?.value)
    }

    /// Summed token cross-entropy of a batch scaled by `weight`, plus the
    /// number of scored tokens.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        pairs: &[&EncodedPair],
        weight: Float,
        mode: &mut Mode,
    ) -> Result<(Var, usize)> {
        let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.encoder_input()).collect();
        let inputs: Vec<Vec<usize>> = pairs.iter().map(|p| p.decoder_input()).collect();
        let gold: Vec<usize> = pairs.iter().flat_map(|p| p.gold()).collect();
        let src_refs: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
        let in_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let memory = self.encode_packed(g, &src_refs, mode)?;
        let logits = self.decode_packed(g, &in_refs, &memory, mode)?;
        let loss = g.cross_entropy(logits.value, &gold, PAD, Reduction::Sum)?;
        let tokens = gold.iter().filter(|&&t| t != PAD).count();
        Ok((g.scale(loss, weight), tokens))
    }
}

/// Mean token negative log-likelihood over non-pad positions.
pub fn loss(g: &mut Graph<'_>, logits: Var, gold: &[usize], pad: usize) -> Result<Var> {
    g.cross_entropy(logits, gold, pad, Reduction::Mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: AttentionVariant) -> ModelConfig {
        ModelConfig {
            variant,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            ffn_dim: 16,
            span: 2,
            kernel_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = Seq2Seq::new(small(AttentionVariant::SagT5)).unwrap();
        for name in [
            "encoder.embed_tokens",
            "encoder.layers.0.self_attn.q_proj.weight",
            "encoder.layers.1.gate",
            "decoder.layers.0.cross_attn.out_proj.bias",
            "decoder.rel_bias",
            "decoder.output_proj.weight",
        ] {
            assert!(m.params.id(name).is_some(), "{name}");
        }
        assert!(m.params.id("decoder.layers.0.cross_gate").is_none());
    }

    #[test]
    fn shapes_and_position_limit() {
        let m = Seq2Seq::new(small(AttentionVariant::SagConv)).unwrap();
        let mut g = Graph::with_params(&m.params);
        let mut mode = Mode::eval();
        let enc = m.encode(&mut g, &[3, 4, 5, EOS], &mut mode).unwrap();
        assert_eq!(g.shape(enc), &[4, 8]);
        let logits = m.decode_step(&mut g, &[BOS, 3, 4], enc, &mut mode).unwrap();
        assert_eq!(g.shape(logits), &[3, 9]);
        assert!(m.decode_step(&mut g, &[3], enc, &mut mode).is_err());
        let long = vec![3; 65];
        assert!(matches!(
            m.encode(&mut g, &long, &mut mode),
            Err(TensorError::SequenceTooLong { len: 65, max: 64 })
        ));
        let empty = m.embed(&mut g, &[], Side::Encoder, &mut mode).unwrap();
        assert_eq!(g.value(empty).numel(), 0);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = Seq2Seq::new(small(AttentionVariant::Vanilla)).unwrap();
        let mut g = Graph::with_params(&m.params);
        assert!(m.embed(&mut g, &[99], Side::Encoder, &mut Mode::eval()).is_err());
    }
}
