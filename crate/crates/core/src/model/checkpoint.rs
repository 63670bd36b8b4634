//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `S2SCKPT\0`, `u32` version, `u32` float
//! width of the writing build, `u64`-prefixed metadata JSON (model config and
//! vocabularies), `u64` step, `u32` parameter count, then per parameter a
//! `u32`-prefixed name, `u32` rank, `u64` dims and `f64` values. A trailing
//! flag byte announces optional Adam moments (`u64` step, then `m` and `v`
//! for every parameter in order).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Seq2Seq};
use crate::error::{Error, Result};
use crate::scan::Vocab;
use crate::tensor::{Float, ParamStore, Tensor};
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"S2SCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    src_vocab: Option<Vocab>,
    tgt_vocab: Option<Vocab>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Option<Vocab>,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<Float>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[Float]) {
    for &x in data {
        out.extend_from_slice(&(x as f64).to_le_bytes());
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(Error::file(&tmp))?;
        f.write_all(bytes).map_err(Error::file(&tmp))?;
        f.sync_all().map_err(Error::file(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::file(path))
}

impl Checkpoint {
    pub fn from_model(
        model: &Seq2Seq,
        src_vocab: Option<&Vocab>,
        tgt_vocab: Option<&Vocab>,
        step: u64,
        optimizer: Option<&AdamState>,
    ) -> Self {
        Checkpoint {
            config: model.config.clone(),
            src_vocab: src_vocab.cloned(),
            tgt_vocab: tgt_vocab.cloned(),
            step,
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(std::mem::size_of::<Float>() as u32).to_le_bytes());
        let meta = serde_json::to_string_pretty(&Meta {
            model: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
        })
        .expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    put_floats(&mut out, m);
                    put_floats(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let width = r.u32()?;
        if width != 4 && width != 8 {
            return Err(bad(format!("unsupported float width {width}")));
        }
        let meta_len = r.len()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| bad(format!("metadata: {e}")))?;
        meta.model.validate()?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            if params.id(&name).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("length overflow"))?;
            let data = r.floats(n)?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for id in params.ids() {
                    let n = r.len()?;
                    if n != params.get(id).numel() {
                        return Err(bad(format!("moment size mismatch for {}", params.name(id))));
                    }
                    m.push(r.floats(n)?);
                    v.push(r.floats(n)?);
                }
                Some(AdamState { step, m, v })
            }
            f => return Err(bad(format!("bad optimizer flag {f}"))),
        };
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config: meta.model,
            src_vocab: meta.src_vocab,
            tgt_vocab: meta.tgt_vocab,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::file(path))?;
        Self::from_bytes(&bytes)
    }

    /// Builds the model described by the stored config and fills it.
    pub fn to_model(&self) -> Result<Seq2Seq> {
        let mut model = Seq2Seq::new(self.config.clone())?;
        model.load_checkpoint(self)?;
        Ok(model)
    }
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (serde_json::Value::Object(a), serde_json::Value::Object(b)) =
        (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap())
    else {
        unreachable!("configs serialize to objects")
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("config.{k}: model {v}, checkpoint {}", b[k]))
        .collect()
}

impl Seq2Seq {
    /// Replaces every parameter with the checkpoint's. The config and the
    /// set of named shapes must match exactly; otherwise the error lists
    /// every difference.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut diff = config_diff(&self.config, &ckpt.config);
        for (name, t) in self.params.iter() {
            match ckpt.params.by_name(name) {
                None => diff.push(format!("{name}: missing from checkpoint")),
                Some(c) if c.shape() != t.shape() => diff.push(format!(
                    "{name}: model shape {:?}, checkpoint shape {:?}",
                    t.shape(),
                    c.shape()
                )),
                Some(_) => {}
            }
        }
        for (name, _) in ckpt.params.iter() {
            if self.params.id(name).is_none() {
                diff.push(format!("{name}: unexpected in checkpoint"));
            }
        }
        if !diff.is_empty() {
            return Err(bad(format!("mismatch: {}", diff.join("; "))));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let src = ckpt.params.by_name(self.params.name(id)).expect("checked above");
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;

    fn tiny(variant: AttentionVariant) -> ModelConfig {
        ModelConfig {
            variant,
            layers: 1,
            heads: 2,
            embed_dim: 4,
            ffn_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = Seq2Seq::new(tiny(AttentionVariant::SagT5)).unwrap();
        let adam = AdamState::new(&model.params);
        let vocab = Vocab::from_words(["a", "b"]);
        let ckpt = Checkpoint::from_model(&model, Some(&vocab), None, 7, Some(&adam));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_model().unwrap().params, model.params);
    }

    #[test]
    fn mismatch_names_parameters() {
        let ckpt = Checkpoint::from_model(&Seq2Seq::new(tiny(AttentionVariant::Sag)).unwrap(), None, None, 0, None);
        let mut other = Seq2Seq::new(tiny(AttentionVariant::Vanilla)).unwrap();
        let msg = other.load_checkpoint(&ckpt).unwrap_err().to_string();
        assert!(msg.contains("config.variant"), "{msg}");
        assert!(msg.contains("encoder.layers.0.gate: unexpected"), "{msg}");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ckpt = Checkpoint::from_model(&Seq2Seq::new(tiny(AttentionVariant::Vanilla)).unwrap(), None, None, 0, None);
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
