//! Small parameterized building blocks shared by the attention and model code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Float, Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Fan-based uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a) as Float).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Affine map `x · W + b` with `W` stored as `[d_in × d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([d_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: Float = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::full([d], 1.0)),
            shift: store.insert(format!("{name}.shift"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.layer_norm(x, gain, shift, Self::EPS)
    }
}

/// Train/eval switch for a forward pass. Training carries the dropout RNG.
pub struct Mode {
    rng: Option<ChaCha8Rng>,
}

impl Mode {
    pub fn eval() -> Self {
        Mode { rng: None }
    }

    /// Training mode with dropout masks drawn from a stream derived from
    /// `(seed, step, shard)`.
    pub fn train(seed: u64, step: u64, shard: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&step.to_le_bytes());
        key[16..24].copy_from_slice(&shard.to_le_bytes());
        Mode {
            rng: Some(ChaCha8Rng::from_seed(key)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var, p: Float) -> Var {
        match &mut self.rng {
            Some(rng) => g.dropout(x, p, rng),
            None => x,
        }
    }
}
