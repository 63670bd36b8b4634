//! Gradient-check cases, one function per primitive family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanformer::attention::sag_apply;
use scanformer::layers::Mode;
use scanformer::model::{AttentionVariant, EncodedPair, ModelConfig, Seq2Seq};
use scanformer::tensor::{grad_check, grad_check_params, Graph, Padding, Reduction, Result, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const CASES: u64 = 20;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output coordinate
/// contributes its own gradient.
pub fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error of `case` over all seeds.
pub fn worst(case: Case) -> f64 {
    (0..CASES).map(case).fold(0.0, f64::max)
}

pub fn matmul_both_operands(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let (a2, b2) = (a.clone(), b.clone());
    let left = grad_check(
        move |g, x| {
            let b = g.constant(b.clone());
            let y = g.matmul(x, b)?;
            project(g, y, s)
        },
        &a2,
        EPS,
    )
    .unwrap();
    let right = grad_check(
        move |g, x| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, x)?;
            project(g, y, s)
        },
        &b2,
        EPS,
    )
    .unwrap();
    left.max(right)
}

pub fn transpose(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[3, 5], -1.0, 1.0);
    grad_check(
        |g, x| {
            let y = g.transpose(x)?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap()
}

pub fn add_and_mul_with_scalar_broadcast(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[2, 3], -1.0, 1.0);
    let other = random(&mut rng, &[2, 3], -1.0, 1.0);
    let scalar = random(&mut rng, &[1], -1.0, 1.0);
    let o = other.clone();
    let full = grad_check(
        move |g, x| {
            let c = g.constant(o.clone());
            let a = g.add(x, c)?;
            let m = g.mul(a, x)?;
            project(g, m, s)
        },
        &x,
        EPS,
    )
    .unwrap();
    let xs = x.clone();
    let broadcast = grad_check(
        move |g, b| {
            let x = g.constant(xs.clone());
            let m = g.mul(x, b)?;
            let a = g.add(m, b)?;
            project(g, a, s)
        },
        &scalar,
        EPS,
    )
    .unwrap();
    full.max(broadcast)
}

pub fn add_row_and_scale(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let xc = x.clone();
    let wrt_bias = grad_check(
        move |g, b| {
            let x = g.constant(xc.clone());
            let y = g.add_row(x, b)?;
            let y = g.scale(y, -1.7);
            project(g, y, s)
        },
        &b,
        EPS,
    )
    .unwrap();
    let wrt_x = grad_check(
        move |g, x| {
            let b = g.constant(b.clone());
            let y = g.add_row(x, b)?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap();
    wrt_bias.max(wrt_x)
}

pub fn sigmoid_and_relu(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[3, 4], -4.0, 4.0);
    // keep relu away from its kink
    let x = Tensor::new(
        [3, 4],
        x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect(),
    )
    .unwrap();
    grad_check(
        |g, x| {
            let a = g.sigmoid(x);
            let b = g.relu(x);
            let y = g.add(a, b)?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap()
}

pub fn softmax_with_masked_bias(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[4, 5], -3.0, 3.0);
    let mut bias = random(&mut rng, &[4, 5], -1.0, 1.0);
    for i in 0..4 {
        for j in (i + 2)..5 {
            bias.data_mut()[i * 5 + j] = f64::NEG_INFINITY;
        }
    }
    grad_check(
        move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.softmax(x, Some(b))?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap()
}

pub fn layer_norm_all_inputs(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[3, 8], -2.0, 2.0);
    let gain = random(&mut rng, &[8], 0.5, 1.5);
    let shift = random(&mut rng, &[8], -1.0, 1.0);
    let (gc, sc) = (gain.clone(), shift.clone());
    let wrt_x = grad_check(
        move |g, x| {
            let (a, b) = (g.constant(gc.clone()), g.constant(sc.clone()));
            let y = g.layer_norm(x, a, b, 1e-5)?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap();
    let (xc, sc) = (x.clone(), shift.clone());
    let wrt_gain = grad_check(
        move |g, gain| {
            let (x, b) = (g.constant(xc.clone()), g.constant(sc.clone()));
            let y = g.layer_norm(x, gain, b, 1e-5)?;
            project(g, y, s)
        },
        &gain,
        EPS,
    )
    .unwrap();
    let wrt_shift = grad_check(
        move |g, shift| {
            let (x, a) = (g.constant(x.clone()), g.constant(gain.clone()));
            let y = g.layer_norm(x, a, shift, 1e-5)?;
            project(g, y, s)
        },
        &shift,
        EPS,
    )
    .unwrap();
    wrt_x.max(wrt_gain).max(wrt_shift)
}

pub fn conv1d_input_and_kernel(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let pad = if s.is_multiple_of(2) { Padding::Symmetric } else { Padding::Causal };
    let x = random(&mut rng, &[6, 3], -1.0, 1.0);
    let k = random(&mut rng, &[3, 3, 4], -1.0, 1.0);
    let kc = k.clone();
    let wrt_x = grad_check(
        move |g, x| {
            let k = g.constant(kc.clone());
            let y = g.conv1d(x, k, pad)?;
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap();
    let wrt_k = grad_check(
        move |g, k| {
            let x = g.constant(x.clone());
            let y = g.conv1d(x, k, pad)?;
            project(g, y, s)
        },
        &k,
        EPS,
    )
    .unwrap();
    wrt_x.max(wrt_k)
}

pub fn slicing_and_concatenation(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[5, 6], -1.0, 1.0);
    grad_check(
        |g, x| {
            let a = g.slice_rows(x, 1, 3)?;
            let b = g.slice_cols(a, 2, 3)?;
            let c = g.slice_cols(x, 0, 3)?;
            let rows = g.concat_rows(&[b, c])?;
            let d = g.slice_rows(rows, 0, 3)?;
            let cols = g.concat_cols(&[d, b])?;
            project(g, cols, s)
        },
        &x,
        EPS,
    )
    .unwrap()
}

pub fn embedding_and_gather(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let table = random(&mut rng, &[6, 4], -1.0, 1.0);
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
    let offsets: Vec<Option<usize>> = (0..6).map(|i| (i != 4).then(|| rng.gen_range(0..24))).collect();
    let emb = grad_check(
        move |g, t| {
            let y = g.embedding(t, &ids)?;
            project(g, y, s)
        },
        &table,
        EPS,
    )
    .unwrap();
    let gat = grad_check(
        move |g, t| {
            let y = g.gather(t, offsets.clone(), [2, 3])?;
            let y = g.softmax(y, None)?;
            project(g, y, s)
        },
        &table,
        EPS,
    )
    .unwrap();
    emb.max(gat)
}

pub fn reductions_glu_and_gate(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[3, 8], -2.0, 2.0);
    let beta = random(&mut rng, &[1], -3.0, 3.0);
    let xc = x.clone();
    let glu = grad_check(
        move |g, x| {
            let y = g.glu(x)?;
            let p = project(g, y, s)?;
            let m = g.mean(x);
            g.add(p, m)
        },
        &xc,
        EPS,
    )
    .unwrap();
    let gate = grad_check(
        move |g, beta| {
            let x = g.constant(x.clone());
            let y = sag_apply(g, x, beta)?;
            project(g, y, s)
        },
        &beta,
        EPS,
    )
    .unwrap();
    glu.max(gate)
}

pub fn dropout_with_fixed_stream(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[4, 4], -1.0, 1.0);
    grad_check(
        move |g, x| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(s + 100);
            let y = g.dropout(x, 0.3, &mut mask_rng);
            project(g, y, s)
        },
        &x,
        EPS,
    )
    .unwrap()
}

pub fn cross_entropy_with_padding(s: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = random(&mut rng, &[5, 7], -3.0, 3.0);
    let mut targets: Vec<usize> = (0..5).map(|_| rng.gen_range(1..7)).collect();
    targets[2] = 0;
    let reduction = if s.is_multiple_of(2) { Reduction::Mean } else { Reduction::Sum };
    grad_check(move |g, x| g.cross_entropy(x, &targets, 0, reduction), &x, EPS).unwrap()
}

pub type Case = fn(u64) -> f64;

pub const PRIMITIVES: [(&str, Case); 13] = [
    ("matmul", matmul_both_operands),
    ("transpose", transpose),
    ("add/mul", add_and_mul_with_scalar_broadcast),
    ("add_row", add_row_and_scale),
    ("sigmoid/relu", sigmoid_and_relu),
    ("softmax", softmax_with_masked_bias),
    ("layer_norm", layer_norm_all_inputs),
    ("conv1d", conv1d_input_and_kernel),
    ("slice/concat", slicing_and_concatenation),
    ("embedding/gather", embedding_and_gather),
    ("sum/mean/glu/gate", reductions_glu_and_gate),
    ("dropout", dropout_with_fixed_stream),
    ("cross_entropy", cross_entropy_with_padding),
];

pub fn small_model(variant: AttentionVariant) -> Seq2Seq {
    Seq2Seq::new(ModelConfig {
        variant,
        layers: 2,
        heads: 2,
        embed_dim: 16,
        ffn_dim: 32,
        dropout: 0.0,
        attention_dropout: 0.0,
        span: 2,
        kernel_size: 3,
        gate_cross_attention: true,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

/// Worst relative error of the token-averaged loss of a 2-layer, d=16
/// model over all its parameters, with the name of the worst parameter.
pub fn model_loss_error(variant: AttentionVariant) -> (f64, String) {
    let pairs = [
        EncodedPair {
            source: vec![3, 4, 5, 6],
            target: vec![3, 4, 5],
        },
        EncodedPair {
            source: vec![7],
            target: vec![8, 3],
        },
    ];
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    let mut model = small_model(variant);
    // move the relative-bias table off zero so its gradient is generic
    if let Some(id) = model.params.id("decoder.rel_bias") {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = random(&mut rng, &shape, -0.5, 0.5);
    }
    let check = grad_check_params(
        &model.params,
        |g| {
            let (loss, n) = model.batch_loss(g, &refs, 1.0, &mut Mode::eval())?;
            Ok(g.scale(loss, 1.0 / n as f64))
        },
        EPS,
    )
    .unwrap();
    (check.max_rel_error, check.worst_param)
}
