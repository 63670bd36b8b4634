//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numeric kernels: every routine is
//! a direct loop over plain vectors.

#![allow(dead_code)]

/// Row-major `[m×k] · [k×n]` by the triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Softmax with a compensated normalizer; `-inf` entries get weight 0.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z = compensated_sum(exps.iter().copied());
    exps.iter().map(|e| e / z).collect()
}

/// Zero-padded sliding window: `x[t×din]`, `kernel[k×din×dout]`.
pub fn conv1d(x: &[f64], kernel: &[f64], t: usize, din: usize, dout: usize, k: usize, causal: bool) -> Vec<f64> {
    let left = if causal { k - 1 } else { (k - 1) / 2 };
    let mut out = vec![0.0; t * dout];
    for pos in 0..t {
        for tap in 0..k {
            let src = pos as isize + tap as isize - left as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for i in 0..din {
                for o in 0..dout {
                    out[pos * dout + o] += x[src * din + i] * kernel[(tap * din + i) * dout + o];
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GLU over rows of width `2d`: `sigmoid(first half) * second half`.
pub fn glu(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for j in 0..d {
            out.push(sigmoid(x[r * 2 * d + j]) * x[r * 2 * d + d + j]);
        }
    }
    out
}

pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gain[j] + shift[j]);
        }
    }
    out
}

pub struct Affine<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
}

fn affine(x: &[f64], rows: usize, din: usize, dout: usize, a: &Affine) -> Vec<f64> {
    let mut y = matmul(x, a.w, rows, din, dout);
    for r in 0..rows {
        for j in 0..dout {
            y[r * dout + j] += a.b[j];
        }
    }
    y
}

/// Multi-head attention computed head by head, query by query.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    xq: &[f64],
    xkv: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    q: &Affine,
    k: &Affine,
    v: &Affine,
    out: &Affine,
    bias: Option<&[f64]>,
    causal: bool,
) -> Vec<f64> {
    let qs = affine(xq, tq, d, d, q);
    let ks = affine(xkv, tk, d, d, k);
    let vs = affine(xkv, tk, d, d, v);
    let hd = d / heads;
    let mut concat = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let mut logits = Vec::with_capacity(tk);
            for j in 0..tk {
                let mut dot = 0.0;
                for c in 0..hd {
                    dot += qs[i * d + h * hd + c] * ks[j * d + h * hd + c];
                }
                let mut l = dot / (hd as f64).sqrt();
                if let Some(b) = bias {
                    l += b[i * tk + j];
                }
                if causal && j > i {
                    l = f64::NEG_INFINITY;
                }
                logits.push(l);
            }
            let w = softmax(&logits);
            for c in 0..hd {
                concat[i * d + h * hd + c] = (0..tk).map(|j| w[j] * vs[j * d + h * hd + c]).sum();
            }
        }
    }
    affine(&concat, tq, d, d, out)
}

/// Context-free grammar of the command language, expanded exhaustively by
/// rewriting the leftmost nonterminal.
pub fn expand_grammar() -> Vec<String> {
    let rules: &[(&str, &[&[&str]])] = &[
        ("C", &[&["S"], &["S", "and", "S"], &["S", "after", "S"]]),
        ("S", &[&["V"], &["V", "twice"], &["V", "thrice"]]),
        ("V", &[&["U"], &["X", "Dir"], &["X", "opposite", "Dir"], &["X", "around", "Dir"]]),
        ("X", &[&["U"], &["turn"]]),
        ("U", &[&["walk"], &["look"], &["run"], &["jump"]]),
        ("Dir", &[&["left"], &["right"]]),
    ];
    let lookup = |sym: &str| rules.iter().find(|(n, _)| *n == sym).map(|(_, alts)| *alts);
    let mut done = Vec::new();
    let mut stack: Vec<Vec<String>> = vec![vec!["C".to_string()]];
    while let Some(form) = stack.pop() {
        match form.iter().position(|s| lookup(s).is_some()) {
            None => done.push(form.join(" ")),
            Some(at) => {
                for alt in lookup(&form[at]).unwrap() {
                    let mut next = form[..at].to_vec();
                    next.extend(alt.iter().map(|s| s.to_string()));
                    next.extend_from_slice(&form[at + 1..]);
                    stack.push(next);
                }
            }
        }
    }
    done.sort();
    done.dedup();
    done
}

fn turn(dir: &str) -> &'static str {
    match dir {
        "left" => "LTURN",
        "right" => "RTURN",
        other => panic!("not a direction: {other}"),
    }
}

fn primitive(word: &str) -> Vec<&'static str> {
    match word {
        "walk" => vec!["WALK"],
        "look" => vec!["LOOK"],
        "run" => vec!["RUN"],
        "jump" => vec!["JUMP"],
        "turn" => vec![],
        other => panic!("not a primitive: {other}"),
    }
}

/// Denotation by direct recursion on the word list.
pub fn interpret(words: &[&str]) -> Vec<&'static str> {
    if let Some(i) = words.iter().position(|w| *w == "and") {
        let mut out = interpret(&words[..i]);
        out.extend(interpret(&words[i + 1..]));
        return out;
    }
    if let Some(i) = words.iter().position(|w| *w == "after") {
        let mut out = interpret(&words[i + 1..]);
        out.extend(interpret(&words[..i]));
        return out;
    }
    match words {
        [rest @ .., "twice"] => interpret(rest).repeat(2),
        [rest @ .., "thrice"] => interpret(rest).repeat(3),
        [u] => primitive(u),
        [x, "opposite", d] => {
            let mut out = vec![turn(d), turn(d)];
            out.extend(primitive(x));
            out
        }
        [x, "around", d] => {
            let mut once = vec![turn(d)];
            once.extend(primitive(x));
            once.repeat(4)
        }
        [x, d] => {
            let mut out = vec![turn(d)];
            out.extend(primitive(x));
            out
        }
        other => panic!("ungrammatical: {other:?}"),
    }
}

/// Scalar Adam trace on `f(x) = x^2`, returning `x` after each step.
pub fn adam_trace(x0: f64, steps: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut trace = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
        trace.push(x);
    }
    trace
}
