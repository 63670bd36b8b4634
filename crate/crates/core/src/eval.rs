//! Greedy decoding, exact-match scoring, evaluation reports and bias export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::bias_preferences;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::checkpoint::write_atomic;
use crate::model::{AttentionVariant, Checkpoint, EncodedPair, Seq2Seq, Side};
use crate::parallel::Exec;
use crate::scan::{ScanExample, Vocab, BOS, EOS};
use crate::tensor::{Graph, Tensor};

pub const MAX_DECODE_LEN: usize = 60;
pub const MISMATCH_SAMPLE: usize = 100;
/// Sources decoded together in one packed batch.
const DECODE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, without the end-of-sequence token.
    pub tokens: Vec<usize>,
    /// True when `max_len` was reached before end-of-sequence.
    pub truncated: bool,
}

fn argmax(row: &[crate::tensor::Float]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of several sources at once. Each source is given
/// without the end-of-sequence marker. Ties go to the lowest id.
pub fn greedy_decode_batch(model: &Seq2Seq, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Decoded>> {
    let mut mode = Mode::eval();
    let inputs: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.push(EOS);
            s
        })
        .collect();
    let memories: Vec<Tensor> = {
        let mut g = Graph::with_params(&model.params);
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let enc = model.encode_packed(&mut g, &refs, &mut mode)?;
        let all = g.value(enc.value);
        let d = all.cols();
        enc.segments
            .iter()
            .map(|&(start, len)| Tensor::new([len, d], all.data()[start * d..(start + len) * d].to_vec()))
            .collect::<std::result::Result<_, _>>()?
    };
    let mut out: Vec<Decoded> = sources
        .iter()
        .map(|_| Decoded {
            tokens: Vec::new(),
            truncated: false,
        })
        .collect();
    let mut state = model.start_decode(&memories)?;
    let mut active: Vec<usize> = (0..sources.len()).collect();
    let mut feed: Vec<usize> = vec![BOS; sources.len()];
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let logits = model.decode_next(&mut state, &active, &feed)?;
        let mut still = Vec::with_capacity(active.len());
        let mut next_feed = Vec::with_capacity(active.len());
        for (b, &i) in active.iter().enumerate() {
            let next = argmax(logits.row(b));
            if next == EOS {
                continue;
            }
            out[i].tokens.push(next);
            still.push(i);
            next_feed.push(next);
        }
        active = still;
        feed = next_feed;
    }
    for i in active {
        out[i].truncated = true;
    }
    Ok(out)
}

/// Greedy decoding of one source.
pub fn greedy_decode(model: &Seq2Seq, source: &[usize], max_len: usize) -> Result<Decoded> {
    Ok(greedy_decode_batch(model, &[source.to_vec()], max_len)?.remove(0))
}

/// Decodes every source, `DECODE_BATCH` at a time, spreading batches over `exec`.
pub fn decode_all(model: &Seq2Seq, sources: &[Vec<usize>], max_len: usize, exec: Exec) -> Result<Vec<Decoded>> {
    let chunks: Vec<&[Vec<usize>]> = sources.chunks(DECODE_BATCH).collect();
    let parts = exec.map(&chunks, |_, c| greedy_decode_batch(model, c, max_len));
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of pairs that agree token for token.
pub fn exact_match_accuracy<T: PartialEq>(predictions: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Eval("no examples to score".into()));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Greedy exact-match accuracy on encoded pairs.
pub fn accuracy(model: &Seq2Seq, pairs: &[EncodedPair], exec: Exec) -> Result<f64> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    let preds: Vec<Vec<usize>> = decode_all(model, &sources, MAX_DECODE_LEN, exec)?
        .into_iter()
        .map(|d| d.tokens)
        .collect();
    exact_match_accuracy(&preds, &refs)
}

/// Arithmetic mean and standard error (sample standard deviation over
/// `sqrt(n)`); the error is absent for a single value.
pub fn mean_sem(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub variant: AttentionVariant,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sem: Option<f64>,
    /// Prediction dump per seed.
    pub predictions: Vec<PathBuf>,
    /// Human-readable mismatch sample per seed.
    pub mismatches: Vec<PathBuf>,
}

fn vocab_of<'a>(v: &'a Option<Vocab>, which: &str, path: &Path) -> Result<&'a Vocab> {
    v.as_ref()
        .ok_or_else(|| Error::Eval(format!("{}: checkpoint carries no {which} vocabulary", path.display())))
}

fn encode_for(examples: &[ScanExample], src: &Vocab, tgt: &Vocab) -> Result<Vec<EncodedPair>> {
    crate::train::encode_examples(examples, src, tgt)
        .map_err(|e| Error::Eval(format!("vocabulary mismatch between checkpoint and dataset: {e}")))
}

/// Decodes `examples` with every checkpoint, writes
/// `predictions.<seed>.txt`, `mismatches.<seed>.txt` and `report.json`
/// into `out_dir`, and returns the report.
pub fn evaluate(
    checkpoints: &[PathBuf],
    examples: &[ScanExample],
    split: &str,
    out_dir: &Path,
    exec: Exec,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    if checkpoints.is_empty() {
        return Err(Error::Eval("no checkpoints given".into()));
    }
    let loaded = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let variant = loaded[0].config.variant;
    let mut seen = Vec::new();
    for (c, p) in loaded.iter().zip(checkpoints) {
        if c.config.variant != variant {
            return Err(Error::Eval(format!("{}: mixes variants", p.display())));
        }
        if seen.contains(&c.config.seed) {
            return Err(Error::Eval(format!("{}: seed {} given twice", p.display(), c.config.seed)));
        }
        seen.push(c.config.seed);
    }
    fs::create_dir_all(out_dir).map_err(Error::file(out_dir))?;
    let mut report = EvalReport {
        split: split.to_string(),
        variant,
        seeds: Vec::new(),
        accuracies: Vec::new(),
        mean: 0.0,
        sem: None,
        predictions: Vec::new(),
        mismatches: Vec::new(),
    };
    for (ckpt, path) in loaded.iter().zip(checkpoints) {
        let src = vocab_of(&ckpt.src_vocab, "source", path)?;
        let tgt = vocab_of(&ckpt.tgt_vocab, "target", path)?;
        let pairs = encode_for(examples, src, tgt)?;
        let model = ckpt.to_model()?;
        let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).collect();
        let decoded = decode_all(&model, &sources, MAX_DECODE_LEN, exec)?;
        let preds: Vec<Vec<usize>> = decoded.iter().map(|d| d.tokens.clone()).collect();
        let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
        let acc = exact_match_accuracy(&preds, &refs)?;
        let mut dump = String::new();
        let mut sample = format!("# {split} seed {} accuracy {acc:.6}\n", ckpt.config.seed);
        let mut shown = 0;
        for ((ex, d), p) in examples.iter().zip(&decoded).zip(&preds) {
            let pred = tgt.decode(p).join(" ");
            let gold = ex.target_tokens().join(" ");
            let src_text = ex.source_tokens().join(" ");
            let hit = pred == gold;
            dump.push_str(&format!(
                "SRC: {src_text}\tGOLD: {gold}\tPRED: {pred}\tMATCH: {}\n",
                u8::from(hit)
            ));
            if !hit && shown < MISMATCH_SAMPLE {
                shown += 1;
                let cut = if d.truncated { " (truncated)" } else { "" };
                sample.push_str(&format!("\nSRC:  {src_text}\nGOLD: {gold}\nPRED: {pred}{cut}\n"));
            }
        }
        let pred_path = out_dir.join(format!("predictions.{}.txt", ckpt.config.seed));
        fs::write(&pred_path, dump).map_err(Error::file(&pred_path))?;
        let miss_path = out_dir.join(format!("mismatches.{}.txt", ckpt.config.seed));
        fs::write(&miss_path, sample).map_err(Error::file(&miss_path))?;
        report.seeds.push(ckpt.config.seed);
        report.accuracies.push(acc);
        report.predictions.push(pred_path);
        report.mismatches.push(miss_path);
    }
    let (mean, sem) = mean_sem(&report.accuracies);
    report.mean = mean;
    report.sem = sem;
    write_atomic(&out_dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Parses a prediction dump back into `(gold, pred, match)` triples.
pub fn read_prediction_dump(path: &Path) -> Result<Vec<(String, String, bool)>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Dataset {
                line: i + 1,
                message: "malformed prediction line".into(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [_, gold, pred, hit] = fields.as_slice() else {
                return Err(bad());
            };
            let gold = gold.strip_prefix("GOLD: ").ok_or_else(bad)?;
            let pred = pred.strip_prefix("PRED: ").ok_or_else(bad)?;
            let hit = match hit.strip_prefix("MATCH: ") {
                Some("1") => true,
                Some("0") => false,
                _ => return Err(bad()),
            };
            Ok((gold.to_string(), pred.to_string(), hit))
        })
        .collect()
}

/// Writes the relative-bias preference files of a checkpoint into `out_dir`.
pub fn export_bias(checkpoint: &Checkpoint, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if checkpoint.config.variant != AttentionVariant::SagT5 {
        return Err(Error::Eval(format!(
            "bias export needs a sag_t5 checkpoint, got {}",
            checkpoint.config.variant
        )));
    }
    let model = checkpoint.to_model()?;
    let mut paths = Vec::new();
    for side in [Side::Encoder, Side::Decoder] {
        let table = model.bias_table(side).expect("sag_t5 models own bias tables");
        let prefs = bias_preferences(table, side == Side::Decoder)?;
        paths.extend(prefs.write_files(out_dir, side.as_str())?);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_cases() {
        let a = vec![vec![1, 2], vec![3]];
        assert_eq!(exact_match_accuracy(&a, &a).unwrap(), 1.0);
        let b = vec![vec![2, 1], vec![4]];
        assert_eq!(exact_match_accuracy(&a, &b).unwrap(), 0.0);
        let p = vec![vec![1], vec![2], vec![3], vec![4]];
        let r = vec![vec![1], vec![0], vec![0], vec![0]];
        assert_eq!(exact_match_accuracy(&p, &r).unwrap(), 0.25);
        assert!(exact_match_accuracy(&p, &r[..3]).is_err());
    }

    #[test]
    fn sem_cases() {
        assert_eq!(mean_sem(&[0.7]), (0.7, None));
        assert_eq!(mean_sem(&[1.0, 1.0, 1.0]), (1.0, Some(0.0)));
        let (m, s) = mean_sem(&[10.0, 20.0, 30.0]);
        assert_eq!(m, 20.0);
        assert!((s.unwrap() - 5.773_502_691_896_258).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
